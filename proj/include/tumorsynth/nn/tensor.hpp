#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <deque>
#include <initializer_list>
#include <string>
#include <vector>

#include "tumorsynth/rng.hpp"

namespace tumorsynth::nn {

// Vectorized kernels pick their summation order from pointer alignment; a fixed
// alignment keeps results bitwise reproducible between runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = ((n * sizeof(T) + kAlign - 1) / kAlign) * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major double tensor.
struct Tensor {
  std::vector<int> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, const std::vector<double>& data);
  Tensor(std::vector<int> shape, Buffer data);
  Tensor(std::vector<int> shape, std::initializer_list<double> data);

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool empty() const { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Elements per channel for a [C, ...] tensor.
  std::size_t channel_stride() const { return shape.empty() ? 0 : data.size() / static_cast<std::size_t>(shape[0]); }
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

/// Named parameters in insertion order. References stay valid as parameters are added.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  /// N(0, std^2) init.
  Parameter& add_normal(const std::string& name, std::vector<int> shape, double std, Rng& rng);
  Parameter& add_zeros(const std::string& name, std::vector<int> shape);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::deque<Parameter> params_;
};

/// Adaptive moment estimation.
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm clip; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// Applies one update from the accumulated gradients. Returns the (pre-clip) gradient norm.
  double step(ParameterStore& store);
  AdamConfig& config() { return cfg_; }
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace tumorsynth::nn
