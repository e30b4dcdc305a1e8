#include "tumorsynth/nn/tensor.hpp"

#include <cmath>

#include "tumorsynth/errors.hpp"

namespace tumorsynth::nn {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative tensor extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

Tensor::Tensor(std::vector<int> shape_, double fill) : shape(std::move(shape_)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<int> shape_, const std::vector<double>& data_)
    : Tensor(std::move(shape_), Buffer(data_.begin(), data_.end())) {}

Tensor::Tensor(std::vector<int> shape_, std::initializer_list<double> data_)
    : Tensor(std::move(shape_), Buffer(data_.begin(), data_.end())) {}

Tensor::Tensor(std::vector<int> shape_, Buffer data_) : shape(std::move(shape_)), data(std::move(data_)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match " + shape_string(shape));
  }
}

void Parameter::zero_grad() {
  if (grad.shape != value.shape) grad = Tensor(value.shape);
  std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

Parameter& ParameterStore::add(const std::string& name, Tensor init) {
  if (find(name)) throw ContractError("duplicate parameter name " + name);
  Parameter p;
  p.name = name;
  p.grad = Tensor(init.shape);
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterStore::add_normal(const std::string& name, std::vector<int> shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = std * rng.normal();
  return add(name, std::move(t));
}

Parameter& ParameterStore::add_zeros(const std::string& name, std::vector<int> shape) {
  return add(name, Tensor(std::move(shape)));
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter& ParameterStore::get(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw NotFoundError("no parameter named " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw NotFoundError("no parameter named " + name);
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

double Adam::step(ParameterStore& store) {
  auto& ps = store.all();
  if (m_.size() != ps.size()) {
    m_.assign(ps.size(), {});
    v_.assign(ps.size(), {});
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i].assign(ps[i].value.size(), 0.0);
      v_[i].assign(ps[i].value.size(), 0.0);
    }
  }
  double norm2 = 0.0;
  for (const auto& p : ps)
    for (double g : p.grad.data) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad.data[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      p.value.data[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

}  // namespace tumorsynth::nn
