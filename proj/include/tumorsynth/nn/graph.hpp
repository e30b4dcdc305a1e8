#pragma once

#include <functional>
#include <vector>

#include "tumorsynth/nn/tensor.hpp"

namespace tumorsynth::nn {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape; }
};

/// Tape for reverse-mode differentiation. Nodes are appended in evaluation
/// order; backward() walks them in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  Var constant(Tensor t);
  Var param(Parameter& p);

  /// Seeds d(loss)/d(loss) = 1 for a single-element loss, then accumulates into Parameter::grad.
  void backward(Var loss);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  Var push(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. All inputs must belong to the same graph.

/// x [Cin,D,H,W], w [Cout,Cin,k,k,k], b [Cout] (b may be invalid for no bias).
Var conv3d(Var x, Var w, Var b, int stride, int pad);
/// Nearest-neighbour x2 upsampling of [C,D,H,W].
Var upsample2(Var x);
/// Depth-to-space: [8C,D,H,W] -> [C,2D,2H,2W]; channel 8c+(dz*4+dy*2+dx) lands at offset (dz,dy,dx).
Var shuffle_up2(Var x);
Var silu(Var x);
/// Gradient passes only where lo < x < hi.
Var clamp(Var x, double lo, double hi);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a + c with c held constant (straight-through shifts).
Var add_const(Var a, const Tensor& c);
Var stop_gradient(Var a);

/// x [C,...] + b [C] broadcast over the trailing axes.
Var add_channel_bias(Var x, Var b);
Var concat_channels(const std::vector<Var>& xs);
Var reshape(Var x, std::vector<int> shape);

/// [m,k] x [k,n]
Var matmul(Var a, Var b);
Var transpose(Var a);
Var softmax_rows(Var a);
/// a [m,n] + b [n] per row.
Var add_row_bias(Var a, Var b);
/// W [m,n] x [n] + b [m] (b optional).
Var linear(Var x, Var w, Var b);

Var sum(Var a);
Var mean(Var a);
Var sum_squares(Var a);
Var mse(Var a, Var b);
/// min(a, c) for a single-element a.
Var min_const(Var a, double c);
/// Flattened L2 normalization.
Var l2_normalize(Var a);

/// out[c, s] = table[idx[s], c]; result shape = {C, spatial...}.
Var gather_rows(Var table, const std::vector<int>& idx, const std::vector<int>& spatial);
/// Weighted mean over the trailing axes of [C,...]; weights has one entry per site.
Var weighted_channel_mean(Var x, const std::vector<double>& weights);

}  // namespace tumorsynth::nn
