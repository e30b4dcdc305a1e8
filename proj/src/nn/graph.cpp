#include "tumorsynth/nn/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "tumorsynth/errors.hpp"

namespace tumorsynth::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

const Tensor& Var::value() const {
  if (!valid()) throw ContractError("use of an unset graph variable");
  return g->value(id);
}

Var Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

Var Graph::push(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) {
    if (p.g != this) throw ContractError("graph variables from different graphs");
    if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward(Var loss) {
  if (loss.g != this) throw ContractError("loss belongs to another graph");
  if (value(loss.id).size() != 1) throw ShapeError("backward needs a single-element loss");
  grad(loss.id).data[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param) {
      auto& pg = n.param->grad;
      if (pg.shape != n.value.shape) n.param->zero_grad();
      for (std::size_t j = 0; j < pg.size(); ++j) pg.data[j] += n.grad.data[j];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape) + " and " + shape_string(b.shape) + " differ");
  }
}

// Adds `src` into the gradient of `v` if it takes part in differentiation.
template <class F>
void accumulate(Graph& g, Var v, F&& f) {
  if (!g.requires_grad(v.id)) return;
  f(g.grad(v.id));
}

}  // namespace

Var upsample2(Var x) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("upsample2 expects [C,D,H,W]");
  const int C = xv.dim(0), D = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({C, 2 * D, 2 * H, 2 * W});
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < 2 * D; ++z)
      for (int y = 0; y < 2 * H; ++y) {
        const double* row = &xv.data[((static_cast<std::size_t>(c) * D + z / 2) * H + y / 2) * W];
        for (int xx = 0; xx < 2 * W; ++xx) out.data[o++] = row[xx / 2];
      }
  return x.g->push(std::move(out), {x}, [x, C, D, H, W](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, x, [&](Tensor& gx) {
      std::size_t o = 0;
      for (int c = 0; c < C; ++c)
        for (int z = 0; z < 2 * D; ++z)
          for (int y = 0; y < 2 * H; ++y) {
            double* row = &gx.data[((static_cast<std::size_t>(c) * D + z / 2) * H + y / 2) * W];
            for (int xx = 0; xx < 2 * W; ++xx) row[xx / 2] += go.data[o++];
          }
    });
  });
}

Var shuffle_up2(Var x) {
  const auto& xv = x.value();
  if (xv.rank() != 4 || xv.dim(0) % 8 != 0) throw ShapeError("shuffle_up2 expects [8C,D,H,W]");
  const int C = xv.dim(0) / 8, D = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({C, 2 * D, 2 * H, 2 * W});
  // Index map shared by forward and backward.
  auto src_index = [=](int c, int z, int y, int xx) {
    const int sub = (z & 1) * 4 + (y & 1) * 2 + (xx & 1);
    return ((static_cast<std::size_t>(8 * c + sub) * D + z / 2) * H + y / 2) * W + xx / 2;
  };
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < 2 * D; ++z)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) out.data[o++] = xv.data[src_index(c, z, y, xx)];
  return x.g->push(std::move(out), {x}, [x, C, D, H, W, src_index](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, x, [&](Tensor& gx) {
      std::size_t o = 0;
      for (int c = 0; c < C; ++c)
        for (int z = 0; z < 2 * D; ++z)
          for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx) gx.data[src_index(c, z, y, xx)] += go.data[o++];
    });
  });
}

Var silu(Var x) {
  const auto& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xv.data[i]));
    out.data[i] = xv.data[i] * s;
  }
  return x.g->push(std::move(out), {x}, [x](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& xv = g.value(x.id);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xv.data[i]));
        gx.data[i] += go.data[i] * (s + xv.data[i] * s * (1.0 - s));
      }
    });
  });
}

Var clamp(Var x, double lo, double hi) {
  const auto& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = std::clamp(xv.data[i], lo, hi);
  return x.g->push(std::move(out), {x}, [x, lo, hi](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& xv = g.value(x.id);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv.data[i] > lo && xv.data[i] < hi) gx.data[i] += go.data[i];
    });
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  return a.g->push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i];
    });
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  return a.g->push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] -= go.data[i];
    });
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  return a.g->push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& av = g.value(a.id);
    const auto& bv = g.value(b.id);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * bv.data[i];
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < go.size(); ++i) gb.data[i] += go.data[i] * av.data[i];
    });
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data) v *= s;
  return a.g->push(std::move(out), {a}, [a, s](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += s * go.data[i];
    });
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data) v += s;
  return a.g->push(std::move(out), {a}, [a](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    });
  });
}

Var add_const(Var a, const Tensor& c) {
  require_same(a.value(), c, "add_const");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
  return a.g->push(std::move(out), {a}, [a](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    });
  });
}

Var stop_gradient(Var a) { return a.g->constant(a.value()); }

Var add_channel_bias(Var x, Var b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (xv.rank() < 1 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw ShapeError("add_channel_bias: " + shape_string(xv.shape) + " + " + shape_string(bv.shape));
  }
  const std::size_t cs = xv.channel_stride();
  Tensor out = xv;
  for (int c = 0; c < xv.dim(0); ++c)
    for (std::size_t i = 0; i < cs; ++i) out.data[c * cs + i] += bv.data[c];
  return x.g->push(std::move(out), {x, b}, [x, b, cs](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (std::size_t c = 0; c < gb.size(); ++c) {
        double s = 0;
        for (std::size_t i = 0; i < cs; ++i) s += go.data[c * cs + i];
        gb.data[c] += s;
      }
    });
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  std::vector<int> shape = xs[0].value().shape;
  int channels = 0;
  for (const auto& x : xs) {
    const auto& s = x.value().shape;
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw ShapeError("concat_channels: trailing shapes differ");
    }
    channels += s[0];
  }
  shape[0] = channels;
  Tensor out(shape);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data.begin(), x.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += x.value().size();
  }
  return xs[0].g->push(std::move(out), xs, [xs](Graph& g, int self) {
    const auto& go = g.grad(self);
    std::size_t off = 0;
    for (const auto& x : xs) {
      const std::size_t n = g.value(x.id).size();
      accumulate(g, x, [&](Tensor& gx) {
        for (std::size_t i = 0; i < n; ++i) gx.data[i] += go.data[off + i];
      });
      off += n;
    }
  });
}

Var reshape(Var x, std::vector<int> shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape " + shape_string(x.value().shape) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  return x.g->push(std::move(out), {x}, [x](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, x, [&](Tensor& gx) {
      for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
    });
  });
}

Var matmul(Var a, Var b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  }
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  MapMat(out.data.data(), m, n).noalias() = CMapMat(av.data.data(), m, k) * CMapMat(bv.data.data(), k, n);
  return a.g->push(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    CMapMat G(go.data.data(), m, n);
    accumulate(g, a, [&](Tensor& ga) {
      MapMat(ga.data.data(), m, k).noalias() += G * CMapMat(g.value(b.id).data.data(), k, n).transpose();
    });
    accumulate(g, b, [&](Tensor& gb) {
      MapMat(gb.data.data(), k, n).noalias() += CMapMat(g.value(a.id).data.data(), m, k).transpose() * G;
    });
  });
}

Var transpose(Var a) {
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose expects a matrix");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  MapMat(out.data.data(), n, m) = CMapMat(av.data.data(), m, n).transpose();
  return a.g->push(std::move(out), {a}, [a, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      MapMat(ga.data.data(), m, n) += CMapMat(go.data.data(), n, m).transpose();
    });
  });
}

Var softmax_rows(Var a) {
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("softmax_rows expects a matrix");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out(av.shape);
  for (int i = 0; i < m; ++i) {
    const double* r = &av.data[static_cast<std::size_t>(i) * n];
    double* o = &out.data[static_cast<std::size_t>(i) * n];
    const double mx = *std::max_element(r, r + n);
    double s = 0;
    for (int j = 0; j < n; ++j) s += (o[j] = std::exp(r[j] - mx));
    for (int j = 0; j < n; ++j) o[j] /= s;
  }
  return a.g->push(std::move(out), {a}, [a, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (int i = 0; i < m; ++i) {
        const std::size_t r = static_cast<std::size_t>(i) * n;
        double dot = 0;
        for (int j = 0; j < n; ++j) dot += go.data[r + j] * y.data[r + j];
        for (int j = 0; j < n; ++j) ga.data[r + j] += y.data[r + j] * (go.data[r + j] - dot);
      }
    });
  });
}

Var add_row_bias(Var a, Var b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 1 || bv.dim(0) != av.dim(1)) throw ShapeError("add_row_bias shape mismatch");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out = av;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] += bv.data[j];
  return a.g->push(std::move(out), {a, b}, [a, b, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i];
    });
    accumulate(g, b, [&](Tensor& gb) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb.data[j] += go.data[static_cast<std::size_t>(i) * n + j];
    });
  });
}

Var linear(Var x, Var w, Var b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 1 || wv.rank() != 2 || wv.dim(1) != xv.dim(0)) {
    throw ShapeError("linear " + shape_string(wv.shape) + " x " + shape_string(xv.shape));
  }
  const int m = wv.dim(0), n = wv.dim(1);
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double s = 0;
    for (int j = 0; j < n; ++j) s += wv.data[static_cast<std::size_t>(i) * n + j] * xv.data[j];
    out.data[i] = s;
  }
  if (b.valid()) {
    if (b.value().shape != std::vector<int>{m}) throw ShapeError("linear bias shape mismatch");
    for (int i = 0; i < m; ++i) out.data[i] += b.value().data[i];
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return x.g->push(std::move(out), parents, [x, w, b, m, n](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& xv = g.value(x.id);
    const auto& wv = g.value(w.id);
    accumulate(g, x, [&](Tensor& gx) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gx.data[j] += wv.data[static_cast<std::size_t>(i) * n + j] * go.data[i];
    });
    accumulate(g, w, [&](Tensor& gw) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gw.data[static_cast<std::size_t>(i) * n + j] += go.data[i] * xv.data[j];
    });
    if (b.valid()) {
      accumulate(g, b, [&](Tensor& gb) {
        for (int i = 0; i < m; ++i) gb.data[i] += go.data[i];
      });
    }
  });
}

Var sum(Var a) {
  double s = 0;
  for (double v : a.value().data) s += v;
  return a.g->push(Tensor({1}, {s}), {a}, [a](Graph& g, int self) {
    const double go = g.grad(self).data[0];
    accumulate(g, a, [&](Tensor& ga) {
      for (auto& v : ga.data) v += go;
    });
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(Var a) {
  double s = 0;
  for (double v : a.value().data) s += v * v;
  return a.g->push(Tensor({1}, {s}), {a}, [a](Graph& g, int self) {
    const double go = g.grad(self).data[0];
    const auto& av = g.value(a.id);
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < av.size(); ++i) ga.data[i] += 2.0 * av.data[i] * go;
    });
  });
}

Var mse(Var a, Var b) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_squares(sub(a, b)), 1.0 / n);
}

Var min_const(Var a, double c) {
  if (a.value().size() != 1) throw ShapeError("min_const expects a single element");
  const double v = a.value().data[0];
  return a.g->push(Tensor({1}, {std::min(v, c)}), {a}, [a, c](Graph& g, int self) {
    const double go = g.grad(self).data[0];
    accumulate(g, a, [&](Tensor& ga) {
      if (g.value(a.id).data[0] < c) ga.data[0] += go;
    });
  });
}

Var l2_normalize(Var a) {
  const auto& av = a.value();
  double n2 = 0;
  for (double v : av.data) n2 += v * v;
  const double norm = std::sqrt(n2);
  if (!(norm > 0)) throw NumericError("cannot normalize a zero vector");
  Tensor out = av;
  for (auto& v : out.data) v /= norm;
  return a.g->push(std::move(out), {a}, [a, norm](Graph& g, int self) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    double dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += y.data[i] * go.data[i];
    accumulate(g, a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < y.size(); ++i) ga.data[i] += (go.data[i] - y.data[i] * dot) / norm;
    });
  });
}

Var gather_rows(Var table, const std::vector<int>& idx, const std::vector<int>& spatial) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows expects a [K,C] table");
  const int K = tv.dim(0), C = tv.dim(1);
  const std::size_t S = idx.size();
  if (shape_size(spatial) != S) throw ShapeError("gather_rows: index count does not match spatial shape");
  std::vector<int> shape{C};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  Tensor out(shape);
  for (std::size_t s = 0; s < S; ++s) {
    if (idx[s] < 0 || idx[s] >= K) throw ContractError("codebook index out of range");
    for (int c = 0; c < C; ++c) out.data[c * S + s] = tv.data[static_cast<std::size_t>(idx[s]) * C + c];
  }
  return table.g->push(std::move(out), {table}, [table, idx, C, S](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, table, [&](Tensor& gt) {
      for (std::size_t s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) gt.data[static_cast<std::size_t>(idx[s]) * C + c] += go.data[c * S + s];
    });
  });
}

Var weighted_channel_mean(Var x, const std::vector<double>& weights) {
  const auto& xv = x.value();
  const std::size_t S = xv.channel_stride();
  if (weights.size() != S) throw ShapeError("weighted_channel_mean: weight count does not match sites");
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (!(wsum > 0)) throw ContractError("weighted mean over an empty region");
  const int C = xv.dim(0);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < S; ++i) s += weights[i] * xv.data[c * S + i];
    out.data[c] = s / wsum;
  }
  return x.g->push(std::move(out), {x}, [x, weights, wsum, C, S](Graph& g, int self) {
    const auto& go = g.grad(self);
    accumulate(g, x, [&](Tensor& gx) {
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < S; ++i) gx.data[c * S + i] += go.data[c] * weights[i] / wsum;
    });
  });
}

}  // namespace tumorsynth::nn
