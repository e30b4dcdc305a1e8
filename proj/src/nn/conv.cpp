#include <Eigen/Core>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/nn/graph.hpp"

namespace tumorsynth::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeom {
  int cin, d, h, w;     // input
  int k, stride, pad;
  int od, oh, ow;       // output
  int rows() const { return cin * k * k * k; }
  int cols() const { return od * oh * ow; }
};

// Valid output range [lo, hi) along one axis for kernel tap `kk`.
inline void tap_range(int n_in, int n_out, int stride, int pad, int kk, int& lo, int& hi) {
  // need 0 <= o*stride - pad + kk < n_in
  lo = 0;
  while (lo < n_out && lo * stride - pad + kk < 0) ++lo;
  hi = n_out;
  while (hi > lo && (hi - 1) * stride - pad + kk >= n_in) --hi;
}

void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t N = static_cast<std::size_t>(g.cols());
  std::fill(col, col + static_cast<std::size_t>(g.rows()) * N, 0.0);
  int r = 0;
  for (int c = 0; c < g.cin; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++r) {
          double* row = col + static_cast<std::size_t>(r) * N;
          int z0, z1, y0, y1, x0, x1;
          tap_range(g.d, g.od, g.stride, g.pad, kz, z0, z1);
          tap_range(g.h, g.oh, g.stride, g.pad, ky, y0, y1);
          tap_range(g.w, g.ow, g.stride, g.pad, kx, x0, x1);
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            for (int oy = y0; oy < y1; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              const double* src = x + ((static_cast<std::size_t>(c) * g.d + iz) * g.h + iy) * g.w;
              double* dst = row + (static_cast<std::size_t>(oz) * g.oh + oy) * g.ow;
              if (g.stride == 1) {
                const int shift = kx - g.pad;
                for (int ox = x0; ox < x1; ++ox) dst[ox] = src[ox + shift];
              } else {
                for (int ox = x0; ox < x1; ++ox) dst[ox] = src[ox * g.stride - g.pad + kx];
              }
            }
          }
        }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
  const std::size_t N = static_cast<std::size_t>(g.cols());
  int r = 0;
  for (int c = 0; c < g.cin; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++r) {
          const double* row = col + static_cast<std::size_t>(r) * N;
          int z0, z1, y0, y1, x0, x1;
          tap_range(g.d, g.od, g.stride, g.pad, kz, z0, z1);
          tap_range(g.h, g.oh, g.stride, g.pad, ky, y0, y1);
          tap_range(g.w, g.ow, g.stride, g.pad, kx, x0, x1);
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            for (int oy = y0; oy < y1; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              double* dst = dx + ((static_cast<std::size_t>(c) * g.d + iz) * g.h + iy) * g.w;
              const double* src = row + (static_cast<std::size_t>(oz) * g.oh + oy) * g.ow;
              for (int ox = x0; ox < x1; ++ox) dst[ox * g.stride - g.pad + kx] += src[ox];
            }
          }
        }
}

}  // namespace

Var conv3d(Var x, Var w, Var b, int stride, int pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 5 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) || wv.dim(2) != wv.dim(4)) {
    throw ShapeError("conv3d: input " + shape_string(xv.shape) + ", kernel " + shape_string(wv.shape));
  }
  if (stride < 1 || pad < 0) throw ContractError("conv3d: bad stride or padding");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), stride, pad, 0, 0, 0};
  g.od = (g.d + 2 * pad - g.k) / stride + 1;
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.od < 1 || g.oh < 1 || g.ow < 1) throw ShapeError("conv3d: kernel larger than padded input");
  const int cout = wv.dim(0);
  const int K = g.rows(), N = g.cols();
  if (b.valid() && b.value().shape != std::vector<int>{cout}) throw ShapeError("conv3d: bias shape mismatch");

  Buffer col(static_cast<std::size_t>(K) * N);
  im2col(xv.data.data(), g, col.data());
  Tensor out({cout, g.od, g.oh, g.ow});
  MapMat O(out.data.data(), cout, N);
  O.noalias() = CMapMat(wv.data.data(), cout, K) * CMapMat(col.data(), K, N);
  if (b.valid()) {
    for (int c = 0; c < cout; ++c) O.row(c).array() += b.value().data[c];
  }

  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return x.g->push(std::move(out), parents, [x, w, b, g, cout, K, N](Graph& gr, int self) {
    const auto& go = gr.grad(self);
    CMapMat G(go.data.data(), cout, N);
    if (b.valid() && gr.requires_grad(b.id)) {
      auto& gb = gr.grad(b.id);
      for (int c = 0; c < cout; ++c) gb.data[c] += G.row(c).sum();
    }
    const bool need_w = gr.requires_grad(w.id);
    const bool need_x = gr.requires_grad(x.id);
    if (!need_w && !need_x) return;
    Buffer col(static_cast<std::size_t>(K) * N);
    if (need_w) {
      im2col(gr.value(x.id).data.data(), g, col.data());
      auto& gw = gr.grad(w.id);
      MapMat(gw.data.data(), cout, K).noalias() += G * CMapMat(col.data(), K, N).transpose();
    }
    if (need_x) {
      MapMat(col.data(), K, N).noalias() = CMapMat(gr.value(w.id).data.data(), cout, K).transpose() * G;
      col2im(col.data(), g, gr.grad(x.id).data.data());
    }
  });
}

}  // namespace tumorsynth::nn
