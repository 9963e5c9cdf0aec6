#pragma once

// 3D convolution and transposed convolution over [N, C, D, H, W] tensors,
// lowered to GEMM through im2col / col2im.

#include "anomalens/diff/tensor.hpp"

namespace anomalens::diff {

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 1;

  int out_extent(int in) const { return (in + 2 * padding - kernel) / stride + 1; }
  int transposed_extent(int in) const { return (in - 1) * stride - 2 * padding + kernel; }
};

namespace detail {

// cols[(c,kz,ky,kx), (oz,oy,ox)] = x[c, oz*s-p+kz, oy*s-p+ky, ox*s-p+kx]
template <class T>
void im2col(const T* x, int C, Shape3 in, const ConvGeometry& g, Shape3 out, T* cols) {
  const int k = g.kernel;
  const std::size_t P = voxel_count(out);
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols + ((((static_cast<std::size_t>(c) * k + kz) * k + ky) * k + kx) * P);
          const T* xc = x + static_cast<std::size_t>(c) * voxel_count(in);
          std::size_t o = 0;
          for (int oz = 0; oz < out[0]; ++oz) {
            const int iz = oz * g.stride - g.padding + kz;
            const bool zin = iz >= 0 && iz < in[0];
            for (int oy = 0; oy < out[1]; ++oy) {
              const int iy = oy * g.stride - g.padding + ky;
              const bool yin = zin && iy >= 0 && iy < in[1];
              const T* xr = yin ? xc + (static_cast<std::size_t>(iz) * in[1] + iy) * in[2] : nullptr;
              for (int ox = 0; ox < out[2]; ++ox, ++o) {
                const int ix = ox * g.stride - g.padding + kx;
                row[o] = (yin && ix >= 0 && ix < in[2]) ? xr[ix] : T(0);
              }
            }
          }
        }
}

// Adjoint of im2col: scatter-add columns back into x.
template <class T>
void col2im(const T* cols, int C, Shape3 in, const ConvGeometry& g, Shape3 out, T* x) {
  const int k = g.kernel;
  const std::size_t P = voxel_count(out);
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* row = cols + ((((static_cast<std::size_t>(c) * k + kz) * k + ky) * k + kx) * P);
          T* xc = x + static_cast<std::size_t>(c) * voxel_count(in);
          std::size_t o = 0;
          for (int oz = 0; oz < out[0]; ++oz) {
            const int iz = oz * g.stride - g.padding + kz;
            const bool zin = iz >= 0 && iz < in[0];
            for (int oy = 0; oy < out[1]; ++oy) {
              const int iy = oy * g.stride - g.padding + ky;
              const bool yin = zin && iy >= 0 && iy < in[1];
              T* xr = yin ? xc + (static_cast<std::size_t>(iz) * in[1] + iy) * in[2] : nullptr;
              for (int ox = 0; ox < out[2]; ++ox, ++o) {
                const int ix = ox * g.stride - g.padding + kx;
                if (yin && ix >= 0 && ix < in[2]) xr[ix] += row[o];
              }
            }
          }
        }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace detail

/// x[N,Ci,D,H,W] * w[Co,Ci,k,k,k] + b[Co] -> [N,Co,D',H',W'].
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvGeometry g) {
  require(x.rank() == 5, "conv3d: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 5 && w.dim(1) == x.dim(1) && w.dim(2) == g.kernel && w.dim(3) == g.kernel &&
              w.dim(4) == g.kernel,
          "conv3d: weight shape " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(b.numel() == static_cast<std::size_t>(w.dim(0)), "conv3d: bias size mismatch");
  const int N = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  const Shape3 in{x.dim(2), x.dim(3), x.dim(4)};
  const Shape3 out{g.out_extent(in[0]), g.out_extent(in[1]), g.out_extent(in[2])};
  require(out[0] > 0 && out[1] > 0 && out[2] > 0, "conv3d: empty output");
  const int K = Ci * g.kernel * g.kernel * g.kernel;
  const std::size_t P = voxel_count(out), Pin = voxel_count(in);
  const bool pointwise = detail::is_pointwise(g);

  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : static_cast<std::size_t>(N) * K * P);
  std::vector<T> y(static_cast<std::size_t>(N) * Co * P);
  ConstMatMap<T> W(w.values().data(), Co, K);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.values().data() + static_cast<std::size_t>(n) * Ci * Pin;
    const T* cn = xn;
    if (!pointwise) {
      T* c = cols->data() + static_cast<std::size_t>(n) * K * P;
      detail::im2col(xn, Ci, in, g, out, c);
      cn = c;
    }
    MatMap<T> Y(y.data() + static_cast<std::size_t>(n) * Co * P, Co, static_cast<Eigen::Index>(P));
    Y.noalias() = W * ConstMatMap<T>(cn, K, static_cast<Eigen::Index>(P));
    for (int o = 0; o < Co; ++o) Y.row(o).array() += b.values()[static_cast<std::size_t>(o)];
  }
  auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
  return make_result<T>(
      "conv3d", {N, Co, out[0], out[1], out[2]}, std::move(y), {x, w, b},
      [=](Node<T>& node) {
        for (int n = 0; n < N; ++n) {
          ConstMatMap<T> G(node.grad.data() + static_cast<std::size_t>(n) * Co * P, Co,
                           static_cast<Eigen::Index>(P));
          const T* cn = pointwise ? px->value.data() + static_cast<std::size_t>(n) * Ci * Pin
                                  : cols->data() + static_cast<std::size_t>(n) * K * P;
          ConstMatMap<T> Cn(cn, K, static_cast<Eigen::Index>(P));
          if (pw->requires_grad) MatMap<T>(pw->grad_buffer(), Co, K).noalias() += G * Cn.transpose();
          if (pb->requires_grad) {
            T* gb = pb->grad_buffer();
            // Plain loop: Eigen reductions over maps peel by address, which
            // would make the summation order allocation-dependent.
            for (int o = 0; o < Co; ++o) {
              const T* go = node.grad.data() + (static_cast<std::size_t>(n) * Co + o) * P;
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += go[p];
              gb[o] += s;
            }
          }
          if (px->requires_grad) {
            T* gx = px->grad_buffer() + static_cast<std::size_t>(n) * Ci * Pin;
            ConstMatMap<T> Wm(pw->value.data(), Co, K);
            if (pointwise) {
              MatMap<T>(gx, K, static_cast<Eigen::Index>(P)).noalias() += Wm.transpose() * G;
            } else {
              RowMat<T> dcols = Wm.transpose() * G;
              detail::col2im(dcols.data(), Ci, in, g, out, gx);
            }
          }
        }
      });
}

/// Transposed convolution: x[N,Ci,D,H,W], w[Ci,Co,k,k,k], b[Co].
/// Inverts the spatial shape map of conv3d with the same geometry.
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvGeometry g) {
  require(x.rank() == 5, "conv_transpose3d: input must be [N,C,D,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 5 && w.dim(0) == x.dim(1) && w.dim(2) == g.kernel && w.dim(3) == g.kernel &&
              w.dim(4) == g.kernel,
          "conv_transpose3d: weight shape " + shape_str(w.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  require(b.numel() == static_cast<std::size_t>(w.dim(1)), "conv_transpose3d: bias size mismatch");
  const int N = x.dim(0), Ci = x.dim(1), Co = w.dim(1);
  const Shape3 in{x.dim(2), x.dim(3), x.dim(4)};
  const Shape3 out{g.transposed_extent(in[0]), g.transposed_extent(in[1]), g.transposed_extent(in[2])};
  require(out[0] > 0 && out[1] > 0 && out[2] > 0, "conv_transpose3d: empty output");
  const int K = Co * g.kernel * g.kernel * g.kernel;
  const std::size_t P = voxel_count(in), Pout = voxel_count(out);

  std::vector<T> y(static_cast<std::size_t>(N) * Co * Pout, T(0));
  ConstMatMap<T> W(w.values().data(), Ci, K);
  RowMat<T> cols(K, static_cast<Eigen::Index>(P));
  for (int n = 0; n < N; ++n) {
    ConstMatMap<T> X(x.values().data() + static_cast<std::size_t>(n) * Ci * P, Ci, static_cast<Eigen::Index>(P));
    cols.noalias() = W.transpose() * X;
    T* yn = y.data() + static_cast<std::size_t>(n) * Co * Pout;
    detail::col2im(cols.data(), Co, out, g, in, yn);
    for (int o = 0; o < Co; ++o) {
      const T bo = b.values()[static_cast<std::size_t>(o)];
      for (std::size_t p = 0; p < Pout; ++p) yn[static_cast<std::size_t>(o) * Pout + p] += bo;
    }
  }
  auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
  return make_result<T>(
      "conv_transpose3d", {N, Co, out[0], out[1], out[2]}, std::move(y), {x, w, b},
      [=](Node<T>& node) {
        RowMat<T> dcols(K, static_cast<Eigen::Index>(P));
        for (int n = 0; n < N; ++n) {
          const T* gn = node.grad.data() + static_cast<std::size_t>(n) * Co * Pout;
          if (pb->requires_grad) {
            T* gb = pb->grad_buffer();
            for (int o = 0; o < Co; ++o) {
              T s = 0;
              for (std::size_t p = 0; p < Pout; ++p) s += gn[static_cast<std::size_t>(o) * Pout + p];
              gb[o] += s;
            }
          }
          if (!pw->requires_grad && !px->requires_grad) continue;
          detail::im2col(gn, Co, out, g, in, dcols.data());
          if (pw->requires_grad)
            MatMap<T>(pw->grad_buffer(), Ci, K).noalias() +=
                ConstMatMap<T>(px->value.data() + static_cast<std::size_t>(n) * Ci * P, Ci,
                               static_cast<Eigen::Index>(P)) *
                dcols.transpose();
          if (px->requires_grad)
            MatMap<T>(px->grad_buffer() + static_cast<std::size_t>(n) * Ci * P, Ci, static_cast<Eigen::Index>(P))
                .noalias() += ConstMatMap<T>(pw->value.data(), Ci, K) * dcols;
        }
      });
}

}  // namespace anomalens::diff
