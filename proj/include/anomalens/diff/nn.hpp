#pragma once

#include "anomalens/diff/tensor.hpp"

namespace anomalens::diff {

/// x[N,in] W[out,in]^T + b[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
          "linear: incompatible shapes " + shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
  require(b.numel() == static_cast<std::size_t>(w.dim(0)), "linear: bias size mismatch");
  const int N = x.dim(0), In = x.dim(1), Out = w.dim(0);
  std::vector<T> y(static_cast<std::size_t>(N) * Out);
  MatMap<T> Y(y.data(), N, Out);
  Y.noalias() = ConstMatMap<T>(x.values().data(), N, In) * ConstMatMap<T>(w.values().data(), Out, In).transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), Out);
  auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
  return make_result<T>("linear", {N, Out}, std::move(y), {x, w, b}, [=](Node<T>& node) {
    ConstMatMap<T> G(node.grad.data(), N, Out);
    if (px->requires_grad)
      MatMap<T>(px->grad_buffer(), N, In).noalias() += G * ConstMatMap<T>(pw->value.data(), Out, In);
    if (pw->requires_grad)
      MatMap<T>(pw->grad_buffer(), Out, In).noalias() += G.transpose() * ConstMatMap<T>(px->value.data(), N, In);
    if (pb->requires_grad) {
      T* gb = pb->grad_buffer();
      for (int i = 0; i < N; ++i)
        for (int o = 0; o < Out; ++o) gb[o] += node.grad[static_cast<std::size_t>(i) * Out + o];
    }
  });
}

/// Row-wise layer normalization of x[N,d].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  require(x.rank() == 2, "layer_norm: input must be [N,d]");
  const int N = x.dim(0), d = x.dim(1);
  require(gamma.numel() == static_cast<std::size_t>(d) && beta.numel() == static_cast<std::size_t>(d),
          "layer_norm: gain/bias size mismatch");
  std::vector<T> y(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    const T* xr = x.values().data() + static_cast<std::size_t>(i) * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * d + j;
      (*xhat)[k] = (xr[j] - mu) * is;
      y[k] = gamma.values()[static_cast<std::size_t>(j)] * (*xhat)[k] + beta.values()[static_cast<std::size_t>(j)];
    }
  }
  auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
  return make_result<T>("layer_norm", x.shape(), std::move(y), {x, gamma, beta}, [=](Node<T>& node) {
    std::vector<T> dxhat(static_cast<std::size_t>(d));
    for (int i = 0; i < N; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * d;
      const T* go = node.grad.data() + row;
      const T* xh = xhat->data() + row;
      if (pg->requires_grad) {
        T* gg = pg->grad_buffer();
        for (int j = 0; j < d; ++j) gg[j] += go[j] * xh[j];
      }
      if (pb->requires_grad) {
        T* gb = pb->grad_buffer();
        for (int j = 0; j < d; ++j) gb[j] += go[j];
      }
      if (px->requires_grad) {
        T m1 = 0, m2 = 0;
        for (int j = 0; j < d; ++j) {
          dxhat[static_cast<std::size_t>(j)] = go[j] * pg->value[static_cast<std::size_t>(j)];
          m1 += dxhat[static_cast<std::size_t>(j)];
          m2 += dxhat[static_cast<std::size_t>(j)] * xh[j];
        }
        m1 /= static_cast<T>(d);
        m2 /= static_cast<T>(d);
        T* gx = px->grad_buffer() + row;
        const T is = (*inv_std)[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) gx[j] += is * (dxhat[static_cast<std::size_t>(j)] - m1 - xh[j] * m2);
      }
    }
  });
}

namespace detail {
template <class T>
void softmax_row(const T* in, T* out, int n) {
  T mx = in[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T s = 0;
  for (int j = 0; j < n; ++j) s += out[j] = std::exp(in[j] - mx);
  for (int j = 0; j < n; ++j) out[j] /= s;
}
}  // namespace detail

/// Softmax over the last axis of x[N,M].
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.rank() == 2, "softmax: input must be [N,M]");
  const int N = x.dim(0), M = x.dim(1);
  std::vector<T> y(x.numel());
  for (int i = 0; i < N; ++i)
    detail::softmax_row(x.values().data() + static_cast<std::size_t>(i) * M, y.data() + static_cast<std::size_t>(i) * M, M);
  auto px = x.ptr();
  auto yv = std::make_shared<std::vector<T>>(y);
  return make_result<T>("softmax", x.shape(), std::move(y), {x}, [=](Node<T>& node) {
    T* gx = px->grad_buffer();
    for (int i = 0; i < N; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * M;
      T dot = 0;
      for (int j = 0; j < M; ++j) dot += node.grad[row + j] * (*yv)[row + j];
      for (int j = 0; j < M; ++j) gx[row + j] += (*yv)[row + j] * (node.grad[row + j] - dot);
    }
  });
}

/// Mean over rows of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require(logits.rank() == 2, "cross_entropy: logits must be [N,M]");
  const int N = logits.dim(0), M = logits.dim(1);
  require(targets.size() == static_cast<std::size_t>(N), "cross_entropy: target count mismatch");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  T loss = 0;
  for (int i = 0; i < N; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    require(t >= 0 && t < M, "cross_entropy: target out of range");
    const std::size_t row = static_cast<std::size_t>(i) * M;
    detail::softmax_row(logits.values().data() + row, probs->data() + row, M);
    T mx = logits.values()[row];
    for (int j = 1; j < M; ++j) mx = std::max(mx, logits.values()[row + j]);
    T s = 0;
    for (int j = 0; j < M; ++j) s += std::exp(logits.values()[row + j] - mx);
    loss += mx + std::log(s) - logits.values()[row + t];
  }
  loss /= static_cast<T>(N);
  auto pl = logits.ptr();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<T>("cross_entropy", {1}, {loss}, {logits}, [=](Node<T>& node) {
    T* g = pl->grad_buffer();
    const T go = node.grad[0] / static_cast<T>(N);
    for (int i = 0; i < N; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * M;
      for (int j = 0; j < M; ++j) g[row + j] += go * (*probs)[row + j];
      g[row + tg[static_cast<std::size_t>(i)]] -= go;
    }
  });
}

/// Rows of table[V,d] selected by indices -> [L,d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> indices) {
  require(table.rank() == 2, "embedding: table must be [V,d]");
  const int V = table.dim(0), d = table.dim(1);
  const int L = static_cast<int>(indices.size());
  std::vector<T> y(static_cast<std::size_t>(L) * d);
  for (int i = 0; i < L; ++i) {
    const int t = indices[static_cast<std::size_t>(i)];
    require(t >= 0 && t < V, "embedding: index " + std::to_string(t) + " out of range [0," + std::to_string(V) + ")");
    std::copy_n(table.values().data() + static_cast<std::size_t>(t) * d, d, y.data() + static_cast<std::size_t>(i) * d);
  }
  auto pt = table.ptr();
  std::vector<int> idx(indices.begin(), indices.end());
  return make_result<T>("embedding", {L, d}, std::move(y), {table}, [=](Node<T>& node) {
    T* g = pt->grad_buffer();
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < d; ++j)
        g[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * d + j] += node.grad[static_cast<std::size_t>(i) * d + j];
  });
}

/// Inverted dropout. Identity when !training or rate == 0; otherwise each
/// element is kept with probability 1-rate and scaled by 1/(1-rate).
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
  require(rate >= 0 && rate < 1, "dropout: rate must lie in [0,1)");
  if (!training || rate == 0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    (*mask)[i] = uniform01(rng) < rate ? T(0) : keep_scale;
    y[i] = x.values()[i] * (*mask)[i];
  }
  auto px = x.ptr();
  return make_result<T>("dropout", x.shape(), std::move(y), {x}, [=](Node<T>& node) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * (*mask)[i];
  });
}

}  // namespace anomalens::diff
