#pragma once

// Multi-head scaled dot-product attention (exact) and its FAVOR+
// positive-random-feature approximation, both as fused differentiable ops
// over row-major [L, heads*d_k] activations.

#include <cmath>
#include <memory>
#include <vector>

#include "anomalens/diff/tensor.hpp"

namespace anomalens::ar {

using diff::ConstMatMap;
using diff::MatMap;
using diff::Node;
using diff::RowMat;
using diff::Tensor;

namespace detail {

template <class T>
using HeadView = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MutHeadView = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
HeadView<T> head(const T* base, int rows, int dm, int h, int dk) {
  return HeadView<T>(base + static_cast<std::size_t>(h) * dk, rows, dk, Eigen::OuterStride<>(dm));
}
template <class T>
MutHeadView<T> mut_head(T* base, int rows, int dm, int h, int dk) {
  return MutHeadView<T>(base + static_cast<std::size_t>(h) * dk, rows, dk, Eigen::OuterStride<>(dm));
}

inline void check_qkv(const std::vector<int>& q, const std::vector<int>& k, const std::vector<int>& v, int heads,
                      bool causal) {
  require(q.size() == 2 && k.size() == 2 && v.size() == 2, "attention: Q, K, V must be rank 2");
  require(k[0] == v[0] && q[1] == k[1] && k[1] == v[1], "attention: inconsistent Q/K/V shapes");
  require(k[0] > 0, "attention: empty key sequence");
  require(heads > 0 && q[1] % heads == 0, "attention: width must be divisible by heads");
  require(!causal || q[0] == k[0], "attention: causal attention needs equal sequence lengths");
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_k)) V per head. With `causal`, query i sees keys 0..i.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads, bool causal) {
  detail::check_qkv(q.shape(), k.shape(), v.shape(), heads, causal);
  const int L = q.dim(0), Lk = k.dim(0), dm = q.dim(1), dk = dm / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(heads));
  std::vector<T> out(static_cast<std::size_t>(L) * dm);
  for (int h = 0; h < heads; ++h) {
    RowMat<T>& P = (*probs)[static_cast<std::size_t>(h)];
    P.noalias() = detail::head(q.values().data(), L, dm, h, dk) *
                  detail::head(k.values().data(), Lk, dm, h, dk).transpose();
    for (int i = 0; i < L; ++i) {
      const int visible = causal ? i + 1 : Lk;
      T mx = P(i, 0) * scale;
      for (int j = 1; j < visible; ++j) mx = std::max(mx, P(i, j) * scale);
      T s = 0;
      for (int j = 0; j < visible; ++j) s += P(i, j) = std::exp(P(i, j) * scale - mx);
      for (int j = 0; j < visible; ++j) P(i, j) /= s;
      for (int j = visible; j < Lk; ++j) P(i, j) = T(0);
    }
    detail::mut_head(out.data(), L, dm, h, dk).noalias() = P * detail::head(v.values().data(), Lk, dm, h, dk);
  }
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return diff::make_result<T>(causal ? "causal_self_attention" : "attention", {L, dm}, std::move(out), {q, k, v},
                              [=](Node<T>& node) {
                                RowMat<T> dP, dS;
                                for (int h = 0; h < heads; ++h) {
                                  const RowMat<T>& P = (*probs)[static_cast<std::size_t>(h)];
                                  auto dO = detail::head(node.grad.data(), L, dm, h, dk);
                                  auto Vh = detail::head(pv->value.data(), Lk, dm, h, dk);
                                  if (pv->requires_grad)
                                    detail::mut_head(pv->grad_buffer(), Lk, dm, h, dk).noalias() += P.transpose() * dO;
                                  if (!pq->requires_grad && !pk->requires_grad) continue;
                                  dP.noalias() = dO * Vh.transpose();
                                  dS = P.cwiseProduct(dP);
                                  const Eigen::Matrix<T, Eigen::Dynamic, 1> rows = dS.rowwise().sum();
                                  dS -= P.cwiseProduct(rows.replicate(1, Lk));
                                  dS *= scale;
                                  if (pq->requires_grad)
                                    detail::mut_head(pq->grad_buffer(), L, dm, h, dk).noalias() +=
                                        dS * detail::head(pk->value.data(), Lk, dm, h, dk);
                                  if (pk->requires_grad)
                                    detail::mut_head(pk->grad_buffer(), Lk, dm, h, dk).noalias() +=
                                        dS.transpose() * detail::head(pq->value.data(), L, dm, h, dk);
                                }
                              });
}

/// Orthogonal Gaussian random features [m, d_k] with chi-distributed row norms,
/// drawn in antithetic pairs: the second half of the rows negates the first.
/// With positive features this gives the hyperbolic-cosine estimator of the
/// softmax kernel, which has lower variance than m independent directions.
template <class T>
RowMat<T> favor_features(int m, int dk, std::uint64_t seed) {
  require(m >= 1 && dk >= 1, "favor_features: m and d_k must be positive");
  Rng rng(seed);
  const int half = (m + 1) / 2;
  RowMat<T> out(m, dk);
  int filled = 0;
  while (filled < half) {
    Eigen::MatrixXd g(dk, dk);
    for (int i = 0; i < dk; ++i)
      for (int j = 0; j < dk; ++j) g(i, j) = standard_normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd qm = qr.householderQ() * Eigen::MatrixXd::Identity(dk, dk);
    for (int r = 0; r < dk && filled < half; ++r, ++filled) {
      double norm2 = 0;
      for (int j = 0; j < dk; ++j) {
        const double z = standard_normal(rng);
        norm2 += z * z;
      }
      out.row(filled) = (qm.col(r).transpose() * std::sqrt(norm2)).template cast<T>();
    }
  }
  for (int r = half; r < m; ++r) out.row(r) = -out.row(r - half);
  return out;
}

namespace detail {

// phi(x)_r = exp(w_r.x~ - |x~|^2/2 - stab) / sqrt(m), x~ = x / d_k^(1/4).
// Queries use stab = max_r w_r.x~ (cancels in the ratio); keys use 0 so that
// each key's features depend on that key alone.
template <class T>
void favor_map(const HeadView<T>& x, const RowMat<T>& omega, bool stabilize, RowMat<T>& phi, RowMat<T>& xs) {
  const int L = static_cast<int>(x.rows()), dk = static_cast<int>(x.cols()), m = static_cast<int>(omega.rows());
  const T inv_root = T(1) / std::pow(static_cast<T>(dk), T(0.25));
  xs = x * inv_root;
  phi.noalias() = xs * omega.transpose();  // [L, m]
  const T norm = T(1) / std::sqrt(static_cast<T>(m));
  for (int i = 0; i < L; ++i) {
    const T half_sq = xs.row(i).squaredNorm() / T(2);
    const T stab = stabilize ? phi.row(i).maxCoeff() : T(0);
    for (int r = 0; r < m; ++r) phi(i, r) = std::exp(phi(i, r) - half_sq - stab) * norm;
  }
}

// Gradient through favor_map given d loss / d phi.
template <class T>
void favor_map_backward(const RowMat<T>& phi, const RowMat<T>& xs, const RowMat<T>& gphi, const RowMat<T>& omega,
                        MutHeadView<T> gx) {
  const int dk = static_cast<int>(xs.cols());
  const T inv_root = T(1) / std::pow(static_cast<T>(dk), T(0.25));
  const RowMat<T> w = gphi.cwiseProduct(phi);  // [L, m]
  const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = w.rowwise().sum();
  RowMat<T> gxs = w * omega;
  gxs -= xs.cwiseProduct(rs.replicate(1, dk));
  gx += gxs * inv_root;
}

}  // namespace detail

/// FAVOR+ approximation of attention using one feature matrix [m, d_k] per
/// head. The causal form accumulates prefix sums, so position i reads only
/// keys and values 0..i.
template <class T>
Tensor<T> favor_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads, bool causal,
                          std::shared_ptr<const std::vector<RowMat<T>>> features) {
  detail::check_qkv(q.shape(), k.shape(), v.shape(), heads, causal);
  require(features && features->size() == static_cast<std::size_t>(heads), "favor_attention: one feature map per head");
  const int L = q.dim(0), Lk = k.dim(0), dm = q.dim(1), dk = dm / heads;
  for (const auto& f : *features) require(f.cols() == dk, "favor_attention: feature width must equal d_k");

  struct HeadCache {
    RowMat<T> phq, phk, qs, ks;
    Eigen::Matrix<T, Eigen::Dynamic, 1> den;
  };
  auto cache = std::make_shared<std::vector<HeadCache>>(static_cast<std::size_t>(heads));
  std::vector<T> out(static_cast<std::size_t>(L) * dm);
  for (int h = 0; h < heads; ++h) {
    auto& c = (*cache)[static_cast<std::size_t>(h)];
    const RowMat<T>& omega = (*features)[static_cast<std::size_t>(h)];
    const int m = static_cast<int>(omega.rows());
    detail::favor_map(detail::head(q.values().data(), L, dm, h, dk), omega, true, c.phq, c.qs);
    detail::favor_map(detail::head(k.values().data(), Lk, dm, h, dk), omega, false, c.phk, c.ks);
    auto Vh = detail::head(v.values().data(), Lk, dm, h, dk);
    auto O = detail::mut_head(out.data(), L, dm, h, dk);
    c.den.resize(L);
    RowMat<T> S = RowMat<T>::Zero(m, dk);
    Eigen::Matrix<T, 1, Eigen::Dynamic> z = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(m);
    if (!causal) {
      S.noalias() = c.phk.transpose() * Vh;
      z = c.phk.colwise().sum();
    }
    for (int i = 0; i < L; ++i) {
      if (causal) {
        S.noalias() += c.phk.row(i).transpose() * Vh.row(i);
        z += c.phk.row(i);
      }
      const T den = std::max(c.phq.row(i).dot(z), std::numeric_limits<T>::min());
      c.den(i) = den;
      O.row(i).noalias() = (c.phq.row(i) * S) / den;
    }
  }
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return diff::make_result<T>(
      causal ? "favor_causal_attention" : "favor_attention", {L, dm}, std::move(out), {q, k, v}, [=](Node<T>& node) {
        for (int h = 0; h < heads; ++h) {
          const auto& c = (*cache)[static_cast<std::size_t>(h)];
          const RowMat<T>& omega = (*features)[static_cast<std::size_t>(h)];
          const int m = static_cast<int>(omega.rows());
          auto dO = detail::head(node.grad.data(), L, dm, h, dk);
          auto Oh = detail::head(node.value.data(), L, dm, h, dk);
          auto Vh = detail::head(pv->value.data(), Lk, dm, h, dk);
          RowMat<T> gnum(L, dk);
          Eigen::Matrix<T, Eigen::Dynamic, 1> gden(L);
          for (int i = 0; i < L; ++i) {
            gnum.row(i) = dO.row(i) / c.den(i);
            T dot = 0;
            for (int j = 0; j < dk; ++j) dot += dO(i, j) * Oh(i, j);
            gden(i) = -dot / c.den(i);
          }
          RowMat<T> gphq(L, m), gphk(Lk, m), gv(Lk, dk);
          if (causal) {
            RowMat<T> S = RowMat<T>::Zero(m, dk);
            Eigen::Matrix<T, 1, Eigen::Dynamic> z = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(m);
            for (int i = 0; i < L; ++i) {
              S.noalias() += c.phk.row(i).transpose() * Vh.row(i);
              z += c.phk.row(i);
              gphq.row(i).noalias() = gnum.row(i) * S.transpose();
              gphq.row(i) += z * gden(i);
            }
            RowMat<T> GS = RowMat<T>::Zero(m, dk);
            Eigen::Matrix<T, 1, Eigen::Dynamic> Gz = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(m);
            for (int j = L - 1; j >= 0; --j) {
              GS.noalias() += c.phq.row(j).transpose() * gnum.row(j);
              Gz += c.phq.row(j) * gden(j);
              gphk.row(j).noalias() = Vh.row(j) * GS.transpose();
              gphk.row(j) += Gz;
              gv.row(j).noalias() = c.phk.row(j) * GS;
            }
          } else {
            const RowMat<T> S = c.phk.transpose() * Vh;
            const Eigen::Matrix<T, 1, Eigen::Dynamic> z = c.phk.colwise().sum();
            gphq.noalias() = gnum * S.transpose();
            gphq += gden * z;
            const RowMat<T> GS = c.phq.transpose() * gnum;
            const Eigen::Matrix<T, 1, Eigen::Dynamic> Gz = gden.transpose() * c.phq;
            gphk.noalias() = Vh * GS.transpose();
            gphk.rowwise() += Gz;
            gv.noalias() = c.phk * GS;
          }
          if (pv->requires_grad) detail::mut_head(pv->grad_buffer(), Lk, dm, h, dk) += gv;
          if (pq->requires_grad)
            detail::favor_map_backward(c.phq, c.qs, gphq, omega, detail::mut_head(pq->grad_buffer(), L, dm, h, dk));
          if (pk->requires_grad)
            detail::favor_map_backward(c.phk, c.ks, gphk, omega, detail::mut_head(pk->grad_buffer(), Lk, dm, h, dk));
        }
      });
}

}  // namespace anomalens::ar
