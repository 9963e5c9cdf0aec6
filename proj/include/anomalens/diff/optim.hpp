#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "anomalens/diff/tensor.hpp"

namespace anomalens::diff {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are kept in double regardless of the parameter precision.
struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;
};

namespace detail {
template <class T>
void adam_update(std::span<T> p, std::span<const T> g, std::vector<double>& m, std::vector<double>& v,
                 const AdamHyper& h, double lr, double c1, double c2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
    m[i] = h.beta1 * m[i] + (1 - h.beta1) * gi;
    v[i] = h.beta2 * v[i] + (1 - h.beta2) * gi * gi;
    p[i] = static_cast<T>(p[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps));
  }
}

inline void adam_prepare(AdamState& state, const std::vector<std::size_t>& sizes) {
  if (state.m.empty())
    for (auto n : sizes) {
      state.m.emplace_back(n, 0.0);
      state.v.emplace_back(n, 0.0);
    }
  require(state.m.size() == sizes.size(), "adam_step: parameter count differs from optimizer state");
  for (std::size_t k = 0; k < sizes.size(); ++k)
    require(state.m[k].size() == sizes[k], "adam_step: shape mismatch for parameter " + std::to_string(k));
}
}  // namespace detail

/// Bias-corrected ADAM on raw parameter/gradient buffers.
template <class T>
void adam_step(std::vector<std::vector<T>>& params, const std::vector<std::vector<T>>& grads, AdamState& state,
               double lr) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(params[k].size() == grads[k].size(), "adam_step: gradient shape mismatch for parameter " + std::to_string(k));
    sizes.push_back(params[k].size());
  }
  detail::adam_prepare(state, sizes);
  state.t += 1;
  const double c1 = 1 - std::pow(state.hyper.beta1, static_cast<double>(state.t));
  const double c2 = 1 - std::pow(state.hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k)
    detail::adam_update<T>(params[k], grads[k], state.m[k], state.v[k], state.hyper, lr, c1, c2);
}

/// Bias-corrected ADAM on graph parameters using their accumulated gradients;
/// a parameter that received no gradient is updated with g = 0.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state, double lr) {
  std::vector<std::size_t> sizes;
  for (const auto& p : params) sizes.push_back(p.numel());
  detail::adam_prepare(state, sizes);
  state.t += 1;
  const double c1 = 1 - std::pow(state.hyper.beta1, static_cast<double>(state.t));
  const double c2 = 1 - std::pow(state.hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    detail::adam_update<T>(p.mutable_values(), p.has_grad() ? p.grad() : std::span<const T>{}, state.m[k],
                           state.v[k], state.hyper, lr, c1, c2);
  }
}

template <class T>
void zero_grad(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

/// lr0 * gamma^step.
inline double lr_schedule(double lr0, double gamma, std::int64_t step) {
  require(lr0 > 0 && gamma > 0 && gamma <= 1, "lr_schedule: need lr0 > 0 and 0 < gamma <= 1");
  return lr0 * std::pow(gamma, static_cast<double>(step));
}

}  // namespace anomalens::diff
