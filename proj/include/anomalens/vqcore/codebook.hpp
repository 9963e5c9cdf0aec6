#pragma once

#include <cmath>
#include <vector>

#include "anomalens/common.hpp"

namespace anomalens::vq {

/// M learnable vectors of dimension n_z with exponential-moving-average
/// statistics. Vectors are always ema_sums / smoothed(ema_counts).
struct Codebook {
  int size = 0;  // M
  int dim = 0;   // n_z
  std::vector<float> vectors;       // M x n_z
  std::vector<double> ema_counts;   // M
  std::vector<double> ema_sums;     // M x n_z
  double decay = 0.99;
  double laplace_eps = 1e-5;
  double beta = 0.25;

  Codebook() = default;
  Codebook(int m, int nz, std::vector<float> init) : size(m), dim(nz), vectors(std::move(init)) {
    require(m > 0 && nz > 0, "Codebook: size and dimension must be positive");
    require(vectors.size() == static_cast<std::size_t>(m) * nz, "Codebook: init size mismatch");
    ema_counts.assign(static_cast<std::size_t>(m), 1.0);
    ema_sums.assign(vectors.begin(), vectors.end());
  }

  std::span<const float> row(int k) const {
    return {vectors.data() + static_cast<std::size_t>(k) * dim, static_cast<std::size_t>(dim)};
  }

  /// Resets vector k and its statistics to `v` with unit count.
  void set_row(int k, std::span<const float> v) {
    for (int j = 0; j < dim; ++j) {
      vectors[static_cast<std::size_t>(k) * dim + j] = v[static_cast<std::size_t>(j)];
      ema_sums[static_cast<std::size_t>(k) * dim + j] = v[static_cast<std::size_t>(j)];
    }
    ema_counts[static_cast<std::size_t>(k)] = 1.0;
  }
};

struct QuantizeResult {
  std::vector<int> indices;   // one per input vector
  std::vector<float> vectors; // exact codebook rows, same layout as the input
};

/// Nearest codebook row per vector (squared L2, lowest index wins ties).
/// `z` holds count x n_z values, vector-major.
inline QuantizeResult quantize(std::span<const float> z, const Codebook& cb) {
  require(cb.size > 0 && !cb.vectors.empty(), "quantize: empty codebook");
  require(z.size() % static_cast<std::size_t>(cb.dim) == 0, "quantize: vector dimension must equal n_z");
  const std::size_t count = z.size() / static_cast<std::size_t>(cb.dim);
  QuantizeResult r;
  r.indices.resize(count);
  r.vectors.resize(z.size());
  for (std::size_t p = 0; p < count; ++p) {
    const float* zp = z.data() + p * cb.dim;
    int best = 0;
    double best_d = 0;
    for (int k = 0; k < cb.size; ++k) {
      const float* e = cb.vectors.data() + static_cast<std::size_t>(k) * cb.dim;
      double d = 0;
      for (int j = 0; j < cb.dim; ++j) {
        const double diff = static_cast<double>(zp[j]) - static_cast<double>(e[j]);
        d += diff * diff;
      }
      if (k == 0 || d < best_d) {
        best = k;
        best_d = d;
      }
    }
    r.indices[p] = best;
    std::copy_n(cb.vectors.data() + static_cast<std::size_t>(best) * cb.dim, cb.dim, r.vectors.data() + p * cb.dim);
  }
  return r;
}

/// One EMA step from a batch of encoder vectors and their assignments.
inline void ema_update(Codebook& cb, std::span<const float> z, std::span<const int> assign) {
  require(z.size() == assign.size() * static_cast<std::size_t>(cb.dim), "ema_update: batch/assignment size mismatch");
  for (int a : assign) require(a >= 0 && a < cb.size, "ema_update: index " + std::to_string(a) + " out of range");
  // With decay 1 the statistics are frozen and so are the vectors.
  if (cb.decay >= 1.0) return;
  const std::size_t M = static_cast<std::size_t>(cb.size), nz = static_cast<std::size_t>(cb.dim);
  std::vector<double> counts(M, 0.0), sums(M * nz, 0.0);
  for (std::size_t p = 0; p < assign.size(); ++p) {
    const auto k = static_cast<std::size_t>(assign[p]);
    counts[k] += 1.0;
    for (std::size_t j = 0; j < nz; ++j) sums[k * nz + j] += z[p * nz + j];
  }
  const double g = cb.decay;
  double n = 0;
  for (std::size_t k = 0; k < M; ++k) {
    cb.ema_counts[k] = g * cb.ema_counts[k] + (1 - g) * counts[k];
    n += cb.ema_counts[k];
  }
  for (std::size_t i = 0; i < M * nz; ++i) cb.ema_sums[i] = g * cb.ema_sums[i] + (1 - g) * sums[i];
  for (std::size_t k = 0; k < M; ++k) {
    const double smoothed = (cb.ema_counts[k] + cb.laplace_eps) / (n + static_cast<double>(M) * cb.laplace_eps) * n;
    for (std::size_t j = 0; j < nz; ++j) {
      const double v = cb.ema_sums[k * nz + j] / smoothed;
      if (!std::isfinite(v)) throw NumericError("ema_update: non-finite codebook row " + std::to_string(k));
      cb.vectors[k * nz + j] = static_cast<float>(v);
    }
  }
}

}  // namespace anomalens::vq
