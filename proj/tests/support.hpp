#pragma once

// Shared helpers for the unit tests: random tensors, temp dirs, and the
// brute-force oracles that several suites compare against.

#include <algorithm>
#include <filesystem>
#include <limits>
#include <queue>
#include <string>
#include <vector>

#include "anomalens/common.hpp"
#include "anomalens/diff/tensor.hpp"

namespace anomalens::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -1, double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform(rng, lo, hi);
  return v;
}

inline diff::Tensor<double> random_tensor(Rng& rng, diff::Shape s, double lo = -1, double hi = 1) {
  return diff::Tensor<double>::constant(s, random_values(rng, diff::numel(s), lo, hi));
}

/// Values whose magnitude is at least `gap`, so kinks of ReLU stay away.
inline diff::Tensor<double> random_tensor_away_from_zero(Rng& rng, diff::Shape s, double gap = 1e-2) {
  auto v = random_values(rng, diff::numel(s));
  for (auto& x : v)
    if (std::abs(x) < gap) x = x < 0 ? -gap : gap;
  return diff::Tensor<double>::constant(s, v);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("anomalens_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Breadth-first flood fill over face neighbours; labels in first-voxel
/// raster order. Independent of the library's labelling.
inline int flood_fill_count(const Mask& m, Grid3<int>* labels_out = nullptr) {
  Grid3<int> labels(m.shape, 0);
  int next = 0;
  const int dz[6] = {1, -1, 0, 0, 0, 0}, dy[6] = {0, 0, 1, -1, 0, 0}, dx[6] = {0, 0, 0, 0, 1, -1};
  for (int z = 0; z < m.shape[0]; ++z)
    for (int y = 0; y < m.shape[1]; ++y)
      for (int x = 0; x < m.shape[2]; ++x) {
        if (!m(z, y, x) || labels(z, y, x)) continue;
        ++next;
        std::queue<std::array<int, 3>> q;
        q.push({z, y, x});
        labels(z, y, x) = next;
        while (!q.empty()) {
          auto [a, b, c] = q.front();
          q.pop();
          for (int k = 0; k < 6; ++k) {
            const int na = a + dz[k], nb = b + dy[k], nc = c + dx[k];
            if (!m.contains(na, nb, nc) || !m(na, nb, nc) || labels(na, nb, nc)) continue;
            labels(na, nb, nc) = next;
            q.push({na, nb, nc});
          }
        }
      }
  if (labels_out) *labels_out = labels;
  return next;
}

/// Exhaustive best DICE: every distinct value as threshold (>=) plus the
/// empty mask.
inline double brute_best_dice(const Volume& map, const Mask& gt) {
  std::vector<double> thresholds(map.data.begin(), map.data.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());
  double best = 0;
  for (double t : thresholds) {
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      const bool a = map[i] >= t, b = gt[i] != 0;
      p += a;
      g += b;
      both += a && b;
    }
    best = std::max(best, p + g == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + g));
  }
  return best;
}

/// Average precision by recounting precision and recall at every distinct
/// threshold, highest first.
inline double brute_auprc(const Volume& map, const Mask& gt) {
  std::vector<float> t = map.data;
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  double g = 0;
  for (auto v : gt.data) g += v != 0;
  double ap = 0, prev = 0;
  for (float thr : t) {
    double tp = 0, p = 0;
    for (std::size_t i = 0; i < map.size(); ++i)
      if (map[i] >= thr) {
        ++p;
        tp += gt[i] != 0;
      }
    ap += (tp / g - prev) * (tp / p);
    prev = tp / g;
  }
  return ap;
}

/// Region growing by repeated sweeps until nothing changes: per seed
/// component (flood-fill labels), start from the seed voxels meeting the
/// threshold and add any face neighbour meeting it.
inline Mask brute_grow(const Mask& seeds, const Volume& intensity, double fraction) {
  Grid3<int> labels;
  const int n = flood_fill_count(seeds, &labels);
  Mask out(seeds.shape, 0);
  const int dz[6] = {1, -1, 0, 0, 0, 0}, dy[6] = {0, 0, 1, -1, 0, 0}, dx[6] = {0, 0, 0, 0, 1, -1};
  for (int l = 1; l <= n; ++l) {
    double peak = -1e300;
    for (std::size_t i = 0; i < seeds.size(); ++i)
      if (labels[i] == l) peak = std::max(peak, static_cast<double>(intensity[i]));
    const double thr = fraction * peak;
    Mask r(seeds.shape, 0);
    for (std::size_t i = 0; i < seeds.size(); ++i) r[i] = labels[i] == l && intensity[i] >= thr;
    for (bool changed = true; changed;) {
      changed = false;
      for (int z = 0; z < r.shape[0]; ++z)
        for (int y = 0; y < r.shape[1]; ++y)
          for (int x = 0; x < r.shape[2]; ++x) {
            if (r(z, y, x) || intensity(z, y, x) < thr) continue;
            for (int k = 0; k < 6; ++k)
              if (r.contains(z + dz[k], y + dy[k], x + dx[k]) && r(z + dz[k], y + dy[k], x + dx[k])) {
                r(z, y, x) = 1;
                changed = true;
                break;
              }
          }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] |= r[i];
  }
  return out;
}

}  // namespace anomalens::testing
