#pragma once

// Segmentation and evaluation: 6-connected components, per-lesion 40%
// region growing, DICE and its best achievable value over thresholds,
// average-precision AUPRC, and paired t-tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include "anomalens/common.hpp"

namespace anomalens::seg {

// ---------------------------------------------------------------------------
// Connected components

struct Components {
  Grid3<int> labels;  // 0 background, 1..count in first-voxel raster order
  int count = 0;
};

inline constexpr int kFaceOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

inline Components connected_components(const Mask& mask) {
  Components c{Grid3<int>(mask.shape, 0), 0};
  const auto& s = mask.shape;
  std::vector<std::array<int, 3>> stack;
  for (int z = 0; z < s[0]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[2]; ++x) {
        if (!mask(z, y, x) || c.labels(z, y, x)) continue;
        const int label = ++c.count;
        c.labels(z, y, x) = label;
        stack.push_back({z, y, x});
        while (!stack.empty()) {
          const auto p = stack.back();
          stack.pop_back();
          for (const auto& o : kFaceOffsets) {
            const int nz = p[0] + o[0], ny = p[1] + o[1], nx = p[2] + o[2];
            if (!mask.contains(nz, ny, nx) || !mask(nz, ny, nx) || c.labels(nz, ny, nx)) continue;
            c.labels(nz, ny, nx) = label;
            stack.push_back({nz, ny, nx});
          }
        }
      }
  return c;
}

// ---------------------------------------------------------------------------
// Clinical region growing

/// For each seed component, keeps the connected parts of
/// {intensity >= fraction * max intensity over that component} that touch
/// the component.
inline Mask clinical_grow(const Mask& seeds, const Volume& intensity, double fraction = 0.4) {
  require(fraction > 0 && fraction <= 1, "clinical_grow: fraction must lie in (0, 1]");
  require(seeds.shape == intensity.shape, "clinical_grow: seed mask and intensity volume differ in shape");
  const auto comp = connected_components(seeds);
  const auto& s = seeds.shape;
  std::vector<float> peak(static_cast<std::size_t>(comp.count) + 1, -std::numeric_limits<float>::infinity());
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(comp.count) + 1);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const auto l = static_cast<std::size_t>(comp.labels[i]);
    if (!l) continue;
    peak[l] = std::max(peak[l], intensity[i]);
    members[l].push_back(i);
  }

  // Components are grown in ascending order of their threshold. A region
  // grown at threshold t is a union of whole connected pieces of
  // {intensity >= t}, and those contain every piece of a higher superlevel
  // set they touch. So a seed already inside the output adds nothing, and a
  // new flood can never run into the output. The output mask doubles as the
  // visited set and each voxel is reached at most once, which matters for
  // noisy maps where hundreds of small components share one huge region.
  std::vector<int> order(static_cast<std::size_t>(comp.count));
  std::iota(order.begin(), order.end(), 1);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return fraction * peak[static_cast<std::size_t>(a)] < fraction * peak[static_cast<std::size_t>(b)];
  });
  Mask out(seeds.shape, 0);
  std::vector<std::size_t> frontier;
  for (int label : order) {
    const double thr = fraction * peak[static_cast<std::size_t>(label)];
    for (std::size_t seed : members[static_cast<std::size_t>(label)]) {
      if (out[seed] || intensity[seed] < thr) continue;
      out[seed] = 1;
      frontier.assign(1, seed);
      while (!frontier.empty()) {
        const std::size_t i = frontier.back();
        frontier.pop_back();
        const int z = static_cast<int>(i / (static_cast<std::size_t>(s[1]) * s[2]));
        const int y = static_cast<int>(i / s[2] % s[1]);
        const int x = static_cast<int>(i % s[2]);
        for (const auto& o : kFaceOffsets) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!seeds.contains(nz, ny, nx)) continue;
          const std::size_t j = seeds.index(nz, ny, nx);
          if (out[j] || intensity[j] < thr) continue;
          out[j] = 1;
          frontier.push_back(j);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlap metrics

inline double dice(const Mask& pred, const Mask& gt) {
  require(pred.shape == gt.shape, "dice: shapes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

inline Mask threshold_mask(const Volume& map, double threshold) {
  Mask m(map.shape, 0);
  for (std::size_t i = 0; i < map.size(); ++i) m[i] = map[i] >= threshold;
  return m;
}

struct BestDice {
  double threshold = std::numeric_limits<double>::infinity();
  double dice = 0;
};

namespace detail {

// Voxel indices ordered by descending score; ties stay in index order.
inline std::vector<std::size_t> descending_order(const Volume& map) {
  std::vector<std::size_t> order(map.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return map[a] > map[b]; });
  return order;
}

inline void require_finite(const Volume& map, const char* who) {
  for (float v : map.data)
    if (!std::isfinite(v)) throw NumericError(std::string(who) + ": anomaly map contains non-finite values");
}

}  // namespace detail

/// Maximum DICE of {map >= threshold} over every distinct map value and the
/// empty mask (threshold +inf). Ties favour the higher threshold.
inline BestDice best_dice(const Volume& map, const Mask& gt) {
  require(map.shape == gt.shape, "best_dice: shapes differ");
  detail::require_finite(map, "best_dice");
  std::size_t g = 0;
  for (auto v : gt.data) g += v != 0;
  BestDice best{std::numeric_limits<double>::infinity(), g == 0 ? 1.0 : 0.0};
  const auto order = detail::descending_order(map);
  std::size_t k = 0, tp = 0;
  while (k < order.size()) {
    const float value = map[order[k]];
    while (k < order.size() && map[order[k]] == value) tp += gt[order[k++]] != 0;
    const double d = 2.0 * static_cast<double>(tp) / static_cast<double>(k + g);
    if (d > best.dice) best = {value, d};
  }
  return best;
}

struct PRPoint {
  double threshold;
  double recall;
  double precision;
};

struct Auprc {
  double score = 0;
  std::vector<PRPoint> curve;  // descending thresholds, recall nondecreasing
};

/// Average precision: sum over descending unique thresholds of
/// (R_k - R_{k-1}) * P_k.
inline Auprc auprc(const Volume& map, const Mask& gt) {
  require(map.shape == gt.shape, "auprc: shapes differ");
  detail::require_finite(map, "auprc");
  std::size_t g = 0;
  for (auto v : gt.data) g += v != 0;
  if (g == 0) throw UndefinedMetricError("auprc: ground truth has no positive voxels");
  Auprc out;
  const auto order = detail::descending_order(map);
  std::size_t k = 0, tp = 0;
  double prev_recall = 0;
  while (k < order.size()) {
    const float value = map[order[k]];
    while (k < order.size() && map[order[k]] == value) tp += gt[order[k++]] != 0;
    const double recall = static_cast<double>(tp) / static_cast<double>(g);
    const double precision = static_cast<double>(tp) / static_cast<double>(k);
    out.score += (recall - prev_recall) * precision;
    out.curve.push_back({value, recall, precision});
    prev_recall = recall;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Maps after region growing

/// Empirical quantiles of the map at levels (i + 0.5) / count, deduplicated,
/// descending.
inline std::vector<float> quantile_thresholds(const Volume& map, int count = 256) {
  std::vector<float> sorted = map.data;
  std::sort(sorted.begin(), sorted.end());
  std::vector<float> q;
  for (int i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>((i + 0.5) / count * static_cast<double>(sorted.size()));
    q.push_back(sorted[std::min(idx, sorted.size() - 1)]);
  }
  std::sort(q.begin(), q.end(), std::greater<>());
  q.erase(std::unique(q.begin(), q.end()), q.end());
  return q;
}

/// Score map whose superlevel sets are grown segmentations: a voxel scores
/// the largest swept threshold whose grown mask contains it, or the map
/// minimum minus one if none does.
inline Volume grown_map(const Volume& map, const Volume& intensity, double fraction = 0.4, int quantiles = 256) {
  require(map.shape == intensity.shape, "grown_map: map and intensity differ in shape");
  detail::require_finite(map, "grown_map");
  const float floor = *std::min_element(map.data.begin(), map.data.end()) - 1.0f;
  Volume out(map.shape, floor);
  for (float thr : quantile_thresholds(map, quantiles)) {
    const auto grown = clinical_grow(threshold_mask(map, thr), intensity, fraction);
    for (std::size_t i = 0; i < out.size(); ++i)
      if (grown[i] && out[i] == floor) out[i] = thr;
  }
  return out;
}

/// Best DICE over the swept thresholds when every thresholded mask is grown
/// before scoring. Growing is not monotone in the threshold (merging seed
/// components can raise a lesion's peak), so this is scored mask by mask
/// rather than read off grown_map.
inline BestDice best_grown_dice(const Volume& map, const Volume& intensity, const Mask& gt, double fraction = 0.4,
                                int quantiles = 256) {
  require(map.shape == gt.shape && map.shape == intensity.shape, "best_grown_dice: shapes differ");
  detail::require_finite(map, "best_grown_dice");
  bool any = false;
  for (auto v : gt.data) any = any || v;
  BestDice best{std::numeric_limits<double>::infinity(), any ? 0.0 : 1.0};
  for (float thr : quantile_thresholds(map, quantiles)) {
    const double d = dice(clinical_grow(threshold_mask(map, thr), intensity, fraction), gt);
    if (d > best.dice) best = {thr, d};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Paired t-test

struct TTest {
  double t = 0;
  double p = 1;
  int df = 0;
};

/// Two-sided paired t-test on a - b. Zero-variance differences give p = 1
/// when their mean is zero and p = 0 otherwise.
inline TTest paired_ttest(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "paired_ttest: sample sizes differ");
  require(a.size() >= 2, "paired_ttest: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  TTest r;
  r.df = static_cast<int>(a.size()) - 1;
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0) {
    r.t = mean == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p = mean == 0 ? 1 : 0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(n));
  // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2).
  const double df = r.df;
  r.p = boost::math::ibeta(df / 2, 0.5, df / (df + r.t * r.t));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct CaseMetrics {
  std::string id;
  double best_dice = 0;
  double best_threshold = 0;
  double auprc = 0;
  std::string map_kind;  // e.g. "kde", "residual", "kde_grown"
  std::string kernel;    // empty for residual maps
  double epsilon = 0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<CaseMetrics>& rows) {
  os << "id,best_dice,best_threshold,auprc,map_kind,kernel,epsilon\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.best_dice, r.best_threshold, r.auprc);
    char eps[64];
    std::snprintf(eps, sizeof eps, "%.17g", r.epsilon);
    os << r.id << ',' << buf << ',' << r.map_kind << ',' << r.kernel << ',' << eps << '\n';
  }
}

inline void write_curve_csv(std::ostream& os, const std::vector<PRPoint>& curve) {
  os << "recall,precision\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.recall, p.precision);
    os << buf;
  }
}

inline double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace anomalens::seg
