#pragma once

// Synthetic paired uptake/anatomy volumes with physiological hotspots and
// injected lesions, dataset splitting, and the PVL1 volume container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomalens/common.hpp"
#include "anomalens/container.hpp"
#include <cstdio>
#include <variant>

namespace anomalens::phantoms {

using nlohmann::json;

struct Interval {
  double lo = 0;
  double hi = 0;
};

struct PhantomConfig {
  Shape3 shape{32, 32, 32};
  std::array<double, 3> spacing_mm{4.0, 4.0, 4.0};
  int organ_count = 3;
  int lesion_count_min = 0;
  int lesion_count_max = 3;
  // Multiples of the hottest organ peak in the same phantom.
  Interval lesion_intensity{1.5, 3.0};
  double contamination_rate = 0.8;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  // Healthy-variability knobs.
  double background_uptake = 0.08;
  Interval background_jitter{0.9, 1.1};
  Interval organ_peak{0.22, 0.34};
  double organ_position_jitter = 0.15;  // fraction of each axis
  Interval organ_radius_scale{0.85, 1.15};
  Interval lesion_radius{1.6, 3.0};     // voxels
  Interval lesion_ct_contrast{0.0, 0.05};

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (shape[a] <= 0 || shape[a] % 8 != 0)
        throw ConfigError("phantom shape must be positive and divisible by 8 on every axis");
      if (!(spacing_mm[a] > 0)) throw ConfigError("phantom spacing_mm must be positive");
    }
    if (organ_count < 0) throw ConfigError("organ_count must be >= 0");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
      throw ConfigError("lesion_count_range must satisfy 0 <= lo <= hi");
    if (!(lesion_intensity.lo > 1.0) || lesion_intensity.hi < lesion_intensity.lo)
      throw ConfigError("lesion_intensity_range lower bound must exceed the organ peak (factor > 1)");
    if (contamination_rate < 0 || contamination_rate > 1)
      throw ConfigError("contamination_rate must lie in [0,1]");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
    if (lesion_radius.lo <= 0 || lesion_radius.hi < lesion_radius.lo)
      throw ConfigError("lesion_radius interval invalid");
  }
};

inline void to_json(json& j, const Interval& i) { j = json::array({i.lo, i.hi}); }
inline void from_json(const json& j, Interval& i) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("interval must be a 2-element array");
  i.lo = j[0].get<double>();
  i.hi = j[1].get<double>();
}

inline void to_json(json& j, const PhantomConfig& c) {
  j = json{{"shape", c.shape},
           {"spacing_mm", c.spacing_mm},
           {"organ_count", c.organ_count},
           {"lesion_count_range", {c.lesion_count_min, c.lesion_count_max}},
           {"lesion_intensity_range", c.lesion_intensity},
           {"contamination_rate", c.contamination_rate},
           {"noise_sigma", c.noise_sigma},
           {"seed", c.seed},
           {"background_uptake", c.background_uptake},
           {"background_jitter", c.background_jitter},
           {"organ_peak", c.organ_peak},
           {"organ_position_jitter", c.organ_position_jitter},
           {"organ_radius_scale", c.organ_radius_scale},
           {"lesion_radius", c.lesion_radius},
           {"lesion_ct_contrast", c.lesion_ct_contrast}};
}

inline void from_json(const json& j, PhantomConfig& c) {
  c = PhantomConfig{};
  if (j.contains("shape")) c.shape = j["shape"].get<Shape3>();
  if (j.contains("spacing_mm")) c.spacing_mm = j["spacing_mm"].get<std::array<double, 3>>();
  if (j.contains("organ_count")) c.organ_count = j["organ_count"].get<int>();
  if (j.contains("lesion_count_range")) {
    c.lesion_count_min = j["lesion_count_range"].at(0).get<int>();
    c.lesion_count_max = j["lesion_count_range"].at(1).get<int>();
  }
  if (j.contains("lesion_intensity_range")) c.lesion_intensity = j["lesion_intensity_range"].get<Interval>();
  if (j.contains("contamination_rate")) c.contamination_rate = j["contamination_rate"].get<double>();
  if (j.contains("noise_sigma")) c.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("background_uptake")) c.background_uptake = j["background_uptake"].get<double>();
  if (j.contains("background_jitter")) c.background_jitter = j["background_jitter"].get<Interval>();
  if (j.contains("organ_peak")) c.organ_peak = j["organ_peak"].get<Interval>();
  if (j.contains("organ_position_jitter")) c.organ_position_jitter = j["organ_position_jitter"].get<double>();
  if (j.contains("organ_radius_scale")) c.organ_radius_scale = j["organ_radius_scale"].get<Interval>();
  if (j.contains("lesion_radius")) c.lesion_radius = j["lesion_radius"].get<Interval>();
  if (j.contains("lesion_ct_contrast")) c.lesion_ct_contrast = j["lesion_ct_contrast"].get<Interval>();
}

struct PairedVolume {
  Volume pet;  // uptake, >= 0
  Volume ct;   // anatomy, [0,1]
  Mask mask;   // lesion ground truth
  std::string id;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

  Shape3 shape() const { return pet.shape; }
  bool has_lesion() const {
    return std::any_of(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; });
  }
  bool operator==(const PairedVolume&) const = default;
};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  // Normalized squared radius; < 1 inside.
  double rho2(int z, int y, int x) const {
    const double dz = (z - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dx = (x - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx;
  }
};

struct OrganTemplate {
  std::array<double, 3> rel_center;  // fraction of each axis
  std::array<double, 3> rel_radii;   // fraction of each axis
  double ct_density;
};

// Brain, heart and bladder analogs, then kidney-like extras.
inline const OrganTemplate& organ_template(int k) {
  static const std::array<OrganTemplate, 5> templates{{
      {{0.17, 0.50, 0.50}, {0.13, 0.16, 0.15}, 0.58},
      {{0.43, 0.45, 0.40}, {0.11, 0.12, 0.12}, 0.50},
      {{0.80, 0.52, 0.50}, {0.09, 0.10, 0.11}, 0.44},
      {{0.58, 0.58, 0.30}, {0.07, 0.07, 0.06}, 0.47},
      {{0.58, 0.58, 0.70}, {0.07, 0.07, 0.06}, 0.47},
  }};
  return templates[static_cast<std::size_t>(k) % templates.size()];
}

}  // namespace detail

/// Deterministic phantom `index` of the family described by `config`.
inline PairedVolume generate_phantom(const PhantomConfig& config, std::uint64_t index) {
  config.validate();
  const Shape3 s = config.shape;
  const std::uint64_t seed = derive_seed(config.seed, index);
  Rng rng(seed);

  PairedVolume v;
  v.pet = Volume(s, 0.0f);
  v.ct = Volume(s, 0.0f);
  v.mask = Mask(s, 0);
  v.seed = seed;
  v.spacing_mm = config.spacing_mm;
  char id[32];
  std::snprintf(id, sizeof id, "phantom_%05llu", static_cast<unsigned long long>(index));
  v.id = id;

  const double D = s[0], H = s[1], W = s[2];
  detail::Ellipsoid body{{D / 2 + uniform(rng, -1, 1), H / 2 + uniform(rng, -1, 1),
                          W / 2 + uniform(rng, -1, 1)},
                         {0.45 * D * uniform(rng, 0.94, 1.0), 0.36 * H * uniform(rng, 0.92, 1.0),
                          0.40 * W * uniform(rng, 0.92, 1.0)}};
  const double background =
      config.background_uptake * uniform(rng, config.background_jitter.lo, config.background_jitter.hi);
  const double spine_y = body.center[1] + 0.62 * body.radii[1];
  const double spine_x = body.center[2];
  const double spine_r = std::max(1.0, 0.05 * W);

  for (int z = 0; z < s[0]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[2]; ++x) {
        if (body.rho2(z, y, x) >= 1.0) continue;
        const double dy = y - spine_y, dx = x - spine_x;
        const bool bone = dy * dy + dx * dx < spine_r * spine_r;
        v.pet(z, y, x) = static_cast<float>(bone ? 0.5 * background : background);
        v.ct(z, y, x) = bone ? 0.9f : 0.3f;
      }

  std::vector<detail::Ellipsoid> organs;
  double hottest = background;
  for (int k = 0; k < config.organ_count; ++k) {
    const auto& t = detail::organ_template(k);
    const double j = config.organ_position_jitter;
    detail::Ellipsoid e{};
    for (int a = 0; a < 3; ++a) {
      e.center[a] = (t.rel_center[a] + uniform(rng, -j, j)) * s[a];
      e.radii[a] = t.rel_radii[a] * s[a] *
                   uniform(rng, config.organ_radius_scale.lo, config.organ_radius_scale.hi);
    }
    const double peak = uniform(rng, config.organ_peak.lo, config.organ_peak.hi);
    const double density = t.ct_density + uniform(rng, -0.03, 0.03);
    hottest = std::max(hottest, peak);
    for (int z = 0; z < s[0]; ++z)
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[2]; ++x) {
          const double r2 = e.rho2(z, y, x);
          if (r2 >= 1.0 || body.rho2(z, y, x) >= 1.0) continue;
          // Dome-shaped uptake profile, peak at the center.
          const double u = background + (peak - background) * (1.0 - 0.35 * r2);
          v.pet(z, y, x) = static_cast<float>(std::max<double>(v.pet(z, y, x), u));
          v.ct(z, y, x) = static_cast<float>(density);
        }
    organs.push_back(e);
  }

  int lesions = 0;
  const bool contaminated = uniform01(rng) < config.contamination_rate;
  if (contaminated && config.lesion_count_max > 0)
    lesions = static_cast<int>(
        uniform_int(rng, std::max(1, config.lesion_count_min), config.lesion_count_max));

  struct Placed {
    std::array<double, 3> c;
    double r;
  };
  std::vector<Placed> placed;
  for (int l = 0; l < lesions; ++l) {
    const double r = uniform(rng, config.lesion_radius.lo, config.lesion_radius.hi);
    const double factor = uniform(rng, config.lesion_intensity.lo, config.lesion_intensity.hi);
    const double ct_contrast = uniform(rng, config.lesion_ct_contrast.lo, config.lesion_ct_contrast.hi);
    std::optional<Placed> spot;
    for (int attempt = 0; attempt < 1000 && !spot; ++attempt) {
      std::array<double, 3> c{uniform(rng, 0, D - 1), uniform(rng, 0, H - 1), uniform(rng, 0, W - 1)};
      detail::Ellipsoid shrunk{body.center, {body.radii[0] - r - 1, body.radii[1] - r - 1,
                                             body.radii[2] - r - 1}};
      if (shrunk.radii[0] <= 0 || shrunk.radii[1] <= 0 || shrunk.radii[2] <= 0) break;
      const auto inside = [&](const detail::Ellipsoid& e) {
        const double dz = (c[0] - e.center[0]) / e.radii[0];
        const double dy = (c[1] - e.center[1]) / e.radii[1];
        const double dx = (c[2] - e.center[2]) / e.radii[2];
        return dz * dz + dy * dy + dx * dx;
      };
      if (inside(shrunk) >= 1.0) continue;
      bool ok = true;
      for (const auto& o : organs) {
        const double margin = 1.0 + (r + 1.5) / std::min({o.radii[0], o.radii[1], o.radii[2]});
        if (inside(o) < margin * margin) ok = false;
      }
      for (const auto& p : placed) {
        const double dz = c[0] - p.c[0], dy = c[1] - p.c[1], dx = c[2] - p.c[2];
        if (std::sqrt(dz * dz + dy * dy + dx * dx) < r + p.r + 2.5) ok = false;
      }
      if (ok) spot = Placed{c, r};
    }
    if (!spot) continue;
    placed.push_back(*spot);
    const float value = static_cast<float>(factor * hottest);
    for (int z = 0; z < s[0]; ++z)
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[2]; ++x) {
          const double dz = z - spot->c[0], dy = y - spot->c[1], dx = x - spot->c[2];
          if (dz * dz + dy * dy + dx * dx > r * r) continue;
          v.pet(z, y, x) = value;
          v.ct(z, y, x) = static_cast<float>(std::min(1.0, v.ct(z, y, x) + ct_contrast));
          v.mask(z, y, x) = 1;
        }
  }

  if (config.noise_sigma > 0)
    for (auto& p : v.pet.data)
      p = static_cast<float>(std::max(0.0, p + config.noise_sigma * standard_normal(rng)));
  return v;
}

// ---------------------------------------------------------------------------
// Augmentation: Gaussian noise, global intensity scaling, Gaussian blur.

struct AugmentConfig {
  double noise_sigma = 0.005;
  Interval intensity_scale{0.92, 1.08};
  double blur_probability = 0.3;
  Interval blur_sigma{0.4, 0.8};
};

inline void gaussian_blur(Volume& v, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0;
  for (int i = -radius; i <= radius; ++i)
    norm += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= norm;
  const Shape3 s = v.shape;
  for (int axis = 0; axis < 3; ++axis) {
    Volume out(s, 0.0f);
    for (int z = 0; z < s[0]; ++z)
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[2]; ++x) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            std::array<int, 3> p{z, y, x};
            // Clamp-to-edge boundary.
            p[axis] = std::clamp(p[axis] + i, 0, s[axis] - 1);
            acc += kernel[static_cast<std::size_t>(i + radius)] * v(p[0], p[1], p[2]);
          }
          out(z, y, x) = static_cast<float>(acc);
        }
    v = std::move(out);
  }
}

/// Augmented copy of a channel; `clip_hi` < 0 disables the upper clip.
inline Volume augment(const Volume& in, Rng& rng, const AugmentConfig& cfg, double clip_hi) {
  Volume v = in;
  const double scale = uniform(rng, cfg.intensity_scale.lo, cfg.intensity_scale.hi);
  const bool blur = uniform01(rng) < cfg.blur_probability;
  const double sigma = uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi);
  for (auto& x : v.data) x = static_cast<float>(x * scale);
  if (blur) gaussian_blur(v, sigma);
  for (auto& x : v.data) {
    double y = x + cfg.noise_sigma * standard_normal(rng);
    y = std::max(0.0, y);
    if (clip_hi >= 0) y = std::min(clip_hi, y);
    x = static_cast<float>(y);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Dataset manifest.

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("split: unknown value '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string path;
  Split split = Split::train;
  bool has_lesion = false;
  std::uint64_t index = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::string config_digest;

  std::vector<const ManifestEntry*> subset(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }
  std::size_t count(Split s) const { return subset(s).size(); }
  bool operator==(const DatasetManifest&) const = default;
};

inline std::string phantom_id(std::uint64_t index) {
  char id[32];
  std::snprintf(id, sizeof id, "phantom_%05llu", static_cast<unsigned long long>(index));
  return id;
}

/// Shuffled train/val/test partition of phantom indices 0..n-1.
/// Val and test sizes are floored; train takes the remainder.
inline DatasetManifest split_dataset(std::size_t n, std::array<double, 3> fractions,
                                     std::uint64_t seed) {
  if (n == 0) throw ConfigError("empty manifest: dataset size n must be > 0");
  for (double f : fractions)
    if (!(f > 0)) throw ConfigError("split fractions must be positive");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[1]));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[2]));
  std::vector<std::uint64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<std::size_t>(rng() % (i + 1))]);

  DatasetManifest m;
  m.seed = seed;
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t k = 0; k < n; ++k) {
    ManifestEntry e;
    e.index = order[k];
    e.id = phantom_id(e.index);
    e.path = "data/" + e.id + ".pvl";
    e.split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    m.entries.push_back(e);
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const auto& a, const auto& b) { return a.index < b.index; });
  return m;
}

inline json manifest_to_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"id", e.id},
                       {"path", e.path},
                       {"split", to_string(e.split)},
                       {"has_lesion", e.has_lesion},
                       {"index", e.index}});
  return json{{"entries", entries}, {"seed", m.seed}, {"config_digest", m.config_digest}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_digest = j.value("config_digest", std::string{});
  for (const auto& e : j.at("entries"))
    m.entries.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(),
                         split_from_string(e.at("split").get<std::string>()),
                         e.at("has_lesion").get<bool>(), e.value("index", std::uint64_t{0})});
  return m;
}

// ---------------------------------------------------------------------------
// PVL1 volume container.

inline constexpr std::string_view kVolumeMagic = "PVL1";

struct PvlChannel {
  std::string name;
  std::variant<std::vector<float>, std::vector<std::uint8_t>> values;
};

struct PvlFile {
  Shape3 shape{0, 0, 0};
  std::array<double, 3> spacing_mm{1, 1, 1};
  std::string id;
  std::uint64_t seed = 0;
  std::vector<PvlChannel> channels;
  json extra = json::object();
};

inline void write_pvl(const std::filesystem::path& path, const PvlFile& f) {
  json channels = json::array(), dtypes = json::array();
  std::vector<std::uint8_t> payload;
  const std::size_t n = voxel_count(f.shape);
  for (const auto& c : f.channels) {
    channels.push_back(c.name);
    std::visit(
        [&](const auto& vals) {
          using V = typename std::decay_t<decltype(vals)>::value_type;
          require(vals.size() == n, "write_pvl: channel '" + c.name + "' size does not match shape");
          dtypes.push_back(std::is_same_v<V, float> ? "f32le" : "u8");
          container::append_le(payload, std::span<const V>(vals));
        },
        c.values);
  }
  json header{{"version", 1},         {"shape", f.shape}, {"channels", channels},
              {"dtypes", dtypes},     {"spacing_mm", f.spacing_mm},
              {"id", f.id},           {"seed", f.seed}};
  for (const auto& [k, v] : f.extra.items()) header[k] = v;
  container::write(path, kVolumeMagic, header, payload);
}

inline PvlFile read_pvl(const std::filesystem::path& path) {
  const auto raw = container::read(path, kVolumeMagic);
  const auto& h = raw.header;
  PvlFile f;
  try {
    f.shape = h.at("shape").get<Shape3>();
    f.spacing_mm = h.at("spacing_mm").get<std::array<double, 3>>();
    f.id = h.at("id").get<std::string>();
    f.seed = h.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("header: missing or mistyped field (") + e.what() + ")");
  }
  for (int a = 0; a < 3; ++a)
    if (f.shape[a] <= 0) throw FormatError("shape: axes must be positive");
  const auto names = h.at("channels").get<std::vector<std::string>>();
  const auto dtypes = h.at("dtypes").get<std::vector<std::string>>();
  if (names.size() != dtypes.size()) throw FormatError("dtypes: count differs from channels");
  const std::size_t n = voxel_count(f.shape);
  std::size_t expected = 0;
  for (const auto& d : dtypes) {
    if (d == "f32le") expected += 4 * n;
    else if (d == "u8") expected += n;
    else throw FormatError("dtypes: unsupported dtype '" + d + "'");
  }
  if (raw.payload.size() != expected)
    throw FormatError("payload: size " + std::to_string(raw.payload.size()) +
                      " bytes does not match header shape (expected " + std::to_string(expected) + ")");
  std::size_t off = 0;
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (dtypes[c] == "f32le")
      f.channels.push_back({names[c], container::take_le<float>(raw.payload, off, n, names[c])});
    else
      f.channels.push_back({names[c], container::take_le<std::uint8_t>(raw.payload, off, n, names[c])});
  }
  for (const auto& [k, v] : h.items())
    if (k != "version" && k != "shape" && k != "channels" && k != "dtypes" && k != "spacing_mm" &&
        k != "id" && k != "seed")
      f.extra[k] = v;
  return f;
}

inline void write_volume(const PairedVolume& v, const std::filesystem::path& path) {
  PvlFile f;
  f.shape = v.shape();
  f.spacing_mm = v.spacing_mm;
  f.id = v.id;
  f.seed = v.seed;
  f.channels = {{"pet", v.pet.data}, {"ct", v.ct.data}, {"mask", v.mask.data}};
  write_pvl(path, f);
}

inline PairedVolume read_volume(const std::filesystem::path& path) {
  auto f = read_pvl(path);
  const std::array<std::string, 3> want{"pet", "ct", "mask"};
  if (f.channels.size() != 3) throw FormatError("channels: expected [pet, ct, mask]");
  for (std::size_t c = 0; c < 3; ++c)
    if (f.channels[c].name != want[c]) throw FormatError("channels: expected [pet, ct, mask]");
  if (!std::holds_alternative<std::vector<float>>(f.channels[0].values) ||
      !std::holds_alternative<std::vector<float>>(f.channels[1].values) ||
      !std::holds_alternative<std::vector<std::uint8_t>>(f.channels[2].values))
    throw FormatError("dtypes: expected [f32le, f32le, u8]");
  PairedVolume v;
  v.id = f.id;
  v.seed = f.seed;
  v.spacing_mm = f.spacing_mm;
  v.pet = Volume(f.shape, std::get<std::vector<float>>(std::move(f.channels[0].values)));
  v.ct = Volume(f.shape, std::get<std::vector<float>>(std::move(f.channels[1].values)));
  v.mask = Mask(f.shape, std::get<std::vector<std::uint8_t>>(std::move(f.channels[2].values)));
  return v;
}

}  // namespace anomalens::phantoms
