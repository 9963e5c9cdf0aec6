#pragma once

// Detection pipeline: raster token sequences, likelihood masks, healing by
// resampling, stochastic reconstruction stacks, and the two anomaly maps
// (positive residual and per-voxel KDE negative log-likelihood).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomalens/armodel/model.hpp"
#include "anomalens/phantoms.hpp"
#include "anomalens/vqcore/model.hpp"

namespace anomalens::anomaly {

using ar::Tokens;
using vq::LatentGrid;

// ---------------------------------------------------------------------------
// Rasterization

struct TokenSequence {
  Tokens tokens;
  Shape3 grid{0, 0, 0};
  bool operator==(const TokenSequence&) const = default;
};

/// Depth slowest, width fastest; this is also Grid3's storage order.
inline TokenSequence rasterize(const LatentGrid& g) {
  TokenSequence s{Tokens(g.size()), g.shape};
  for (int z = 0; z < g.shape[0]; ++z)
    for (int y = 0; y < g.shape[1]; ++y)
      for (int x = 0; x < g.shape[2]; ++x)
        s.tokens[(static_cast<std::size_t>(z) * g.shape[1] + y) * g.shape[2] + x] = g(z, y, x);
  return s;
}

inline LatentGrid derasterize(const TokenSequence& s) {
  require(s.tokens.size() == voxel_count(s.grid), "derasterize: sequence length " + std::to_string(s.tokens.size()) +
                                                      " does not match grid of " + std::to_string(voxel_count(s.grid)));
  LatentGrid g(s.grid);
  std::size_t i = 0;
  for (int z = 0; z < s.grid[0]; ++z)
    for (int y = 0; y < s.grid[1]; ++y)
      for (int x = 0; x < s.grid[2]; ++x) g(z, y, x) = s.tokens[i++];
  return g;
}

// ---------------------------------------------------------------------------
// Likelihood masks and healing

struct ResampleMask {
  std::vector<bool> mask;
  double threshold = 0;
  std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

inline ResampleMask resample_mask(std::span<const double> likelihoods, double t) {
  ResampleMask m{std::vector<bool>(likelihoods.size()), t};
  for (std::size_t i = 0; i < likelihoods.size(); ++i) m.mask[i] = likelihoods[i] < t;
  return m;
}

/// Draws an index from `p` (nonnegative, summing to about one) by inverse CDF.
inline int sample_categorical(std::span<const float> p, Rng& rng) {
  double total = 0;
  for (float v : p) total += v;
  const double u = uniform01(rng) * total;
  double acc = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return static_cast<int>(k);
  }
  // Rounding can leave u at the very top; fall back to the last positive entry.
  for (std::size_t k = p.size(); k-- > 0;)
    if (p[k] > 0) return static_cast<int>(k);
  return static_cast<int>(p.size()) - 1;
}

/// Replaces masked tokens in raster order, each drawn from the model's
/// softmax given the already-healed prefix and the conditioning.
template <class T>
Tokens heal(const Tokens& seq, const ResampleMask& mask, const ar::ARModel<T>& model, const Tokens* cond,
            std::uint64_t seed) {
  require(mask.mask.size() == seq.size(), "heal: mask length differs from the sequence");
  Tokens out = seq;
  Rng rng(seed);
  const int M = model.config().vocabulary;
  std::vector<float> p(static_cast<std::size_t>(M));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!mask.mask[i]) continue;
    const auto logits = ar::ar_forward(model, out, cond);
    std::vector<T> row(logits.begin() + static_cast<std::ptrdiff_t>(i * M),
                       logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * M));
    std::vector<T> prob(row.size());
    diff::detail::softmax_row(row.data(), prob.data(), M);
    for (int k = 0; k < M; ++k) p[static_cast<std::size_t>(k)] = static_cast<float>(prob[static_cast<std::size_t>(k)]);
    out[i] = sample_categorical(p, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction stacks

struct SampleConfig {
  int n_seq = 60;
  int n_dec = 4;
  double t = 0.025;
  bool dropout = true;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const SampleConfig& c) {
  j = {{"n_seq", c.n_seq}, {"n_dec", c.n_dec}, {"t", c.t}, {"dropout", c.dropout}, {"seed", c.seed}};
}

/// The trained models of one pipeline. `ct_vq` is needed only when `ar` is
/// conditional.
struct Models {
  const vq::VQGan<float>* pet_vq = nullptr;
  const vq::VQGan<float>* ct_vq = nullptr;
  const ar::ARModel<float>* ar = nullptr;

  void check() const {
    require(pet_vq && ar, "pipeline: uptake VQ model and AR model are required");
    require(ar->config().vocabulary == pet_vq->codebook.size,
            "pipeline: AR vocabulary " + std::to_string(ar->config().vocabulary) + " does not match codebook size " +
                std::to_string(pet_vq->codebook.size));
    if (ar->config().conditional()) {
      require(ct_vq != nullptr, "pipeline: conditional AR model needs the anatomy VQ model");
      require(ar->config().cond_vocabulary == ct_vq->codebook.size,
              "pipeline: AR conditioning vocabulary does not match the anatomy codebook size");
    }
  }
};

struct ReconstructionStack {
  std::vector<Volume> volumes;
  int n_seq = 0;
  int n_dec = 0;
  std::size_t masked = 0;  // tokens below the likelihood threshold
};

/// Tokens of the uptake volume and, for conditional models, of the anatomy.
struct Encoded {
  TokenSequence pet;
  std::optional<TokenSequence> ct;
  const Tokens* cond() const { return ct ? &ct->tokens : nullptr; }
};

inline Encoded encode_case(const phantoms::PairedVolume& v, const Models& m) {
  m.check();
  Encoded e{rasterize(m.pet_vq->encode_tokens(v.pet)), std::nullopt};
  if (m.ar->config().conditional()) e.ct = rasterize(m.ct_vq->encode_tokens(v.ct));
  return e;
}

inline ResampleMask likelihood_mask(const Encoded& e, const Models& m, double t) {
  const auto l = ar::token_likelihoods(*m.ar, e.pet.tokens, e.cond());
  return resample_mask(l, t);
}

inline ReconstructionStack sample_reconstructions(const phantoms::PairedVolume& v, const Models& m,
                                                  const SampleConfig& cfg) {
  require(cfg.n_seq >= 1 && cfg.n_dec >= 1, "sample_reconstructions: n_seq and n_dec must be positive");
  const auto e = encode_case(v, m);
  const auto mask = likelihood_mask(e, m, cfg.t);
  ReconstructionStack stack;
  stack.n_seq = cfg.n_seq;
  stack.n_dec = cfg.n_dec;
  stack.masked = mask.count();
  stack.volumes.reserve(static_cast<std::size_t>(cfg.n_seq) * cfg.n_dec);
  for (int s = 0; s < cfg.n_seq; ++s) {
    const auto healed = heal(e.pet.tokens, mask, *m.ar, e.cond(), derive_seed(cfg.seed, static_cast<std::uint64_t>(2 * s)));
    const auto grid = derasterize({healed, e.pet.grid});
    Rng drop(derive_seed(cfg.seed, static_cast<std::uint64_t>(2 * s + 1)));
    for (int d = 0; d < cfg.n_dec; ++d)
      stack.volumes.push_back(
          m.pet_vq->decode_tokens(grid, cfg.dropout ? vq::DropoutMode::on : vq::DropoutMode::off, &drop));
  }
  return stack;
}

/// One healed reconstruction decoded without dropout, for residual maps.
inline Volume healed_reconstruction(const phantoms::PairedVolume& v, const Models& m, double t, std::uint64_t seed) {
  const auto e = encode_case(v, m);
  const auto mask = likelihood_mask(e, m, t);
  const auto healed = heal(e.pet.tokens, mask, *m.ar, e.cond(), seed);
  return m.pet_vq->decode_tokens(derasterize({healed, e.pet.grid}), vq::DropoutMode::off, nullptr);
}

// ---------------------------------------------------------------------------
// Residual map

inline Volume residual_map(const Volume& x, const Volume& xr) {
  require(x.shape == xr.shape, "residual_map: shapes differ");
  Volume out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i] - xr[i], 0.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Kernel density estimation

enum class Kernel { gaussian, tophat, epanechnikov, exponential, linear, cosine };

inline constexpr std::array<Kernel, 6> kAllKernels{Kernel::gaussian,    Kernel::tophat, Kernel::epanechnikov,
                                                   Kernel::exponential, Kernel::linear, Kernel::cosine};

inline std::string kernel_name(Kernel k) {
  switch (k) {
    case Kernel::gaussian: return "gaussian";
    case Kernel::tophat: return "tophat";
    case Kernel::epanechnikov: return "epanechnikov";
    case Kernel::exponential: return "exponential";
    case Kernel::linear: return "linear";
    case Kernel::cosine: return "cosine";
  }
  return "?";
}

inline Kernel parse_kernel(const std::string& s) {
  for (Kernel k : kAllKernels)
    if (kernel_name(k) == s) return k;
  throw ConfigError("unknown kernel '" + s + "' (expected gaussian, tophat, epanechnikov, exponential, linear or cosine)");
}

/// Normalized kernel K(u).
inline double kernel_value(Kernel k, double u) {
  const double a = std::abs(u);
  switch (k) {
    case Kernel::gaussian: return std::exp(-0.5 * u * u) / std::sqrt(2 * std::numbers::pi);
    case Kernel::tophat: return a < 1 ? 0.5 : 0.0;
    case Kernel::epanechnikov: return a < 1 ? 0.75 * (1 - u * u) : 0.0;
    case Kernel::exponential: return 0.5 * std::exp(-a);
    case Kernel::linear: return a < 1 ? 1 - a : 0.0;
    case Kernel::cosine: return a < 1 ? std::numbers::pi / 4 * std::cos(std::numbers::pi / 2 * u) : 0.0;
  }
  return 0;
}

inline constexpr double kDensityFloor = 1e-12;

struct KDEConfig {
  Kernel kernel = Kernel::gaussian;
  double epsilon = 0.05;
  double floor = kDensityFloor;
  bool one_sided = true;

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("kde.epsilon must be >= 0");
    if (!(floor > 0)) throw ConfigError("kde.floor must be positive");
  }
};

inline void to_json(nlohmann::json& j, const KDEConfig& c) {
  j = {{"kernel", kernel_name(c.kernel)}, {"epsilon", c.epsilon}, {"floor", c.floor}, {"one_sided", c.one_sided}};
}

inline void from_json(const nlohmann::json& j, KDEConfig& c) {
  c = KDEConfig{};
  if (j.contains("kernel")) c.kernel = parse_kernel(j.at("kernel").get<std::string>());
  if (j.contains("epsilon")) j.at("epsilon").get_to(c.epsilon);
  if (j.contains("floor")) j.at("floor").get_to(c.floor);
  if (j.contains("one_sided")) j.at("one_sided").get_to(c.one_sided);
}

/// (4 sigma^5 / 3n)^(1/5) + eps with the population standard deviation.
inline double silverman_bandwidth(std::span<const double> samples, double eps) {
  require(!samples.empty(), "silverman_bandwidth: no samples");
  const double n = static_cast<double>(samples.size());
  // Constant samples must give exactly eps; the mean can carry rounding.
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  if (*lo == *hi) return eps;
  double mean = 0;
  for (double s : samples) mean += s;
  mean /= n;
  double var = 0;
  for (double s : samples) var += (s - mean) * (s - mean);
  const double sigma = std::sqrt(var / n);
  return std::pow(4 * std::pow(sigma, 5) / (3 * n), 0.2) + eps;
}

inline double kde_logdensity(std::span<const double> samples, double x, Kernel k, double h,
                             double floor = kDensityFloor) {
  require(h > 0, "kde_logdensity: bandwidth must be positive");
  require(!samples.empty(), "kde_logdensity: no samples");
  double s = 0;
  for (double xi : samples) s += kernel_value(k, (x - xi) / h);
  const double f = s / (static_cast<double>(samples.size()) * h);
  return std::log(std::max(f, floor));
}

/// Per-voxel negative log-likelihood of the observation under a KDE fitted
/// to the stack. One-sided maps zero voxels at or below the stack mean.
inline Volume kde_anomaly_map(const std::vector<Volume>& stack, const Volume& x, const KDEConfig& cfg) {
  require(!stack.empty(), "kde_anomaly_map: empty reconstruction stack");
  cfg.validate();
  for (const auto& s : stack) require(s.shape == x.shape, "kde_anomaly_map: stack shape differs from observation");
  Volume out(x.shape, 0.0f);
  std::vector<double> samples(stack.size());
  for (std::size_t v = 0; v < x.size(); ++v) {
    double mean = 0;
    for (std::size_t k = 0; k < stack.size(); ++k) mean += samples[k] = stack[k][v];
    mean /= static_cast<double>(stack.size());
    if (cfg.one_sided && x[v] <= mean) continue;
    const double h = silverman_bandwidth(samples, cfg.epsilon);
    if (!(h > 0)) throw ContractError("kde_anomaly_map: zero bandwidth at a constant voxel; use epsilon > 0");
    out[v] = static_cast<float>(-kde_logdensity(samples, x[v], cfg.kernel, h, cfg.floor));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Map files

inline void write_anomaly_map(const std::filesystem::path& path, const Volume& map, const std::string& id,
                              const nlohmann::json& sidecar) {
  phantoms::PvlFile f;
  f.shape = map.shape;
  f.id = id;
  f.channels.push_back({"anomaly", map.data});
  phantoms::write_pvl(path, f);
  auto side = path;
  side.replace_extension(".json");
  std::ofstream os(side);
  if (!os) throw std::runtime_error("cannot open for writing: " + side.string());
  os << sidecar.dump(2) << "\n";
}

inline Volume read_anomaly_map(const std::filesystem::path& path) {
  const auto f = phantoms::read_pvl(path);
  for (const auto& c : f.channels)
    if (c.name == "anomaly") {
      const auto* v = std::get_if<std::vector<float>>(&c.values);
      if (!v) throw FormatError("dtypes: anomaly channel must be f32le");
      return Volume(f.shape, *v);
    }
  throw FormatError("channels: no 'anomaly' channel in " + path.string());
}

}  // namespace anomalens::anomaly
