#pragma once

// Stage orchestration behind the command line: one JSON run configuration,
// a master seed fanned out per stage, on-disk artifacts under one output
// directory, and a provenance record per stage.
//
// Layout of an output directory:
//   manifest.json, data/<id>.pvl                    gen
//   vq/{pet,ct}.ckp, vq/{pet,ct}_log.csv            train-vq
//   tokens/{pet,ct}/<id>.tok                        encode
//   ar/{cond,uncond}.ckp, ar/*_log.csv              train-ar
//   maps/<kind>/<id>.pvl + .json                    detect
//   eval/metrics.csv, eval/summary.json, curves/    eval
//   ablate/{codebook,kde}.csv                       ablate
//   provenance/<stage>.json

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "anomalens/anomaly.hpp"
#include "anomalens/armodel/model.hpp"
#include "anomalens/phantoms.hpp"
#include "anomalens/segmetrics.hpp"
#include "anomalens/vqcore/train.hpp"

namespace anomalens::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using phantoms::Split;

inline constexpr std::string_view kVersion = "0.1.0";

/// A downstream stage found an artifact of an earlier stage missing.
struct MissingStageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

/// Anomaly map variants. "cond" maps use the AR model that cross-attends to
/// anatomy tokens, "uncond" maps the uptake-only model.
struct MapKind {
  std::string name;
  bool conditioned = true;
  bool kde = true;
};

inline MapKind parse_map_kind(const std::string& name) {
  if (name == "kde_cond") return {name, true, true};
  if (name == "kde_uncond") return {name, false, true};
  if (name == "residual_cond") return {name, true, false};
  if (name == "residual_uncond") return {name, false, false};
  throw ConfigError("unknown map kind '" + name + "' (expected kde_cond, kde_uncond, residual_cond or residual_uncond)");
}

struct DetectConfig {
  double t = 0.025;
  int n_seq = 60;
  int n_dec = 4;
  bool dropout = true;
  anomaly::KDEConfig kde{anomaly::Kernel::exponential, 0.05};
  std::vector<std::string> maps{"kde_cond", "residual_cond", "residual_uncond"};
  Split split = Split::test;
};

struct EvalConfig {
  double fraction = 0.4;
  int quantiles = 256;
  bool grown = true;
};

struct CodebookCell {
  int size = 256;
  int dim = 128;
};

struct AblateConfig {
  int count = 48;  // phantoms generated for the ablation runs
  int vq_steps = 200;
  int ar_steps = 200;
  int n_seq = 8;
  int n_dec = 2;
  std::string channel = "pet";  // which codebook the grid varies
  std::vector<int> sizes{64, 256};
  std::vector<int> dims{32, 128};
  bool full = false;
  std::vector<std::string> kernels{"gaussian", "tophat", "epanechnikov", "exponential", "linear", "cosine"};
  std::vector<double> epsilons{0.025, 0.05, 0.1};
};

struct RunConfig {
  phantoms::PhantomConfig phantom;
  int count = 240;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  vq::VQGanConfig vq_pet;
  vq::VQGanConfig vq_ct;
  ar::ARConfig ar;
  DetectConfig detect;
  EvalConfig eval;
  AblateConfig ablate;
  std::uint64_t seed = 0;

  void validate() const {
    phantom.validate();
    if (count < 1) throw ConfigError("count must be positive");
    vq_pet.validate();
    vq_ct.validate();
    if (detect.t < 0 || detect.t > 1) throw ConfigError("detect.t must lie in [0,1]");
    if (detect.n_seq < 1 || detect.n_dec < 1) throw ConfigError("detect.n_seq and detect.n_dec must be positive");
    detect.kde.validate();
    if (detect.maps.empty()) throw ConfigError("detect.maps must not be empty");
    for (const auto& m : detect.maps) parse_map_kind(m);
    if (!(eval.fraction > 0 && eval.fraction <= 1)) throw ConfigError("eval.fraction must lie in (0,1]");
    if (eval.quantiles < 1) throw ConfigError("eval.quantiles must be positive");
    if (ablate.channel != "pet" && ablate.channel != "ct") throw ConfigError("ablate.channel must be 'pet' or 'ct'");
    if (ablate.sizes.empty() || ablate.dims.empty()) throw ConfigError("ablate codebook grid must be nonempty");
    if (ablate.kernels.empty() || ablate.epsilons.empty()) throw ConfigError("ablate kde grid must be nonempty");
    for (const auto& k : ablate.kernels) anomaly::parse_kernel(k);
  }

  bool needs(bool conditioned) const {
    for (const auto& m : detect.maps)
      if (parse_map_kind(m).conditioned == conditioned) return true;
    return false;
  }
};

inline void to_json(json& j, const DetectConfig& c) {
  j = {{"t", c.t},     {"n_seq", c.n_seq}, {"n_dec", c.n_dec},
       {"dropout", c.dropout}, {"kde", c.kde}, {"maps", c.maps}, {"split", phantoms::to_string(c.split)}};
}

inline void from_json(const json& j, DetectConfig& c) {
  c = DetectConfig{};
  if (j.contains("t")) j.at("t").get_to(c.t);
  if (j.contains("n_seq")) j.at("n_seq").get_to(c.n_seq);
  if (j.contains("n_dec")) j.at("n_dec").get_to(c.n_dec);
  if (j.contains("dropout")) j.at("dropout").get_to(c.dropout);
  if (j.contains("kde")) {
    // Partial objects keep the detection defaults for unspecified fields.
    json base = c.kde;
    base.merge_patch(j.at("kde"));
    c.kde = base.get<anomaly::KDEConfig>();
  }
  if (j.contains("maps")) j.at("maps").get_to(c.maps);
  if (j.contains("split")) c.split = phantoms::split_from_string(j.at("split").get<std::string>());
}

inline void to_json(json& j, const EvalConfig& c) {
  j = {{"fraction", c.fraction}, {"quantiles", c.quantiles}, {"grown", c.grown}};
}

inline void from_json(const json& j, EvalConfig& c) {
  c = EvalConfig{};
  if (j.contains("fraction")) j.at("fraction").get_to(c.fraction);
  if (j.contains("quantiles")) j.at("quantiles").get_to(c.quantiles);
  if (j.contains("grown")) j.at("grown").get_to(c.grown);
}

inline void to_json(json& j, const AblateConfig& c) {
  j = {{"count", c.count},       {"vq_steps", c.vq_steps}, {"ar_steps", c.ar_steps}, {"n_seq", c.n_seq},
       {"n_dec", c.n_dec},       {"channel", c.channel},   {"sizes", c.sizes},       {"dims", c.dims},
       {"full", c.full},         {"kernels", c.kernels},   {"epsilons", c.epsilons}};
}

inline void from_json(const json& j, AblateConfig& c) {
  c = AblateConfig{};
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("count", c.count);
  get("vq_steps", c.vq_steps);
  get("ar_steps", c.ar_steps);
  get("n_seq", c.n_seq);
  get("n_dec", c.n_dec);
  get("channel", c.channel);
  get("sizes", c.sizes);
  get("dims", c.dims);
  get("full", c.full);
  get("kernels", c.kernels);
  get("epsilons", c.epsilons);
}

inline void to_json(json& j, const RunConfig& c) {
  j = {{"phantom", c.phantom}, {"count", c.count},   {"split", c.split},     {"vq_pet", c.vq_pet},
       {"vq_ct", c.vq_ct},     {"ar", c.ar},         {"detect", c.detect},   {"eval", c.eval},
       {"ablate", c.ablate},   {"seed", c.seed}};
}

/// "vq" applies to both channels; "vq_pet" and "vq_ct" patch it per channel.
inline void from_json(const json& j, RunConfig& c) {
  c = RunConfig{};
  try {
    if (j.contains("phantom")) c.phantom = j.at("phantom").get<phantoms::PhantomConfig>();
    if (j.contains("count")) j.at("count").get_to(c.count);
    if (j.contains("split")) j.at("split").get_to(c.split);
    json vq_base = j.value("vq", json::object());
    json pet = vq_base, ct = vq_base;
    if (j.contains("vq_pet")) pet.merge_patch(j.at("vq_pet"));
    if (j.contains("vq_ct")) ct.merge_patch(j.at("vq_ct"));
    c.vq_pet = pet.get<vq::VQGanConfig>();
    c.vq_ct = ct.get<vq::VQGanConfig>();
    if (j.contains("ar")) c.ar = j.at("ar").get<ar::ARConfig>();
    if (j.contains("detect")) c.detect = j.at("detect").get<DetectConfig>();
    if (j.contains("eval")) c.eval = j.at("eval").get<EvalConfig>();
    if (j.contains("ablate")) c.ablate = j.at("ablate").get<AblateConfig>();
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return j.get<RunConfig>();
}

inline std::string config_digest(const RunConfig& c) { return hex64(fnv1a(json(c).dump())); }

// ---------------------------------------------------------------------------
// Run context

struct Options {
  int workers = 1;
  std::function<void(const std::string&)> log;
  // Renders a mid-axial slice; unset means no images.
  std::function<void(const fs::path&, const Volume&)> png;
};

/// Worker count from ANOMALENS_WORKERS, defaulting to the hardware count.
inline int workers_from_env() {
  const char* v = std::getenv("ANOMALENS_WORKERS");
  const int hw = std::max(1u, std::thread::hardware_concurrency());
  if (!v || !*v) return static_cast<int>(hw);
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("ANOMALENS_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<int>(std::min<long>(n, 1024));
}

/// Runs f(0..n-1) on up to `workers` threads. Results must not depend on the
/// schedule; the first failure by index is rethrown.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

inline void say(const Options& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

inline void need(const fs::path& p, const std::string& stage, const std::string& who) {
  if (!fs::exists(p))
    throw MissingStageError(who + ": missing " + p.string() + "; run `anomalens " + stage + "` first");
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + p.string());
  os << text;
}

inline json versions() {
  return {{"anomalens", std::string(kVersion)},
          {"compiler", __VERSION__},
          {"cxx", static_cast<long>(__cplusplus)},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                       "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

inline void write_provenance(const fs::path& out, const std::string& stage, const RunConfig& cfg, json seeds,
                             json extra = json::object()) {
  json p{{"stage", stage},
         {"config", cfg},
         {"config_digest", config_digest(cfg)},
         {"seeds", std::move(seeds)},
         {"versions", versions()}};
  for (auto& [k, v] : extra.items()) p[k] = v;
  write_text(out / "provenance" / (stage + ".json"), p.dump(2) + "\n");
}

inline phantoms::DatasetManifest read_manifest(const fs::path& out, const std::string& who) {
  need(out / "manifest.json", "gen", who);
  std::ifstream is(out / "manifest.json");
  return phantoms::manifest_from_json(json::parse(is));
}

inline std::vector<phantoms::PairedVolume> read_split(const fs::path& out, const phantoms::DatasetManifest& m,
                                                      Split s, const std::string& who) {
  std::vector<phantoms::PairedVolume> vs;
  for (const auto* e : m.subset(s)) {
    need(out / e->path, "gen", who);
    vs.push_back(phantoms::read_volume(out / e->path));
  }
  return vs;
}

inline vq::VQGan<float> read_vq(const fs::path& out, const std::string& channel, const std::string& who) {
  const auto p = out / "vq" / (channel + ".ckp");
  need(p, "train-vq", who);
  return vq::vqgan_from_checkpoint(diff::read_checkpoint(p));
}

inline ar::ARModel<float> read_ar(const fs::path& out, bool conditioned, const std::string& who) {
  const auto p = out / "ar" / (conditioned ? "cond.ckp" : "uncond.ckp");
  need(p, "train-ar", who);
  return ar::ar_from_checkpoint(diff::read_checkpoint(p));
}

inline std::string csv_safe(std::string s) {
  for (auto& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  return s;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

/// gen: phantoms, PVL1 files and the split manifest.
inline void run_gen(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  auto pc = cfg.phantom;
  pc.seed = derive_seed(cfg.seed, "gen");
  auto manifest = phantoms::split_dataset(static_cast<std::size_t>(cfg.count), cfg.split, derive_seed(cfg.seed, "split"));
  manifest.config_digest = hex64(fnv1a(json(pc).dump()));
  fs::create_directories(out / "data");
  detail::say(opt, "gen: " + std::to_string(cfg.count) + " phantoms");
  parallel_for(manifest.entries.size(), opt.workers, [&](std::size_t i) {
    auto& e = manifest.entries[i];
    const auto v = phantoms::generate_phantom(pc, e.index);
    e.has_lesion = v.has_lesion();
    phantoms::write_volume(v, out / e.path);
    if (opt.png) {
      opt.png(out / "png" / "data" / (e.id + "_pet.png"), v.pet);
      opt.png(out / "png" / "data" / (e.id + "_ct.png"), v.ct);
    }
  });
  detail::write_text(out / "manifest.json", phantoms::manifest_to_json(manifest).dump(2) + "\n");
  detail::write_provenance(out, "gen", cfg, {{"master", cfg.seed}, {"phantom", pc.seed}, {"split", manifest.seed}},
                           {{"count", cfg.count}});
}

/// train-vq: one VQ-GAN per channel on the training split.
inline void run_train_vq(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  const auto manifest = detail::read_manifest(out, "train-vq");
  const auto train = detail::read_split(out, manifest, Split::train, "train-vq");
  if (train.empty()) throw ConfigError("train-vq: the training split is empty");
  std::vector<Volume> pet, ct;
  for (const auto& v : train) {
    pet.push_back(v.pet);
    ct.push_back(v.ct);
  }
  struct Job {
    std::string channel;
    const std::vector<Volume>* volumes;
    const vq::VQGanConfig* cfg;
    double clip_hi;
  };
  // Anatomy is normalized to [0,1]; uptake has no upper bound.
  const std::vector<Job> jobs{{"pet", &pet, &cfg.vq_pet, -1.0}, {"ct", &ct, &cfg.vq_ct, 1.0}};
  fs::create_directories(out / "vq");
  json seeds{{"master", cfg.seed}};
  for (const auto& j : jobs) seeds[j.channel] = derive_seed(cfg.seed, "train-vq/" + j.channel);
  parallel_for(jobs.size(), opt.workers, [&](std::size_t k) {
    const auto& j = jobs[k];
    detail::say(opt, "train-vq: " + j.channel + " (" + std::to_string(j.cfg->steps) + " steps)");
    const auto seed = seeds[j.channel].get<std::uint64_t>();
    auto res = vq::train_vqgan(*j.volumes, *j.cfg, seed, j.clip_hi);
    diff::write_checkpoint(out / "vq" / (j.channel + ".ckp"),
                           vq::to_checkpoint(res.model, {{"channel", j.channel}, {"seed", seed}}));
    std::ostringstream log;
    vq::write_log_csv(log, res.log);
    detail::write_text(out / "vq" / (j.channel + "_log.csv"), log.str());
  });
  detail::write_provenance(out, "train-vq", cfg, seeds, {{"train_volumes", train.size()}});
}

/// encode: token grids for every manifest entry and both channels.
inline void run_encode(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  const auto manifest = detail::read_manifest(out, "encode");
  const auto pet = detail::read_vq(out, "pet", "encode");
  const auto ct = detail::read_vq(out, "ct", "encode");
  fs::create_directories(out / "tokens" / "pet");
  fs::create_directories(out / "tokens" / "ct");
  detail::say(opt, "encode: " + std::to_string(manifest.entries.size()) + " volumes");
  parallel_for(manifest.entries.size(), opt.workers, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    detail::need(out / e.path, "gen", "encode");
    const auto v = phantoms::read_volume(out / e.path);
    const auto p = anomaly::rasterize(pet.encode_tokens(v.pet));
    const auto c = anomaly::rasterize(ct.encode_tokens(v.ct));
    ar::write_tokens({p.grid, pet.codebook.size, p.tokens, e.id}, out / "tokens" / "pet" / (e.id + ".tok"));
    ar::write_tokens({c.grid, ct.codebook.size, c.tokens, e.id}, out / "tokens" / "ct" / (e.id + ".tok"));
  });
  detail::write_provenance(out, "encode", cfg, {{"master", cfg.seed}});
}

/// AR configuration with vocabulary and lengths taken from the token data.
inline ar::ARConfig ar_config_for(const ar::ARConfig& base, const ar::TokenGrid& pet, const ar::TokenGrid* ct) {
  auto c = base;
  c.vocabulary = pet.vocabulary;
  c.seq_len = static_cast<int>(pet.tokens.size());
  c.cond_vocabulary = ct ? ct->vocabulary : 0;
  c.cond_len = ct ? static_cast<int>(ct->tokens.size()) : 0;
  return c;
}

/// train-ar: the conditioned and/or unconditioned AR models the detection
/// maps require.
inline void run_train_ar(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  const auto manifest = detail::read_manifest(out, "train-ar");
  ar::TokenSet pet, ct;
  std::vector<ar::TokenGrid> first(2);
  for (const auto* e : manifest.subset(Split::train)) {
    const auto pp = out / "tokens" / "pet" / (e->id + ".tok");
    const auto cp = out / "tokens" / "ct" / (e->id + ".tok");
    detail::need(pp, "encode", "train-ar");
    detail::need(cp, "encode", "train-ar");
    auto p = ar::read_tokens(pp);
    auto c = ar::read_tokens(cp);
    if (pet.sequences.empty()) first = {p, c};
    pet.vocabulary = p.vocabulary;
    ct.vocabulary = c.vocabulary;
    pet.sequences.push_back(std::move(p.tokens));
    ct.sequences.push_back(std::move(c.tokens));
  }
  if (pet.sequences.empty()) throw ConfigError("train-ar: the training split is empty");
  std::vector<bool> variants;
  if (cfg.needs(true)) variants.push_back(true);
  if (cfg.needs(false)) variants.push_back(false);
  fs::create_directories(out / "ar");
  json seeds{{"master", cfg.seed}};
  for (bool c : variants) seeds[c ? "cond" : "uncond"] = derive_seed(cfg.seed, c ? "train-ar/cond" : "train-ar/uncond");
  parallel_for(variants.size(), opt.workers, [&](std::size_t k) {
    const bool cond = variants[k];
    const std::string name = cond ? "cond" : "uncond";
    const auto acfg = ar_config_for(cfg.ar, first[0], cond ? &first[1] : nullptr);
    detail::say(opt, "train-ar: " + name + " (" + std::to_string(acfg.steps) + " steps)");
    const auto seed = seeds[name].get<std::uint64_t>();
    auto res = ar::train_ar(pet, cond ? &ct : nullptr, acfg, seed);
    diff::write_checkpoint(out / "ar" / (name + ".ckp"), ar::to_checkpoint(res.model, {{"variant", name}, {"seed", seed}}));
    std::ostringstream log;
    ar::write_log_csv(log, res.log);
    detail::write_text(out / "ar" / (name + "_log.csv"), log.str());
  });
  detail::write_provenance(out, "train-ar", cfg, seeds, {{"train_sequences", pet.sequences.size()}});
}

/// Trained models needed by the configured maps.
struct LoadedModels {
  vq::VQGan<float> pet;
  std::optional<vq::VQGan<float>> ct;
  std::optional<ar::ARModel<float>> cond;
  std::optional<ar::ARModel<float>> uncond;

  anomaly::Models for_kind(const MapKind& k) const {
    if (k.conditioned) return {&pet, &*ct, &*cond};
    return {&pet, nullptr, &*uncond};
  }
};

inline std::uint64_t case_seed(std::uint64_t master, const std::string& kind, const std::string& id) {
  return derive_seed(master, "detect/" + kind + "/" + id);
}

/// Anomaly map of one case. `stack_out`, when given, receives the
/// reconstruction stack of KDE maps.
inline Volume compute_map(const phantoms::PairedVolume& v, const anomaly::Models& m, const MapKind& kind,
                          const DetectConfig& d, std::uint64_t seed, json* sidecar = nullptr) {
  Volume map;
  json side{{"id", v.id}, {"map_kind", kind.name}, {"t", d.t}, {"seed", seed}};
  if (kind.kde) {
    anomaly::SampleConfig sc{d.n_seq, d.n_dec, d.t, d.dropout, seed};
    const auto stack = anomaly::sample_reconstructions(v, m, sc);
    map = anomaly::kde_anomaly_map(stack.volumes, v.pet, d.kde);
    side.update({{"kernel", anomaly::kernel_name(d.kde.kernel)},
                 {"epsilon", d.kde.epsilon},
                 {"one_sided", d.kde.one_sided},
                 {"floor", d.kde.floor},
                 {"n_seq", d.n_seq},
                 {"n_dec", d.n_dec},
                 {"dropout", d.dropout},
                 {"masked_tokens", stack.masked}});
  } else {
    map = anomaly::residual_map(v.pet, anomaly::healed_reconstruction(v, m, d.t, seed));
    side.update({{"kernel", nullptr}, {"epsilon", nullptr}, {"n_seq", 1}, {"n_dec", 1}, {"dropout", false}});
  }
  if (sidecar) *sidecar = std::move(side);
  return map;
}

/// detect: anomaly maps for every case of the detection split.
inline void run_detect(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  const auto manifest = detail::read_manifest(out, "detect");
  LoadedModels models{detail::read_vq(out, "pet", "detect"), std::nullopt, std::nullopt, std::nullopt};
  if (cfg.needs(true)) {
    models.ct = detail::read_vq(out, "ct", "detect");
    models.cond = detail::read_ar(out, true, "detect");
  }
  if (cfg.needs(false)) models.uncond = detail::read_ar(out, false, "detect");
  const auto cases = manifest.subset(cfg.detect.split);
  std::vector<MapKind> kinds;
  for (const auto& m : cfg.detect.maps) kinds.push_back(parse_map_kind(m));
  for (const auto& k : kinds) fs::create_directories(out / "maps" / k.name);
  detail::say(opt, "detect: " + std::to_string(cases.size()) + " cases x " + std::to_string(kinds.size()) + " maps");
  parallel_for(cases.size() * kinds.size(), opt.workers, [&](std::size_t job) {
    const auto& e = *cases[job / kinds.size()];
    const auto& kind = kinds[job % kinds.size()];
    detail::need(out / e.path, "gen", "detect");
    const auto v = phantoms::read_volume(out / e.path);
    json side;
    const auto map = compute_map(v, models.for_kind(kind), kind, cfg.detect, case_seed(cfg.seed, kind.name, e.id), &side);
    anomaly::write_anomaly_map(out / "maps" / kind.name / (e.id + ".pvl"), map, e.id, side);
    if (opt.png) opt.png(out / "png" / "maps" / kind.name / (e.id + ".png"), map);
  });
  detail::write_provenance(out, "detect", cfg, {{"master", cfg.seed}, {"per_case", "derive_seed(master, detect/<kind>/<id>)"}},
                           {{"cases", cases.size()}, {"maps", cfg.detect.maps}});
}

// ---------------------------------------------------------------------------
// Evaluation

struct KindScores {
  std::vector<double> best_dice;
  std::vector<double> auprc;
};

struct EvalResult {
  std::vector<seg::CaseMetrics> rows;
  std::map<std::string, KindScores> scores;  // keyed by map_kind
  std::vector<std::string> order;            // map kinds in report order
  std::size_t cases = 0;
  std::size_t skipped_lesion_free = 0;
  json summary;
};

/// Scores one map against ground truth; grown rows also need the uptake.
inline std::pair<seg::CaseMetrics, seg::Auprc> score_map(const Volume& map, const phantoms::PairedVolume& v,
                                                         const std::string& kind_name, bool grown, const EvalConfig& e) {
  seg::CaseMetrics row;
  row.id = v.id;
  row.map_kind = kind_name;
  seg::Auprc a;
  if (grown) {
    const auto b = seg::best_grown_dice(map, v.pet, v.mask, e.fraction, e.quantiles);
    row.best_dice = b.dice;
    row.best_threshold = b.threshold;
    a = seg::auprc(seg::grown_map(map, v.pet, e.fraction, e.quantiles), v.mask);
  } else {
    const auto b = seg::best_dice(map, v.mask);
    row.best_dice = b.dice;
    row.best_threshold = b.threshold;
    a = seg::auprc(map, v.mask);
  }
  row.auprc = a.score;
  return {row, a};
}

inline json ttest_json(const std::string& a, const std::string& b, const std::string& metric, const seg::TTest& r) {
  return {{"a", a}, {"b", b}, {"metric", metric}, {"t", r.t}, {"p", r.p}, {"df", r.df}};
}

/// eval: per-case metrics on lesion-bearing cases of the detection split,
/// raw and after region growing, with paired t-tests between map kinds.
inline EvalResult run_eval(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  cfg.validate();
  const auto manifest = detail::read_manifest(out, "eval");
  std::vector<const phantoms::ManifestEntry*> cases;
  EvalResult res;
  for (const auto* e : manifest.subset(cfg.detect.split)) {
    if (e->has_lesion) cases.push_back(e);
    else ++res.skipped_lesion_free;
  }
  res.cases = cases.size();
  if (cases.empty()) throw UndefinedMetricError("eval: no lesion-bearing cases in the " +
                                                std::string(phantoms::to_string(cfg.detect.split)) + " split");
  for (const auto& k : cfg.detect.maps) {
    res.order.push_back(k);
    if (cfg.eval.grown) res.order.push_back(k + "_grown");
  }
  // Check every prerequisite before spending time on metrics.
  for (const auto* e : cases)
    for (const auto& k : cfg.detect.maps) detail::need(out / "maps" / k / (e->id + ".pvl"), "detect", "eval");

  const std::size_t per_case = res.order.size();
  std::vector<seg::CaseMetrics> rows(cases.size() * per_case);
  std::vector<std::vector<seg::PRPoint>> curves(rows.size());
  detail::say(opt, "eval: " + std::to_string(cases.size()) + " cases");
  parallel_for(cases.size() * cfg.detect.maps.size(), opt.workers, [&](std::size_t job) {
    const std::size_t c = job / cfg.detect.maps.size(), k = job % cfg.detect.maps.size();
    const auto& name = cfg.detect.maps[k];
    const auto kind = parse_map_kind(name);
    const auto v = phantoms::read_volume(out / cases[c]->path);
    const auto map = anomaly::read_anomaly_map(out / "maps" / name / (cases[c]->id + ".pvl"));
    for (int g = 0; g < (cfg.eval.grown ? 2 : 1); ++g) {
      auto [row, a] = score_map(map, v, g ? name + "_grown" : name, g == 1, cfg.eval);
      if (kind.kde) {
        row.kernel = anomaly::kernel_name(cfg.detect.kde.kernel);
        row.epsilon = cfg.detect.kde.epsilon;
      }
      const std::size_t slot = c * per_case + k * (cfg.eval.grown ? 2 : 1) + static_cast<std::size_t>(g);
      rows[slot] = row;
      curves[slot] = std::move(a.curve);
    }
  });
  res.rows = rows;
  for (const auto& r : rows) {
    res.scores[r.map_kind].best_dice.push_back(r.best_dice);
    res.scores[r.map_kind].auprc.push_back(r.auprc);
  }

  std::ostringstream csv;
  seg::write_metrics_csv(csv, rows);
  detail::write_text(out / "eval" / "metrics.csv", csv.str());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ostringstream c;
    seg::write_curve_csv(c, curves[i]);
    detail::write_text(out / "eval" / "curves" / rows[i].map_kind / (rows[i].id + ".csv"), c.str());
  }

  json means = json::object();
  for (const auto& k : res.order)
    means[k] = {{"best_dice", seg::mean_of(res.scores[k].best_dice)}, {"auprc", seg::mean_of(res.scores[k].auprc)}};
  json tests = json::array();
  auto compare = [&](const std::string& a, const std::string& b) {
    if (res.cases < 2) return;
    tests.push_back(ttest_json(a, b, "best_dice", seg::paired_ttest(res.scores[a].best_dice, res.scores[b].best_dice)));
    tests.push_back(ttest_json(a, b, "auprc", seg::paired_ttest(res.scores[a].auprc, res.scores[b].auprc)));
  };
  for (std::size_t k = 0; k + 1 < cfg.detect.maps.size(); ++k) compare(cfg.detect.maps[k], cfg.detect.maps[k + 1]);
  if (cfg.eval.grown)
    for (const auto& k : cfg.detect.maps) compare(k, k + "_grown");
  res.summary = {{"cases", res.cases},
                 {"skipped_lesion_free", res.skipped_lesion_free},
                 {"split", phantoms::to_string(cfg.detect.split)},
                 {"means", means},
                 {"paired_ttests", tests}};
  detail::write_text(out / "eval" / "summary.json", res.summary.dump(2) + "\n");
  detail::write_provenance(out, "eval", cfg, {{"master", cfg.seed}});
  return res;
}

inline void run_all(const RunConfig& cfg, const fs::path& out, const Options& opt) {
  run_gen(cfg, out, opt);
  run_train_vq(cfg, out, opt);
  run_encode(cfg, out, opt);
  run_train_ar(cfg, out, opt);
  run_detect(cfg, out, opt);
  run_eval(cfg, out, opt);
}

// ---------------------------------------------------------------------------
// Ablation harnesses

/// The full codebook grids: every (M, n_z) pair for the uptake channel, and
/// four anatomy codebooks along the size/dimension trade-off.
inline std::vector<CodebookCell> codebook_cells(const AblateConfig& a) {
  std::vector<CodebookCell> cells;
  if (a.full && a.channel == "pet") {
    for (int m : {64, 128, 256, 512, 1024, 2048})
      for (int d : {32, 64, 128, 256}) cells.push_back({m, d});
  } else if (a.full) {
    cells = {{64, 256}, {256, 128}, {512, 64}, {1024, 32}};
  } else {
    for (int m : a.sizes)
      for (int d : a.dims) cells.push_back({m, d});
  }
  return cells;
}

struct AblationData {
  std::vector<phantoms::PairedVolume> train;
  std::vector<phantoms::PairedVolume> val;  // lesion-bearing validation cases
};

inline AblationData ablation_data(const RunConfig& cfg) {
  auto pc = cfg.phantom;
  pc.seed = derive_seed(cfg.seed, "ablate/gen");
  const auto m = phantoms::split_dataset(static_cast<std::size_t>(cfg.ablate.count), cfg.split,
                                         derive_seed(cfg.seed, "ablate/split"));
  AblationData d;
  for (const auto& e : m.entries) {
    auto v = phantoms::generate_phantom(pc, e.index);
    if (e.split == Split::train) d.train.push_back(std::move(v));
    else if (e.split == Split::val && v.has_lesion()) d.val.push_back(std::move(v));
  }
  if (d.val.empty()) throw UndefinedMetricError("ablate: no lesion-bearing validation phantoms; raise ablate.count");
  return d;
}

inline std::vector<Volume> channel(const std::vector<phantoms::PairedVolume>& vs, bool pet) {
  std::vector<Volume> out;
  for (const auto& v : vs) out.push_back(pet ? v.pet : v.ct);
  return out;
}

inline ar::TokenSet token_set(const vq::VQGan<float>& m, const std::vector<Volume>& vs) {
  ar::TokenSet s{m.codebook.size, {}};
  for (const auto& v : vs) s.sequences.push_back(anomaly::rasterize(m.encode_tokens(v)).tokens);
  return s;
}

/// A small complete pipeline (VQ models and one AR model) at ablation scale.
struct AblationModels {
  vq::VQGan<float> pet;
  std::optional<vq::VQGan<float>> ct;
  std::optional<ar::ARModel<float>> ar;
  anomaly::Models view() const { return {&pet, ct ? &*ct : nullptr, &*ar}; }
};

inline AblationModels train_ablation_models(const RunConfig& cfg, const AblationData& d, vq::VQGanConfig pet_cfg,
                                            std::optional<vq::VQGanConfig> ct_cfg, std::uint64_t seed,
                                            const vq::VQGan<float>* pet_pretrained = nullptr) {
  const auto pets = channel(d.train, true);
  pet_cfg.steps = cfg.ablate.vq_steps;
  AblationModels m{pet_pretrained ? *pet_pretrained : vq::train_vqgan(pets, pet_cfg, derive_seed(seed, "pet")).model,
                   std::nullopt, std::nullopt};
  const auto pet_tokens = token_set(m.pet, pets);
  ar::TokenSet ct_tokens;
  if (ct_cfg) {
    ct_cfg->steps = cfg.ablate.vq_steps;
    const auto cts = channel(d.train, false);
    m.ct = vq::train_vqgan(cts, *ct_cfg, derive_seed(seed, "ct"), 1.0).model;
    ct_tokens = token_set(*m.ct, cts);
  }
  auto acfg = cfg.ar;
  acfg.steps = cfg.ablate.ar_steps;
  acfg.vocabulary = pet_tokens.vocabulary;
  acfg.seq_len = static_cast<int>(pet_tokens.sequences.front().size());
  acfg.cond_vocabulary = ct_cfg ? ct_tokens.vocabulary : 0;
  acfg.cond_len = ct_cfg ? static_cast<int>(ct_tokens.sequences.front().size()) : 0;
  m.ar = ar::train_ar(pet_tokens, ct_cfg ? &ct_tokens : nullptr, acfg, derive_seed(seed, "ar")).model;
  return m;
}

struct CellScore {
  double best_dice = 0;
  double auprc = 0;
};

inline CellScore mean_scores(const std::vector<Volume>& maps, const std::vector<phantoms::PairedVolume>& cases) {
  std::vector<double> d, a;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    d.push_back(seg::best_dice(maps[i], cases[i].mask).dice);
    a.push_back(seg::auprc(maps[i], cases[i].mask).score);
  }
  return {seg::mean_of(d), seg::mean_of(a)};
}

/// Codebook grid: for each cell trains the varied VQ model plus an AR
/// model, then scores residual maps on lesion-bearing validation cases.
inline std::string ablate_codebook(const RunConfig& cfg, const AblationData& data, const Options& opt) {
  const auto cells = codebook_cells(cfg.ablate);
  const bool ct = cfg.ablate.channel == "ct";
  if (cfg.ablate.full)
    std::cerr << "warning: full codebook grid (" << cells.size()
              << " cells) trains one VQ-GAN and one transformer per cell and takes hours\n";
  // The anatomy grid shares one uptake model, as the anatomy codebook is the
  // only varied factor.
  std::optional<vq::VQGan<float>> shared_pet;
  if (ct) {
    auto pc = cfg.vq_pet;
    pc.steps = cfg.ablate.vq_steps;
    shared_pet = vq::train_vqgan(channel(data.train, true), pc, derive_seed(cfg.seed, "ablate/codebook/pet")).model;
  }
  std::vector<std::string> lines(cells.size());
  parallel_for(cells.size(), opt.workers, [&](std::size_t i) {
    const auto cell = cells[i];
    const std::string tag = "M" + std::to_string(cell.size) + "_nz" + std::to_string(cell.dim);
    std::string status = "ok";
    CellScore s{};
    try {
      auto varied = ct ? cfg.vq_ct : cfg.vq_pet;
      varied.codebook_size = cell.size;
      varied.code_dim = cell.dim;
      const auto seed = derive_seed(cfg.seed, "ablate/codebook/" + cfg.ablate.channel + "/" + tag);
      const auto m = ct ? train_ablation_models(cfg, data, cfg.vq_pet, varied, seed, &*shared_pet)
                        : train_ablation_models(cfg, data, varied, std::nullopt, seed);
      std::vector<Volume> maps;
      for (const auto& v : data.val)
        maps.push_back(anomaly::residual_map(v.pet, anomaly::healed_reconstruction(v, m.view(), cfg.detect.t,
                                                                                  derive_seed(seed, v.id))));
      s = mean_scores(maps, data.val);
    } catch (const std::exception& e) {
      status = "error: " + detail::csv_safe(e.what());
    }
    detail::say(opt, "ablate codebook " + tag + ": " + status);
    lines[i] = cfg.ablate.channel + "," + std::to_string(cell.size) + "," + std::to_string(cell.dim) + "," +
               detail::fmt(s.best_dice) + "," + detail::fmt(s.auprc) + "," + status + "\n";
  });
  std::string csv = "channel,vocabulary,dimension,best_dice,auprc,status\n";
  for (const auto& l : lines) csv += l;
  return csv;
}

/// Kernel x epsilon grid over one conditioned pipeline; reconstruction
/// stacks are sampled once and shared by all cells.
inline std::string ablate_kde(const RunConfig& cfg, const AblationData& data, const Options& opt) {
  const auto seed = derive_seed(cfg.seed, "ablate/kde");
  const auto m = train_ablation_models(cfg, data, cfg.vq_pet, cfg.vq_ct, seed);
  std::vector<std::vector<Volume>> stacks(data.val.size());
  parallel_for(data.val.size(), opt.workers, [&](std::size_t i) {
    anomaly::SampleConfig sc{cfg.ablate.n_seq, cfg.ablate.n_dec, cfg.detect.t, cfg.detect.dropout,
                             derive_seed(seed, data.val[i].id)};
    stacks[i] = anomaly::sample_reconstructions(data.val[i], m.view(), sc).volumes;
  });
  struct Cell {
    std::string kernel;
    double epsilon;
  };
  std::vector<Cell> cells;
  for (const auto& k : cfg.ablate.kernels)
    for (double e : cfg.ablate.epsilons) cells.push_back({k, e});
  std::vector<std::string> lines(cells.size());
  parallel_for(cells.size(), opt.workers, [&](std::size_t i) {
    std::string status = "ok";
    CellScore s{};
    try {
      auto kc = cfg.detect.kde;
      kc.kernel = anomaly::parse_kernel(cells[i].kernel);
      kc.epsilon = cells[i].epsilon;
      std::vector<Volume> maps;
      for (std::size_t c = 0; c < data.val.size(); ++c) maps.push_back(anomaly::kde_anomaly_map(stacks[c], data.val[c].pet, kc));
      s = mean_scores(maps, data.val);
    } catch (const std::exception& e) {
      status = "error: " + detail::csv_safe(e.what());
    }
    detail::say(opt, "ablate kde " + cells[i].kernel + " eps=" + detail::fmt(cells[i].epsilon) + ": " + status);
    lines[i] = cells[i].kernel + "," + detail::fmt(cells[i].epsilon) + "," + detail::fmt(s.best_dice) + "," +
               detail::fmt(s.auprc) + "," + status + "\n";
  });
  std::string csv = "kernel,epsilon,best_dice,auprc,status\n";
  for (const auto& l : lines) csv += l;
  return csv;
}

/// ablate: `kind` is "codebook", "kde" or "all".
inline void run_ablate(const RunConfig& cfg, const fs::path& out, const std::string& kind, const Options& opt) {
  cfg.validate();
  if (kind != "codebook" && kind != "kde" && kind != "all")
    throw ConfigError("ablate: kind must be codebook, kde or all");
  const auto data = ablation_data(cfg);
  detail::say(opt, "ablate: " + std::to_string(data.train.size()) + " training and " + std::to_string(data.val.size()) +
                       " lesion-bearing validation phantoms");
  if (kind != "kde") detail::write_text(out / "ablate" / "codebook.csv", ablate_codebook(cfg, data, opt));
  if (kind != "codebook") detail::write_text(out / "ablate" / "kde.csv", ablate_kde(cfg, data, opt));
  detail::write_provenance(out, "ablate", cfg, {{"master", cfg.seed}, {"per_cell", "derive_seed(master, ablate/<grid>/<cell>)"}},
                           {{"kind", kind}});
}

}  // namespace anomalens::pipeline
