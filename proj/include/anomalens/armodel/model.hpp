#pragma once

// Autoregressive token model. Each layer runs pre-normalized causal
// self-attention, then cross-attention over the embedded conditioning
// sequence (conditional models only), then a feed-forward block, all with
// residual connections. Position i is predicted from BOS and tokens < i.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomalens/armodel/attention.hpp"
#include "anomalens/diff/checkpoint.hpp"
#include "anomalens/diff/nn.hpp"
#include "anomalens/diff/optim.hpp"

namespace anomalens::ar {

enum class Backend { exact, favor };

struct ARConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 128;
  int ff_mult = 4;
  int vocabulary = 256;       // M; BOS is index M in the input table
  int cond_vocabulary = 0;    // M_c; 0 means unconditional
  int seq_len = 64;
  int cond_len = 64;
  Backend backend = Backend::exact;
  int favor_features = 128;   // random features per head
  double lr = 1e-3;
  double gamma = 0.9999;
  int steps = 1000;
  int batch = 8;

  bool conditional() const { return cond_vocabulary > 0; }
  int head_dim() const { return d_model / heads; }

  static ARConfig desk() { return {}; }
  static ARConfig large() {
    ARConfig c;
    c.layers = 16;
    c.heads = 8;
    c.d_model = 256;
    return c;
  }

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1) throw ConfigError("ar: layers, heads and d_model must be positive");
    if (d_model % heads != 0) throw ConfigError("ar: d_model must be divisible by heads");
    if (ff_mult < 1) throw ConfigError("ar.ff_mult must be positive");
    if (vocabulary < 1 || vocabulary > 65535) throw ConfigError("ar.vocabulary must lie in [1, 65535]");
    if (cond_vocabulary < 0 || cond_vocabulary > 65535) throw ConfigError("ar.cond_vocabulary must lie in [0, 65535]");
    if (seq_len < 1 || (conditional() && cond_len < 1)) throw ConfigError("ar sequence lengths must be positive");
    if (backend == Backend::favor && favor_features < 1) throw ConfigError("ar.favor_features must be positive");
    if (steps < 1 || batch < 1) throw ConfigError("ar.steps and ar.batch must be positive");
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Backend, {{Backend::exact, "exact"}, {Backend::favor, "favor"}})

inline void to_json(nlohmann::json& j, const ARConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"heads", c.heads},
                     {"d_model", c.d_model},
                     {"ff_mult", c.ff_mult},
                     {"vocabulary", c.vocabulary},
                     {"cond_vocabulary", c.cond_vocabulary},
                     {"seq_len", c.seq_len},
                     {"cond_len", c.cond_len},
                     {"backend", c.backend},
                     {"favor_features", c.favor_features},
                     {"lr", c.lr},
                     {"gamma", c.gamma},
                     {"steps", c.steps},
                     {"batch", c.batch}};
}

inline void from_json(const nlohmann::json& j, ARConfig& c) {
  c = ARConfig{};
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "large") c = ARConfig::large();
    else if (p != "desk") throw ConfigError("ar.preset must be 'desk' or 'large'");
  }
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("layers", c.layers);
  get("heads", c.heads);
  get("d_model", c.d_model);
  get("ff_mult", c.ff_mult);
  get("vocabulary", c.vocabulary);
  get("cond_vocabulary", c.cond_vocabulary);
  get("seq_len", c.seq_len);
  get("cond_len", c.cond_len);
  if (j.contains("backend")) {
    const auto b = j.at("backend").get<std::string>();
    if (b == "exact") c.backend = Backend::exact;
    else if (b == "favor") c.backend = Backend::favor;
    else throw ConfigError("ar.backend must be 'exact' or 'favor'");
  }
  get("favor_features", c.favor_features);
  get("lr", c.lr);
  get("gamma", c.gamma);
  get("steps", c.steps);
  get("batch", c.batch);
}

using Tokens = std::vector<int>;

template <class T>
struct Linear {
  Tensor<T> w, b;
  Tensor<T> operator()(const Tensor<T>& x) const { return diff::linear(x, w, b); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  Tensor<T> operator()(const Tensor<T>& x) const { return diff::layer_norm(x, gamma, beta); }
};

template <class T>
struct AttentionWeights {
  Linear<T> q, k, v, o;
};

template <class T>
struct Block {
  LayerNorm<T> ln_self, ln_cross, ln_ff;
  AttentionWeights<T> self, cross;
  Linear<T> ff_in, ff_out;
  std::shared_ptr<const std::vector<RowMat<T>>> features;  // FAVOR+ only
};

template <class T>
class ARModel {
 public:
  ARModel() = default;
  ARModel(const ARConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(seed, "ar.init"));
    const int d = cfg.d_model;
    // Residual projections shrink with depth so the stream variance stays
    // roughly constant at init.
    const double sd = 0.02, sd_out = 0.02 / std::sqrt(2.0 * cfg.layers);
    tok_emb_ = normal({cfg.vocabulary + 1, d}, sd, rng);
    pos_emb_ = normal({cfg.seq_len, d}, sd, rng);
    if (cfg.conditional()) {
      cond_emb_ = normal({cfg.cond_vocabulary, d}, sd, rng);
      cond_pos_ = normal({cfg.cond_len, d}, sd, rng);
    }
    for (int l = 0; l < cfg.layers; ++l) {
      Block<T> b;
      b.ln_self = layer_norm(d);
      b.self = attention_weights(d, sd, sd_out, rng);
      if (cfg.conditional()) {
        b.ln_cross = layer_norm(d);
        b.cross = attention_weights(d, sd, sd_out, rng);
      }
      b.ln_ff = layer_norm(d);
      b.ff_in = linear(cfg.ff_mult * d, d, sd, rng);
      b.ff_out = linear(d, cfg.ff_mult * d, sd_out, rng);
      if (cfg.backend == Backend::favor) {
        auto f = std::make_shared<std::vector<RowMat<T>>>();
        for (int h = 0; h < cfg.heads; ++h)
          f->push_back(favor_features<T>(cfg.favor_features, cfg.head_dim(),
                                         derive_seed(derive_seed(seed, "ar.favor"), static_cast<std::uint64_t>(l * cfg.heads + h))));
        b.features = std::move(f);
      }
      blocks_.push_back(std::move(b));
    }
    ln_out_ = layer_norm(d);
    head_ = linear(cfg.vocabulary, d, sd, rng);
  }

  const ARConfig& config() const { return cfg_; }
  int bos() const { return cfg_.vocabulary; }

  /// Logits [L, M] for predicting tokens[i] from BOS, tokens[<i] and cond.
  Tensor<T> forward(const Tokens& tokens, const Tokens* cond) const {
    const int L = static_cast<int>(tokens.size());
    require(L >= 1 && L <= cfg_.seq_len,
            "ar_forward: sequence length " + std::to_string(L) + " outside [1, " + std::to_string(cfg_.seq_len) + "]");
    for (int t : tokens)
      require(t >= 0 && t < cfg_.vocabulary, "ar_forward: token " + std::to_string(t) + " outside vocabulary of " +
                                                 std::to_string(cfg_.vocabulary));
    Tensor<T> c_emb;
    if (cfg_.conditional()) {
      require(cond && !cond->empty(), "ar_forward: conditional model needs a nonempty conditioning sequence");
      require(static_cast<int>(cond->size()) <= cfg_.cond_len, "ar_forward: conditioning sequence too long");
      for (int t : *cond)
        require(t >= 0 && t < cfg_.cond_vocabulary, "ar_forward: conditioning token " + std::to_string(t) +
                                                        " outside vocabulary of " + std::to_string(cfg_.cond_vocabulary));
      c_emb = diff::add(diff::embedding(cond_emb_, std::span<const int>(*cond)), positions(cond_pos_, static_cast<int>(cond->size())));
    } else {
      require(!cond || cond->empty(), "ar_forward: unconditional model given a conditioning sequence");
    }

    Tokens shifted(static_cast<std::size_t>(L));
    shifted[0] = bos();
    std::copy(tokens.begin(), tokens.end() - 1, shifted.begin() + 1);
    Tensor<T> h = diff::add(diff::embedding(tok_emb_, std::span<const int>(shifted)), positions(pos_emb_, L));

    for (const auto& b : blocks_) {
      h = diff::add(h, self_attention(b, b.ln_self(h)));
      if (cfg_.conditional()) {
        const auto x = b.ln_cross(h);
        h = diff::add(h, b.cross.o(attention(b.cross.q(x), b.cross.k(c_emb), b.cross.v(c_emb), cfg_.heads, false)));
      }
      h = diff::add(h, b.ff_out(diff::relu(b.ff_in(b.ln_ff(h)))));
    }
    return head_(ln_out_(h));
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
    if (cfg_.conditional()) {
      out.push_back({"cond_emb", cond_emb_});
      out.push_back({"cond_pos", cond_pos_});
    }
    auto lin = [&](const std::string& n, const Linear<T>& l) {
      out.push_back({n + ".w", l.w});
      out.push_back({n + ".b", l.b});
    };
    auto ln = [&](const std::string& n, const LayerNorm<T>& l) {
      out.push_back({n + ".gamma", l.gamma});
      out.push_back({n + ".beta", l.beta});
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string p = "layer" + std::to_string(i);
      ln(p + ".ln_self", b.ln_self);
      lin(p + ".self.q", b.self.q);
      lin(p + ".self.k", b.self.k);
      lin(p + ".self.v", b.self.v);
      lin(p + ".self.o", b.self.o);
      if (cfg_.conditional()) {
        ln(p + ".ln_cross", b.ln_cross);
        lin(p + ".cross.q", b.cross.q);
        lin(p + ".cross.k", b.cross.k);
        lin(p + ".cross.v", b.cross.v);
        lin(p + ".cross.o", b.cross.o);
      }
      ln(p + ".ln_ff", b.ln_ff);
      lin(p + ".ff_in", b.ff_in);
      lin(p + ".ff_out", b.ff_out);
    }
    ln("ln_out", ln_out_);
    lin("head", head_);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// FAVOR+ feature matrices, one per head and layer, for checkpointing.
  std::vector<std::shared_ptr<const std::vector<RowMat<T>>>> features() const {
    std::vector<std::shared_ptr<const std::vector<RowMat<T>>>> out;
    for (const auto& b : blocks_) out.push_back(b.features);
    return out;
  }
  void set_features(std::size_t layer, std::vector<RowMat<T>> f) {
    blocks_.at(layer).features = std::make_shared<const std::vector<RowMat<T>>>(std::move(f));
  }

 private:
  static Tensor<T> normal(diff::Shape s, double sd, Rng& rng) {
    std::vector<T> v(diff::numel(s));
    for (auto& x : v) x = static_cast<T>(sd * standard_normal(rng));
    return Tensor<T>::parameter(std::move(s), std::move(v));
  }
  static Linear<T> linear(int out, int in, double sd, Rng& rng) {
    return {normal({out, in}, sd, rng), Tensor<T>::parameter({out}, std::vector<T>(static_cast<std::size_t>(out), T(0)))};
  }
  static LayerNorm<T> layer_norm(int d) {
    return {Tensor<T>::parameter({d}, std::vector<T>(static_cast<std::size_t>(d), T(1))),
            Tensor<T>::parameter({d}, std::vector<T>(static_cast<std::size_t>(d), T(0)))};
  }
  static AttentionWeights<T> attention_weights(int d, double sd, double sd_out, Rng& rng) {
    return {linear(d, d, sd, rng), linear(d, d, sd, rng), linear(d, d, sd, rng), linear(d, d, sd_out, rng)};
  }

  // The first L rows of a positional table, as a differentiable lookup.
  static Tensor<T> positions(const Tensor<T>& table, int L) {
    std::vector<int> idx(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) idx[static_cast<std::size_t>(i)] = i;
    return diff::embedding(table, std::span<const int>(idx));
  }

  Tensor<T> self_attention(const Block<T>& b, const Tensor<T>& x) const {
    const auto q = b.self.q(x), k = b.self.k(x), v = b.self.v(x);
    if (cfg_.backend == Backend::favor) return b.self.o(favor_attention(q, k, v, cfg_.heads, true, b.features));
    return b.self.o(attention(q, k, v, cfg_.heads, true));
  }

  ARConfig cfg_;
  Tensor<T> tok_emb_, pos_emb_, cond_emb_, cond_pos_;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> ln_out_;
  Linear<T> head_;
};

/// Logits [L, M] as plain row-major values.
template <class T>
std::vector<T> ar_forward(const ARModel<T>& model, const Tokens& tokens, const Tokens* cond) {
  diff::NoGradGuard ng;
  const auto logits = model.forward(tokens, cond);
  return {logits.values().begin(), logits.values().end()};
}

/// Per-row softmax of `logits` [L, M].
template <class T>
std::vector<T> softmax_rows(std::span<const T> logits, int M) {
  std::vector<T> p(logits.size());
  for (std::size_t r = 0; r < logits.size() / static_cast<std::size_t>(M); ++r)
    diff::detail::softmax_row(logits.data() + r * M, p.data() + r * M, M);
  return p;
}

/// Probability the model assigns to each observed token given its prefix.
template <class T>
std::vector<double> token_likelihoods(const ARModel<T>& model, const Tokens& tokens, const Tokens* cond) {
  const int M = model.config().vocabulary;
  const auto p = softmax_rows<T>(ar_forward(model, tokens, cond), M);
  std::vector<double> out(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) out[i] = static_cast<double>(p[i * M + static_cast<std::size_t>(tokens[i])]);
  return out;
}

// ---------------------------------------------------------------------------
// Token files

inline constexpr std::string_view kTokenMagic = "TOK1";

/// One encoded latent grid, raster order.
struct TokenGrid {
  Shape3 grid{};
  int vocabulary = 0;
  Tokens tokens;
  std::string id;
  bool operator==(const TokenGrid&) const = default;
};

inline void write_tokens(const TokenGrid& t, const std::filesystem::path& path) {
  require(t.tokens.size() == voxel_count(t.grid), "write_tokens: token count does not match grid");
  require(t.vocabulary >= 1 && t.vocabulary <= 65536, "write_tokens: vocabulary must fit u16");
  std::vector<std::uint16_t> raw(t.tokens.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    require(t.tokens[i] >= 0 && t.tokens[i] < t.vocabulary, "write_tokens: token outside vocabulary");
    raw[i] = static_cast<std::uint16_t>(t.tokens[i]);
  }
  std::vector<std::uint8_t> payload;
  container::append_le(payload, std::span<const std::uint16_t>(raw));
  container::write(path, kTokenMagic,
                   {{"version", 1}, {"grid", {t.grid[0], t.grid[1], t.grid[2]}}, {"vocabulary", t.vocabulary},
                    {"dtype", "u16le"}, {"order", "raster"}, {"id", t.id}},
                   payload);
}

inline TokenGrid read_tokens(const std::filesystem::path& path) {
  const auto raw = container::read(path, kTokenMagic);
  TokenGrid t;
  try {
    const auto g = raw.header.at("grid").get<std::vector<int>>();
    if (g.size() != 3) throw FormatError("grid: expected three extents");
    t.grid = {g[0], g[1], g[2]};
    t.vocabulary = raw.header.at("vocabulary").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header: ") + e.what());
  }
  t.id = raw.header.value("id", std::string{});
  std::size_t off = 0;
  const auto v = container::take_le<std::uint16_t>(raw.payload, off, voxel_count(t.grid), "payload");
  if (off != raw.payload.size()) throw FormatError("payload: trailing bytes after token grid");
  t.tokens.assign(v.begin(), v.end());
  for (int x : t.tokens)
    if (x >= t.vocabulary) throw FormatError("payload: token " + std::to_string(x) + " outside declared vocabulary");
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct ARLogRow {
  int step = 0;
  double nll = 0;  // mean next-token cross-entropy over the batch, nats
  double lr = 0;
};

inline void write_log_csv(std::ostream& os, const std::vector<ARLogRow>& rows) {
  os << "step,nll,lr\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.step, r.nll, r.lr);
    os << buf;
  }
}

/// Sequences sharing one vocabulary, e.g. all encoded volumes of a split.
struct TokenSet {
  int vocabulary = 0;
  std::vector<Tokens> sequences;
};

struct ARTrainResult {
  ARModel<float> model;
  std::vector<ARLogRow> log;
};

/// Minimizes next-token cross-entropy with ADAM and exponential decay.
/// `cond`, when given, must be index-aligned with `main`.
inline ARTrainResult train_ar(const TokenSet& main, const TokenSet* cond, const ARConfig& cfg, std::uint64_t seed,
                              const std::function<void(const ARLogRow&)>& on_step = {}) {
  cfg.validate();
  require(!main.sequences.empty(), "train_ar: no training sequences");
  require(main.vocabulary == cfg.vocabulary, "train_ar: token vocabulary " + std::to_string(main.vocabulary) +
                                                 " does not match model vocabulary " + std::to_string(cfg.vocabulary));
  require(cfg.conditional() == (cond != nullptr), "train_ar: conditioning sequences must be given iff the model is conditional");
  if (cond) {
    require(cond->vocabulary == cfg.cond_vocabulary, "train_ar: conditioning vocabulary " + std::to_string(cond->vocabulary) +
                                                         " does not match model " + std::to_string(cfg.cond_vocabulary));
    require(cond->sequences.size() == main.sequences.size(), "train_ar: conditioning and main sequence counts differ");
  }

  ARTrainResult out{ARModel<float>(cfg, seed), {}};
  auto params = out.model.parameters();
  diff::AdamState state;
  Rng rng(derive_seed(seed, "ar.train"));
  const auto n = static_cast<std::int64_t>(main.sequences.size());
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<float> total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = static_cast<std::size_t>(uniform_int(rng, 0, n - 1));
      const Tokens& seq = main.sequences[i];
      const auto logits = out.model.forward(seq, cond ? &cond->sequences[i] : nullptr);
      const auto ce = diff::cross_entropy(logits, std::span<const int>(seq));
      total = total.defined() ? diff::add(total, ce) : ce;
    }
    total = diff::scale(total, 1.0f / static_cast<float>(cfg.batch));
    ARLogRow row{step, static_cast<double>(total.item()), diff::lr_schedule(cfg.lr, cfg.gamma, step)};
    if (!std::isfinite(row.nll)) throw NumericError("train_ar: cross-entropy is non-finite at step " + std::to_string(step));
    diff::zero_grad(params);
    diff::backward(total);
    diff::adam_step(params, state, row.lr);
    out.log.push_back(row);
    if (on_step) on_step(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline diff::Checkpoint to_checkpoint(const ARModel<float>& m, nlohmann::json meta) {
  diff::Checkpoint ckp;
  meta["kind"] = "ar";
  meta["config"] = m.config();
  ckp.meta = std::move(meta);
  for (const auto& [n, t] : m.named_parameters()) diff::store(ckp, n, t);
  const auto feats = m.features();
  for (std::size_t l = 0; l < feats.size(); ++l) {
    if (!feats[l]) continue;
    for (std::size_t h = 0; h < feats[l]->size(); ++h) {
      const auto& f = (*feats[l])[h];
      ckp.arrays.push_back({"layer" + std::to_string(l) + ".favor.h" + std::to_string(h),
                            {static_cast<int>(f.rows()), static_cast<int>(f.cols())},
                            std::vector<float>(f.data(), f.data() + f.size())});
    }
  }
  return ckp;
}

template <class T = float>
ARModel<T> ar_from_checkpoint(const diff::Checkpoint& ckp) {
  if (ckp.meta.value("kind", std::string{}) != "ar") throw FormatError("meta.kind: not an autoregressive checkpoint");
  const auto cfg = ckp.meta.at("config").get<ARConfig>();
  ARModel<T> m(cfg, 0);
  for (auto& [n, t] : m.named_parameters()) diff::load(ckp, n, t);
  if (cfg.backend == Backend::favor)
    for (int l = 0; l < cfg.layers; ++l) {
      std::vector<RowMat<T>> f;
      for (int h = 0; h < cfg.heads; ++h) {
        const auto& a = ckp.at("layer" + std::to_string(l) + ".favor.h" + std::to_string(h));
        if (a.shape != diff::Shape{cfg.favor_features, cfg.head_dim()})
          throw FormatError("params." + a.name + ": unexpected feature shape " + diff::shape_str(a.shape));
        RowMat<T> r(cfg.favor_features, cfg.head_dim());
        for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = static_cast<T>(a.values[static_cast<std::size_t>(i)]);
        f.push_back(std::move(r));
      }
      m.set_features(static_cast<std::size_t>(l), std::move(f));
    }
  return m;
}

}  // namespace anomalens::ar
