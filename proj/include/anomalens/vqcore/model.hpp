#pragma once

// Convolutional VQ-GAN: strided encoder with residual stages, EMA-codebook
// quantizer, mirrored decoder with dropout before the last upsampling, and
// a patch discriminator.

#include <string>
#include <vector>

#include <json.hpp>

#include "anomalens/diff/checkpoint.hpp"
#include "anomalens/diff/conv.hpp"
#include "anomalens/diff/nn.hpp"
#include "anomalens/vqcore/codebook.hpp"

namespace anomalens::vq {

using diff::ConvGeometry;

struct VQGanConfig {
  std::vector<int> channels{16, 32, 64};  // one per stride-2 stage
  int res_blocks = 1;
  int codebook_size = 256;  // M
  int code_dim = 128;       // n_z
  double dropout = 0.05;
  std::vector<int> disc_channels{8, 16, 32};
  // Ten times the large-data rate: at desk step counts 1e-4 leaves the
  // reconstructions no better than the dataset mean.
  double lr_generator = 1e-3;
  double lr_discriminator = 5e-4;
  double gamma = 0.9999;
  double beta = 0.25;
  double ema_decay = 0.99;
  double laplace_eps = 1e-5;
  double adversarial_weight = 0.1;
  double adversarial_start = 0.25;  // fraction of steps before the GAN term
  double restart_threshold = 0.1;   // EMA count below which a code is re-seeded
  int steps = 1500;
  int batch = 3;

  int downsample() const { return 1 << channels.size(); }
  void validate() const {
    if (channels.empty()) throw ConfigError("vq.channels must not be empty");
    if (codebook_size < 1 || code_dim < 1) throw ConfigError("vq codebook size and dimension must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("vq.dropout must lie in [0,1)");
    if (steps < 1 || batch < 1) throw ConfigError("vq.steps and vq.batch must be positive");
  }
};

inline void to_json(nlohmann::json& j, const VQGanConfig& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"res_blocks", c.res_blocks},
                     {"codebook_size", c.codebook_size},
                     {"code_dim", c.code_dim},
                     {"dropout", c.dropout},
                     {"disc_channels", c.disc_channels},
                     {"lr_generator", c.lr_generator},
                     {"lr_discriminator", c.lr_discriminator},
                     {"gamma", c.gamma},
                     {"beta", c.beta},
                     {"ema_decay", c.ema_decay},
                     {"laplace_eps", c.laplace_eps},
                     {"adversarial_weight", c.adversarial_weight},
                     {"adversarial_start", c.adversarial_start},
                     {"restart_threshold", c.restart_threshold},
                     {"steps", c.steps},
                     {"batch", c.batch}};
}

inline void from_json(const nlohmann::json& j, VQGanConfig& c) {
  c = VQGanConfig{};
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("channels", c.channels);
  get("res_blocks", c.res_blocks);
  get("codebook_size", c.codebook_size);
  get("code_dim", c.code_dim);
  get("dropout", c.dropout);
  get("disc_channels", c.disc_channels);
  get("lr_generator", c.lr_generator);
  get("lr_discriminator", c.lr_discriminator);
  get("gamma", c.gamma);
  get("beta", c.beta);
  get("ema_decay", c.ema_decay);
  get("laplace_eps", c.laplace_eps);
  get("adversarial_weight", c.adversarial_weight);
  get("adversarial_start", c.adversarial_start);
  get("restart_threshold", c.restart_threshold);
  get("steps", c.steps);
  get("batch", c.batch);
}

using LatentGrid = Grid3<int>;

template <class T>
using Tensor = diff::Tensor<T>;

template <class T>
struct ConvLayer {
  Tensor<T> w, b;
  ConvGeometry geometry;
  bool transposed = false;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return transposed ? diff::conv_transpose3d(x, w, b, geometry) : diff::conv3d(x, w, b, geometry);
  }
};

/// Uniform Kaiming-style init, bound = gain * sqrt(3 / fan_in). A gain of
/// sqrt(2) preserves activation variance through ReLU layers; residual
/// branches end in a layer with a small gain so each block starts close to
/// the identity. Transposed layers use their effective fan-in.
inline constexpr double kReluGain = 1.4142135623730951;
inline constexpr double kResidualGain = 0.1;

template <class T>
ConvLayer<T> make_conv(int in, int out, ConvGeometry g, bool transposed, Rng& rng, double gain = kReluGain) {
  const int k3 = g.kernel * g.kernel * g.kernel;
  double fan_in = static_cast<double>(in) * k3;
  if (transposed) fan_in /= static_cast<double>(g.stride * g.stride * g.stride);
  const double bound = gain * std::sqrt(3.0 / fan_in);
  std::vector<T> w(static_cast<std::size_t>(in) * out * k3);
  for (auto& v : w) v = static_cast<T>(uniform(rng, -bound, bound));
  diff::Shape ws = transposed ? diff::Shape{in, out, g.kernel, g.kernel, g.kernel}
                              : diff::Shape{out, in, g.kernel, g.kernel, g.kernel};
  return {Tensor<T>::parameter(ws, std::move(w)), Tensor<T>::parameter({out}, std::vector<T>(static_cast<std::size_t>(out), T(0))),
          g, transposed};
}

template <class T>
struct ResBlock {
  ConvLayer<T> spatial, pointwise;  // 3x3x3 conv, ReLU, 1x1x1 conv, ReLU
  Tensor<T> operator()(const Tensor<T>& x) const {
    return diff::add(x, diff::relu(pointwise(diff::relu(spatial(x)))));
  }
};

inline constexpr ConvGeometry kDown{4, 2, 1};
inline constexpr ConvGeometry kSame{3, 1, 1};
inline constexpr ConvGeometry kPoint{1, 1, 0};

template <class T>
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(const std::vector<int>& channels, Rng& rng) {
    int in = 1;
    for (int c : channels) {
      stages_.push_back(make_conv<T>(in, c, kDown, false, rng));
      in = c;
    }
    head_ = make_conv<T>(in, 1, kSame, false, rng, 1.0);
  }

  /// Patch scores [N,1,d,h,w].
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (const auto& s : stages_) h = diff::relu(s(h));
    return head_(h);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      out.push_back({"disc.stage" + std::to_string(i) + ".w", stages_[i].w});
      out.push_back({"disc.stage" + std::to_string(i) + ".b", stages_[i].b});
    }
    out.push_back({"disc.head.w", head_.w});
    out.push_back({"disc.head.b", head_.b});
    return out;
  }

 private:
  std::vector<ConvLayer<T>> stages_;
  ConvLayer<T> head_;
};

enum class DropoutMode { off, on };

template <class T>
class VQGan {
 public:
  VQGan() = default;
  VQGan(const VQGanConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(seed, "vqgan.init"));
    const auto& ch = cfg.channels;
    const std::size_t S = ch.size();
    int in = 1;
    for (std::size_t s = 0; s < S; ++s) {
      down_.push_back(make_conv<T>(in, ch[s], kDown, false, rng));
      enc_res_.emplace_back();
      for (int r = 0; r < cfg.res_blocks; ++r)
        enc_res_.back().push_back({make_conv<T>(ch[s], ch[s], kSame, false, rng), make_conv<T>(ch[s], ch[s], kPoint, false, rng, kResidualGain)});
      in = ch[s];
    }
    pre_quant_ = make_conv<T>(ch.back(), cfg.code_dim, kPoint, false, rng, 1.0);
    post_quant_ = make_conv<T>(cfg.code_dim, ch.back(), kPoint, false, rng);
    for (std::size_t s = S; s-- > 0;) {
      dec_res_.emplace_back();
      for (int r = 0; r < cfg.res_blocks; ++r)
        dec_res_.back().push_back({make_conv<T>(ch[s], ch[s], kSame, false, rng), make_conv<T>(ch[s], ch[s], kPoint, false, rng, kResidualGain)});
      up_.push_back(make_conv<T>(ch[s], s == 0 ? 1 : ch[s - 1], kDown, true, rng, s == 0 ? 1.0 : kReluGain));
    }
    disc_ = PatchDiscriminator<T>(cfg.disc_channels, rng);
    std::vector<float> init(static_cast<std::size_t>(cfg.codebook_size) * cfg.code_dim);
    for (auto& v : init) v = static_cast<float>(standard_normal(rng));
    codebook = Codebook(cfg.codebook_size, cfg.code_dim, std::move(init));
    codebook.decay = cfg.ema_decay;
    codebook.laplace_eps = cfg.laplace_eps;
    codebook.beta = cfg.beta;
  }

  const VQGanConfig& config() const { return cfg_; }

  /// x[N,1,D,H,W] -> z_e[N,n_z,D/f,H/f,W/f].
  Tensor<T> encode(const Tensor<T>& x) const {
    require(x.rank() == 5 && x.dim(1) == 1, "encode: input must be [N,1,D,H,W]");
    for (int a = 2; a < 5; ++a)
      require(x.dim(static_cast<std::size_t>(a)) % cfg_.downsample() == 0,
              "encode: volume shape must be divisible by " + std::to_string(cfg_.downsample()));
    Tensor<T> h = x;
    for (std::size_t s = 0; s < down_.size(); ++s) {
      h = diff::relu(down_[s](h));
      for (const auto& r : enc_res_[s]) h = r(h);
    }
    return pre_quant_(h);
  }

  /// z_q[N,n_z,d,h,w] -> x_hat[N,1,D,H,W]. Dropout precedes the last
  /// transposed convolution and is active only in DropoutMode::on.
  Tensor<T> decode(const Tensor<T>& zq, DropoutMode mode, Rng* rng) const {
    require(zq.rank() == 5 && zq.dim(1) == cfg_.code_dim, "decode: latent must be [N,n_z,d,h,w]");
    require(mode == DropoutMode::off || rng, "decode: dropout needs a random source");
    Tensor<T> h = diff::relu(post_quant_(zq));
    for (std::size_t s = 0; s < up_.size(); ++s) {
      for (const auto& r : dec_res_[s]) h = r(h);
      const bool last = s + 1 == up_.size();
      if (last && mode == DropoutMode::on) h = diff::dropout(h, cfg_.dropout, *rng, true);
      h = up_[s](h);
      if (!last) h = diff::relu(h);
    }
    return h;
  }

  /// Rearranges z[N,n_z,d,h,w] into vector-major [N*d*h*w, n_z] floats.
  static std::vector<float> to_vectors(const Tensor<T>& z) {
    const int N = z.dim(0), nz = z.dim(1);
    const std::size_t P = static_cast<std::size_t>(z.dim(2)) * z.dim(3) * z.dim(4);
    std::vector<float> out(z.numel());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < nz; ++c)
        for (std::size_t p = 0; p < P; ++p)
          out[(static_cast<std::size_t>(n) * P + p) * nz + c] =
              static_cast<float>(z.values()[(static_cast<std::size_t>(n) * nz + c) * P + p]);
    return out;
  }

  /// Inverse of to_vectors for a latent of shape [N,n_z,grid].
  static std::vector<T> from_vectors(std::span<const float> v, int N, int nz, Shape3 grid) {
    const std::size_t P = voxel_count(grid);
    std::vector<T> out(v.size());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < nz; ++c)
        for (std::size_t p = 0; p < P; ++p)
          out[(static_cast<std::size_t>(n) * nz + c) * P + p] =
              static_cast<T>(v[(static_cast<std::size_t>(n) * P + p) * nz + c]);
    return out;
  }

  Tensor<T> latent_from_indices(const LatentGrid& g) const {
    std::vector<float> vecs(g.size() * static_cast<std::size_t>(cfg_.code_dim));
    for (std::size_t p = 0; p < g.size(); ++p) {
      require(g[p] >= 0 && g[p] < codebook.size, "latent index out of codebook range");
      const auto row = codebook.row(g[p]);
      std::copy(row.begin(), row.end(), vecs.begin() + static_cast<std::ptrdiff_t>(p * cfg_.code_dim));
    }
    return Tensor<T>::constant({1, cfg_.code_dim, g.shape[0], g.shape[1], g.shape[2]},
                               from_vectors(vecs, 1, cfg_.code_dim, g.shape));
  }

  static Tensor<T> volume_tensor(const Volume& v) {
    return Tensor<T>::constant({1, 1, v.shape[0], v.shape[1], v.shape[2]}, std::vector<T>(v.data.begin(), v.data.end()));
  }

  /// Encoder output vectors z_e as a grid, vector-major.
  std::vector<float> encode_vectors(const Volume& v) const {
    diff::NoGradGuard ng;
    return to_vectors(encode(volume_tensor(v)));
  }

  LatentGrid encode_tokens(const Volume& v) const {
    const Shape3 grid{v.shape[0] / cfg_.downsample(), v.shape[1] / cfg_.downsample(), v.shape[2] / cfg_.downsample()};
    const auto q = quantize(encode_vectors(v), codebook);
    return LatentGrid(grid, q.indices);
  }

  Volume decode_tokens(const LatentGrid& g, DropoutMode mode, Rng* rng) const {
    diff::NoGradGuard ng;
    const auto out = decode(latent_from_indices(g), mode, rng);
    const Shape3 s{out.dim(2), out.dim(3), out.dim(4)};
    std::vector<float> vals(out.values().begin(), out.values().end());
    return Volume(s, std::move(vals));
  }

  Volume reconstruct(const Volume& v) const { return decode_tokens(encode_tokens(v), DropoutMode::off, nullptr); }

  const PatchDiscriminator<T>& discriminator() const { return disc_; }

  std::vector<std::pair<std::string, Tensor<T>>> named_generator_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto conv = [&](const std::string& name, const ConvLayer<T>& c) {
      out.push_back({name + ".w", c.w});
      out.push_back({name + ".b", c.b});
    };
    for (std::size_t s = 0; s < down_.size(); ++s) {
      conv("enc.down" + std::to_string(s), down_[s]);
      for (std::size_t r = 0; r < enc_res_[s].size(); ++r) {
        conv("enc.res" + std::to_string(s) + "." + std::to_string(r) + ".spatial", enc_res_[s][r].spatial);
        conv("enc.res" + std::to_string(s) + "." + std::to_string(r) + ".pointwise", enc_res_[s][r].pointwise);
      }
    }
    conv("enc.pre_quant", pre_quant_);
    conv("dec.post_quant", post_quant_);
    for (std::size_t s = 0; s < up_.size(); ++s) {
      for (std::size_t r = 0; r < dec_res_[s].size(); ++r) {
        conv("dec.res" + std::to_string(s) + "." + std::to_string(r) + ".spatial", dec_res_[s][r].spatial);
        conv("dec.res" + std::to_string(s) + "." + std::to_string(r) + ".pointwise", dec_res_[s][r].pointwise);
      }
      conv("dec.up" + std::to_string(s), up_[s]);
    }
    return out;
  }

  std::vector<Tensor<T>> generator_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_generator_parameters()) out.push_back(t);
    return out;
  }
  std::vector<Tensor<T>> discriminator_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : disc_.named_parameters()) out.push_back(t);
    return out;
  }

  Codebook codebook;

 private:
  VQGanConfig cfg_;
  std::vector<ConvLayer<T>> down_;
  std::vector<std::vector<ResBlock<T>>> enc_res_;
  ConvLayer<T> pre_quant_, post_quant_;
  std::vector<std::vector<ResBlock<T>>> dec_res_;
  std::vector<ConvLayer<T>> up_;
  PatchDiscriminator<T> disc_;
};

inline diff::Checkpoint to_checkpoint(const VQGan<float>& m, nlohmann::json meta) {
  diff::Checkpoint ckp;
  meta["kind"] = "vqgan";
  meta["config"] = m.config();
  meta["codebook"] = {{"size", m.codebook.size}, {"dim", m.codebook.dim}, {"decay", m.codebook.decay},
                      {"laplace_eps", m.codebook.laplace_eps}, {"beta", m.codebook.beta}};
  ckp.meta = std::move(meta);
  for (const auto& [n, t] : m.named_generator_parameters()) diff::store(ckp, n, t);
  for (const auto& [n, t] : m.discriminator().named_parameters()) diff::store(ckp, n, t);
  const int M = m.codebook.size, nz = m.codebook.dim;
  ckp.arrays.push_back({"codebook.vectors", {M, nz}, m.codebook.vectors});
  ckp.arrays.push_back({"codebook.ema_counts", {M}, std::vector<float>(m.codebook.ema_counts.begin(), m.codebook.ema_counts.end())});
  ckp.arrays.push_back({"codebook.ema_sums", {M, nz}, std::vector<float>(m.codebook.ema_sums.begin(), m.codebook.ema_sums.end())});
  return ckp;
}

template <class T = float>
VQGan<T> vqgan_from_checkpoint(const diff::Checkpoint& ckp) {
  if (ckp.meta.value("kind", std::string{}) != "vqgan") throw FormatError("meta.kind: not a vqgan checkpoint");
  VQGan<T> m(ckp.meta.at("config").get<VQGanConfig>(), 0);
  for (auto& [n, t] : m.named_generator_parameters()) diff::load(ckp, n, t);
  for (auto& [n, t] : m.discriminator().named_parameters()) diff::load(ckp, n, t);
  const auto& v = ckp.at("codebook.vectors");
  m.codebook.vectors = v.values;
  const auto& c = ckp.at("codebook.ema_counts");
  m.codebook.ema_counts.assign(c.values.begin(), c.values.end());
  const auto& s = ckp.at("codebook.ema_sums");
  m.codebook.ema_sums.assign(s.values.begin(), s.values.end());
  return m;
}

}  // namespace anomalens::vq
