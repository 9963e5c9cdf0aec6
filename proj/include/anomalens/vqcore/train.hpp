#pragma once

#include <functional>
#include <ostream>

#include "anomalens/diff/optim.hpp"
#include "anomalens/phantoms.hpp"
#include "anomalens/vqcore/losses.hpp"
#include "anomalens/vqcore/model.hpp"

namespace anomalens::vq {

/// Per-step training record, averaged over the batch. Pixel and commitment
/// are squared norms per volume. The spectral term is divided by the voxel
/// count; the unnormalized DFT inflates energy by exactly that factor, so this
/// puts it on the pixel scale.
struct VQLogRow {
  int step = 0;
  double pixel = 0;
  double spectral = 0;
  double commitment = 0;
  double loss_d = 0;
  double loss_g = 0;
  double lr = 0;
};

inline void write_log_csv(std::ostream& os, const std::vector<VQLogRow>& rows) {
  os << "step,pixel,spectral,commitment,L_D,L_G,lr\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.pixel, r.spectral, r.commitment,
                  r.loss_d, r.loss_g, r.lr);
    os << buf;
  }
}

struct VQTrainResult {
  VQGan<float> model;
  std::vector<VQLogRow> log;
};

namespace detail {

inline void check_term(double v, const char* term, int step) {
  if (!std::isfinite(v))
    throw NumericError("train_vqgan: " + std::string(term) + " loss is non-finite at step " + std::to_string(step));
}

// Replaces codes whose usage has decayed below `threshold` by encoder
// outputs from the current batch, so the vocabulary keeps tracking the data.
inline int restart_dead_codes(Codebook& cb, std::span<const float> z, double threshold, Rng& rng) {
  const std::size_t count = z.size() / static_cast<std::size_t>(cb.dim);
  int restarted = 0;
  for (int k = 0; k < cb.size; ++k) {
    if (cb.ema_counts[static_cast<std::size_t>(k)] >= threshold) continue;
    const auto p = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(count) - 1));
    cb.set_row(k, z.subspan(p * cb.dim, static_cast<std::size_t>(cb.dim)));
    ++restarted;
  }
  return restarted;
}

}  // namespace detail

/// Trains one single-channel VQ-GAN on `volumes`. Augmented intensities are
/// clipped to [0, clip_hi] (clip_hi < 0 means no upper bound).
inline VQTrainResult train_vqgan(const std::vector<Volume>& volumes, const VQGanConfig& cfg, std::uint64_t seed,
                                 double clip_hi = -1.0, const phantoms::AugmentConfig& aug = {},
                                 const std::function<void(const VQLogRow&)>& on_step = {}) {
  require(!volumes.empty(), "train_vqgan: manifest train split is empty");
  cfg.validate();
  const Shape3 shape = volumes.front().shape;
  for (const auto& v : volumes) require(v.shape == shape, "train_vqgan: all volumes must share one shape");

  VQTrainResult out{VQGan<float>(cfg, seed), {}};
  auto& model = out.model;
  Rng rng(derive_seed(seed, "vqgan.train"));
  auto gen_params = model.generator_parameters();
  auto disc_params = model.discriminator_parameters();
  diff::AdamState gen_state, disc_state;

  const int B = cfg.batch;
  const std::size_t V = voxel_count(shape);
  const int adv_start = static_cast<int>(std::ceil(cfg.adversarial_start * cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<float> batch;
    batch.reserve(V * static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto i = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(volumes.size()) - 1));
      const Volume a = phantoms::augment(volumes[i], rng, aug, clip_hi);
      batch.insert(batch.end(), a.data.begin(), a.data.end());
    }
    auto x = diff::Tensor<float>::constant({B, 1, shape[0], shape[1], shape[2]}, batch);

    // Generator step.
    auto z_e = model.encode(x);
    auto z_vec = VQGan<float>::to_vectors(z_e);
    if (step == 0) {
      // Data-dependent init: codes start on jittered encoder outputs.
      std::vector<float> init(model.codebook.vectors.size());
      const std::size_t count = z_vec.size() / static_cast<std::size_t>(cfg.code_dim);
      double sd = 0;
      for (float v : z_vec) sd += static_cast<double>(v) * v;
      sd = std::sqrt(sd / static_cast<double>(z_vec.size())) * 1e-2;
      for (int k = 0; k < cfg.codebook_size; ++k) {
        const auto p = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(count) - 1));
        for (int j = 0; j < cfg.code_dim; ++j)
          init[static_cast<std::size_t>(k) * cfg.code_dim + j] =
              z_vec[p * cfg.code_dim + j] + static_cast<float>(sd * standard_normal(rng));
      }
      for (int k = 0; k < cfg.codebook_size; ++k)
        model.codebook.set_row(k, std::span<const float>(init).subspan(static_cast<std::size_t>(k) * cfg.code_dim,
                                                                        static_cast<std::size_t>(cfg.code_dim)));
    }
    const auto q = quantize(z_vec, model.codebook);
    const Shape3 grid{z_e.dim(2), z_e.dim(3), z_e.dim(4)};
    auto zq_vals = VQGan<float>::from_vectors(q.vectors, B, cfg.code_dim, grid);
    auto z_q = diff::straight_through(z_e, zq_vals);
    auto x_hat = model.decode(z_q, DropoutMode::on, &rng);

    const float inv_b = 1.0f / static_cast<float>(B);
    auto pixel = diff::scale(diff::sum_squared_error(x_hat, std::span<const float>(batch)), inv_b);
    auto spectral = diff::scale(spectral_loss(x_hat, std::span<const float>(batch)), inv_b / static_cast<float>(V));
    auto commitment = diff::scale(diff::sum_squared_error(z_e, std::span<const float>(zq_vals)), inv_b);
    auto total = diff::add(diff::add(pixel, spectral), diff::scale(commitment, static_cast<float>(cfg.beta)));

    VQLogRow row;
    row.step = step;
    row.pixel = pixel.item();
    row.spectral = spectral.item();
    row.commitment = commitment.item();
    detail::check_term(row.pixel, "pixel", step);
    detail::check_term(row.spectral, "spectral", step);
    detail::check_term(row.commitment, "commitment", step);

    const bool adversarial = step >= adv_start && cfg.adversarial_weight > 0;
    if (adversarial) {
      auto l_g = lsgan_term(model.discriminator()(x_hat), 1.0f);
      row.loss_g = l_g.item();
      detail::check_term(row.loss_g, "generator adversarial", step);
      total = diff::add(total, diff::scale(l_g, static_cast<float>(cfg.adversarial_weight)));
    }
    diff::zero_grad(gen_params);
    diff::backward(total);
    row.lr = diff::lr_schedule(cfg.lr_generator, cfg.gamma, step);
    diff::adam_step(gen_params, gen_state, row.lr);

    ema_update(model.codebook, z_vec, q.indices);
    detail::restart_dead_codes(model.codebook, z_vec, cfg.restart_threshold, rng);

    // Discriminator step on the detached reconstruction.
    if (adversarial) {
      diff::zero_grad(disc_params);
      auto fake = diff::detach(x_hat);
      const auto& disc = model.discriminator();
      auto l_d = diff::add(lsgan_term(disc(x), 1.0f), lsgan_term(disc(fake), 0.0f));
      row.loss_d = l_d.item();
      detail::check_term(row.loss_d, "discriminator", step);
      diff::backward(l_d);
      diff::adam_step(disc_params, disc_state, diff::lr_schedule(cfg.lr_discriminator, cfg.gamma, step));
    }
    diff::zero_grad(disc_params);
    out.log.push_back(row);
    if (on_step) on_step(row);
  }
  return out;
}

}  // namespace anomalens::vq
