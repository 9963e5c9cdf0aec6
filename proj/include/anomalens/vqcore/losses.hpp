#pragma once

// Reconstruction losses: pixel, spectral (magnitude of the full 3D DFT),
// commitment, and the least-squares GAN objectives.

#include <complex>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "anomalens/diff/tensor.hpp"

namespace anomalens::vq {

using diff::Node;
using diff::Tensor;

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Unnormalized 3D DFT (sign -1 forward, +1 backward) of a complex buffer.
class Dft3 {
 public:
  explicit Dft3(Shape3 s) : n_(voxel_count(s)) {
    buf_ = fftw_alloc_complex(n_);
    std::lock_guard lock(fftw_planner_mutex());
    fwd_ = fftw_plan_dft_3d(s[0], s[1], s[2], buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_3d(s[0], s[1], s[2], buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ~Dft3() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_);
  }
  Dft3(const Dft3&) = delete;
  Dft3& operator=(const Dft3&) = delete;

  template <class T>
  std::vector<std::complex<double>> forward(const T* real) {
    for (std::size_t i = 0; i < n_; ++i) {
      buf_[i][0] = static_cast<double>(real[i]);
      buf_[i][1] = 0.0;
    }
    fftw_execute(fwd_);
    return take();
  }
  std::vector<std::complex<double>> backward(const std::vector<std::complex<double>>& spec) {
    for (std::size_t i = 0; i < n_; ++i) {
      buf_[i][0] = spec[i].real();
      buf_[i][1] = spec[i].imag();
    }
    fftw_execute(bwd_);
    return take();
  }

 private:
  std::vector<std::complex<double>> take() const {
    std::vector<std::complex<double>> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = {buf_[i][0], buf_[i][1]};
    return out;
  }
  std::size_t n_;
  fftw_complex* buf_ = nullptr;
  fftw_plan fwd_ = nullptr, bwd_ = nullptr;
};

}  // namespace detail

/// Squared L2 distance between the DFT magnitude spectra of two volumes.
inline double spectral_loss(const Volume& x, const Volume& xhat) {
  require(x.shape == xhat.shape, "spectral_loss: shape mismatch");
  detail::Dft3 dft(x.shape);
  const auto a = dft.forward(x.data.data());
  const auto b = dft.forward(xhat.data.data());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i]) - std::abs(b[i]);
    s += d * d;
  }
  return s;
}

/// Differentiable spectral loss summed over every [D,H,W] block of `xhat`
/// (leading axes are batch/channel) against constant targets.
template <class T>
Tensor<T> spectral_loss(const Tensor<T>& xhat, std::span<const T> target) {
  require(xhat.rank() >= 3, "spectral_loss: need at least 3 spatial axes");
  require(target.size() == xhat.numel(), "spectral_loss: shape mismatch");
  const std::size_t r = xhat.rank();
  const Shape3 s{xhat.dim(r - 3), xhat.dim(r - 2), xhat.dim(r - 1)};
  const std::size_t V = voxel_count(s), blocks = xhat.numel() / V;
  auto grad_spec = std::make_shared<std::vector<std::vector<std::complex<double>>>>(blocks);
  detail::Dft3 dft(s);
  double loss = 0;
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto X = dft.forward(target.data() + b * V);
    const auto Y = dft.forward(xhat.values().data() + b * V);
    auto& G = (*grad_spec)[b];
    G.resize(V);
    for (std::size_t i = 0; i < V; ++i) {
      const double my = std::abs(Y[i]), mx = std::abs(X[i]);
      loss += (my - mx) * (my - mx);
      // d|Y|/dY undefined at 0; that bin contributes no gradient.
      G[i] = my > 0 ? 2.0 * (my - mx) * Y[i] / my : std::complex<double>(0, 0);
    }
  }
  auto px = xhat.ptr();
  return diff::make_result<T>("spectral_loss", {1}, {static_cast<T>(loss)}, {xhat}, [=](Node<T>& node) {
    detail::Dft3 inv(s);
    T* g = px->grad_buffer();
    const double go = node.grad[0];
    for (std::size_t b = 0; b < blocks; ++b) {
      // grad = Re(unnormalized inverse DFT of G)
      const auto back = inv.backward((*grad_spec)[b]);
      for (std::size_t i = 0; i < V; ++i) g[b * V + i] += static_cast<T>(go * back[i].real());
    }
  });
}

struct VQLosses {
  double pixel = 0;
  double spectral = 0;
  double commitment = 0;
  double total = 0;
};

/// pixel = |x - xhat|^2, spectral as above, commitment = |z_e - z_q|^2,
/// total = pixel + spectral + beta * commitment. The codebook term is
/// replaced by EMA updates and does not appear.
inline VQLosses vq_losses(const Volume& x, const Volume& xhat, std::span<const float> z_e, std::span<const float> z_q,
                          double beta = 0.25) {
  require(x.shape == xhat.shape, "vq_losses: image shape mismatch");
  require(z_e.size() == z_q.size(), "vq_losses: latent size mismatch");
  const auto finite = [](auto span, const char* what) {
    for (auto v : span)
      if (!std::isfinite(v)) throw NumericError(std::string("vq_losses: non-finite ") + what);
  };
  finite(std::span<const float>(x.data), "x");
  finite(std::span<const float>(xhat.data), "x_hat");
  finite(z_e, "z_e");
  finite(z_q, "z_q");
  VQLosses l;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - xhat[i];
    l.pixel += d * d;
  }
  l.spectral = spectral_loss(x, xhat);
  for (std::size_t i = 0; i < z_e.size(); ++i) {
    const double d = static_cast<double>(z_e[i]) - z_q[i];
    l.commitment += d * d;
  }
  l.total = l.pixel + l.spectral + beta * l.commitment;
  return l;
}

struct GanLosses {
  double discriminator = 0;  // L_D
  double generator = 0;      // L_G
};

/// L_D = 1/2 mean((d_real-1)^2) + 1/2 mean(d_fake^2); L_G = 1/2 mean((d_fake-1)^2).
inline GanLosses lsgan_losses(std::span<const double> d_real, std::span<const double> d_fake) {
  require(!d_real.empty() && !d_fake.empty(), "lsgan_losses: empty discriminator output");
  GanLosses g;
  double a = 0, b = 0, c = 0;
  for (double v : d_real) a += (v - 1) * (v - 1);
  for (double v : d_fake) {
    b += v * v;
    c += (v - 1) * (v - 1);
  }
  g.discriminator = 0.5 * a / static_cast<double>(d_real.size()) + 0.5 * b / static_cast<double>(d_fake.size());
  g.generator = 0.5 * c / static_cast<double>(d_fake.size());
  return g;
}

/// 1/2 mean((d - target)^2) as a graph op.
template <class T>
Tensor<T> lsgan_term(const Tensor<T>& d, T target) {
  std::vector<T> t(d.numel(), target);
  return diff::scale(diff::sum_squared_error(d, std::span<const T>(t)), T(0.5) / static_cast<T>(d.numel()));
}

}  // namespace anomalens::vq
