#include <gtest/gtest.h>

#include <complex>

#include "anomalens/vqcore/train.hpp"
#include "support.hpp"

using namespace anomalens;
using namespace anomalens::vq;

namespace {

Codebook two_code_book() { return Codebook(2, 2, {0, 0, 1, 1}); }

// Exhaustive nearest neighbour with explicit lowest-index tie-break.
int brute_nearest(std::span<const float> z, const Codebook& cb) {
  std::vector<double> d(static_cast<std::size_t>(cb.size));
  for (int k = 0; k < cb.size; ++k)
    for (int j = 0; j < cb.dim; ++j) {
      const double diff = static_cast<double>(z[j]) - cb.row(k)[j];
      d[k] += diff * diff;
    }
  const double best = *std::min_element(d.begin(), d.end());
  for (int k = 0; k < cb.size; ++k)
    if (d[k] == best) return k;
  return -1;
}

// Textbook O(N^2) DFT magnitude on an n^3 grid.
std::vector<double> direct_dft_magnitude(const Volume& v) {
  const int n = v.shape[0];
  std::vector<double> out(v.size());
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c) {
        std::complex<double> s = 0;
        for (int z = 0; z < n; ++z)
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
              const double ph = -2 * M_PI * (static_cast<double>(a * z + b * y + c * x) / n);
              s += static_cast<double>(v(z, y, x)) * std::polar(1.0, ph);
            }
        out[v.index(a, b, c)] = std::abs(s);
      }
  return out;
}

VQGanConfig tiny_config() {
  VQGanConfig c;
  c.channels = {4, 4, 8};
  c.res_blocks = 1;
  c.codebook_size = 16;
  c.code_dim = 8;
  c.disc_channels = {4, 4, 4};
  c.steps = 4;
  c.batch = 2;
  return c;
}

}  // namespace

TEST(Quantize, NearestCode) {
  auto cb = two_code_book();
  const std::vector<float> z{0.2f, 0.1f};
  EXPECT_EQ(quantize(z, cb).indices[0], 0);
}

TEST(Quantize, ExactMatchAndTie) {
  auto cb = two_code_book();
  const std::vector<float> exact{1, 1}, tie{0.5f, 0.5f};
  const auto r = quantize(exact, cb);
  EXPECT_EQ(r.indices[0], 1);
  EXPECT_EQ(r.vectors, (std::vector<float>{1, 1}));
  EXPECT_EQ(quantize(tie, cb).indices[0], 0);
}

TEST(Quantize, EmptyCodebookIsContractError) {
  Codebook cb;
  const std::vector<float> z{1, 2};
  EXPECT_THROW(quantize(z, cb), ContractError);
}

TEST(Quantize, AgreesWithExhaustiveSearchIncludingTies) {
  Rng rng(3);
  for (int M : {64, 256}) {
    std::vector<float> init(static_cast<std::size_t>(M) * 4);
    // Integer-valued codes and queries produce many exact ties.
    for (auto& v : init) v = static_cast<float>(uniform_int(rng, -2, 2));
    Codebook cb(M, 4, init);
    std::vector<float> z(1000 * 4);
    for (std::size_t i = 0; i < z.size(); ++i)
      z[i] = i % 8 < 4 ? static_cast<float>(uniform_int(rng, -2, 2)) : static_cast<float>(uniform(rng, -2, 2));
    const auto r = quantize(z, cb);
    for (int p = 0; p < 1000; ++p)
      ASSERT_EQ(r.indices[p], brute_nearest(std::span<const float>(z).subspan(p * 4, 4), cb));
  }
}

TEST(EmaUpdate, DecayOneFreezesVectors) {
  auto cb = two_code_book();
  cb.decay = 1.0;
  const std::vector<float> z{5, 5};
  const std::vector<int> a{1};
  ema_update(cb, z, a);
  EXPECT_EQ(cb.vectors, (std::vector<float>{0, 0, 1, 1}));
}

TEST(EmaUpdate, ConvergesToConstantAssignedVector) {
  // Fresh statistics for the assigned code: counts and sums start at zero.
  auto cb = two_code_book();
  cb.ema_counts[1] = 0;
  cb.ema_sums[2] = cb.ema_sums[3] = 0;
  const std::vector<float> z{0.3f, -0.7f};
  const std::vector<int> a{1};
  for (int i = 0; i < 500; ++i) ema_update(cb, z, a);
  EXPECT_NEAR(cb.row(1)[0], 0.3, 1e-4);
  EXPECT_NEAR(cb.row(1)[1], -0.7, 1e-4);
}

TEST(EmaUpdate, MatchesScalarRecurrenceFromSeededStatistics) {
  // Seeded statistics (count 1, sum = initial row) iterate the same recurrence;
  // compare against it evaluated independently in double precision.
  auto cb = two_code_book();
  const std::vector<float> z{0.3f, -0.7f};
  const std::vector<int> a{1};
  double c0 = 1, c1 = 1, s1[2] = {1, 1};
  const double g = cb.decay, eps = cb.laplace_eps;
  for (int i = 0; i < 500; ++i) {
    ema_update(cb, z, a);
    c0 = g * c0;
    c1 = g * c1 + (1 - g);
    for (int j = 0; j < 2; ++j) s1[j] = g * s1[j] + (1 - g) * static_cast<double>(z[j]);
  }
  const double n = c0 + c1, smoothed = (c1 + eps) / (n + 2 * eps) * n;
  for (int j = 0; j < 2; ++j) EXPECT_NEAR(cb.row(1)[j], s1[j] / smoothed, 1e-6);
  // The seeded start leaves a residual of about decay^500 of the gap.
  EXPECT_NEAR(cb.row(1)[0], 0.3, 2 * std::pow(g, 500));
}

TEST(EmaUpdate, UnassignedCodeOnlyFeelsSmoothing) {
  Codebook cb(2, 2, {0.5f, 0.5f, 1, 1});
  const std::vector<float> z{1, 1};
  const std::vector<int> a{1};
  ema_update(cb, z, a);
  // Code 0 keeps ema_sums/ema_counts = 0.5 up to the Laplace factor, which
  // at n = 1.99 and M = 2 differs from one by about laplace_eps.
  EXPECT_NEAR(cb.row(0)[0], 0.5, 1e-4);
  EXPECT_NEAR(cb.row(0)[1], 0.5, 1e-4);
}

TEST(EmaUpdate, OutOfRangeIndexIsContractError) {
  auto cb = two_code_book();
  const std::vector<float> z{1, 1};
  const std::vector<int> a{2};
  EXPECT_THROW(ema_update(cb, z, a), ContractError);
}

TEST(EmaUpdate, StaysFiniteWhenCountsDecayToZero) {
  auto cb = two_code_book();
  const std::vector<float> z{1, 1};
  const std::vector<int> a{1};
  for (int i = 0; i < 5000; ++i) ema_update(cb, z, a);
  for (float v : cb.vectors) EXPECT_TRUE(std::isfinite(v));
}

TEST(SpectralLoss, IdentityAndSignInvariance) {
  Rng rng(1);
  Volume x({8, 8, 8});
  for (auto& v : x.data) v = static_cast<float>(uniform(rng, -1, 1));
  EXPECT_EQ(spectral_loss(x, x), 0.0);
  Volume neg = x;
  for (auto& v : neg.data) v = -v;
  EXPECT_NEAR(spectral_loss(x, neg), 0.0, 1e-9);
}

TEST(SpectralLoss, ImpulseAgainstZerosIs512) {
  Volume x({8, 8, 8}, 0.f), z({8, 8, 8}, 0.f);
  x(0, 0, 0) = 1;
  const auto mag = direct_dft_magnitude(x);
  double oracle = 0;
  for (double m : mag) oracle += m * m;
  EXPECT_NEAR(oracle, 512.0, 1e-9);
  EXPECT_NEAR(spectral_loss(x, z), oracle, 1e-9);
}

TEST(SpectralLoss, MatchesDirectDftOnRandomVolumes) {
  Rng rng(2);
  Volume a({4, 4, 4}), b({4, 4, 4});
  for (auto& v : a.data) v = static_cast<float>(uniform(rng, -1, 1));
  for (auto& v : b.data) v = static_cast<float>(uniform(rng, -1, 1));
  const auto ma = direct_dft_magnitude(a), mb = direct_dft_magnitude(b);
  double oracle = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) oracle += (ma[i] - mb[i]) * (ma[i] - mb[i]);
  EXPECT_NEAR(spectral_loss(a, b), oracle, 1e-9 * std::max(1.0, oracle));
}

TEST(SpectralLoss, ShapeMismatchIsContractError) {
  EXPECT_THROW(spectral_loss(Volume({8, 8, 8}), Volume({8, 8, 4})), ContractError);
}

TEST(VQLosses, ZeroWhenPerfect) {
  Volume x({8, 8, 8}, 0.5f);
  const std::vector<float> z{1, 2, 3};
  EXPECT_EQ(vq_losses(x, x, z, z).total, 0.0);
}

TEST(VQLosses, BetaScalesOnlyCommitment) {
  Volume x({8, 8, 8}, 0.5f), xh({8, 8, 8}, 0.4f);
  const std::vector<float> ze{1, 2}, zq{1.5f, 2};
  const auto a = vq_losses(x, xh, ze, zq, 0.25), b = vq_losses(x, xh, ze, zq, 0.5);
  EXPECT_DOUBLE_EQ(b.total - a.total, 0.25 * a.commitment);
  EXPECT_DOUBLE_EQ(a.pixel, b.pixel);
}

TEST(VQLosses, TwoVoxelExample) {
  // x = [1,0] and x_hat = [0,0] laid along the width axis of a 1x1x2 grid.
  Volume x({1, 1, 2}, 0.f), xh({1, 1, 2}, 0.f);
  x(0, 0, 0) = 1;
  const std::vector<float> z{0.25f};
  const auto l = vq_losses(x, xh, z, z);
  EXPECT_DOUBLE_EQ(l.pixel, 1.0);
  EXPECT_DOUBLE_EQ(l.commitment, 0.0);
  // |DFT([1,0])| = [1,1] against zeros: spectral = 2.
  EXPECT_NEAR(l.spectral, 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(l.total, 1.0 + l.spectral);
}

TEST(VQLosses, NonFiniteInputIsNumericError) {
  Volume x({8, 8, 8}, 0.f), xh({8, 8, 8}, 0.f);
  xh[3] = std::numeric_limits<float>::quiet_NaN();
  const std::vector<float> z{0};
  EXPECT_THROW(vq_losses(x, xh, z, z), NumericError);
}

TEST(LsganLosses, Examples) {
  const std::vector<double> ones(6, 1.0), zeros(6, 0.0);
  EXPECT_EQ(lsgan_losses(ones, zeros).discriminator, 0.0);
  EXPECT_EQ(lsgan_losses(zeros, ones).generator, 0.0);
  EXPECT_DOUBLE_EQ(lsgan_losses(zeros, ones).discriminator, 1.0);
}

TEST(Model, LatentGridIsEighthOfInput) {
  VQGanConfig c = tiny_config();
  VQGan<float> m(c, 1);
  Volume v({32, 32, 32}, 0.1f);
  const auto g = m.encode_tokens(v);
  EXPECT_EQ(g.shape, (Shape3{4, 4, 4}));
  for (int t : g.data) EXPECT_TRUE(t >= 0 && t < c.codebook_size);
}

TEST(Model, IndivisibleShapeIsContractError) {
  VQGan<float> m(tiny_config(), 1);
  EXPECT_THROW(m.encode_tokens(Volume({32, 30, 32})), ContractError);
}

TEST(Model, DecodeDropoutModes) {
  VQGan<float> m(tiny_config(), 2);
  LatentGrid g({2, 2, 2}, 3);
  const auto a = m.decode_tokens(g, DropoutMode::off, nullptr);
  const auto b = m.decode_tokens(g, DropoutMode::off, nullptr);
  EXPECT_EQ(a.shape, (Shape3{16, 16, 16}));
  EXPECT_EQ(a, b);
  Rng rng(5);
  const auto first = m.decode_tokens(g, DropoutMode::on, &rng);
  int differing = 0;
  for (int t = 0; t < 5; ++t) differing += !(m.decode_tokens(g, DropoutMode::on, &rng) == first);
  EXPECT_EQ(differing, 5);
}

TEST(Model, StraightThroughMatchesIdentityQuantizer) {
  // With the quantizer replaced by identity the decoder sees z_e itself;
  // through the straight-through op it sees z_q, but the gradient that
  // reaches z_e must equal the gradient at the decoder input in both cases.
  using T = double;
  VQGanConfig c = tiny_config();
  VQGan<T> m(c, 3);
  Rng rng(8);
  auto z_e = anomalens::testing::random_tensor(rng, {1, c.code_dim, 1, 1, 1});
  z_e = diff::Tensor<T>::parameter(z_e.shape(), std::vector<T>(z_e.values().begin(), z_e.values().end()));
  std::vector<T> zq(z_e.values().begin(), z_e.values().end());
  for (auto& v : zq) v += 0.05;
  // Reference: gradient of the decoder evaluated at z_q, taken w.r.t. its input.
  auto zq_leaf = diff::Tensor<T>::parameter(z_e.shape(), zq);
  diff::backward(diff::sum(m.decode(zq_leaf, DropoutMode::off, nullptr)));
  diff::backward(diff::sum(m.decode(diff::straight_through(z_e, zq), DropoutMode::off, nullptr)));
  for (std::size_t i = 0; i < zq.size(); ++i) EXPECT_NEAR(z_e.grad()[i], zq_leaf.grad()[i], 1e-12);
}

TEST(Model, CheckpointRoundTrip) {
  VQGan<float> m(tiny_config(), 4);
  m.codebook.vectors[3] = 0.75f;
  const auto dir = anomalens::testing::temp_dir("vqckp");
  diff::write_checkpoint(dir / "m.ckp", to_checkpoint(m, {}));
  const auto r = vqgan_from_checkpoint(diff::read_checkpoint(dir / "m.ckp"));
  EXPECT_EQ(r.codebook.vectors, m.codebook.vectors);
  Volume v({16, 16, 16}, 0.2f);
  EXPECT_EQ(r.reconstruct(v), m.reconstruct(v));
}

TEST(Training, EmptyTrainingSetIsContractError) {
  EXPECT_THROW(train_vqgan({}, tiny_config(), 1), ContractError);
}

TEST(Training, DeterministicCheckpoints) {
  phantoms::PhantomConfig pc;
  pc.shape = {16, 16, 16};
  std::vector<Volume> vols;
  for (int i = 0; i < 4; ++i) vols.push_back(phantoms::generate_phantom(pc, i).pet);
  VQGanConfig c = tiny_config();
  c.steps = 6;
  const auto dir = anomalens::testing::temp_dir("vqdet");
  diff::write_checkpoint(dir / "a.ckp", to_checkpoint(train_vqgan(vols, c, 9).model, {}));
  diff::write_checkpoint(dir / "b.ckp", to_checkpoint(train_vqgan(vols, c, 9).model, {}));
  std::ifstream fa(dir / "a.ckp", std::ios::binary), fb(dir / "b.ckp", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);
}

TEST(Training, PixelLossDecreasesOnSixteenPhantoms) {
  phantoms::PhantomConfig pc;
  std::vector<Volume> vols;
  for (int i = 0; i < 16; ++i) vols.push_back(phantoms::generate_phantom(pc, i).pet);
  VQGanConfig c;
  c.steps = 200;
  const auto r = train_vqgan(vols, c, 21);
  ASSERT_EQ(r.log.size(), 200u);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 10; ++i) s += r.log[i].pixel;
    return s / 10;
  };
  EXPECT_LT(window(190), window(0));
  EXPECT_LT(r.log.back().pixel, r.log.front().pixel);
}

TEST(Training, DeskModelBeatsTheMeanVolumeOnHeldOutNormals) {
  phantoms::PhantomConfig pc;
  std::vector<Volume> train, held_out;
  for (int i = 0; i < 48; ++i) train.push_back(phantoms::generate_phantom(pc, i).pet);
  pc.contamination_rate = 0;
  for (int i = 100; i < 110; ++i) held_out.push_back(phantoms::generate_phantom(pc, i).pet);

  Volume mean(train.front().shape, 0.f);
  for (const auto& v : train)
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i] / static_cast<float>(train.size());

  const auto model = train_vqgan(train, VQGanConfig{}, 3).model;
  double mse_model = 0, mse_mean = 0;
  for (const auto& v : held_out) {
    const auto rec = model.reconstruct(v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      mse_model += std::pow(double(rec[i]) - v[i], 2);
      mse_mean += std::pow(double(mean[i]) - v[i], 2);
    }
  }
  EXPECT_LT(mse_model, mse_mean);
}
