#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>

#include "anomalens/armodel/model.hpp"
#include "support.hpp"

using namespace anomalens;
using namespace anomalens::ar;
using anomalens::testing::random_tensor;

namespace {

ARConfig small_config(int vocab = 8, int cond_vocab = 0) {
  ARConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 16;
  c.ff_mult = 2;
  c.vocabulary = vocab;
  c.cond_vocabulary = cond_vocab;
  c.seq_len = 12;
  c.cond_len = 12;
  c.favor_features = 32;
  c.batch = 4;
  return c;
}

Tokens random_tokens(Rng& rng, int L, int vocab) {
  Tokens t(static_cast<std::size_t>(L));
  for (auto& x : t) x = static_cast<int>(uniform_int(rng, 0, vocab - 1));
  return t;
}

template <class T>
void zero_all(ARModel<T>& m) {
  for (auto& [n, t] : m.named_parameters())
    for (auto& v : t.mutable_values()) v = T(0);
}

Tensor<double> rows(std::vector<double> v, int L, int d) { return Tensor<double>::constant({L, d}, std::move(v)); }

double frobenius_rel(std::span<const double> a, std::span<const double> b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention building blocks

TEST(CausalSelfAttention, SinglePositionReturnsItsValue) {
  Rng rng(1);
  const auto q = random_tensor(rng, {1, 8}), k = random_tensor(rng, {1, 8}), v = random_tensor(rng, {1, 8});
  const auto out = attention(q, k, v, 2, true);
  for (int j = 0; j < 8; ++j) EXPECT_EQ(out.values()[j], v.values()[j]);
}

TEST(CausalSelfAttention, IdenticalKeysAverageTheVisibleValues) {
  Rng rng(2);
  const int L = 5, d = 4;
  const auto q = random_tensor(rng, {L, d}), v = random_tensor(rng, {L, d});
  const auto k = rows(std::vector<double>(L * d, 0.3), L, d);
  const auto out = attention(q, k, v, 1, true);
  for (int j = 0; j < d; ++j) {
    double mean = 0;
    for (int i = 0; i < L; ++i) mean += v.values()[i * d + j] / L;
    EXPECT_NEAR(out.values()[(L - 1) * d + j], mean, 1e-14);
  }
}

TEST(CausalSelfAttention, RowsOfVisibleWeightsSumToOne) {
  // With every value row equal to the same vector the output must equal it.
  Rng rng(3);
  const int L = 6, d = 4;
  const auto q = random_tensor(rng, {L, d}), k = random_tensor(rng, {L, d});
  std::vector<double> vv;
  for (int i = 0; i < L; ++i) vv.insert(vv.end(), {0.5, -1.0, 2.0, 0.25});
  const auto out = attention(q, k, rows(vv, L, d), 2, true);
  for (std::size_t i = 0; i < vv.size(); ++i) EXPECT_NEAR(out.values()[i], vv[i], 1e-14);
}

TEST(CausalSelfAttention, PrefixIgnoresLaterPositions) {
  Rng rng(4);
  const int L = 10, d = 8;
  for (int trial = 0; trial < 10; ++trial) {
    auto q = random_tensor(rng, {L, d}), k = random_tensor(rng, {L, d}), v = random_tensor(rng, {L, d});
    const int j = static_cast<int>(uniform_int(rng, 1, L - 1));
    const auto before = attention(q, k, v, 2, true);
    const auto feats = std::make_shared<const std::vector<RowMat<double>>>(
        std::vector<RowMat<double>>{favor_features<double>(16, 4, 7), favor_features<double>(16, 4, 8)});
    const auto fbefore = favor_attention(q, k, v, 2, true, feats);
    for (auto* t : {&q, &k, &v})
      for (int c = 0; c < d; ++c) t->mutable_values()[j * d + c] += 0.7;
    const auto after = attention(q, k, v, 2, true);
    const auto fafter = favor_attention(q, k, v, 2, true, feats);
    for (int i = 0; i < j * d; ++i) {
      EXPECT_NEAR(after.values()[i], before.values()[i], 1e-12);
      EXPECT_NEAR(fafter.values()[i], fbefore.values()[i], 1e-12);
    }
  }
}

TEST(FavorAttention, SinglePositionReturnsItsValue) {
  Rng rng(5);
  const auto q = random_tensor(rng, {1, 16}), k = random_tensor(rng, {1, 16}), v = random_tensor(rng, {1, 16});
  const auto feats =
      std::make_shared<const std::vector<RowMat<double>>>(std::vector<RowMat<double>>{favor_features<double>(8, 16, 1)});
  const auto out = favor_attention(q, k, v, 1, true, feats);
  for (int j = 0; j < 16; ++j) EXPECT_NEAR(out.values()[j], v.values()[j], 1e-14);
}

TEST(FavorAttention, ErrorShrinksWithFeatureCount) {
  const int L = 32, dk = 16, instances = 20;
  std::vector<double> medians;
  for (int m : {16, 64, 256}) {
    std::vector<double> errs;
    for (int s = 0; s < instances; ++s) {
      Rng rng(derive_seed(100, static_cast<std::uint64_t>(s)));
      const auto q = random_tensor(rng, {L, dk}), k = random_tensor(rng, {L, dk}), v = random_tensor(rng, {L, dk});
      const auto feats = std::make_shared<const std::vector<RowMat<double>>>(
          std::vector<RowMat<double>>{favor_features<double>(m, dk, derive_seed(200, static_cast<std::uint64_t>(s)))});
      const auto exact = attention(q, k, v, 1, true);
      const auto approx = favor_attention(q, k, v, 1, true, feats);
      errs.push_back(frobenius_rel(approx.values(), exact.values()));
    }
    std::nth_element(errs.begin(), errs.begin() + instances / 2, errs.end());
    medians.push_back(errs[instances / 2]);
  }
  EXPECT_GT(medians[0], medians[1]);
  EXPECT_GT(medians[1], medians[2]);
  EXPECT_LT(medians[2], 0.15);
}

TEST(CrossAttention, ConstantValuesComeBackEverywhere) {
  Rng rng(6);
  const int L = 5, Lc = 7, d = 4;
  const auto q = random_tensor(rng, {L, d}), k = random_tensor(rng, {Lc, d});
  std::vector<double> vv;
  for (int i = 0; i < Lc; ++i) vv.insert(vv.end(), {1.5, -0.5, 0.0, 3.0});
  const auto out = attention(q, k, rows(vv, Lc, d), 2, false);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < d; ++j) EXPECT_NEAR(out.values()[i * d + j], vv[j], 1e-14);
}

TEST(CrossAttention, SingleConditioningTokenIsCopied) {
  Rng rng(7);
  const auto q = random_tensor(rng, {4, 6}), k = random_tensor(rng, {1, 6}), v = random_tensor(rng, {1, 6});
  const auto out = attention(q, k, v, 3, false);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_EQ(out.values()[i * 6 + j], v.values()[j]);
}

TEST(CrossAttention, FirstQuerySeesTheLastConditioningToken) {
  Rng rng(8);
  auto q = random_tensor(rng, {3, 4}), k = random_tensor(rng, {5, 4}), v = random_tensor(rng, {5, 4});
  const auto before = attention(q, k, v, 1, false);
  v.mutable_values()[4 * 4] += 1.0;
  const auto after = attention(q, k, v, 1, false);
  EXPECT_NE(after.values()[0], before.values()[0]);
}

// ---------------------------------------------------------------------------
// Model forward

TEST(ARConfig, PresetsAndValidation) {
  const auto d = ARConfig::desk(), p = ARConfig::large();
  EXPECT_EQ(std::tie(d.layers, d.heads, d.d_model), std::make_tuple(4, 4, 128));
  EXPECT_EQ(std::tie(p.layers, p.heads, p.d_model), std::make_tuple(16, 8, 256));
  ARConfig bad;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  const nlohmann::json j = {{"preset", "large"}, {"backend", "favor"}, {"favor_features", 32}};
  const auto c = j.get<ARConfig>();
  EXPECT_EQ(c.layers, 16);
  EXPECT_EQ(c.backend, Backend::favor);
  EXPECT_EQ(nlohmann::json(c).get<ARConfig>().favor_features, 32);
}

TEST(ARForward, LogitShapeIsSequenceByVocabulary) {
  ARModel<float> m(small_config(8), 1);
  Rng rng(1);
  const auto logits = m.forward(random_tokens(rng, 12, 8), nullptr);
  EXPECT_EQ(logits.shape(), (diff::Shape{12, 8}));
}

TEST(ARForward, ZeroedModelIsUniform) {
  ARModel<double> m(small_config(256), 1);
  zero_all(m);
  Rng rng(2);
  const auto l = token_likelihoods(m, random_tokens(rng, 12, 256), nullptr);
  for (double p : l) EXPECT_EQ(p, 1.0 / 256);
}

TEST(ARForward, HandSetLogitsGiveSoftmaxLikelihood) {
  ARModel<double> m(small_config(4), 1);
  zero_all(m);
  for (auto& [n, t] : m.named_parameters())
    if (n == "head.b") t.mutable_values()[2] = 10.0;
  const auto l = token_likelihoods(m, Tokens(12, 2), nullptr);
  const double expected = std::exp(10.0) / (std::exp(10.0) + 3);
  for (double p : l) EXPECT_NEAR(p, expected, 1e-12);
  EXPECT_NEAR(expected, 0.99986, 1e-5);
}

TEST(ARForward, ProbabilitiesAreProperDistributions) {
  ARModel<float> m(small_config(8, 5), 3);
  Rng rng(3);
  const auto cond = random_tokens(rng, 12, 5);
  const auto tok = random_tokens(rng, 12, 8);
  const auto p = softmax_rows<float>(ar_forward(m, tok, &cond), 8);
  for (int i = 0; i < 12; ++i) {
    double s = 0;
    for (int j = 0; j < 8; ++j) {
      EXPECT_GT(p[i * 8 + j], 0.f);
      EXPECT_LT(p[i * 8 + j], 1.f);
      s += p[i * 8 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

class ARCausality : public ::testing::TestWithParam<Backend> {};

TEST_P(ARCausality, SuffixEditsLeavePrefixLogitsUnchanged) {
  auto c = small_config(8, 5);
  c.backend = GetParam();
  ARModel<double> m(c, 11);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto cond = random_tokens(rng, 12, 5);
    auto tok = random_tokens(rng, 12, 8);
    const auto before = ar_forward(m, tok, &cond);
    const int j = static_cast<int>(uniform_int(rng, 0, 11));
    tok[static_cast<std::size_t>(j)] = (tok[static_cast<std::size_t>(j)] + 1 + static_cast<int>(uniform_int(rng, 0, 6))) % 8;
    const auto after = ar_forward(m, tok, &cond);
    // Logits at position i depend on tokens < i, so rows 0..j are fixed.
    for (int i = 0; i <= j; ++i)
      for (int v = 0; v < 8; ++v) ASSERT_NEAR(after[i * 8 + v], before[i * 8 + v], 1e-12) << "row " << i << " edit " << j;
    bool changed = false;
    for (std::size_t i = static_cast<std::size_t>(j + 1) * 8; i < after.size(); ++i) changed |= after[i] != before[i];
    if (j < 11) EXPECT_TRUE(changed);
  }
}

INSTANTIATE_TEST_SUITE_P(Backends, ARCausality, ::testing::Values(Backend::exact, Backend::favor),
                         [](const auto& info) { return info.param == Backend::exact ? "exact" : "favor"; });

TEST(ARForward, EveryPositionSeesTheWholeConditioning) {
  ARModel<double> m(small_config(8, 5), 4);
  Rng rng(4);
  const auto tok = random_tokens(rng, 12, 8);
  auto cond = random_tokens(rng, 12, 5);
  const auto before = ar_forward(m, tok, &cond);
  cond.back() = (cond.back() + 1) % 5;
  const auto after = ar_forward(m, tok, &cond);
  for (int v = 0; v < 8; ++v) EXPECT_NE(after[v], before[v]);
}

TEST(ARForward, ContractErrors) {
  ARModel<float> cond_model(small_config(8, 5), 1), plain(small_config(8), 1);
  const Tokens ok(12, 1), empty;
  EXPECT_THROW(cond_model.forward(ok, nullptr), ContractError);
  EXPECT_THROW(cond_model.forward(ok, &empty), ContractError);
  const Tokens bad_cond(12, 5);
  EXPECT_THROW(cond_model.forward(ok, &bad_cond), ContractError);
  EXPECT_THROW(plain.forward(Tokens(12, 8), nullptr), ContractError);
  EXPECT_THROW(plain.forward(Tokens(12, -1), nullptr), ContractError);
  EXPECT_THROW(plain.forward(Tokens(13, 0), nullptr), ContractError);
  EXPECT_THROW(plain.forward(ok, &ok), ContractError);
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainAR, NllFallsOverTwoHundredStepsOnSixteenSequences) {
  Rng rng(20);
  TokenSet set{256, {}};
  // Smooth-ish sequences so there is structure to learn.
  for (int s = 0; s < 16; ++s) {
    Tokens t(64);
    int x = static_cast<int>(uniform_int(rng, 0, 255));
    for (auto& v : t) v = x = (x + static_cast<int>(uniform_int(rng, 0, 3))) % 256;
    set.sequences.push_back(t);
  }
  ARConfig c;
  c.steps = 200;
  const auto r = train_ar(set, nullptr, c, 5);
  ASSERT_EQ(r.log.size(), 200u);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += r.log[static_cast<std::size_t>(i)].nll;
    last += r.log[static_cast<std::size_t>(190 + i)].nll;
  }
  EXPECT_LT(last, first);
}

TEST(TrainAR, DeterministicRepeatingPatternIsLearnedAlmostPerfectly) {
  const Tokens pattern{3, 1, 4, 1, 5, 2, 6, 5, 3, 5, 0, 7};
  TokenSet set{8, std::vector<Tokens>(8, pattern)};
  auto c = small_config(8);
  c.steps = 300;
  c.lr = 3e-3;
  const auto r = train_ar(set, nullptr, c, 6);
  double nll = 0;
  for (double p : token_likelihoods(r.model, pattern, nullptr)) nll -= std::log(p);
  EXPECT_LT(nll / static_cast<double>(pattern.size()), 0.1);
}

TEST(TrainAR, TrainedConditionalModelReactsToPermutedConditioning) {
  // The main sequence copies the conditioning sequence, so the model must
  // rely on cross-attention.
  Rng rng(21);
  TokenSet main{8, {}}, cond{8, {}};
  for (int s = 0; s < 32; ++s) {
    const auto t = random_tokens(rng, 12, 8);
    main.sequences.push_back(t);
    cond.sequences.push_back(t);
  }
  auto c = small_config(8, 8);
  c.steps = 150;
  c.lr = 3e-3;
  const auto r = train_ar(main, &cond, c, 7);
  EXPECT_LT(r.log.back().nll, r.log.front().nll);
  auto perm = cond.sequences[0];
  std::reverse(perm.begin(), perm.end());
  const auto a = ar_forward(r.model, main.sequences[0], &cond.sequences[0]);
  const auto b = ar_forward(r.model, main.sequences[0], &perm);
  EXPECT_NE(a, b);
}

TEST(TrainAR, SameSeedGivesIdenticalCheckpoints) {
  Rng rng(22);
  TokenSet set{8, {}};
  for (int s = 0; s < 6; ++s) set.sequences.push_back(random_tokens(rng, 12, 8));
  auto c = small_config(8);
  c.steps = 5;
  c.backend = Backend::favor;
  const auto dir = anomalens::testing::temp_dir("ardet");
  diff::write_checkpoint(dir / "a.ckp", to_checkpoint(train_ar(set, nullptr, c, 3).model, {}));
  diff::write_checkpoint(dir / "b.ckp", to_checkpoint(train_ar(set, nullptr, c, 3).model, {}));
  std::ifstream fa(dir / "a.ckp", std::ios::binary), fb(dir / "b.ckp", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);
}

TEST(TrainAR, VocabularyMismatchIsContractError) {
  TokenSet set{16, {Tokens(12, 0)}};
  EXPECT_THROW(train_ar(set, nullptr, small_config(8), 1), ContractError);
  TokenSet main{8, {Tokens(12, 0)}}, cond{4, {Tokens(12, 0)}};
  EXPECT_THROW(train_ar(main, &cond, small_config(8, 5), 1), ContractError);
  EXPECT_THROW(train_ar(main, nullptr, small_config(8, 5), 1), ContractError);
  EXPECT_THROW(train_ar(TokenSet{8, {}}, nullptr, small_config(8), 1), ContractError);
}

TEST(ARCheckpoint, RoundTripReproducesLogits) {
  auto c = small_config(8, 5);
  c.backend = Backend::favor;
  ARModel<float> m(c, 9);
  const auto dir = anomalens::testing::temp_dir("arckp");
  diff::write_checkpoint(dir / "m.ckp", to_checkpoint(m, {}));
  const auto r = ar_from_checkpoint(diff::read_checkpoint(dir / "m.ckp"));
  Rng rng(9);
  const auto tok = random_tokens(rng, 12, 8), cond = random_tokens(rng, 12, 5);
  EXPECT_EQ(ar_forward(r, tok, &cond), ar_forward(m, tok, &cond));
}

// ---------------------------------------------------------------------------
// Token files

TEST(TokenFile, RoundTrip) {
  const auto dir = anomalens::testing::temp_dir("tok");
  TokenGrid t{{2, 2, 2}, 300, {0, 299, 5, 6, 7, 8, 9, 256}, "vol_3"};
  write_tokens(t, dir / "t.tok");
  EXPECT_EQ(read_tokens(dir / "t.tok"), t);
}

TEST(TokenFile, MalformedFilesAreFormatErrors) {
  const auto dir = anomalens::testing::temp_dir("tokbad");
  container::write(dir / "short.tok", kTokenMagic, {{"version", 1}, {"grid", {2, 2, 2}}, {"vocabulary", 4}},
                   std::vector<std::uint8_t>(6, 0));
  EXPECT_THROW(read_tokens(dir / "short.tok"), FormatError);
  container::write(dir / "range.tok", kTokenMagic, {{"version", 1}, {"grid", {1, 1, 1}}, {"vocabulary", 4}},
                   std::vector<std::uint8_t>{9, 0});
  EXPECT_THROW(read_tokens(dir / "range.tok"), FormatError);
  container::write(dir / "magic.tok", "PVL1", {{"version", 1}}, {});
  EXPECT_THROW(read_tokens(dir / "magic.tok"), FormatError);
}
