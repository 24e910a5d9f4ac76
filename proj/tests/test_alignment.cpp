#include <gtest/gtest.h>

#include <cmath>

#include "mmr/alignment.hpp"
#include "test_util.hpp"

using namespace mmr;
using mmr::testing::random_tensor;
using mmr::testing::random_unit_rows;

namespace {

/// Token-pair double loop, written from the formula.
double naive_h(const Tensord& x, const std::vector<double>& wx, const Tensord& y, const std::vector<double>& wy,
               Aggregation agg) {
  const std::size_t lx = x.dim(0), ly = y.dim(0), c = x.dim(1);
  auto ip = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t q = 0; q < c; ++q) s += x[i * c + q] * y[j * c + q];
    return s;
  };
  double fwd = 0, bwd = 0;
  for (std::size_t i = 0; i < lx; ++i) {
    double best = -1e300, total = 0;
    for (std::size_t j = 0; j < ly; ++j) {
      best = std::max(best, ip(i, j));
      total += ip(i, j);
    }
    fwd += wx[i] * (agg == Aggregation::Max ? best : total / double(ly));
  }
  for (std::size_t j = 0; j < ly; ++j) {
    double best = -1e300, total = 0;
    for (std::size_t i = 0; i < lx; ++i) {
      best = std::max(best, ip(i, j));
      total += ip(i, j);
    }
    bwd += wy[j] * (agg == Aggregation::Max ? best : total / double(lx));
  }
  return 0.5 * fwd + 0.5 * bwd;
}

std::vector<double> uniform(std::size_t n) { return std::vector<double>(n, 1.0 / double(n)); }

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  double s = 0;
  for (auto& v : w) s += (v = rng.uniform() + 1e-3);
  for (auto& v : w) v /= s;
  return w;
}

double h(const Tensord& x, const std::vector<double>& wx, const Tensord& y, const std::vector<double>& wy,
         Aggregation agg) {
  return fine_similarity<double>(x, wx, y, wy, agg);
}

/// Padded batch of random unit tokens with random valid lengths and softmax-like weights.
EncodedBatch<double> random_batch(Tape<double>& tape, std::size_t n, std::size_t lmax, std::size_t c,
                                  std::uint64_t seed) {
  Rng rng(seed);
  auto tokens = random_unit_rows<double>({n, lmax, c}, seed);
  Lengths lengths(n);
  Tensord w({n, lmax});
  for (std::size_t i = 0; i < n; ++i) {
    lengths[i] = 1 + rng.index(lmax);
    const auto wi = random_weights(lengths[i], rng);
    for (std::size_t t = 0; t < lengths[i]; ++t) w[i * lmax + t] = wi[t];
  }
  EncodedBatch<double> b;
  b.tokens = tape.constant(tokens);
  b.lengths = lengths;
  b.weights = tape.constant(w);
  return b;
}

Tensord valid_rows(const Tensord& padded, std::size_t i, std::size_t len) {
  const std::size_t lmax = padded.dim(1), c = padded.dim(2);
  std::vector<double> rows(padded.ptr() + i * lmax * c, padded.ptr() + (i * lmax + len) * c);
  return Tensord({len, c}, rows);
}

std::vector<double> valid_weights(const Tensord& w, std::size_t i, std::size_t len) {
  const std::size_t lmax = w.dim(1);
  return std::vector<double>(w.ptr() + i * lmax, w.ptr() + i * lmax + len);
}

double loss_of(const Tensord& sim, double tau) {
  Tape<double> tape;
  return contrastive_pair_loss(tape.constant(sim), tape.constant(Tensord::scalar(tau))).value().item();
}

}  // namespace

TEST(FineSimilarity, IdenticalSingleTokenIsOne) {
  const Tensord u({1, 2}, {0.6, 0.8});
  EXPECT_NEAR(h(u, {1.0}, u, {1.0}, Aggregation::Max), 1.0, 1e-12);
}

TEST(FineSimilarity, HandComputedMax) {
  const Tensord x({2, 2}, {1, 0, 0, 1}), y({1, 2}, {1, 0});
  EXPECT_NEAR(h(x, {0.5, 0.5}, y, {1.0}, Aggregation::Max), 0.75, 1e-12);
}

TEST(FineSimilarity, HandComputedMean) {
  const Tensord x({2, 2}, {1, 0, 0, 1}), y({1, 2}, {1, 0});
  EXPECT_NEAR(h(x, {0.5, 0.5}, y, {1.0}, Aggregation::Mean), 0.5, 1e-12);
}

TEST(FineSimilarity, SymmetricOnRandomPairs) {
  Rng rng(1);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = random_unit_rows<double>({1 + s % 7, 8}, 2 * s), y = random_unit_rows<double>({1 + s % 5, 8}, 2 * s + 1);
    const auto wx = random_weights(x.dim(0), rng), wy = random_weights(y.dim(0), rng);
    for (auto agg : {Aggregation::Max, Aggregation::Mean})
      EXPECT_NEAR(h(x, wx, y, wy, agg), h(y, wy, x, wx, agg), 1e-6);
  }
}

TEST(FineSimilarity, EmptySequenceIsError) {
  const Tensord x({0, 2}), y({1, 2}, {1, 0});
  EXPECT_THROW(h(x, {}, y, {1.0}, Aggregation::Max), EmptySequenceError);
}

TEST(FineSimilarityProperty, MatchesNaiveLoopAndIsBounded) {
  Rng rng(2);
  for (std::uint64_t s = 0; s < 300; ++s) {
    const auto x = random_unit_rows<double>({1 + rng.index(8), 6}, 10 + s);
    const auto y = random_unit_rows<double>({1 + rng.index(8), 6}, 1000 + s);
    const auto wx = random_weights(x.dim(0), rng), wy = random_weights(y.dim(0), rng);
    for (auto agg : {Aggregation::Max, Aggregation::Mean}) {
      const double v = h(x, wx, y, wy, agg);
      ASSERT_NEAR(v, naive_h(x, wx, y, wy, agg), 1e-12);
      ASSERT_LE(std::abs(v), 1.0 + 1e-12);
    }
  }
}

TEST(FineSimilarityProperty, MaxDominatesMeanUnderUniformWeights) {
  Rng rng(3);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto x = random_unit_rows<double>({1 + rng.index(8), 4}, 5000 + s);
    const auto y = random_unit_rows<double>({1 + rng.index(8), 4}, 9000 + s);
    const auto wx = uniform(x.dim(0)), wy = uniform(y.dim(0));
    ASSERT_GE(h(x, wx, y, wy, Aggregation::Max), h(x, wx, y, wy, Aggregation::Mean) - 1e-12);
  }
}

TEST(SimilarityMatrix, SingleIdenticalPair) {
  Tape<double> tape;
  const auto t = random_unit_rows<double>({1, 3, 4}, 4);
  auto x = tape.constant(t);
  auto w = tape.constant(Tensord({1, 3}, 1.0 / 3.0));
  EXPECT_NEAR(ad::similarity_matrix(x, {}, w, x, {}, w, Aggregation::Max).value()[0], 1.0, 1e-12);
}

TEST(SimilarityMatrix, BatchedEqualsNaiveLoopWithPadding) {
  for (auto agg : {Aggregation::Max, Aggregation::Mean}) {
    Tape<double> tape;
    auto a = random_batch(tape, 3, 5, 8, 5), b = random_batch(tape, 3, 7, 8, 6);
    const auto s = ad::similarity_matrix(a.tokens, a.lengths, a.weights, b.tokens, b.lengths, b.weights, agg).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const double expect = naive_h(valid_rows(a.tokens.value(), i, a.lengths[i]),
                                      valid_weights(a.weights.value(), i, a.lengths[i]),
                                      valid_rows(b.tokens.value(), j, b.lengths[j]),
                                      valid_weights(b.weights.value(), j, b.lengths[j]), agg);
        EXPECT_NEAR(s[i * 3 + j], expect, 1e-5);
      }
  }
}

TEST(SimilarityMatrix, OrthogonalSingleTokensGiveIdentity) {
  Tensord e({4, 1, 4});
  for (std::size_t i = 0; i < 4; ++i) e[i * 4 + i] = 1.0;
  Tape<double> tape;
  auto x = tape.constant(e);
  auto w = tape.constant(Tensord({4, 1}, 1.0));
  const auto s = ad::similarity_matrix(x, {}, w, x, {}, w, Aggregation::Max).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s[i * 4 + j], i == j ? 1.0 : 0.0, 1e-12);
}

TEST(SimilarityMatrix, ZeroLengthEntryIsError) {
  Tape<double> tape;
  auto a = random_batch(tape, 2, 3, 4, 7);
  a.lengths[1] = 0;
  EXPECT_THROW(ad::similarity_matrix(a.tokens, a.lengths, a.weights, a.tokens, Lengths{}, a.weights, Aggregation::Max),
               EmptySequenceError);
}

TEST(ContrastiveLoss, IdentityTwoByTwo) {
  const double per = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(per, 0.3133, 1e-4);
  EXPECT_NEAR(loss_of(Tensord({2, 2}, {1, 0, 0, 1}), 1.0), 2 * per, 1e-9);
}

TEST(ContrastiveLoss, AllEqualMatrixIsLogBPerDirection) {
  for (std::size_t b : {2u, 4u, 8u, 16u}) {
    const Tensord sim({b, b}, 0.37);
    Tape<double> tape;
    const double one_direction = ad::diagonal_nll(tape.constant(sim)).value().item();
    EXPECT_NEAR(one_direction, std::log(double(b)), 1e-9);
    EXPECT_NEAR(loss_of(sim, 0.5), 2 * std::log(double(b)), 1e-9);
  }
}

TEST(ContrastiveLoss, SmallestTemperatureDrivesIdentityLossToZero) {
  EXPECT_LT(loss_of(Tensord({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), 0.01), 1e-6);
}

TEST(ContrastiveLoss, NonSquareIsPairingError) {
  EXPECT_THROW(loss_of(Tensord({2, 3}), 1.0), PairingError);
}

TEST(ContrastiveLossProperty, NonNegativeAndVanishesWithMargin) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto sim = random_tensor<double>({5, 5}, s);
    EXPECT_GE(loss_of(sim, 0.1 + 0.05 * double(s)), 0.0);
  }
  double prev = 1e300;
  for (double margin : {0.5, 1.0, 2.0, 5.0, 10.0, 40.0}) {
    Tensord sim({4, 4});
    for (std::size_t i = 0; i < 4; ++i) sim[i * 4 + i] = margin;
    const double l = loss_of(sim, 1.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(ContrastiveLossProperty, SoftmaxArgmaxMatchesRawArgmax) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto sim = random_tensor<double>({6, 6}, 100 + s);
    for (double tau : {0.01, 0.1, 1.0, 10.0}) {
      Tape<double> tape;
      const auto p =
          ad::softmax(ad::div_scalar(tape.constant(sim), tape.constant(Tensord::scalar(tau))), 1).value();
      for (std::size_t i = 0; i < 6; ++i) {
        const auto row = sim.data().subspan(i * 6, 6), prow = p.data().subspan(i * 6, 6);
        ASSERT_EQ(std::max_element(row.begin(), row.end()) - row.begin(),
                  std::max_element(prow.begin(), prow.end()) - prow.begin());
      }
    }
  }
}

TEST(TotalAlignment, TermCountsFollowPairs) {
  for (std::size_t k : {2u, 3u, 4u}) {
    Tape<double> tape;
    std::map<Modality, EncodedBatch<double>> batches;
    for (std::size_t m = 0; m < k; ++m) batches[kAllModalities[m]] = random_batch(tape, 4, 3, 8, 10 + m);
    const auto loss =
        total_alignment_loss(batches, tape.constant(Tensord::scalar(0.1)), AlignmentMode::Sequence, Aggregation::Max);
    EXPECT_EQ(loss.terms.size(), k * (k - 1) / 2);
    double sum = 0;
    for (const auto& t : loss.terms) sum += t.second.value().item();
    EXPECT_NEAR(loss.total.value().item(), sum, 1e-12);
  }
}

TEST(TotalAlignment, DroppingAModalityRemovesOnlyItsTerms) {
  Tape<double> tape;
  std::map<Modality, EncodedBatch<double>> batches;
  for (auto m : kAllModalities) batches[m] = random_batch(tape, 4, 3, 8, 20 + std::size_t(m));
  auto tau = tape.constant(Tensord::scalar(0.2));
  const auto full = total_alignment_loss(batches, tau, AlignmentMode::Sequence, Aggregation::Max);
  batches.erase(Modality::Video);
  const auto reduced = total_alignment_loss(batches, tau, AlignmentMode::Sequence, Aggregation::Max);
  ASSERT_EQ(full.terms.size(), 6u);
  ASSERT_EQ(reduced.terms.size(), 3u);
  std::size_t matched = 0;
  for (const auto& [pair, term] : full.terms) {
    if (pair.first == Modality::Video || pair.second == Modality::Video) continue;
    const auto it = std::find_if(reduced.terms.begin(), reduced.terms.end(),
                                 [&](const auto& t) { return t.first == pair; });
    ASSERT_NE(it, reduced.terms.end());
    EXPECT_EQ(it->second.value().item(), term.value().item());
    ++matched;
  }
  EXPECT_EQ(matched, 3u);
}

TEST(TotalAlignment, MismatchedBatchSizesArePairingError) {
  Tape<double> tape;
  std::map<Modality, EncodedBatch<double>> batches{{Modality::Motion, random_batch(tape, 4, 3, 8, 1)},
                                                   {Modality::Text, random_batch(tape, 3, 3, 8, 2)}};
  EXPECT_THROW(
      total_alignment_loss(batches, tape.constant(Tensord::scalar(0.1)), AlignmentMode::Sequence, Aggregation::Max),
      PairingError);
}

TEST(TotalAlignmentProperty, PermutationEquivariant) {
  for (auto mode : {AlignmentMode::Sequence, AlignmentMode::Global, AlignmentMode::GlobalPlusSequence}) {
    Tape<double> tape;
    std::map<Modality, EncodedBatch<double>> batches, permuted;
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    for (auto m : kAllModalities) {
      batches[m] = random_batch(tape, 5, 4, 8, 30 + std::size_t(m));
      auto& b = batches[m];
      EncodedBatch<double> p;
      p.tokens = ad::index_select0(b.tokens, perm);
      p.weights = ad::index_select0(b.weights, perm);
      for (auto i : perm) p.lengths.push_back(b.lengths[i]);
      permuted[m] = p;
    }
    auto tau = tape.constant(Tensord::scalar(0.3));
    const double a = total_alignment_loss(batches, tau, mode, Aggregation::Max).total.value().item();
    const double b = total_alignment_loss(permuted, tau, mode, Aggregation::Max).total.value().item();
    EXPECT_NEAR(a, b, 1e-6) << to_string(mode);
  }
}

TEST(TokenWeights, SoftmaxOverValidTokensOnly) {
  ParamStore<float> ps;
  Rng rng(4);
  init_weight_head(ps, Modality::Text, 8, rng);
  EXPECT_FALSE(ps.contains("text.weight.b"));
  Tape<float> tape;
  Bound<float> p(tape, ps, false);
  const auto w =
      token_weights(p, Modality::Text, tape.constant(random_tensor<float>({3, 5, 8}, 5)), Lengths{5, 2, 1}).value();
  const Lengths lengths{5, 2, 1};
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t t = 0; t < 5; ++t) {
      if (t >= lengths[i]) EXPECT_EQ(w[i * 5 + t], 0.0f);
      s += w[i * 5 + t];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

namespace {

struct FusionFixture {
  FusionHead head{8, 2, 1};
  ParamStore<float> ps;
  FusionFixture() {
    Rng rng(6);
    head.init(ps, rng);
  }
};

std::map<Modality, EncodedBatch<double>> fusion_batches(Tape<double>& tape, std::size_t n) {
  std::map<Modality, EncodedBatch<double>> b;
  b[Modality::Motion] = random_batch(tape, n, 6, 8, 40);
  b[Modality::Text] = random_batch(tape, n, 4, 8, 41);
  b[Modality::Audio] = random_batch(tape, n, 3, 8, 42);
  return b;
}

}  // namespace

TEST(Reconstruction, ZeroResidualAndNoMaskIsLayerNormCascade) {
  FusionFixture f;
  f.head.zero_residual_branches(f.ps);
  const auto ps = f.ps.cast<double>();
  Tape<double> tape;
  Bound<double> p(tape, ps, false);
  auto batches = fusion_batches(tape, 2);
  const auto& motion = batches[Modality::Motion];
  const double loss = f.head.reconstruction_loss(p, batches, 0.1, 7, {1, 2}).value().item();
  // 0.1 * length < 1 for every sample here, so nothing is masked.
  const auto pe = sinusoidal_encoding<double>(6, 8);
  double expect = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    const std::size_t l = motion.lengths[b];
    std::vector<double> in;
    const auto e = valid_rows(motion.tokens.value(), b, l);
    for (std::size_t i = 0; i < l * 8; ++i) in.push_back(e[i] + pe[i]);
    const auto out = mmr::testing::layer_norm_rows(mmr::testing::layer_norm_rows(in, 8), 8);
    double sq = 0;
    for (std::size_t i = 0; i < l * 8; ++i) sq += (out[i] - e[i]) * (out[i] - e[i]);
    expect += std::sqrt(sq) / 2;
  }
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, expect, 1e-9);
}

TEST(Reconstruction, MatchesPerSampleNaiveFusion) {
  FusionFixture f;
  const auto ps = f.ps.cast<double>();
  Tape<double> tape;
  Bound<double> p(tape, ps, false);
  auto batches = fusion_batches(tape, 2);
  const std::vector<std::uint64_t> keys{11, 12};
  const double ratio = 0.5;
  const double loss = f.head.reconstruction_loss(p, batches, ratio, 99, keys).value().item();

  const TransformerStack stack("fusion.layer", 1, {8, 2});
  const auto pe = sinusoidal_encoding<double>(6, 8);
  const auto token = ps.get("fusion.mask_token");
  double expect = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& motion = batches[Modality::Motion];
    const std::size_t l = motion.lengths[b];
    const auto e = valid_rows(motion.tokens.value(), b, l);
    auto hat = e;
    for (std::size_t pos : mask_positions(99, keys[b], l, ratio))
      for (std::size_t c = 0; c < 8; ++c) hat[pos * 8 + c] = token[c];
    std::vector<double> seq;
    for (std::size_t i = 0; i < l * 8; ++i) seq.push_back(hat[i] + pe[i]);
    for (auto m : {Modality::Text, Modality::Audio}) {
      const auto r = valid_rows(batches[m].tokens.value(), b, batches[m].lengths[b]);
      seq.insert(seq.end(), r.data().begin(), r.data().end());
    }
    Tape<double> t2;
    Bound<double> p2(t2, ps, false);
    const std::size_t lf = seq.size() / 8;
    const auto out = stack.forward(p2, t2.constant(Tensord({1, lf, 8}, seq))).value();
    double sq = 0;
    for (std::size_t i = 0; i < l * 8; ++i) sq += (out[i] - e[i]) * (out[i] - e[i]);
    expect += std::sqrt(sq) / 2;
  }
  EXPECT_NEAR(loss, expect, 1e-9);
}

TEST(Reconstruction, DuplicateSamplesGetIdenticalLosses) {
  FusionFixture f;
  const auto ps = f.ps.cast<double>();
  Tape<double> tape;
  Bound<double> p(tape, ps, false);
  auto single = fusion_batches(tape, 1);
  std::map<Modality, EncodedBatch<double>> twice;
  for (auto& [m, b] : single) {
    EncodedBatch<double> d;
    d.tokens = ad::index_select0(b.tokens, {0, 0});
    d.weights = ad::index_select0(b.weights, {0, 0});
    d.lengths = {b.lengths[0], b.lengths[0]};
    twice[m] = d;
  }
  const double one = f.head.reconstruction_loss(p, single, 0.5, 3, {77}).value().item();
  const double both = f.head.reconstruction_loss(p, twice, 0.5, 3, {77, 77}).value().item();
  EXPECT_NEAR(one, both, 1e-12);
}

TEST(MaskPositions, CountAndDeterminism) {
  const auto a = mask_positions(5, 9, 32, 0.3);
  EXPECT_EQ(a.size(), 9u);
  EXPECT_EQ(a, mask_positions(5, 9, 32, 0.3));
  EXPECT_NE(a, mask_positions(6, 9, 32, 0.3));
  EXPECT_TRUE(mask_positions(5, 9, 3, 0.3).empty());
  EXPECT_THROW(mask_positions(5, 9, 3, 1.5), ConfigError);
}
