#include <gtest/gtest.h>

#include <cmath>

#include "mmr/alignment.hpp"
#include "mmr/parallel.hpp"
#include "mmr/retrieval.hpp"
#include "test_util.hpp"

using namespace mmr;
using mmr::testing::random_unit_rows;

namespace {

EncodedSequence random_sequence(std::size_t len, std::size_t c, std::uint64_t seed) {
  EncodedSequence s;
  s.tokens = random_unit_rows<float>({len, c}, seed);
  Rng rng(seed ^ 0xABCDEF);
  double total = 0;
  s.weights.resize(len);
  for (auto& w : s.weights) total += (w = float(rng.uniform() + 0.05));
  for (auto& w : s.weights) w = float(w / total);
  return s;
}

GalleryIndex random_index(std::size_t n, std::size_t c, std::uint64_t seed, Aggregation agg = Aggregation::Max) {
  GalleryIndex idx(c, agg, "hash");
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) idx.add("m" + std::to_string(i), random_sequence(1 + rng.index(12), c, seed * 7919 + i));
  return idx;
}

/// One token per entry, chosen so the scores against a fixed query are known.
GalleryIndex scored_index(const std::vector<float>& scores) {
  GalleryIndex idx(2, Aggregation::Max);
  const char* names[] = {"a", "b", "c", "d", "e"};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const float s = scores[i];
    idx.add(names[i], {Tensorf({1, 2}, {s, std::sqrt(1 - s * s)}), {1.0f}});
  }
  return idx;
}

double brute(const EncodedSequence& q, const EncodedSequence& g, Aggregation agg) {
  return fine_similarity<float>(q.tokens, q.weights, g.tokens, g.weights, agg);
}

}  // namespace

TEST(GalleryIndex, ReportsSizeAndDims) {
  GalleryIndex idx(8, Aggregation::Max);
  idx.add("a", random_sequence(3, 8, 1));
  idx.add("b", random_sequence(5, 8, 2));
  idx.add("c", random_sequence(1, 8, 3));
  EXPECT_EQ(idx.size(), 3u);
  EXPECT_EQ(idx.dim(), 8u);
  EXPECT_EQ(idx.length(1), 5u);
  EXPECT_EQ(idx.find("c"), std::optional<std::size_t>(2));
}

TEST(GalleryIndex, DuplicateIdIsErrorNamingId) {
  GalleryIndex idx(4, Aggregation::Max);
  idx.add("walk", random_sequence(2, 4, 1));
  try {
    idx.add("walk", random_sequence(2, 4, 2));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("walk"), std::string::npos);
  }
}

TEST(GalleryIndex, RoundTripGivesBitIdenticalScores) {
  const auto idx = random_index(50, 16, 4);
  const auto dir = mmr::testing::temp_dir("index_rt");
  idx.save(dir);
  const auto back = GalleryIndex::load(dir);
  EXPECT_EQ(back.size(), idx.size());
  EXPECT_EQ(back.config_hash(), "hash");
  const std::vector<EncodedSequence> q{random_sequence(6, 16, 99)};
  const auto a = score_all(q, idx), b = score_all(q, back);
  EXPECT_EQ(a, b);
  EXPECT_EQ(retrieve(q[0], idx, 10).candidates.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i)
    EXPECT_EQ(retrieve(q[0], idx, 10).candidates[i].id, retrieve(q[0], back, 10).candidates[i].id);
}

TEST(Retrieve, BestOfThree) {
  const auto idx = scored_index({0.2f, 0.9f, 0.5f});
  const EncodedSequence q{Tensorf({1, 2}, {1, 0}), {1.0f}};
  const auto r = retrieve(q, idx, 1);
  ASSERT_EQ(r.candidates.size(), 1u);
  EXPECT_EQ(r.candidates[0].id, "b");
  EXPECT_NEAR(r.candidates[0].score, 0.9f, 1e-6);
}

TEST(Retrieve, QueryEqualToEntryScoresOneAndRanksFirst) {
  auto idx = random_index(40, 8, 5);
  const auto e = idx.entry(17);
  const auto r = retrieve(e, idx, 3, "q", idx.id(17));
  EXPECT_EQ(r.candidates[0].id, idx.id(17));
  EXPECT_NEAR(r.candidates[0].score, 1.0f, 1e-5);
  EXPECT_EQ(r.gt_rank, std::optional<std::size_t>(1));
}

TEST(Retrieve, ValidatesKAndDims) {
  const auto idx = random_index(3, 8, 6);
  const auto q = random_sequence(2, 8, 7);
  EXPECT_THROW(retrieve(q, idx, 5), QueryError);
  EXPECT_THROW(retrieve(q, idx, 0), QueryError);
  EXPECT_THROW(retrieve(random_sequence(2, 4, 7), idx, 1), QueryError);
}

TEST(Retrieve, ParallelMatchesSerialForManyQueries) {
  const auto idx = random_index(200, 16, 8);
  std::vector<EncodedSequence> qs;
  for (std::uint64_t i = 0; i < 500; ++i) qs.push_back(random_sequence(1 + i % 9, 16, 1000 + i));
  const auto fast = score_all(qs, idx, 16);
  double worst = 0;
  for (std::size_t i = 0; i < qs.size(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j)
      worst = std::max(worst, std::abs(double(fast[i * idx.size() + j]) - brute(qs[i], idx.entry(j), Aggregation::Max)));
  EXPECT_LE(worst, 1e-5);
}

TEST(ScoreAll, IdenticalSingleEntry) {
  GalleryIndex idx(4, Aggregation::Max);
  const auto s = random_sequence(3, 4, 9);
  idx.add("x", s);
  EXPECT_NEAR(score_all({s}, idx)[0], 1.0f, 1e-6);
}

TEST(ScoreAll, MatchesIndependentRetrieveScores) {
  const auto idx = random_index(8, 8, 10, Aggregation::Mean);
  std::vector<EncodedSequence> qs;
  for (std::uint64_t i = 0; i < 4; ++i) qs.push_back(random_sequence(4, 8, 20 + i));
  const auto s = score_all(qs, idx);
  ASSERT_EQ(s.dims(), (Shape{4, 8}));
  for (std::size_t i = 0; i < 4; ++i) {
    const auto r = retrieve(qs[i], idx, 8);
    for (const auto& c : r.candidates) EXPECT_EQ(c.score, s[i * 8 + *idx.find(c.id)]);
  }
}

TEST(ScoreAll, BlockSizeDoesNotChangeScores) {
  const auto idx = random_index(64, 8, 11);
  std::vector<EncodedSequence> qs{random_sequence(5, 8, 30), random_sequence(2, 8, 31)};
  const auto ref = score_all(qs, idx, 1 << 20);
  for (std::size_t block : {1u, 3u, 16u, 64u}) EXPECT_LE(mmr::testing::max_abs_diff(score_all(qs, idx, block), ref), 1e-5);
}

TEST(TopK, DescendingWithInsertionOrderTies) {
  const std::vector<float> s{0.5f, 0.9f, 0.5f, 0.9f, 0.1f};
  EXPECT_EQ(top_k(s, 5), (std::vector<std::size_t>{1, 3, 0, 2, 4}));
}

TEST(RetrievalProperty, DeterministicAcrossThreadCounts) {
  const auto idx = random_index(300, 16, 12);
  const auto q = random_sequence(7, 16, 40);
  std::vector<RankedCandidate> ref;
  for (int threads : {1, 2, 4, 8}) {
    par::ThreadScope scope(threads);
    const auto r = retrieve(q, idx, 300);
    if (ref.empty()) {
      ref = r.candidates;
      continue;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_EQ(r.candidates[i].id, ref[i].id);
      ASSERT_EQ(r.candidates[i].score, ref[i].score);
    }
  }
}

TEST(RetrievalProperty, GalleryPermutationOnlyRelabels) {
  const auto idx = random_index(60, 8, 13);
  Rng rng(14);
  const auto perm = rng.permutation(idx.size());
  GalleryIndex shuffled(8, Aggregation::Max);
  for (auto i : perm) shuffled.add(idx.id(i), idx.entry(i));
  const auto q = random_sequence(4, 8, 50);
  const auto a = retrieve(q, idx, 60, "q", idx.id(5)), b = retrieve(q, shuffled, 60, "q", idx.id(5));
  EXPECT_EQ(a.gt_rank, b.gt_rank);
  for (std::size_t i = 0; i < 60; ++i) {
    EXPECT_EQ(a.candidates[i].id, b.candidates[i].id);
    EXPECT_EQ(a.candidates[i].score, b.candidates[i].score);
  }
}

TEST(RetrievalProperty, ScoresNonIncreasing) {
  const auto idx = random_index(100, 8, 15);
  const auto r = retrieve(random_sequence(3, 8, 60), idx, 100);
  for (std::size_t i = 1; i < r.candidates.size(); ++i) EXPECT_GE(r.candidates[i - 1].score, r.candidates[i].score);
}
