#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmr/model.hpp"

namespace mmr {

/// One encoded sequence: valid tokens [L, C] and their weights (sum 1).
struct EncodedSequence {
  Tensorf tokens;
  std::vector<float> weights;
};

/// Encodes samples in batches of `batch` with frozen parameters. In global mode
/// each sequence is its single normalized mean token with weight 1.
std::vector<EncodedSequence> encode_sequences(const MultiModalModel& model, const ParamStore<float>& params,
                                              Modality m, const std::vector<const Tensorf*>& inputs,
                                              std::size_t batch = 64);

/// Immutable-after-build gallery of token sequences, packed contiguously.
class GalleryIndex {
 public:
  GalleryIndex(std::size_t dim, Aggregation agg, std::string config_hash = {});

  /// Appends an entry; throws DataError on a duplicate id or bad dims.
  void add(const std::string& id, const EncodedSequence& seq);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  Aggregation aggregation() const noexcept { return agg_; }
  const std::string& config_hash() const noexcept { return hash_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  std::optional<std::size_t> find(const std::string& id) const;
  std::size_t length(std::size_t i) const { return lengths_.at(i); }
  EncodedSequence entry(std::size_t i) const;

  kernels::PackedView<float> view() const;

  /// `<dir>/index.json`, `entries.jsonl`, `tokens.mmrt`, `weights.mmrt`.
  void save(const std::filesystem::path& dir) const;
  static GalleryIndex load(const std::filesystem::path& dir);

 private:
  std::size_t dim_;
  Aggregation agg_;
  std::string hash_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::vector<float> tokens_;
  std::vector<float> weights_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> lengths_;
};

/// [Q, N] exact scores of every query against every gallery entry.
Tensorf score_all(const std::vector<EncodedSequence>& queries, const GalleryIndex& index, std::size_t block = 256);

struct RankedCandidate {
  std::string id;
  float score = 0;
};

struct RankingResult {
  std::string query_id;
  std::vector<RankedCandidate> candidates;
  /// 1-based rank of the ground truth among all entries, when one was named.
  std::optional<std::size_t> gt_rank;
};

/// Indices of the k best scores: descending score, ties by ascending index.
std::vector<std::size_t> top_k(std::span<const float> scores, std::size_t k);

RankingResult retrieve(const EncodedSequence& query, const GalleryIndex& index, std::size_t k,
                       const std::string& query_id = {}, const std::optional<std::string>& gt_id = std::nullopt);

}  // namespace mmr
