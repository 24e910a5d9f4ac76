#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmr/retrieval.hpp"

namespace mmr {

enum class Protocol { All, AllWithThreshold, SmallBatches };

std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view s);

struct ProtocolConfig {
  Protocol protocol = Protocol::All;
  double threshold = 0.80;
  std::size_t batch = 32;
  std::vector<std::size_t> ks{1, 3, 5, 10};
  std::uint64_t seed = 0;

  void validate() const;
};

/// 100 * fraction of ranks <= k.
double recall_at_k(const std::vector<double>& ranks, std::size_t k);
/// Median; the mean of the two central values for an even count.
double median_rank(std::vector<double> ranks);

struct EvalReport {
  Protocol protocol = Protocol::All;
  std::string direction;
  std::size_t samples = 0;
  std::vector<std::size_t> ks;
  std::vector<double> recall;  // percent, one per k
  double medr = 0;
};

/// 1-based rank of `target` in row `scores` (descending; ties go to the lower index).
std::size_t rank_of(std::span<const float> scores, std::size_t target);

/// Evaluates a query-by-gallery score matrix [Q, N]; query q's ground truth is
/// gallery item gt[q]. The threshold protocol needs the gallery self-similarity
/// [N, N]: a candidate counts as correct if it is the ground truth or its
/// similarity to the ground truth reaches the threshold.
EvalReport evaluate_scores(const Tensorf& scores, const std::vector<std::optional<std::size_t>>& gt,
                           const ProtocolConfig& cfg, const Tensorf* gallery_similarity = nullptr,
                           const std::vector<std::string>& query_ids = {});

/// Both directions between `query` and `gallery` modalities over paired test samples.
std::vector<EvalReport> evaluate_model(const MultiModalModel& model, const ParamStore<float>& params,
                                       const std::vector<const PairedSample*>& samples, Modality query,
                                       Modality gallery, const ProtocolConfig& cfg);

std::string report_json(const std::vector<EvalReport>& reports);
std::string report_table(const std::vector<EvalReport>& reports);

}  // namespace mmr
