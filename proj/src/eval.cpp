#include "mmr/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>

namespace mmr {

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::All: return "all";
    case Protocol::AllWithThreshold: return "all-threshold";
    case Protocol::SmallBatches: return "small-batches";
  }
  return "?";
}

Protocol parse_protocol(std::string_view s) {
  for (auto p : {Protocol::All, Protocol::AllWithThreshold, Protocol::SmallBatches})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown protocol: " + std::string(s));
}

void ProtocolConfig::validate() const {
  if (threshold < -1 || threshold > 1) throw ConfigError(fmt::format("threshold {} outside [-1, 1]", threshold));
  if (batch < 2) throw ConfigError("small-batch size must be at least 2");
  if (ks.empty()) throw ConfigError("no recall cutoffs given");
}

double recall_at_k(const std::vector<double>& ranks, std::size_t k) {
  if (ranks.empty()) throw EvalError("recall of an empty rank list");
  std::size_t hit = 0;
  for (double r : ranks) {
    if (r < 1) throw EvalError(fmt::format("rank {} below 1", r));
    if (r <= double(k)) ++hit;
  }
  return 100.0 * double(hit) / double(ranks.size());
}

double median_rank(std::vector<double> ranks) {
  if (ranks.empty()) throw EvalError("median of an empty rank list");
  std::sort(ranks.begin(), ranks.end());
  const std::size_t n = ranks.size();
  return n % 2 ? ranks[n / 2] : 0.5 * (ranks[n / 2 - 1] + ranks[n / 2]);
}

std::size_t rank_of(std::span<const float> scores, std::size_t target) {
  std::size_t rank = 1;
  const float s = scores[target];
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < target)) ++rank;
  return rank;
}

namespace {

// Gallery order for one query row: descending score, ties by index.
std::vector<std::size_t> ranking(std::span<const float> scores) { return top_k(scores, scores.size()); }

EvalReport summarize(Protocol p, const std::vector<double>& ranks, const std::vector<std::size_t>& ks) {
  EvalReport r;
  r.protocol = p;
  r.samples = ranks.size();
  r.ks = ks;
  for (auto k : ks) r.recall.push_back(recall_at_k(ranks, k));
  r.medr = median_rank(ranks);
  return r;
}

}  // namespace

EvalReport evaluate_scores(const Tensorf& scores, const std::vector<std::optional<std::size_t>>& gt,
                           const ProtocolConfig& cfg, const Tensorf* gallery_similarity,
                           const std::vector<std::string>& query_ids) {
  cfg.validate();
  if (scores.rank() != 2) throw EvalError("score matrix must be [Q, N]");
  const std::size_t q = scores.dim(0), n = scores.dim(1);
  if (gt.size() != q) throw EvalError(fmt::format("{} ground-truth entries for {} queries", gt.size(), q));
  if (q == 0 || n == 0) throw EvalError("empty score matrix");
  for (std::size_t i = 0; i < q; ++i) {
    if (!gt[i] || *gt[i] >= n) {
      throw EvalError("query without ground truth: " + (i < query_ids.size() ? query_ids[i] : std::to_string(i)));
    }
  }
  auto row = [&](std::size_t i) { return std::span<const float>(scores.ptr() + i * n, n); };

  switch (cfg.protocol) {
    case Protocol::All: {
      std::vector<double> ranks;
      for (std::size_t i = 0; i < q; ++i) ranks.push_back(double(rank_of(row(i), *gt[i])));
      return summarize(cfg.protocol, ranks, cfg.ks);
    }
    case Protocol::AllWithThreshold: {
      if (!gallery_similarity || gallery_similarity->dims() != Shape{n, n}) {
        throw EvalError("threshold protocol needs an [N, N] gallery similarity matrix");
      }
      const auto& g = *gallery_similarity;
      std::vector<double> ranks;
      for (std::size_t i = 0; i < q; ++i) {
        const std::size_t t = *gt[i];
        const auto order = ranking(row(i));
        std::size_t r = 0;
        while (order[r] != t && double(g[order[r] * n + t]) < cfg.threshold) ++r;
        ranks.push_back(double(r + 1));
      }
      return summarize(cfg.protocol, ranks, cfg.ks);
    }
    case Protocol::SmallBatches: {
      if (q < cfg.batch) throw EvalError(fmt::format("{} queries cannot fill a batch of {}", q, cfg.batch));
      Rng rng(cfg.seed);
      const auto perm = rng.permutation(q);
      const std::size_t batches = q / cfg.batch;
      EvalReport acc;
      acc.protocol = cfg.protocol;
      acc.ks = cfg.ks;
      acc.recall.assign(cfg.ks.size(), 0.0);
      for (std::size_t b = 0; b < batches; ++b) {
        std::vector<std::size_t> members(perm.begin() + long(b * cfg.batch), perm.begin() + long((b + 1) * cfg.batch));
        std::vector<std::size_t> gallery;
        for (auto i : members)
          if (std::find(gallery.begin(), gallery.end(), *gt[i]) == gallery.end()) gallery.push_back(*gt[i]);
        std::vector<double> ranks;
        std::vector<float> sub(gallery.size());
        for (auto i : members) {
          for (std::size_t j = 0; j < gallery.size(); ++j) sub[j] = scores[i * n + gallery[j]];
          const auto target = std::size_t(std::find(gallery.begin(), gallery.end(), *gt[i]) - gallery.begin());
          ranks.push_back(double(rank_of(sub, target)));
        }
        const auto rep = summarize(cfg.protocol, ranks, cfg.ks);
        for (std::size_t k = 0; k < cfg.ks.size(); ++k) acc.recall[k] += rep.recall[k] / double(batches);
        acc.medr += rep.medr / double(batches);
      }
      acc.samples = batches * cfg.batch;
      return acc;
    }
  }
  throw EvalError("unknown protocol");
}

std::vector<EvalReport> evaluate_model(const MultiModalModel& model, const ParamStore<float>& params,
                                       const std::vector<const PairedSample*>& samples, Modality query,
                                       Modality gallery, const ProtocolConfig& cfg) {
  if (samples.empty()) throw EvalError("no evaluation samples");
  const auto inputs = gather_inputs(samples, {query, gallery});
  Tape<float> tape;
  Bound<float> p(tape, params, false);
  const auto qb = model.encode(p, query, inputs.of(query));
  const auto gb = model.encode(p, gallery, inputs.of(gallery));
  const auto mode = model.config().mode;
  const auto agg = model.config().aggregation;
  const Tensorf forward = batch_similarity(qb, gb, mode, agg).value();
  const Tensorf backward = batch_similarity(gb, qb, mode, agg).value();
  Tensorf g_sim, q_sim;
  if (cfg.protocol == Protocol::AllWithThreshold) {
    g_sim = batch_similarity(gb, gb, mode, agg).value();
    q_sim = batch_similarity(qb, qb, mode, agg).value();
  }
  std::vector<std::optional<std::size_t>> gt(samples.size());
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    gt[i] = i;
    ids.push_back(samples[i]->id);
  }
  auto a = evaluate_scores(forward, gt, cfg, &g_sim, ids);
  a.direction = fmt::format("{}->{}", to_string(query), to_string(gallery));
  auto b = evaluate_scores(backward, gt, cfg, &q_sim, ids);
  b.direction = fmt::format("{}->{}", to_string(gallery), to_string(query));
  return {a, b};
}

std::string report_json(const std::vector<EvalReport>& reports) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["protocol"] = std::string(to_string(r.protocol));
    j["direction"] = r.direction;
    j["samples"] = r.samples;
    for (std::size_t k = 0; k < r.ks.size(); ++k) j[fmt::format("R@{}", r.ks[k])] = r.recall[k];
    j["MedR"] = r.medr;
    out.push_back(j);
  }
  return out.dump(2);
}

std::string report_table(const std::vector<EvalReport>& reports) {
  if (reports.empty()) return {};
  std::string out = fmt::format("{:<16} {:<16}", "protocol", "direction");
  for (auto k : reports.front().ks) out += fmt::format(" {:>7}", fmt::format("R@{}", k));
  out += fmt::format(" {:>7}\n", "MedR");
  for (const auto& r : reports) {
    out += fmt::format("{:<16} {:<16}", to_string(r.protocol), r.direction);
    for (double v : r.recall) out += fmt::format(" {:>7.2f}", v);
    out += fmt::format(" {:>7.2f}\n", r.medr);
  }
  return out;
}

}  // namespace mmr
