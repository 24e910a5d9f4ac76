#include "mmr/retrieval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mmr/tensor_file.hpp"

namespace mmr {

std::vector<EncodedSequence> encode_sequences(const MultiModalModel& model, const ParamStore<float>& params,
                                              Modality m, const std::vector<const Tensorf*>& inputs,
                                              std::size_t batch) {
  const auto mode = model.config().mode;
  if (mode == AlignmentMode::GlobalPlusSequence) {
    throw ConfigError("sequence export supports the sequence or global alignment mode only");
  }
  std::vector<EncodedSequence> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch) {
    const std::size_t end = std::min(inputs.size(), start + batch);
    std::vector<const Tensorf*> chunk(inputs.begin() + long(start), inputs.begin() + long(end));
    Tape<float> tape;
    Bound<float> p(tape, params, false);
    const auto enc = model.encode(p, m, chunk);
    const std::size_t c = model.config().dim;
    if (mode == AlignmentMode::Global) {
      const auto& g = enc.global.value();
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        out.push_back({Tensorf({1, c}, std::vector<float>(g.ptr() + i * c, g.ptr() + (i + 1) * c)), {1.0f}});
      }
      continue;
    }
    const auto& t = enc.tokens.value();
    const auto& w = enc.weights.value();
    const std::size_t l = t.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const std::size_t li = enc.lengths[i];
      const float* tp = t.ptr() + i * l * c;
      out.push_back({Tensorf({li, c}, std::vector<float>(tp, tp + li * c)),
                     std::vector<float>(w.ptr() + i * l, w.ptr() + i * l + li)});
    }
  }
  return out;
}

GalleryIndex::GalleryIndex(std::size_t dim, Aggregation agg, std::string config_hash)
    : dim_(dim), agg_(agg), hash_(std::move(config_hash)) {
  if (dim_ == 0) throw ConfigError("gallery dim must be positive");
}

void GalleryIndex::add(const std::string& id, const EncodedSequence& seq) {
  if (by_id_.count(id)) throw DataError("duplicate gallery id: " + id);
  if (seq.tokens.rank() != 2 || seq.tokens.dim(1) != dim_) {
    throw DataError(fmt::format("gallery entry {}: expected [L, {}], got {}", id, dim_, shape_str(seq.tokens.dims())));
  }
  if (seq.tokens.dim(0) == 0) throw EmptySequenceError("gallery entry " + id + " has no tokens");
  if (seq.weights.size() != seq.tokens.dim(0)) throw DataError("gallery entry " + id + ": one weight per token required");
  by_id_[id] = ids_.size();
  ids_.push_back(id);
  offsets_.push_back(weights_.size());
  lengths_.push_back(seq.tokens.dim(0));
  tokens_.insert(tokens_.end(), seq.tokens.data().begin(), seq.tokens.data().end());
  weights_.insert(weights_.end(), seq.weights.begin(), seq.weights.end());
}

std::optional<std::size_t> GalleryIndex::find(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

EncodedSequence GalleryIndex::entry(std::size_t i) const {
  const std::size_t o = offsets_.at(i), l = lengths_.at(i);
  return {Tensorf({l, dim_}, std::vector<float>(tokens_.begin() + long(o * dim_), tokens_.begin() + long((o + l) * dim_))),
          std::vector<float>(weights_.begin() + long(o), weights_.begin() + long(o + l))};
}

kernels::PackedView<float> GalleryIndex::view() const {
  return {tokens_.data(), weights_.data(), offsets_.data(), lengths_.data(), ids_.size(), dim_};
}

void GalleryIndex::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  const std::size_t total = weights_.size();
  write_tensor_file(tmp / "tokens.mmrt", Tensorf({total, dim_}, tokens_));
  write_tensor_file(tmp / "weights.mmrt", Tensorf({total}, weights_));
  std::string entries;
  for (std::size_t i = 0; i < size(); ++i) {
    nlohmann::ordered_json e{{"id", ids_[i]}, {"offset", offsets_[i]}, {"length", lengths_[i]}};
    entries += e.dump() + "\n";
  }
  write_file_atomic(tmp / "entries.jsonl", entries);
  nlohmann::ordered_json meta{{"size", size()},
                              {"dim", dim_},
                              {"aggregation", std::string(to_string(agg_))},
                              {"config_hash", hash_}};
  write_file_atomic(tmp / "index.json", meta.dump(2) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

GalleryIndex GalleryIndex::load(const std::filesystem::path& dir) {
  const auto meta = nlohmann::json::parse(read_file(dir / "index.json"));
  GalleryIndex idx(meta.at("dim").get<std::size_t>(), parse_aggregation(meta.at("aggregation").get<std::string>()),
                   meta.at("config_hash").get<std::string>());
  const auto tokens = read_tensor_file(dir / "tokens.mmrt");
  const auto weights = read_tensor_file(dir / "weights.mmrt");
  if (tokens.rank() != 2 || tokens.dim(1) != idx.dim_ || weights.rank() != 1 || weights.dim(0) != tokens.dim(0)) {
    throw DataError("index tensors disagree with index.json in " + dir.string());
  }
  std::istringstream lines(read_file(dir / "entries.jsonl"));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto e = nlohmann::json::parse(line);
    const auto o = e.at("offset").get<std::size_t>(), l = e.at("length").get<std::size_t>();
    if (o + l > weights.dim(0)) throw DataError(fmt::format("{}:{}: entry exceeds token table", (dir / "entries.jsonl").string(), lineno));
    EncodedSequence seq{Tensorf({l, idx.dim_}, std::vector<float>(tokens.ptr() + o * idx.dim_, tokens.ptr() + (o + l) * idx.dim_)),
                        std::vector<float>(weights.ptr() + o, weights.ptr() + o + l)};
    idx.add(e.at("id").get<std::string>(), seq);
  }
  if (idx.size() != meta.at("size").get<std::size_t>()) throw DataError("index size mismatch in " + dir.string());
  return idx;
}

Tensorf score_all(const std::vector<EncodedSequence>& queries, const GalleryIndex& index, std::size_t block) {
  if (queries.empty()) throw QueryError("no queries");
  if (index.size() == 0) throw QueryError("gallery is empty");
  std::vector<float> tokens, weights;
  std::vector<std::size_t> offsets, lengths;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& s = queries[q];
    if (s.tokens.rank() != 2 || s.tokens.dim(1) != index.dim()) {
      throw QueryError(fmt::format("query {}: expected [L, {}], got {}", q, index.dim(), shape_str(s.tokens.dims())));
    }
    if (s.tokens.dim(0) == 0) throw EmptySequenceError(fmt::format("query {} has no tokens", q));
    if (s.weights.size() != s.tokens.dim(0)) throw QueryError(fmt::format("query {}: one weight per token required", q));
    offsets.push_back(weights.size());
    lengths.push_back(s.tokens.dim(0));
    tokens.insert(tokens.end(), s.tokens.data().begin(), s.tokens.data().end());
    weights.insert(weights.end(), s.weights.begin(), s.weights.end());
  }
  kernels::PackedView<float> qv{tokens.data(), weights.data(), offsets.data(), lengths.data(), queries.size(), index.dim()};
  Tensorf out({queries.size(), index.size()});
  kernels::score_matrix(qv, index.view(), index.aggregation(), out.ptr(), block);
  return out;
}

std::vector<std::size_t> top_k(std::span<const float> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + long(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

RankingResult retrieve(const EncodedSequence& query, const GalleryIndex& index, std::size_t k,
                       const std::string& query_id, const std::optional<std::string>& gt_id) {
  if (k == 0) throw QueryError("k must be at least 1");
  if (k > index.size()) throw QueryError(fmt::format("k = {} exceeds gallery size {}", k, index.size()));
  std::optional<std::size_t> gt;
  if (gt_id) {
    gt = index.find(*gt_id);
    if (!gt) throw QueryError("ground-truth id not in gallery: " + *gt_id);
  }
  const auto scores = score_all({query}, index);
  RankingResult r;
  r.query_id = query_id;
  for (auto i : top_k(scores.data(), k)) r.candidates.push_back({index.id(i), scores[i]});
  if (gt) {
    std::size_t rank = 1;
    const float s = scores[*gt];
    for (std::size_t j = 0; j < index.size(); ++j)
      if (scores[j] > s || (scores[j] == s && j < *gt)) ++rank;
    r.gt_rank = rank;
  }
  return r;
}

}  // namespace mmr
