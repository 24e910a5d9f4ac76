#include "mmr/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>

namespace mmr {

using nlohmann::ordered_json;

bool ModelConfig::has(Modality m) const {
  return std::find(modalities.begin(), modalities.end(), m) != modalities.end();
}

void ModelConfig::validate() const {
  if (!has(Modality::Motion)) throw ConfigError("model modalities must include motion");
  if (modalities.size() < 2) throw ConfigError("model needs motion and at least one other modality");
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError(fmt::format("heads ({}) must divide dim ({})", heads, dim));
  }
  partition.validate(pose_dim);
  if (!(tau_min > 0 && tau_min <= tau_init && tau_init <= tau_max)) {
    throw ConfigError(fmt::format("need 0 < tau_min <= tau_init <= tau_max, got {}, {}, {}", tau_min, tau_init, tau_max));
  }
  if (lambda_recon < 0) throw ConfigError("lambda_recon must be non-negative");
  if (mask_ratio < 0 || mask_ratio > 1) throw ConfigError("mask_ratio must lie in [0, 1]");
}

std::string model_config_json(const ModelConfig& c) {
  ordered_json j;
  j["modalities"] = ordered_json::array();
  for (auto m : c.modalities) j["modalities"].push_back(std::string(to_string(m)));
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["pose_dim"] = c.pose_dim;
  j["stages"] = c.stages;
  j["partition"] = ordered_json::parse(c.partition.to_json());
  j["text_in"] = c.text_in;
  j["text_layers"] = c.text_layers;
  j["text_positional"] = c.text_positional;
  j["video_in"] = c.video_in;
  j["video_layers"] = c.video_layers;
  j["video_positional"] = c.video_positional;
  j["audio_in"] = c.audio_in;
  j["audio_len"] = c.audio_len;
  j["memory_slots"] = c.memory_slots;
  j["compression"] = std::string(to_string(c.compression));
  j["audio_layers"] = c.audio_layers;
  j["mode"] = std::string(to_string(c.mode));
  j["aggregation"] = std::string(to_string(c.aggregation));
  j["tau_init"] = c.tau_init;
  j["tau_min"] = c.tau_min;
  j["tau_max"] = c.tau_max;
  j["lambda_recon"] = c.lambda_recon;
  j["mask_ratio"] = c.mask_ratio;
  j["fusion_layers"] = c.fusion_layers;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("modalities")) {
    c.modalities.clear();
    std::string csv;
    for (const auto& m : j.at("modalities")) csv += m.get<std::string>() + ",";
    c.modalities = parse_modality_list(csv);
  }
  get("dim", c.dim);
  get("heads", c.heads);
  get("pose_dim", c.pose_dim);
  get("stages", c.stages);
  if (j.contains("partition")) {
    c.partition = {};
    for (const auto& part : j.at("partition").at("parts")) {
      c.partition.names.push_back(part.at("name").get<std::string>());
      c.partition.columns.push_back(part.at("columns").get<std::vector<std::size_t>>());
    }
  } else {
    c.partition = BodyPartition::contiguous(c.pose_dim, 8);
  }
  get("text_in", c.text_in);
  get("text_layers", c.text_layers);
  get("text_positional", c.text_positional);
  get("video_in", c.video_in);
  get("video_layers", c.video_layers);
  get("video_positional", c.video_positional);
  get("audio_in", c.audio_in);
  get("audio_len", c.audio_len);
  get("memory_slots", c.memory_slots);
  if (j.contains("compression")) c.compression = parse_compression_method(j.at("compression").get<std::string>());
  get("audio_layers", c.audio_layers);
  if (j.contains("mode")) c.mode = parse_alignment_mode(j.at("mode").get<std::string>());
  if (j.contains("aggregation")) c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  get("tau_init", c.tau_init);
  get("tau_min", c.tau_min);
  get("tau_max", c.tau_max);
  get("lambda_recon", c.lambda_recon);
  get("mask_ratio", c.mask_ratio);
  get("fusion_layers", c.fusion_layers);
  return c;
}

std::uint64_t sample_key(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelInputs<float> gather_inputs(const std::vector<const PairedSample*>& samples,
                                 const std::vector<Modality>& modalities) {
  ModelInputs<float> in;
  for (const auto* s : samples) {
    for (auto m : modalities) {
      if (!s->has(m)) throw DataError(fmt::format("sample {} has no {} features", s->id, to_string(m)));
      in.seqs[std::size_t(m)].push_back(&s->get(m));
    }
    in.keys.push_back(sample_key(s->id));
  }
  return in;
}

MultiModalModel::MultiModalModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  motion_ = std::make_unique<MotionEncoder>(
      MotionEncoderConfig{cfg_.pose_dim, cfg_.dim, cfg_.heads, cfg_.stages, cfg_.partition});
  if (cfg_.has(Modality::Text)) {
    text_ = std::make_unique<SequenceEncoder>(SequenceEncoderConfig{
        Modality::Text, cfg_.text_in, cfg_.dim, cfg_.heads, cfg_.text_layers, cfg_.text_positional, false});
  }
  if (cfg_.has(Modality::Video)) {
    video_ = std::make_unique<SequenceEncoder>(SequenceEncoderConfig{
        Modality::Video, cfg_.video_in, cfg_.dim, cfg_.heads, cfg_.video_layers, cfg_.video_positional, false});
  }
  if (cfg_.has(Modality::Audio)) {
    audio_ = std::make_unique<AudioCompressor>(
        AudioCompressorConfig{cfg_.audio_in, cfg_.dim, cfg_.audio_len, cfg_.memory_slots, cfg_.compression});
    audio_post_ = std::make_unique<TransformerStack>("audio.layer", cfg_.audio_layers,
                                                     TransformerConfig{cfg_.dim, cfg_.heads});
  }
  fusion_ = std::make_unique<FusionHead>(cfg_.dim, cfg_.heads, cfg_.fusion_layers);
}

ParamStore<float> MultiModalModel::init(std::uint64_t seed) const {
  ParamStore<float> ps;
  Rng rng(seed);
  ps.add("tau", Tensorf::scalar(float(cfg_.tau_init)), false);
  motion_->init(ps, rng);
  if (text_) text_->init(ps, rng);
  if (video_) video_->init(ps, rng);
  if (audio_) {
    audio_->init(ps, rng);
    audio_post_->init(ps, rng);
  }
  for (auto m : cfg_.modalities) init_weight_head(ps, m, cfg_.dim, rng);
  fusion_->init(ps, rng);
  return ps;
}

void MultiModalModel::clamp(ParamStore<float>& ps) const {
  auto& tau = ps.get("tau");
  tau[0] = std::clamp(tau[0], float(cfg_.tau_min), float(cfg_.tau_max));
}

template <class Real>
EncodedBatch<Real> MultiModalModel::encode(const Bound<Real>& p, Modality m,
                                           const std::vector<const Tensor<Real>*>& seqs) const {
  if (!cfg_.has(m)) throw ConfigError(fmt::format("model was not configured for {}", to_string(m)));
  if (seqs.empty()) throw ShapeError(fmt::format("empty {} batch", to_string(m)));
  EncodedBatch<Real> out;
  switch (m) {
    case Modality::Motion: {
      // Samples are encoded in groups of equal frame count, then padded and restored to input order.
      std::map<std::size_t, std::vector<std::size_t>> groups;
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (seqs[i]->rank() != 2) throw ShapeError("motion sample must be [L, D], got " + shape_str(seqs[i]->dims()));
        groups[seqs[i]->dim(0)].push_back(i);
      }
      std::size_t lmax = 0;
      for (const auto& [frames, _] : groups) lmax = std::max(lmax, motion_->output_length(frames));
      std::vector<Var<Real>> parts;
      std::vector<std::size_t> order;
      for (const auto& [frames, idx] : groups) {
        std::vector<const Tensor<Real>*> members;
        for (auto i : idx) members.push_back(seqs[i]);
        auto packed = pack_sequences(members, nullptr);
        parts.push_back(ad::resize_axis(motion_->forward(p, packed), 1, lmax));
        order.insert(order.end(), idx.begin(), idx.end());
      }
      out.tokens = parts.size() == 1 ? parts[0] : ad::concat(parts, 0);
      if (parts.size() > 1) {
        std::vector<std::size_t> inverse(order.size());
        for (std::size_t r = 0; r < order.size(); ++r) inverse[order[r]] = r;
        out.tokens = ad::index_select0(out.tokens, inverse);
      }
      for (const auto* s : seqs) out.lengths.push_back(motion_->output_length(s->dim(0)));
      break;
    }
    case Modality::Text:
    case Modality::Video: {
      const auto& enc = m == Modality::Text ? *text_ : *video_;
      out.tokens = enc.forward(p, PrecomputedFeatures<Real>::pack(m, seqs), &out.lengths);
      break;
    }
    case Modality::Audio: {
      auto x = audio_->forward(p, seqs, &out.lengths);
      if (audio_post_->size() > 0) x = ad::l2_normalize(audio_post_->forward(p, x, out.lengths));
      out.tokens = x;
      break;
    }
  }
  if (cfg_.mode != AlignmentMode::Global) out.weights = token_weights(p, m, out.tokens, out.lengths);
  if (cfg_.mode != AlignmentMode::Sequence) out.global = global_token(out.tokens, out.lengths);
  return out;
}

template <class Real>
LossBreakdown<Real> MultiModalModel::loss(const Bound<Real>& p, const ModelInputs<Real>& in,
                                          std::uint64_t step_seed) const {
  std::map<Modality, EncodedBatch<Real>> batches;
  for (auto m : cfg_.modalities) {
    if (in.of(m).size() != in.size()) {
      throw PairingError(fmt::format("{} inputs: {} samples, expected {}", to_string(m), in.of(m).size(), in.size()));
    }
    batches.emplace(m, encode(p, m, in.of(m)));
  }
  LossBreakdown<Real> out;
  out.align = total_alignment_loss(batches, p["tau"], cfg_.mode, cfg_.aggregation);
  out.total = out.align.total;
  if (cfg_.lambda_recon > 0) {
    out.recon = fusion_->reconstruction_loss(p, batches, cfg_.mask_ratio, step_seed, in.keys);
    out.total = ad::add(out.total, ad::scale(out.recon, cfg_.lambda_recon));
  }
  return out;
}

template EncodedBatch<float> MultiModalModel::encode(const Bound<float>&, Modality,
                                                     const std::vector<const Tensor<float>*>&) const;
template EncodedBatch<double> MultiModalModel::encode(const Bound<double>&, Modality,
                                                      const std::vector<const Tensor<double>*>&) const;
template LossBreakdown<float> MultiModalModel::loss(const Bound<float>&, const ModelInputs<float>&,
                                                    std::uint64_t) const;
template LossBreakdown<double> MultiModalModel::loss(const Bound<double>&, const ModelInputs<double>&,
                                                     std::uint64_t) const;

}  // namespace mmr
