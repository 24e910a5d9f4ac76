#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmr/alignment.hpp"
#include "mmr/audio_compressor.hpp"
#include "mmr/dataset.hpp"
#include "mmr/motion_encoder.hpp"
#include "mmr/seq_encoders.hpp"

namespace mmr {

struct ModelConfig {
  std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
  std::size_t dim = 32;
  std::size_t heads = 4;
  // motion
  std::size_t pose_dim = 48;
  std::size_t stages = 2;
  BodyPartition partition = BodyPartition::contiguous(48, 8);
  // text and video heads
  std::size_t text_in = 32;
  std::size_t text_layers = 2;
  bool text_positional = true;
  std::size_t video_in = 32;
  std::size_t video_layers = 6;
  bool video_positional = true;
  // audio
  std::size_t audio_in = 24;
  std::size_t audio_len = 8;
  std::size_t memory_slots = 32;
  CompressionMethod compression = CompressionMethod::Memory;
  std::size_t audio_layers = 1;
  // losses
  AlignmentMode mode = AlignmentMode::Sequence;
  Aggregation aggregation = Aggregation::Max;
  double tau_init = 0.1;
  double tau_min = 0.01;
  double tau_max = 10.0;
  double lambda_recon = 0.1;
  double mask_ratio = 0.3;
  std::size_t fusion_layers = 1;

  bool has(Modality m) const;
  void validate() const;
};

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json);

/// Stable 64-bit key of a sample id (FNV-1a), used to seed per-sample masks.
std::uint64_t sample_key(const std::string& id);

/// One batch of paired inputs: per modality, one [L, C_in] tensor per sample.
template <class Real>
struct ModelInputs {
  std::array<std::vector<const Tensor<Real>*>, 4> seqs;
  std::vector<std::uint64_t> keys;

  std::size_t size() const noexcept { return keys.size(); }
  const std::vector<const Tensor<Real>*>& of(Modality m) const { return seqs[std::size_t(m)]; }
};

/// Gathers the configured modalities of `samples`; throws DataError naming the sample if one is missing.
ModelInputs<float> gather_inputs(const std::vector<const PairedSample*>& samples,
                                 const std::vector<Modality>& modalities);

template <class Real>
struct LossBreakdown {
  Var<Real> total;
  AlignmentLoss<Real> align;
  Var<Real> recon;  // invalid when lambda_recon == 0
};

class MultiModalModel {
 public:
  explicit MultiModalModel(ModelConfig cfg);

  /// Fresh parameters, deterministic in `seed`.
  ParamStore<float> init(std::uint64_t seed) const;

  /// Tokens, lengths, and token weights (plus the global token when the mode uses it).
  template <class Real>
  EncodedBatch<Real> encode(const Bound<Real>& p, Modality m, const std::vector<const Tensor<Real>*>& seqs) const;

  template <class Real>
  LossBreakdown<Real> loss(const Bound<Real>& p, const ModelInputs<Real>& in, std::uint64_t step_seed) const;

  /// Keeps the temperature inside [tau_min, tau_max].
  void clamp(ParamStore<float>& ps) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  const FusionHead& fusion() const noexcept { return *fusion_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<MotionEncoder> motion_;
  std::unique_ptr<SequenceEncoder> text_;
  std::unique_ptr<SequenceEncoder> video_;
  std::unique_ptr<AudioCompressor> audio_;
  std::unique_ptr<TransformerStack> audio_post_;
  std::unique_ptr<FusionHead> fusion_;
};

}  // namespace mmr
