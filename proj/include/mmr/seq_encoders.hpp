#pragma once

#include <vector>

#include "mmr/modality.hpp"
#include "mmr/nn.hpp"

namespace mmr {

/// Precomputed per-token features for one source, padded to [N, L, C_in].
template <class Real>
struct PrecomputedFeatures {
  Modality source = Modality::Text;
  Tensor<Real> values;
  Lengths lengths;

  static PrecomputedFeatures pack(Modality source, const std::vector<const Tensor<Real>*>& seqs);
};

struct SequenceEncoderConfig {
  Modality source = Modality::Text;
  std::size_t in_dim = 32;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  bool positional = true;
  /// Collapse the output to one masked-mean token per sample.
  bool global_only = false;
};

/// Linear projection to C, optional sinusoidal positions, `layers` transformer
/// layers, then unit normalization. Used for text and video.
class SequenceEncoder {
 public:
  explicit SequenceEncoder(SequenceEncoderConfig cfg);

  void init(ParamStore<float>& ps, Rng& rng) const;
  /// Returns tokens [N, L, C] (or [N, 1, C] in global-only mode); `out_lengths` receives valid counts.
  template <class Real>
  Var<Real> forward(const Bound<Real>& p, const PrecomputedFeatures<Real>& feats, Lengths* out_lengths) const;

  const SequenceEncoderConfig& config() const noexcept { return cfg_; }
  std::string prefix() const;

 private:
  SequenceEncoderConfig cfg_;
  TransformerStack stack_;
};

}  // namespace mmr
