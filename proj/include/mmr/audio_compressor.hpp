#pragma once

#include <string_view>
#include <vector>

#include "mmr/nn.hpp"

namespace mmr {

enum class CompressionMethod { Memory, AvgPool2, AvgPool4, Conv1d };

std::string_view to_string(CompressionMethod m);
CompressionMethod parse_compression_method(std::string_view s);

struct AudioCompressorConfig {
  std::size_t in_dim = 24;
  std::size_t dim = 32;
  /// L_a, the fixed output length.
  std::size_t out_len = 8;
  /// M, the number of memory slots.
  std::size_t slots = 32;
  CompressionMethod method = CompressionMethod::Memory;
};

/// Maps variable-length audio features [L_in, C_in] to [L_a, C] tokens.
/// Memory: adaptive mean pooling into L_a chunks, a linear query per chunk,
/// attention over learnable key/value slots, positional encoding, normalization.
/// The pooling and convolution baselines project after downsampling and pad or
/// truncate to L_a; padded rows are excluded by the returned lengths.
class AudioCompressor {
 public:
  explicit AudioCompressor(AudioCompressorConfig cfg);

  void init(ParamStore<float>& ps, Rng& rng) const;
  template <class Real>
  Var<Real> forward(const Bound<Real>& p, const std::vector<const Tensor<Real>*>& seqs, Lengths* out_lengths) const;

  /// Valid output rows for an input of `in_len` frames.
  std::size_t valid_length(std::size_t in_len) const;
  const AudioCompressorConfig& config() const noexcept { return cfg_; }

 private:
  template <class Real>
  Var<Real> downsample(const Bound<Real>& p, const Tensor<Real>& seq) const;

  AudioCompressorConfig cfg_;
};

}  // namespace mmr
