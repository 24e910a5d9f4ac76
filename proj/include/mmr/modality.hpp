#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "mmr/autodiff.hpp"

namespace mmr {

enum class Modality { Motion = 0, Text = 1, Video = 2, Audio = 3 };

inline constexpr std::array<Modality, 4> kAllModalities = {Modality::Motion, Modality::Text, Modality::Video,
                                                           Modality::Audio};

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);
std::vector<Modality> parse_modality_list(std::string_view csv);

/// A padded batch of token sequences: tokens[N, L, C], valid prefix lengths, and
/// per-token weights[N, L] (zero beyond each length).
template <class Real>
struct EncodedBatch {
  Var<Real> tokens;
  Lengths lengths;
  Var<Real> weights;
  /// Unit-normalized mean token [N, 1, C]; set when a global-similarity mode needs it.
  Var<Real> global;
};

/// Zero-pads a list of [L_i, C] tensors to [N, max L_i, C].
template <class Real>
Tensor<Real> pack_sequences(const std::vector<const Tensor<Real>*>& seqs, Lengths* lengths);

}  // namespace mmr
