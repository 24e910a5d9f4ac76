#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "mmr/modality.hpp"
#include "mmr/nn.hpp"

namespace mmr {

enum class AlignmentMode { Sequence, Global, GlobalPlusSequence };

std::string_view to_string(AlignmentMode m);
AlignmentMode parse_alignment_mode(std::string_view s);
std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

/// Late-interaction similarity of x[Lx, C] and y[Ly, C] (all rows valid):
/// h = 1/2 sum_i wx_i agg_j <x_i, y_j> + 1/2 sum_j wy_j agg_i <y_j, x_i>.
template <class Real>
Real fine_similarity(const Tensor<Real>& x, std::span<const Real> wx, const Tensor<Real>& y, std::span<const Real> wy,
                     Aggregation agg);

/// Per-modality token weights: softmax over valid tokens of a bias-free linear score.
void init_weight_head(ParamStore<float>& ps, Modality m, std::size_t dim, Rng& rng);
template <class Real>
Var<Real> token_weights(const Bound<Real>& p, Modality m, Var<Real> tokens, const Lengths& lengths);

/// Unit-normalized masked mean token, [N, 1, C].
template <class Real>
Var<Real> global_token(Var<Real> tokens, const Lengths& lengths);

/// [B1, B2] similarities between two encoded batches under the given mode.
template <class Real>
Var<Real> batch_similarity(const EncodedBatch<Real>& x, const EncodedBatch<Real>& y, AlignmentMode mode,
                           Aggregation agg);

/// KL(target || softmax(sim / tau)) in both directions with identity targets.
template <class Real>
Var<Real> contrastive_pair_loss(Var<Real> sim, Var<Real> tau);

template <class Real>
struct AlignmentLoss {
  Var<Real> total;
  std::vector<std::pair<std::pair<Modality, Modality>, Var<Real>>> terms;
};

/// Sum of contrastive_pair_loss over every unordered pair of present modalities.
template <class Real>
AlignmentLoss<Real> total_alignment_loss(const std::map<Modality, EncodedBatch<Real>>& batches, Var<Real> tau,
                                         AlignmentMode mode, Aggregation agg);

/// Per-sample reproducible mask positions: floor(ratio * length) of [0, length).
std::vector<std::size_t> mask_positions(std::uint64_t step_seed, std::uint64_t sample_key, std::size_t length,
                                        double ratio);

/// Masked motion reconstruction through a fusion transformer over all modalities.
class FusionHead {
 public:
  FusionHead(std::size_t dim, std::size_t heads, std::size_t layers);

  void init(ParamStore<float>& ps, Rng& rng) const;
  void zero_residual_branches(ParamStore<float>& ps) const;

  /// Mean over samples of ||e~_m - e_m||_2 over all valid motion positions.
  /// `sample_keys[b]` seeds sample b's mask together with `step_seed`.
  template <class Real>
  Var<Real> reconstruction_loss(const Bound<Real>& p, const std::map<Modality, EncodedBatch<Real>>& batches,
                                double mask_ratio, std::uint64_t step_seed,
                                const std::vector<std::uint64_t>& sample_keys) const;

 private:
  std::size_t dim_;
  TransformerStack stack_;
};

}  // namespace mmr
