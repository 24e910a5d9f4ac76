#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmr/nn.hpp"

namespace mmr {

/// Assignment of raw pose columns to body parts. Parts are disjoint and jointly
/// cover every column.
struct BodyPartition {
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> columns;

  std::size_t parts() const noexcept { return columns.size(); }
  /// K equal contiguous slices of a d_pose-wide pose vector.
  static BodyPartition contiguous(std::size_t d_pose, std::size_t k);
  /// The whole pose as a single part (body-partition ablation).
  static BodyPartition whole(std::size_t d_pose);
  /// JSON: {"parts": [{"name": "...", "columns": [..]}, ...]}
  static BodyPartition load(const std::filesystem::path& path);
  std::string to_json() const;

  /// Throws ConfigError on overlap, gaps, or out-of-range columns.
  void validate(std::size_t d_pose) const;
};

/// motion[B, L', D] -> one [B, L', |part k|] tensor per part, columns in partition order.
template <class Real>
std::vector<Tensor<Real>> partition_pose(const Tensor<Real>& motion, const BodyPartition& partition);

struct MotionEncoderConfig {
  std::size_t pose_dim = 48;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t stages = 2;
  BodyPartition partition = BodyPartition::contiguous(48, 8);
};

/// Per-part projection, then `stages` rounds of temporal attention, spatial
/// attention across parts (skipped when K = 1), and stride-2 temporal pooling.
/// Output tokens [B, K * L_m, C] are part-major and unit-normalized.
class MotionEncoder {
 public:
  explicit MotionEncoder(MotionEncoderConfig cfg);

  void init(ParamStore<float>& ps, Rng& rng) const;
  template <class Real>
  Var<Real> forward(const Bound<Real>& p, const Tensor<Real>& motion) const;

  std::size_t min_frames() const noexcept { return std::size_t{1} << cfg_.stages; }
  std::size_t output_length(std::size_t frames) const;
  const MotionEncoderConfig& config() const noexcept { return cfg_; }

 private:
  MotionEncoderConfig cfg_;
  std::vector<TransformerLayer> temporal_;
  std::vector<TransformerLayer> spatial_;
};

}  // namespace mmr
