#include "mmr/motion_encoder.hpp"

#include <fmt/format.h>

#include <fstream>
#include <numeric>
#include <nlohmann/json.hpp>

namespace mmr {

BodyPartition BodyPartition::contiguous(std::size_t d_pose, std::size_t k) {
  if (k == 0 || d_pose % k != 0) {
    throw ConfigError(fmt::format("cannot split {} pose columns into {} equal parts", d_pose, k));
  }
  BodyPartition p;
  const std::size_t w = d_pose / k;
  for (std::size_t i = 0; i < k; ++i) {
    p.names.push_back(fmt::format("part{}", i));
    std::vector<std::size_t> cols(w);
    std::iota(cols.begin(), cols.end(), i * w);
    p.columns.push_back(std::move(cols));
  }
  return p;
}

BodyPartition BodyPartition::whole(std::size_t d_pose) { return contiguous(d_pose, 1); }

BodyPartition BodyPartition::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open partition file: " + path.string());
  const auto j = nlohmann::json::parse(f);
  BodyPartition p;
  for (const auto& part : j.at("parts")) {
    p.names.push_back(part.at("name").get<std::string>());
    p.columns.push_back(part.at("columns").get<std::vector<std::size_t>>());
  }
  return p;
}

std::string BodyPartition::to_json() const {
  nlohmann::ordered_json j;
  j["parts"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < parts(); ++i) j["parts"].push_back({{"name", names[i]}, {"columns", columns[i]}});
  return j.dump();
}

void BodyPartition::validate(std::size_t d_pose) const {
  if (columns.empty()) throw ConfigError("partition has no parts");
  if (names.size() != columns.size()) throw ConfigError("partition names and parts disagree");
  std::vector<int> owner(d_pose, -1);
  for (std::size_t k = 0; k < columns.size(); ++k) {
    if (columns[k].empty()) throw ConfigError("partition part '" + names[k] + "' is empty");
    for (std::size_t c : columns[k]) {
      if (c >= d_pose) throw ConfigError(fmt::format("partition column {} out of range for pose dim {}", c, d_pose));
      if (owner[c] >= 0) {
        throw ConfigError(fmt::format("partition column {} assigned to both '{}' and '{}'", c, names[owner[c]],
                                      names[k]));
      }
      owner[c] = int(k);
    }
  }
  for (std::size_t c = 0; c < d_pose; ++c)
    if (owner[c] < 0) throw ConfigError(fmt::format("partition misses pose column {}", c));
}

template <class Real>
std::vector<Tensor<Real>> partition_pose(const Tensor<Real>& motion, const BodyPartition& partition) {
  if (motion.rank() != 3) throw ShapeError("partition_pose: expected [B, L, D], got " + shape_str(motion.dims()));
  const std::size_t b = motion.dim(0), l = motion.dim(1), d = motion.dim(2);
  partition.validate(d);
  std::vector<Tensor<Real>> out;
  for (const auto& cols : partition.columns) {
    Tensor<Real> t({b, l, cols.size()});
    for (std::size_t r = 0; r < b * l; ++r)
      for (std::size_t j = 0; j < cols.size(); ++j) t[r * cols.size() + j] = motion[r * d + cols[j]];
    out.push_back(std::move(t));
  }
  return out;
}

template std::vector<Tensor<float>> partition_pose(const Tensor<float>&, const BodyPartition&);
template std::vector<Tensor<double>> partition_pose(const Tensor<double>&, const BodyPartition&);

MotionEncoder::MotionEncoder(MotionEncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.partition.validate(cfg_.pose_dim);
  const TransformerConfig tc{cfg_.dim, cfg_.heads};
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    temporal_.emplace_back(fmt::format("motion.temporal{}", s), tc);
    if (cfg_.partition.parts() > 1) spatial_.emplace_back(fmt::format("motion.spatial{}", s), tc);
  }
}

void MotionEncoder::init(ParamStore<float>& ps, Rng& rng) const {
  for (std::size_t k = 0; k < cfg_.partition.parts(); ++k)
    init_linear(ps, fmt::format("motion.part{}", k), cfg_.partition.columns[k].size(), cfg_.dim, rng);
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    temporal_[s].init(ps, rng);
    if (!spatial_.empty()) spatial_[s].init(ps, rng);
  }
}

std::size_t MotionEncoder::output_length(std::size_t frames) const {
  std::size_t l = frames;
  for (std::size_t s = 0; s < cfg_.stages; ++s) l = (l + 1) / 2;
  return cfg_.partition.parts() * l;
}

template <class Real>
Var<Real> MotionEncoder::forward(const Bound<Real>& p, const Tensor<Real>& motion) const {
  if (motion.rank() != 3 || motion.dim(2) != cfg_.pose_dim) {
    throw ShapeError(fmt::format("motion encoder expects [B, L, {}], got {}", cfg_.pose_dim, shape_str(motion.dims())));
  }
  const std::size_t b = motion.dim(0), c = cfg_.dim, k = cfg_.partition.parts();
  std::size_t l = motion.dim(1);
  if (l < min_frames()) {
    throw InputTooShortError(fmt::format("motion has {} frames; {} pooling stages need at least {}", l, cfg_.stages,
                                         min_frames()));
  }
  auto& tape = p.tape();
  const auto parts = partition_pose(motion, cfg_.partition);
  std::vector<Var<Real>> projected;
  for (std::size_t i = 0; i < k; ++i) {
    auto e = apply_linear(p, fmt::format("motion.part{}", i), tape.constant(parts[i]));
    projected.push_back(ad::reshape(e, {b, 1, l, c}));
  }
  auto x = k == 1 ? projected[0] : ad::concat(projected, 1);  // [B, K, L, C]
  x = ad::add_trailing(x, tape.constant(sinusoidal_encoding<Real>(l, c)));
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    x = ad::reshape(temporal_[s].forward(p, ad::reshape(x, {b * k, l, c})), {b, k, l, c});
    if (k > 1) {
      auto sp = ad::reshape(ad::swap_axes12(x), {b * l, k, c});
      x = ad::swap_axes12(ad::reshape(spatial_[s].forward(p, sp), {b, l, k, c}));
    }
    x = ad::avg_pool_time(ad::reshape(x, {b * k, l, c}), 2);
    l = x.dim(1);
  }
  return ad::l2_normalize(ad::reshape(x, {b, k * l, c}));
}

template Var<float> MotionEncoder::forward(const Bound<float>&, const Tensor<float>&) const;
template Var<double> MotionEncoder::forward(const Bound<double>&, const Tensor<double>&) const;

}  // namespace mmr
