#include "mmr/seq_encoders.hpp"

#include <fmt/format.h>

namespace mmr {

template <class Real>
PrecomputedFeatures<Real> PrecomputedFeatures<Real>::pack(Modality source, const std::vector<const Tensor<Real>*>& seqs) {
  PrecomputedFeatures f;
  f.source = source;
  f.values = pack_sequences(seqs, &f.lengths);
  return f;
}

template struct PrecomputedFeatures<float>;
template struct PrecomputedFeatures<double>;

namespace {

SequenceEncoderConfig checked(SequenceEncoderConfig cfg) {
  if (cfg.source != Modality::Text && cfg.source != Modality::Video) {
    throw ConfigError(fmt::format("sequence encoder cannot encode {}", to_string(cfg.source)));
  }
  return cfg;
}

}  // namespace

SequenceEncoder::SequenceEncoder(SequenceEncoderConfig cfg)
    : cfg_(checked(cfg)), stack_(std::string(to_string(cfg.source)) + ".layer", cfg.layers, {cfg.dim, cfg.heads}) {}

std::string SequenceEncoder::prefix() const { return std::string(to_string(cfg_.source)); }

void SequenceEncoder::init(ParamStore<float>& ps, Rng& rng) const {
  init_linear(ps, prefix() + ".proj", cfg_.in_dim, cfg_.dim, rng);
  stack_.init(ps, rng);
}

template <class Real>
Var<Real> SequenceEncoder::forward(const Bound<Real>& p, const PrecomputedFeatures<Real>& feats,
                                   Lengths* out_lengths) const {
  if (feats.source != cfg_.source) {
    throw ConfigError(fmt::format("{} encoder received {} features", to_string(cfg_.source), to_string(feats.source)));
  }
  if (feats.values.rank() != 3 || feats.values.dim(2) != cfg_.in_dim) {
    throw ConfigError(fmt::format("{} encoder expects input dim {}, got features {}", to_string(cfg_.source),
                                  cfg_.in_dim, shape_str(feats.values.dims())));
  }
  const std::size_t n = feats.values.dim(0), l = feats.values.dim(1);
  Lengths lengths = feats.lengths.empty() ? Lengths(n, l) : feats.lengths;
  for (std::size_t i = 0; i < n; ++i)
    if (lengths[i] == 0) throw EmptySequenceError(fmt::format("{} sample {} has no tokens", prefix(), i));
  auto& tape = p.tape();
  auto x = apply_linear(p, prefix() + ".proj", tape.constant(feats.values));
  if (cfg_.positional) x = ad::add_trailing(x, tape.constant(sinusoidal_encoding<Real>(l, cfg_.dim)));
  x = stack_.forward(p, x, lengths);
  if (cfg_.global_only) {
    x = ad::reshape(ad::masked_mean(x, lengths), {n, 1, cfg_.dim});
    lengths.assign(n, 1);
  }
  if (out_lengths) *out_lengths = lengths;
  return ad::l2_normalize(x);
}

template Var<float> SequenceEncoder::forward(const Bound<float>&, const PrecomputedFeatures<float>&, Lengths*) const;
template Var<double> SequenceEncoder::forward(const Bound<double>&, const PrecomputedFeatures<double>&,
                                              Lengths*) const;

}  // namespace mmr
