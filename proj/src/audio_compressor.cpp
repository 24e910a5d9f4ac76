#include "mmr/audio_compressor.hpp"

#include <fmt/format.h>

#include <cmath>

namespace mmr {

std::string_view to_string(CompressionMethod m) {
  switch (m) {
    case CompressionMethod::Memory: return "memory";
    case CompressionMethod::AvgPool2: return "avgpool2";
    case CompressionMethod::AvgPool4: return "avgpool4";
    case CompressionMethod::Conv1d: return "conv1d";
  }
  return "?";
}

CompressionMethod parse_compression_method(std::string_view s) {
  for (auto m : {CompressionMethod::Memory, CompressionMethod::AvgPool2, CompressionMethod::AvgPool4,
                 CompressionMethod::Conv1d})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown compression method: " + std::string(s));
}

AudioCompressor::AudioCompressor(AudioCompressorConfig cfg) : cfg_(cfg) {
  if (cfg_.out_len == 0 || cfg_.slots == 0) throw ConfigError("audio compressor needs L_a >= 1 and M >= 1");
}

void AudioCompressor::init(ParamStore<float>& ps, Rng& rng) const {
  init_linear(ps, "audio.proj", cfg_.in_dim, cfg_.dim, rng);
  if (cfg_.method == CompressionMethod::Memory) {
    Tensorf keys({cfg_.slots, cfg_.dim}), values({cfg_.slots, cfg_.dim});
    for (auto& v : keys.data()) v = float(rng.normal(0.0, 1.0 / std::sqrt(double(cfg_.dim))));
    for (auto& v : values.data()) v = float(rng.normal(0.0, 1.0 / std::sqrt(double(cfg_.dim))));
    ps.add("audio.memory.keys", std::move(keys));
    ps.add("audio.memory.values", std::move(values), false);
  } else if (cfg_.method == CompressionMethod::Conv1d) {
    Tensorf w({3, cfg_.in_dim, cfg_.in_dim});
    for (auto& v : w.data()) v = float(rng.normal(0.0, 1.0 / std::sqrt(3.0 * double(cfg_.in_dim))));
    ps.add("audio.conv.w", std::move(w));
    ps.add("audio.conv.b", Tensorf({cfg_.in_dim}));
  }
}

std::size_t AudioCompressor::valid_length(std::size_t in_len) const {
  switch (cfg_.method) {
    case CompressionMethod::Memory: return cfg_.out_len;
    case CompressionMethod::AvgPool2: return std::min(cfg_.out_len, (in_len + 1) / 2);
    case CompressionMethod::AvgPool4: return std::min(cfg_.out_len, (in_len + 3) / 4);
    case CompressionMethod::Conv1d: {
      std::size_t l = in_len;
      while (l > cfg_.out_len) l = (l - 1) / 2 + 1;
      return l;
    }
  }
  return cfg_.out_len;
}

template <class Real>
Var<Real> AudioCompressor::downsample(const Bound<Real>& p, const Tensor<Real>& seq) const {
  auto& tape = p.tape();
  auto x = tape.constant(seq.reshaped({1, seq.dim(0), seq.dim(1)}));
  switch (cfg_.method) {
    case CompressionMethod::Memory: return ad::adaptive_avg_pool(x, cfg_.out_len);
    case CompressionMethod::AvgPool2: return ad::resize_axis(ad::avg_pool_time(x, 2), 1, cfg_.out_len);
    case CompressionMethod::AvgPool4: return ad::resize_axis(ad::avg_pool_time(x, 4), 1, cfg_.out_len);
    case CompressionMethod::Conv1d:
      while (x.dim(1) > cfg_.out_len) x = ad::conv1d(x, p["audio.conv.w"], p["audio.conv.b"], 2);
      return ad::resize_axis(x, 1, cfg_.out_len);
  }
  return x;
}

template <class Real>
Var<Real> AudioCompressor::forward(const Bound<Real>& p, const std::vector<const Tensor<Real>*>& seqs,
                                   Lengths* out_lengths) const {
  if (seqs.empty()) throw ShapeError("audio compressor: empty batch");
  std::vector<Var<Real>> pooled;
  Lengths lengths;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = *seqs[i];
    if (s.rank() != 2 || s.dim(1) != cfg_.in_dim) {
      throw ShapeError(fmt::format("audio sample {}: expected [L, {}], got {}", i, cfg_.in_dim, shape_str(s.dims())));
    }
    if (s.dim(0) == 0) throw EmptySequenceError(fmt::format("audio sample {} has no frames", i));
    pooled.push_back(downsample(p, s));
    lengths.push_back(valid_length(s.dim(0)));
  }
  auto x = pooled.size() == 1 ? pooled[0] : ad::concat(pooled, 0);  // [N, L_a, C_in]
  x = apply_linear(p, "audio.proj", x);
  if (cfg_.method == CompressionMethod::Memory) {
    auto keys = ad::reshape(p["audio.memory.keys"], {1, cfg_.slots, cfg_.dim});
    auto values = ad::reshape(p["audio.memory.values"], {1, cfg_.slots, cfg_.dim});
    x = ad::attention(x, keys, values, 1);
  }
  x = ad::add_trailing(x, p.tape().constant(sinusoidal_encoding<Real>(cfg_.out_len, cfg_.dim)));
  if (out_lengths) *out_lengths = std::move(lengths);
  return ad::l2_normalize(x);
}

template Var<float> AudioCompressor::forward(const Bound<float>&, const std::vector<const Tensor<float>*>&,
                                             Lengths*) const;
template Var<double> AudioCompressor::forward(const Bound<double>&, const std::vector<const Tensor<double>*>&,
                                              Lengths*) const;

}  // namespace mmr
