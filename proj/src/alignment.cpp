#include "mmr/alignment.hpp"

#include <fmt/format.h>

#include <cmath>

namespace mmr {

std::string_view to_string(AlignmentMode m) {
  switch (m) {
    case AlignmentMode::Sequence: return "sequence";
    case AlignmentMode::Global: return "global";
    case AlignmentMode::GlobalPlusSequence: return "global+sequence";
  }
  return "?";
}

AlignmentMode parse_alignment_mode(std::string_view s) {
  for (auto m : {AlignmentMode::Sequence, AlignmentMode::Global, AlignmentMode::GlobalPlusSequence})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown alignment mode: " + std::string(s));
}

std::string_view to_string(Aggregation a) { return a == Aggregation::Max ? "max" : "mean"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "max") return Aggregation::Max;
  if (s == "mean") return Aggregation::Mean;
  throw ConfigError("unknown aggregation: " + std::string(s));
}

template <class Real>
Real fine_similarity(const Tensor<Real>& x, std::span<const Real> wx, const Tensor<Real>& y, std::span<const Real> wy,
                     Aggregation agg) {
  if (x.rank() != 2 || y.rank() != 2) throw ShapeError("fine_similarity: expects [L, C] sequences");
  if (x.dim(0) == 0 || y.dim(0) == 0) throw EmptySequenceError("fine_similarity: sequence has no valid tokens");
  if (x.dim(1) != y.dim(1)) throw ShapeError("fine_similarity: feature dims differ");
  if (wx.size() != x.dim(0) || wy.size() != y.dim(0)) throw ShapeError("fine_similarity: weight length mismatch");
  const std::size_t lx = x.dim(0), ly = y.dim(0);
  std::vector<Real> scratch(lx * ly + lx + ly);
  return kernels::pair_score(x.ptr(), lx, wx.data(), y.ptr(), ly, wy.data(), x.dim(1), agg, scratch.data());
}

template float fine_similarity(const Tensorf&, std::span<const float>, const Tensorf&, std::span<const float>,
                               Aggregation);
template double fine_similarity(const Tensord&, std::span<const double>, const Tensord&, std::span<const double>,
                                Aggregation);

namespace {

std::string weight_name(Modality m) { return fmt::format("{}.weight.w", to_string(m)); }

template <class Real>
Lengths full_lengths(const Lengths& l, std::size_t n, std::size_t len) {
  return l.empty() ? Lengths(n, len) : l;
}

}  // namespace

void init_weight_head(ParamStore<float>& ps, Modality m, std::size_t dim, Rng& rng) {
  Tensorf w({dim, 1});
  for (auto& v : w.data()) v = float(rng.normal(0.0, 1.0 / std::sqrt(double(dim))));
  ps.add(weight_name(m), std::move(w));
}

template <class Real>
Var<Real> token_weights(const Bound<Real>& p, Modality m, Var<Real> tokens, const Lengths& lengths) {
  const std::size_t n = tokens.dim(0), l = tokens.dim(1);
  auto logits = ad::reshape(ad::linear(tokens, p[weight_name(m)]), {n, l});
  return ad::masked_softmax(logits, lengths);
}

template <class Real>
Var<Real> global_token(Var<Real> tokens, const Lengths& lengths) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(2);
  return ad::l2_normalize(ad::reshape(ad::masked_mean(tokens, lengths), {n, 1, c}));
}

template <class Real>
Var<Real> batch_similarity(const EncodedBatch<Real>& x, const EncodedBatch<Real>& y, AlignmentMode mode,
                           Aggregation agg) {
  auto global = [&] {
    auto gx = x.global.valid() ? x.global : global_token(x.tokens, x.lengths);
    auto gy = y.global.valid() ? y.global : global_token(y.tokens, y.lengths);
    auto& tape = *gx.tape;
    auto ones_x = tape.constant(Tensor<Real>({gx.dim(0), 1}, Real(1)));
    auto ones_y = tape.constant(Tensor<Real>({gy.dim(0), 1}, Real(1)));
    return ad::similarity_matrix(gx, {}, ones_x, gy, {}, ones_y, Aggregation::Max);
  };
  auto sequence = [&] { return ad::similarity_matrix(x.tokens, x.lengths, x.weights, y.tokens, y.lengths, y.weights, agg); };
  switch (mode) {
    case AlignmentMode::Sequence: return sequence();
    case AlignmentMode::Global: return global();
    case AlignmentMode::GlobalPlusSequence: return ad::add(global(), sequence());
  }
  return sequence();
}

template <class Real>
Var<Real> contrastive_pair_loss(Var<Real> sim, Var<Real> tau) {
  if (sim.value().rank() != 2 || sim.dim(0) != sim.dim(1)) {
    throw PairingError("contrastive loss needs a square similarity matrix, got " + shape_str(sim.dims()));
  }
  if (!(tau.value().item() > 0)) throw NumericError("temperature must be positive");
  auto logits = ad::div_scalar(sim, tau);
  return ad::add(ad::diagonal_nll(logits), ad::diagonal_nll(ad::transpose(logits)));
}

template <class Real>
AlignmentLoss<Real> total_alignment_loss(const std::map<Modality, EncodedBatch<Real>>& batches, Var<Real> tau,
                                         AlignmentMode mode, Aggregation agg) {
  if (batches.size() < 2) throw PairingError("alignment needs at least two modalities");
  const std::size_t n = batches.begin()->second.tokens.dim(0);
  for (const auto& [m, b] : batches) {
    if (b.tokens.dim(0) != n) {
      throw PairingError(fmt::format("{} batch has {} samples, expected {}", to_string(m), b.tokens.dim(0), n));
    }
  }
  AlignmentLoss<Real> out;
  for (auto i = batches.begin(); i != batches.end(); ++i) {
    for (auto j = std::next(i); j != batches.end(); ++j) {
      auto term = contrastive_pair_loss(batch_similarity(i->second, j->second, mode, agg), tau);
      out.terms.push_back({{i->first, j->first}, term});
      out.total = out.total.valid() ? ad::add(out.total, term) : term;
    }
  }
  return out;
}

std::vector<std::size_t> mask_positions(std::uint64_t step_seed, std::uint64_t sample_key, std::size_t length,
                                        double ratio) {
  if (ratio < 0 || ratio > 1) throw ConfigError(fmt::format("mask ratio {} outside [0, 1]", ratio));
  const auto count = std::size_t(std::floor(ratio * double(length)));
  // splitmix64 finalizer over the combined seed
  std::uint64_t z = step_seed ^ (sample_key + 0x9E3779B97F4A7C15ULL + (step_seed << 6) + (step_seed >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  Rng rng(z);
  return rng.sample_without_replacement(length, count);
}

FusionHead::FusionHead(std::size_t dim, std::size_t heads, std::size_t layers)
    : dim_(dim), stack_("fusion.layer", layers, {dim, heads}) {}

void FusionHead::init(ParamStore<float>& ps, Rng& rng) const {
  Tensorf token({dim_});
  for (auto& v : token.data()) v = float(rng.normal(0.0, 1.0 / std::sqrt(double(dim_))));
  ps.add("fusion.mask_token", std::move(token));
  stack_.init(ps, rng);
}

void FusionHead::zero_residual_branches(ParamStore<float>& ps) const { stack_.zero_residual_branches(ps); }

template <class Real>
Var<Real> FusionHead::reconstruction_loss(const Bound<Real>& p, const std::map<Modality, EncodedBatch<Real>>& batches,
                                          double mask_ratio, std::uint64_t step_seed,
                                          const std::vector<std::uint64_t>& sample_keys) const {
  auto mit = batches.find(Modality::Motion);
  if (mit == batches.end()) throw EmptySequenceError("reconstruction needs a motion batch");
  const auto& motion = mit->second;
  const std::size_t n = motion.tokens.dim(0), lm = motion.tokens.dim(1), c = dim_;
  if (motion.tokens.dim(2) != c) throw ShapeError("fusion head: motion token dim mismatch");
  if (sample_keys.size() != n) throw PairingError("fusion head: one sample key per motion sample required");
  const Lengths ml = full_lengths<Real>(motion.lengths, n, lm);
  auto& tape = p.tape();

  std::vector<std::uint8_t> masked(n * lm, 0);
  for (std::size_t b = 0; b < n; ++b) {
    if (ml[b] == 0) throw EmptySequenceError(fmt::format("motion sample {} has no tokens", b));
    for (std::size_t pos : mask_positions(step_seed, sample_keys[b], ml[b], mask_ratio)) masked[b * lm + pos] = 1;
  }
  auto hat = ad::replace_rows(motion.tokens, p["fusion.mask_token"], masked);
  hat = ad::add_trailing(hat, tape.constant(sinusoidal_encoding<Real>(lm, c)));

  // Rows of every modality stacked into one table; the fused sequence of sample b
  // is its motion tokens followed by its valid text, video, and audio tokens.
  std::vector<Var<Real>> tables{ad::reshape(hat, {n * lm, c})};
  std::vector<std::size_t> base{0}, len{lm};
  std::vector<Lengths> valid{ml};
  std::size_t rows = n * lm;
  for (const auto& [m, batch] : batches) {
    if (m == Modality::Motion) continue;
    if (batch.tokens.dim(0) != n) throw PairingError(fmt::format("{} batch size differs from motion", to_string(m)));
    const std::size_t l = batch.tokens.dim(1);
    tables.push_back(ad::reshape(batch.tokens, {n * l, c}));
    base.push_back(rows);
    len.push_back(l);
    valid.push_back(full_lengths<Real>(batch.lengths, n, l));
    rows += n * l;
  }
  const std::size_t zero_row = rows;
  tables.push_back(tape.constant(Tensor<Real>({1, c})));
  Lengths fused_len(n, 0);
  for (std::size_t b = 0; b < n; ++b)
    for (const auto& v : valid) fused_len[b] += v[b];
  const std::size_t lf = *std::max_element(fused_len.begin(), fused_len.end());
  std::vector<std::size_t> gather(n * lf, zero_row);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t pos = 0;
    for (std::size_t s = 0; s < valid.size(); ++s)
      for (std::size_t t = 0; t < valid[s][b]; ++t) gather[b * lf + pos++] = base[s] + b * len[s] + t;
  }
  auto fused = ad::reshape(ad::index_select0(ad::concat(tables, 0), gather), {n, lf, c});
  auto out = stack_.forward(p, fused, fused_len);

  // Valid motion positions of the output and of e_m, padded positions mapped to a zero row.
  std::vector<std::size_t> pick_out(n * lm, n * lf), pick_ref(n * lm, n * lm);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < ml[b]; ++t) {
      pick_out[b * lm + t] = b * lf + t;
      pick_ref[b * lm + t] = b * lm + t;
    }
  auto zero = tape.constant(Tensor<Real>({1, c}));
  auto rec = ad::index_select0(ad::concat<Real>({ad::reshape(out, {n * lf, c}), zero}, 0), pick_out);
  auto ref = ad::index_select0(ad::concat<Real>({ad::reshape(motion.tokens, {n * lm, c}), zero}, 0), pick_ref);
  auto diff = ad::reshape(ad::sub(rec, ref), {n, lm * c});
  return ad::mean(ad::row_norm(diff));
}

#define MMR_INSTANTIATE_ALIGNMENT(R)                                                                               \
  template Var<R> token_weights(const Bound<R>&, Modality, Var<R>, const Lengths&);                                \
  template Var<R> global_token(Var<R>, const Lengths&);                                                            \
  template Var<R> batch_similarity(const EncodedBatch<R>&, const EncodedBatch<R>&, AlignmentMode, Aggregation);    \
  template Var<R> contrastive_pair_loss(Var<R>, Var<R>);                                                           \
  template AlignmentLoss<R> total_alignment_loss(const std::map<Modality, EncodedBatch<R>>&, Var<R>, AlignmentMode, \
                                                 Aggregation);                                                     \
  template Var<R> FusionHead::reconstruction_loss(const Bound<R>&, const std::map<Modality, EncodedBatch<R>>&,     \
                                                  double, std::uint64_t, const std::vector<std::uint64_t>&) const;

MMR_INSTANTIATE_ALIGNMENT(float)
MMR_INSTANTIATE_ALIGNMENT(double)

}  // namespace mmr
