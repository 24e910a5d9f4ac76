#pragma once

// Reverse-mode differentiation over Tensor<Real>. Operations are recorded on a
// Tape in execution order; Tape::backward walks them in exact reverse order.
// A tape is single-threaded; kernels called from ops may use OpenMP internally.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "mmr/kernels.hpp"
#include "mmr/tensor.hpp"

namespace mmr {

template <class Real>
class Tape;

/// Handle to a value recorded on a tape.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor<Real>& value() const { return tape->value(*this); }
  const Shape& dims() const { return value().dims(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<Real>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> leaf(Tensor<Real> value, bool requires_grad);
  Var<Real> constant(Tensor<Real> value) { return leaf(std::move(value), false); }
  Var<Real> variable(Tensor<Real> value) { return leaf(std::move(value), true); }

  /// Records an op output. `fn` is only kept when some input requires a gradient.
  Var<Real> record(Tensor<Real> value, std::initializer_list<Var<Real>> inputs, BackwardFn fn);
  Var<Real> record(Tensor<Real> value, const std::vector<Var<Real>>& inputs, BackwardFn fn);

  const Tensor<Real>& value(Var<Real> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<Real> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of `v`, zero-allocated on first touch.
  Tensor<Real>& grad(Var<Real> v);
  /// Gradient of `v` after backward, or nullptr if nothing reached it.
  const Tensor<Real>* grad_if(Var<Real> v) const;

  void backward(Var<Real> loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  bool check_finite_ = true;
};

/// Per-sequence count of valid (leading) tokens; empty means all valid.
using Lengths = std::vector<std::size_t>;

namespace ad {

template <class Real> Var<Real> matmul(Var<Real> a, Var<Real> b);
/// x[..., K] * w[K, N] (+ bias[N]).
template <class Real> Var<Real> linear(Var<Real> x, Var<Real> w, std::optional<Var<Real>> bias = std::nullopt);
template <class Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> mul(Var<Real> a, Var<Real> b);
/// x + y where y's dims equal the trailing dims of x (broadcast over leading dims).
template <class Real> Var<Real> add_trailing(Var<Real> x, Var<Real> y);
template <class Real> Var<Real> scale(Var<Real> x, double c);
/// x / s for a rank-0 s.
template <class Real> Var<Real> div_scalar(Var<Real> x, Var<Real> s);
template <class Real> Var<Real> gelu(Var<Real> x);
template <class Real> Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, double eps = 1e-5);
template <class Real> Var<Real> softmax(Var<Real> x, std::size_t axis);
/// Softmax over the last axis of x[N, L], restricted to the first lengths[n] entries; the rest are 0.
template <class Real> Var<Real> masked_softmax(Var<Real> x, const Lengths& lengths);
/// Multi-head scaled dot-product attention. q[N,Lq,C], k[Nk,Lk,C], v[Nk,Lk,Cv] with Nk in {1, N}.
/// Keys at positions >= key_lengths[n] get weight 0. Scale is 1/sqrt(C/heads).
template <class Real>
Var<Real> attention(Var<Real> q, Var<Real> k, Var<Real> v, std::size_t heads, const Lengths& key_lengths = {});
/// Swaps axes 1 and 2 of a tensor of rank >= 3.
template <class Real> Var<Real> swap_axes12(Var<Real> x);
template <class Real> Var<Real> transpose(Var<Real> x);
template <class Real> Var<Real> reshape(Var<Real> x, Shape dims);
/// x[N, L, C] -> [N, ceil(L/stride), C]; a short trailing window is averaged over its own size.
template <class Real> Var<Real> avg_pool_time(Var<Real> x, std::size_t stride = 2);
/// x[N, L, C] -> [N, out_len, C]; window i spans [floor(i*L/out), ceil((i+1)*L/out)).
template <class Real> Var<Real> adaptive_avg_pool(Var<Real> x, std::size_t out_len);
/// x[N, L, Cin], w[kernel, Cin, Cout], b[Cout]; zero padding kernel/2 on both ends.
template <class Real> Var<Real> conv1d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride);
template <class Real> Var<Real> l2_normalize(Var<Real> x, double eps = 1e-12);
template <class Real> Var<Real> concat(const std::vector<Var<Real>>& xs, std::size_t axis);
template <class Real> Var<Real> slice(Var<Real> x, std::size_t axis, std::size_t start, std::size_t len);
template <class Real> Var<Real> index_select0(Var<Real> x, const std::vector<std::size_t>& idx);
/// Zero-pads (or truncates) axis `axis` to `len`.
template <class Real> Var<Real> resize_axis(Var<Real> x, std::size_t axis, std::size_t len);
/// Rows of x[..., C] flagged in `rows` are replaced by token[C].
template <class Real> Var<Real> replace_rows(Var<Real> x, Var<Real> token, const std::vector<std::uint8_t>& rows);
/// Mean over the valid tokens of x[N, L, C] -> [N, C].
template <class Real> Var<Real> masked_mean(Var<Real> x, const Lengths& lengths);
/// Late-interaction similarity matrix between padded batches x[B1,Lx,C], y[B2,Ly,C] with
/// per-token weights wx[B1,Lx], wy[B2,Ly]. Returns [B1, B2].
template <class Real>
Var<Real> similarity_matrix(Var<Real> x, const Lengths& lx, Var<Real> wx, Var<Real> y, const Lengths& ly,
                            Var<Real> wy, Aggregation agg);
/// mean_i -log softmax(logits[i, :])[i] for a square logits matrix.
template <class Real> Var<Real> diagonal_nll(Var<Real> logits);
template <class Real> Var<Real> sum(Var<Real> x);
template <class Real> Var<Real> mean(Var<Real> x);
/// Per-sample Euclidean norm over all non-leading axes: x[N, ...] -> [N].
template <class Real> Var<Real> row_norm(Var<Real> x);

}  // namespace ad
}  // namespace mmr
