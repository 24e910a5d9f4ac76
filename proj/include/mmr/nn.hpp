#pragma once

// Parameter storage and the layers shared by every encoder.

#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmr/autodiff.hpp"

namespace mmr {

/// Seeded engine whose full state can be saved and restored.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }
  std::vector<std::size_t> permutation(std::size_t n);
  /// k distinct indices from [0, n), in ascending order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  std::string state() const;
  void set_state(const std::string& s);
  std::mt19937_64& engine() noexcept { return eng_; }

 private:
  std::mt19937_64 eng_;
};

template <class Real>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<Real> init, bool decay = true);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor<Real>& get(const std::string& name);
  const Tensor<Real>& get(const std::string& name) const;
  bool decays(const std::string& name) const { return entries_.at(index_.at(name)).decay; }
  /// Names in registration order.
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t parameter_count() const;

  template <class To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<To>(), e.decay);
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Tensor<Real> value;
    bool decay = true;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters of a store placed on a tape as leaves.
template <class Real>
class Bound {
 public:
  Bound(Tape<Real>& tape, const ParamStore<Real>& store, bool trainable);

  Var<Real> operator[](const std::string& name) const;
  Tape<Real>& tape() const noexcept { return *tape_; }
  bool trainable() const noexcept { return trainable_; }
  /// Gradient of each parameter after backward (zeros where none reached).
  std::map<std::string, Tensor<Real>> gradients() const;

 private:
  Tape<Real>* tape_;
  const ParamStore<Real>* store_;
  bool trainable_;
  std::unordered_map<std::string, Var<Real>> vars_;
};

/// Row i, column 2j: sin(i / 10000^(2j/C)); column 2j+1: cos of the same.
template <class Real>
Tensor<Real> sinusoidal_encoding(std::size_t length, std::size_t dim);

void init_linear(ParamStore<float>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 bool bias = true);

template <class Real>
Var<Real> apply_linear(const Bound<Real>& p, const std::string& name, Var<Real> x, bool bias = true);

struct TransformerConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double ln_eps = 1e-5;
};

/// Post-norm encoder layer: x1 = LN(x + MHSA(x)); out = LN(x1 + MLP(x1)).
class TransformerLayer {
 public:
  TransformerLayer(std::string name, TransformerConfig cfg);

  void init(ParamStore<float>& ps, Rng& rng) const;
  /// Zeroes the attention and MLP output projections so the layer reduces to LN(LN(x)).
  void zero_residual_branches(ParamStore<float>& ps) const;

  /// x[N, L, C]; keys beyond lengths[n] are ignored.
  template <class Real>
  Var<Real> forward(const Bound<Real>& p, Var<Real> x, const Lengths& lengths = {}) const;

  const std::string& name() const noexcept { return name_; }
  const TransformerConfig& config() const noexcept { return cfg_; }

 private:
  std::string name_;
  TransformerConfig cfg_;
};

/// A stack of TransformerLayers named `<prefix>.<i>`.
class TransformerStack {
 public:
  TransformerStack(const std::string& prefix, std::size_t layers, TransformerConfig cfg);
  void init(ParamStore<float>& ps, Rng& rng) const;
  void zero_residual_branches(ParamStore<float>& ps) const;
  template <class Real>
  Var<Real> forward(const Bound<Real>& p, Var<Real> x, const Lengths& lengths = {}) const;
  std::size_t size() const noexcept { return layers_.size(); }

 private:
  std::vector<TransformerLayer> layers_;
};

}  // namespace mmr
