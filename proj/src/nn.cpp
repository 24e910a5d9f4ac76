#include "mmr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmr {

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Fisher-Yates with our own index draws so the sequence only depends on the engine.
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n) throw ConfigError("cannot sample " + std::to_string(k) + " of " + std::to_string(n));
  auto p = permutation(n);
  p.resize(k);
  std::sort(p.begin(), p.end());
  return p;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> eng_;
  if (!is) throw ConfigError("invalid RNG state string");
}

template <class Real>
void ParamStore<Real>::add(const std::string& name, Tensor<Real> init, bool decay) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(init), decay});
}

template <class Real>
Tensor<Real>& ParamStore<Real>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].value;
}

template <class Real>
const Tensor<Real>& ParamStore<Real>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].value;
}

template <class Real>
std::vector<std::string> ParamStore<Real>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

template <class Real>
std::size_t ParamStore<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template class ParamStore<float>;
template class ParamStore<double>;

template <class Real>
Bound<Real>::Bound(Tape<Real>& tape, const ParamStore<Real>& store, bool trainable)
    : tape_(&tape), store_(&store), trainable_(trainable) {
  for (const auto& name : store.names()) vars_.emplace(name, tape.leaf(store.get(name), trainable));
}

template <class Real>
Var<Real> Bound<Real>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("parameter not bound: " + name);
  return it->second;
}

template <class Real>
std::map<std::string, Tensor<Real>> Bound<Real>::gradients() const {
  std::map<std::string, Tensor<Real>> out;
  for (const auto& [name, v] : vars_) {
    const auto* g = tape_->grad_if(v);
    out.emplace(name, g ? *g : Tensor<Real>(v.dims()));
  }
  return out;
}

template class Bound<float>;
template class Bound<double>;

template <class Real>
Tensor<Real> sinusoidal_encoding(std::size_t length, std::size_t dim) {
  Tensor<Real> pe({length, dim});
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      const double freq = std::pow(10000.0, -double(j - j % 2) / double(dim));
      const double a = double(i) * freq;
      pe[i * dim + j] = Real(j % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return pe;
}

template Tensor<float> sinusoidal_encoding<float>(std::size_t, std::size_t);
template Tensor<double> sinusoidal_encoding<double>(std::size_t, std::size_t);

void init_linear(ParamStore<float>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                 bool bias) {
  Tensor<float> w({in, out});
  const double sd = 1.0 / std::sqrt(double(in));
  for (auto& v : w.data()) v = float(rng.normal(0.0, sd));
  ps.add(name + ".w", std::move(w));
  if (bias) ps.add(name + ".b", Tensor<float>({out}));
}

template <class Real>
Var<Real> apply_linear(const Bound<Real>& p, const std::string& name, Var<Real> x, bool bias) {
  if (bias) return ad::linear(x, p[name + ".w"], std::optional<Var<Real>>(p[name + ".b"]));
  return ad::linear(x, p[name + ".w"]);
}

template Var<float> apply_linear(const Bound<float>&, const std::string&, Var<float>, bool);
template Var<double> apply_linear(const Bound<double>&, const std::string&, Var<double>, bool);

TransformerLayer::TransformerLayer(std::string name, TransformerConfig cfg) : name_(std::move(name)), cfg_(cfg) {
  if (cfg_.heads == 0 || cfg_.dim % cfg_.heads != 0) {
    throw ConfigError(name_ + ": head count " + std::to_string(cfg_.heads) + " must divide dim " +
                      std::to_string(cfg_.dim));
  }
}

void TransformerLayer::init(ParamStore<float>& ps, Rng& rng) const {
  const std::size_t c = cfg_.dim, h = cfg_.dim * cfg_.mlp_ratio;
  for (const char* proj : {".q", ".k", ".v", ".o"}) init_linear(ps, name_ + proj, c, c, rng);
  ps.add(name_ + ".ln1.g", Tensor<float>({c}, 1.0f), false);
  ps.add(name_ + ".ln1.b", Tensor<float>({c}), false);
  init_linear(ps, name_ + ".fc1", c, h, rng);
  init_linear(ps, name_ + ".fc2", h, c, rng);
  ps.add(name_ + ".ln2.g", Tensor<float>({c}, 1.0f), false);
  ps.add(name_ + ".ln2.b", Tensor<float>({c}), false);
}

void TransformerLayer::zero_residual_branches(ParamStore<float>& ps) const {
  for (const char* n : {".o.w", ".o.b", ".fc2.w", ".fc2.b"})
    std::fill(ps.get(name_ + n).data().begin(), ps.get(name_ + n).data().end(), 0.0f);
}

template <class Real>
Var<Real> TransformerLayer::forward(const Bound<Real>& p, Var<Real> x, const Lengths& lengths) const {
  if (x.value().rank() != 3 || x.dim(2) != cfg_.dim) {
    throw ShapeError(name_ + ": expected [N, L, " + std::to_string(cfg_.dim) + "], got " + shape_str(x.dims()));
  }
  if (x.dim(1) == 0) throw EmptySequenceError(name_ + ": sequence has no tokens");
  auto q = apply_linear(p, name_ + ".q", x);
  auto k = apply_linear(p, name_ + ".k", x);
  auto v = apply_linear(p, name_ + ".v", x);
  auto a = ad::attention(q, k, v, cfg_.heads, lengths);
  auto x1 = ad::layer_norm(ad::add(x, apply_linear(p, name_ + ".o", a)), p[name_ + ".ln1.g"], p[name_ + ".ln1.b"],
                           cfg_.ln_eps);
  auto h = ad::gelu(apply_linear(p, name_ + ".fc1", x1));
  return ad::layer_norm(ad::add(x1, apply_linear(p, name_ + ".fc2", h)), p[name_ + ".ln2.g"], p[name_ + ".ln2.b"],
                        cfg_.ln_eps);
}

template Var<float> TransformerLayer::forward(const Bound<float>&, Var<float>, const Lengths&) const;
template Var<double> TransformerLayer::forward(const Bound<double>&, Var<double>, const Lengths&) const;

TransformerStack::TransformerStack(const std::string& prefix, std::size_t layers, TransformerConfig cfg) {
  for (std::size_t i = 0; i < layers; ++i) layers_.emplace_back(prefix + "." + std::to_string(i), cfg);
}

void TransformerStack::init(ParamStore<float>& ps, Rng& rng) const {
  for (const auto& l : layers_) l.init(ps, rng);
}

void TransformerStack::zero_residual_branches(ParamStore<float>& ps) const {
  for (const auto& l : layers_) l.zero_residual_branches(ps);
}

template <class Real>
Var<Real> TransformerStack::forward(const Bound<Real>& p, Var<Real> x, const Lengths& lengths) const {
  for (const auto& l : layers_) x = l.forward(p, x, lengths);
  return x;
}

template Var<float> TransformerStack::forward(const Bound<float>&, Var<float>, const Lengths&) const;
template Var<double> TransformerStack::forward(const Bound<double>&, Var<double>, const Lengths&) const;

}  // namespace mmr
