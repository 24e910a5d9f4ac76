#include "mmr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace mmr {

template <class Real>
Var<Real> Tape<Real>::leaf(Tensor<Real> value, bool requires_grad) {
  if (check_finite_ && !value.all_finite()) throw NumericError("non-finite value in leaf tensor");
  value.set_requires_grad(requires_grad);
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return Var<Real>{this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::record(Tensor<Real> value, std::initializer_list<Var<Real>> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var<Real>>(inputs), std::move(fn));
}

template <class Real>
Var<Real> Tape<Real>::record(Tensor<Real> value, const std::vector<Var<Real>>& inputs, BackwardFn fn) {
  if (check_finite_ && !value.all_finite()) {
    throw NumericError("non-finite value produced by op #" + std::to_string(nodes_.size()) + " with dims " +
                       shape_str(value.dims()));
  }
  bool rg = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw Error("op inputs recorded on a different tape");
    rg = rg || nodes_[in.id].requires_grad;
  }
  value.set_requires_grad(rg);
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  return Var<Real>{this, nodes_.size() - 1};
}

template <class Real>
Tensor<Real>& Tape<Real>::grad(Var<Real> v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    n.grad = Tensor<Real>(n.value.dims());
    n.has_grad = true;
  }
  return n.grad;
}

template <class Real>
const Tensor<Real>* Tape<Real>::grad_if(Var<Real> v) const {
  const Node& n = nodes_.at(v.id);
  return n.has_grad ? &n.grad : nullptr;
}

template <class Real>
void Tape<Real>::backward(Var<Real> loss) {
  if (value(loss).size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(value(loss).dims()));
  grad(loss).data()[0] = Real(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(n.grad);
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ad {
namespace {

template <class Real>
bool rg(Var<Real> v) {
  return v.tape->requires_grad(v);
}

template <class Real>
Tensor<Real>& gbuf(Var<Real> v) {
  return v.tape->grad(v);
}

void expect(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class Real>
void same_dims(Var<Real> a, Var<Real> b, const char* op) {
  expect(a.dims() == b.dims(),
         std::string(op) + ": dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
}

void check_lengths(const Lengths& lengths, std::size_t n, std::size_t l, const char* op) {
  if (lengths.empty()) return;
  expect(lengths.size() == n, std::string(op) + ": mask length " + std::to_string(lengths.size()) +
                                  " does not match batch " + std::to_string(n));
  for (std::size_t len : lengths) {
    if (len == 0) throw EmptySequenceError(std::string(op) + ": sequence with zero valid tokens");
    expect(len <= l, std::string(op) + ": valid length exceeds padded length");
  }
}

inline std::size_t len_at(const Lengths& lengths, std::size_t n, std::size_t l) {
  return lengths.empty() ? l : lengths[n];
}

}  // namespace

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  expect(a.value().rank() == 2 && b.value().rank() == 2, "matmul: operands must be matrices");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  expect(b.dim(0) == k, "matmul: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  Tensor<Real> out({m, n});
  kernels::gemm_nn(m, k, n, a.value().ptr(), b.value().ptr(), out.ptr());
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<Real>& g) {
    if (rg(a)) kernels::gemm_nt(m, n, k, g.ptr(), b.value().ptr(), gbuf(a).ptr());
    if (rg(b)) kernels::gemm_tn(k, m, n, a.value().ptr(), g.ptr(), gbuf(b).ptr());
  });
}

template <class Real>
Var<Real> linear(Var<Real> x, Var<Real> w, std::optional<Var<Real>> bias) {
  const auto& xv = x.value();
  expect(xv.rank() >= 1 && w.value().rank() == 2, "linear: bad operand ranks");
  const std::size_t k = xv.dims().back();
  expect(w.dim(0) == k, "linear: input features " + std::to_string(k) + " vs weight " + shape_str(w.dims()));
  const std::size_t n = w.dim(1);
  const std::size_t r = xv.size() / std::max<std::size_t>(k, 1);
  if (bias) expect(bias->dims() == Shape{n}, "linear: bias dims");
  Shape od = xv.dims();
  od.back() = n;
  Tensor<Real> out(od);
  if (bias) {
    const Real* bp = bias->value().ptr();
    for (std::size_t i = 0; i < r; ++i) std::copy(bp, bp + n, out.ptr() + i * n);
  }
  kernels::gemm_nn(r, k, n, xv.ptr(), w.value().ptr(), out.ptr());
  std::vector<Var<Real>> ins{x, w};
  if (bias) ins.push_back(*bias);
  return x.tape->record(std::move(out), ins, [x, w, bias, r, k, n](const Tensor<Real>& g) {
    if (rg(x)) kernels::gemm_nt(r, n, k, g.ptr(), w.value().ptr(), gbuf(x).ptr());
    if (rg(w)) kernels::gemm_tn(k, r, n, x.value().ptr(), g.ptr(), gbuf(w).ptr());
    if (bias && rg(*bias)) {
      Real* gb = gbuf(*bias).ptr();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  same_dims(a, b, "add");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](const Tensor<Real>& g) {
    for (Var<Real> v : {a, b}) {
      if (!rg(v)) continue;
      auto& gv = gbuf(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  same_dims(a, b, "sub");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](const Tensor<Real>& g) {
    if (rg(a)) {
      auto& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (rg(b)) {
      auto& gb = gbuf(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  same_dims(a, b, "mul");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](const Tensor<Real>& g) {
    if (rg(a)) {
      auto& ga = gbuf(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (rg(b)) {
      auto& gb = gbuf(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class Real>
Var<Real> add_trailing(Var<Real> x, Var<Real> y) {
  const auto& xd = x.dims();
  const auto& yd = y.dims();
  expect(yd.size() <= xd.size() && std::equal(yd.rbegin(), yd.rend(), xd.rbegin()),
         "add_trailing: " + shape_str(yd) + " is not a suffix of " + shape_str(xd));
  const std::size_t ys = y.value().size();
  const std::size_t reps = x.value().size() / ys;
  Tensor<Real> out = x.value();
  const auto& yv = y.value();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < ys; ++j) out[r * ys + j] += yv[j];
  return x.tape->record(std::move(out), {x, y}, [x, y, reps, ys](const Tensor<Real>& g) {
    if (rg(x)) {
      auto& gx = gbuf(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (rg(y)) {
      auto& gy = gbuf(y);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < ys; ++j) gy[j] += g[r * ys + j];
    }
  });
}

template <class Real>
Var<Real> scale(Var<Real> x, double c) {
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v *= Real(c);
  return x.tape->record(std::move(out), {x}, [x, c](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += Real(c) * g[i];
  });
}

template <class Real>
Var<Real> div_scalar(Var<Real> x, Var<Real> s) {
  expect(s.value().size() == 1, "div_scalar: divisor must be a scalar");
  const Real sv = s.value().item();
  if (sv == Real(0)) throw NumericError("div_scalar: division by zero");
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v /= sv;
  return x.tape->record(std::move(out), {x, s}, [x, s](const Tensor<Real>& g) {
    const Real sv = s.value().item();
    if (rg(x)) {
      auto& gx = gbuf(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / sv;
    }
    if (rg(s)) {
      const auto& xv = x.value();
      Real acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      gbuf(s)[0] -= acc / (sv * sv);
    }
  });
}

template <class Real>
Var<Real> gelu(Var<Real> x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) {
    const Real u = Real(kC) * (v + Real(kA) * v * v * v);
    v = Real(0.5) * v * (Real(1) + std::tanh(u));
  }
  return x.tape->record(std::move(out), {x}, [x](const Tensor<Real>& g) {
    const auto& xv = x.value();
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xv[i];
      const Real t = std::tanh(Real(kC) * (v + Real(kA) * v * v * v));
      const Real d = Real(0.5) * (Real(1) + t) +
                     Real(0.5) * v * (Real(1) - t * t) * Real(kC) * (Real(1) + Real(3 * kA) * v * v);
      gx[i] += g[i] * d;
    }
  });
}

template <class Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, double eps) {
  const auto& xv = x.value();
  const std::size_t c = xv.dims().back();
  expect(gamma.dims() == Shape{c} && beta.dims() == Shape{c}, "layer_norm: gain/bias dims");
  const std::size_t rows = xv.size() / c;
  Tensor<Real> out(xv.dims());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  const Real* gp = gamma.value().ptr();
  const Real* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.ptr() + r * c;
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= Real(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= Real(c);
    const Real rs = Real(1) / std::sqrt(var + Real(eps));
    (*rstd)[r] = rs;
    Real* o = out.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = gp[j] * (xr[j] - mu) * rs + bp[j];
  }
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, rstd, rows, c](const Tensor<Real>& g) {
    const auto& xv = x.value();
    const Real* gp = gamma.value().ptr();
    std::vector<Real> xhat(c), gh(c);
    Real* gg = rg(gamma) ? gbuf(gamma).ptr() : nullptr;
    Real* gb = rg(beta) ? gbuf(beta).ptr() : nullptr;
    Real* gx = rg(x) ? gbuf(x).ptr() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* xr = xv.ptr() + r * c;
      const Real* gr = g.ptr() + r * c;
      Real mu = 0;
      for (std::size_t j = 0; j < c; ++j) mu += xr[j];
      mu /= Real(c);
      const Real rs = (*rstd)[r];
      Real m1 = 0, m2 = 0;
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (xr[j] - mu) * rs;
        gh[j] = gr[j] * gp[j];
        m1 += gh[j];
        m2 += gh[j] * xhat[j];
        if (gg) gg[j] += gr[j] * xhat[j];
        if (gb) gb[j] += gr[j];
      }
      m1 /= Real(c);
      m2 /= Real(c);
      if (gx)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += rs * (gh[j] - m1 - xhat[j] * m2);
    }
  });
}

template <class Real>
Var<Real> softmax(Var<Real> x, std::size_t axis) {
  const auto s = split_axis(x.dims(), axis);
  if (s.extent == 0) throw ShapeError("softmax: empty axis");
  auto yv = std::make_shared<Tensor<Real>>(x.dims());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      Real mx = xv[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      Real z = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const Real v = std::exp(xv[base + e * s.inner] - mx);
        (*yv)[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) (*yv)[base + e * s.inner] /= z;
    }
  Tensor<Real> out = *yv;
  return x.tape->record(std::move(out), {x}, [x, s, yv](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    const auto& y = *yv;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        Real dotv = 0;
        for (std::size_t e = 0; e < s.extent; ++e) dotv += g[base + e * s.inner] * y[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          gx[i] += y[i] * (g[i] - dotv);
        }
      }
  });
}

template <class Real>
Var<Real> masked_softmax(Var<Real> x, const Lengths& lengths) {
  expect(x.value().rank() == 2, "masked_softmax: expects [N, L]");
  const std::size_t n = x.dim(0), l = x.dim(1);
  if (l == 0) throw EmptySequenceError("masked_softmax: empty axis");
  check_lengths(lengths, n, l, "masked_softmax");
  auto yv = std::make_shared<Tensor<Real>>(x.dims());
  const auto& xv = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t len = len_at(lengths, r, l);
    const Real* xr = xv.ptr() + r * l;
    Real* yr = yv->ptr() + r * l;
    Real mx = *std::max_element(xr, xr + len);
    Real z = 0;
    for (std::size_t j = 0; j < len; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < len; ++j) yr[j] /= z;
  }
  Tensor<Real> out = *yv;
  return x.tape->record(std::move(out), {x}, [x, yv, n, l](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t r = 0; r < n; ++r) {
      const Real* yr = yv->ptr() + r * l;
      const Real* gr = g.ptr() + r * l;
      Real dotv = 0;
      for (std::size_t j = 0; j < l; ++j) dotv += gr[j] * yr[j];
      for (std::size_t j = 0; j < l; ++j) gx[r * l + j] += yr[j] * (gr[j] - dotv);
    }
  });
}

template <class Real>
Var<Real> attention(Var<Real> q, Var<Real> k, Var<Real> v, std::size_t heads, const Lengths& key_lengths) {
  expect(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3, "attention: expects rank-3 q, k, v");
  const std::size_t n = q.dim(0), lq = q.dim(1), c = q.dim(2);
  const std::size_t nk = k.dim(0), lk = k.dim(1), cv = v.dim(2);
  expect(k.dim(2) == c, "attention: q/k feature dims differ");
  expect(v.dim(0) == nk && v.dim(1) == lk, "attention: k/v lengths differ");
  expect(nk == n || nk == 1, "attention: key batch must be 1 or match queries");
  expect(heads >= 1 && c % heads == 0 && cv % heads == 0, "attention: head count must divide feature dims");
  if (lk == 0) throw EmptySequenceError("attention: no keys");
  check_lengths(key_lengths, n, lk, "attention");
  const std::size_t dh = c / heads, dv = cv / heads;
  const Real scl = Real(1) / std::sqrt(Real(dh));
  auto probs = std::make_shared<std::vector<Real>>(n * heads * lq * lk, Real(0));
  Tensor<Real> out({n, lq, cv});
  const Real* qp = q.value().ptr();
  const Real* kp = k.value().ptr();
  const Real* vp = v.value().ptr();
  const bool big = n * heads * lq * lk * (dh + dv) >= kernels::kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t nh = 0; nh < n * heads; ++nh) {
    const std::size_t b = nh / heads, h = nh % heads;
    const std::size_t kb = nk == 1 ? 0 : b;
    const std::size_t len = len_at(key_lengths, b, lk);
    for (std::size_t i = 0; i < lq; ++i) {
      Real* p = probs->data() + ((b * heads + h) * lq + i) * lk;
      const Real* qi = qp + (b * lq + i) * c + h * dh;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        p[j] = scl * kernels::dot(qi, kp + (kb * lk + j) * c + h * dh, dh);
        mx = std::max(mx, p[j]);
      }
      Real z = 0;
      for (std::size_t j = 0; j < len; ++j) z += (p[j] = std::exp(p[j] - mx));
      Real* o = out.ptr() + (b * lq + i) * cv + h * dv;
      for (std::size_t j = 0; j < len; ++j) {
        p[j] /= z;
        const Real* vj = vp + (kb * lk + j) * cv + h * dv;
        for (std::size_t d = 0; d < dv; ++d) o[d] += p[j] * vj[d];
      }
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v}, [q, k, v, probs, n, lq, c, nk, lk, cv, heads, dh, dv, scl, big](const Tensor<Real>& g) {
        const Real* qp = q.value().ptr();
        const Real* kp = k.value().ptr();
        const Real* vp = v.value().ptr();
        Real* gq = rg(q) ? gbuf(q).ptr() : nullptr;
        Real* gk = rg(k) ? gbuf(k).ptr() : nullptr;
        Real* gv = rg(v) ? gbuf(v).ptr() : nullptr;
        // With shared keys every query batch writes the same gk/gv rows, so that case stays serial.
        const bool par_batch = nk == n && big;
#pragma omp parallel for schedule(static) if (par_batch)
        for (std::size_t nh = 0; nh < n * heads; ++nh) {
          const std::size_t b = nh / heads, h = nh % heads;
          const std::size_t kb = nk == 1 ? 0 : b;
          std::vector<Real> ds(lk);
          for (std::size_t i = 0; i < lq; ++i) {
            const Real* p = probs->data() + ((b * heads + h) * lq + i) * lk;
            const Real* gi = g.ptr() + (b * lq + i) * cv + h * dv;
            Real acc = 0;
            for (std::size_t j = 0; j < lk; ++j) {
              ds[j] = p[j] == Real(0) ? Real(0) : kernels::dot(gi, vp + (kb * lk + j) * cv + h * dv, dv);
              acc += p[j] * ds[j];
            }
            for (std::size_t j = 0; j < lk; ++j) ds[j] = p[j] * (ds[j] - acc) * scl;
            const Real* qi = qp + (b * lq + i) * c + h * dh;
            for (std::size_t j = 0; j < lk; ++j) {
              if (p[j] == Real(0)) continue;
              const Real* kj = kp + (kb * lk + j) * c + h * dh;
              if (gq) {
                Real* gqi = gq + (b * lq + i) * c + h * dh;
                for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds[j] * kj[d];
              }
              if (gk) {
                Real* gkj = gk + (kb * lk + j) * c + h * dh;
                for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds[j] * qi[d];
              }
              if (gv) {
                Real* gvj = gv + (kb * lk + j) * cv + h * dv;
                for (std::size_t d = 0; d < dv; ++d) gvj[d] += p[j] * gi[d];
              }
            }
          }
        }
      });
}

template <class Real>
Var<Real> swap_axes12(Var<Real> x) {
  const auto& d = x.dims();
  expect(d.size() >= 3, "swap_axes12: rank must be >= 3");
  const std::size_t a = d[0], b = d[1], cc = d[2];
  std::size_t inner = 1;
  for (std::size_t i = 3; i < d.size(); ++i) inner *= d[i];
  Shape od = d;
  std::swap(od[1], od[2]);
  Tensor<Real> out(od);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < cc; ++k)
        std::copy_n(xv.ptr() + ((i * b + j) * cc + k) * inner, inner, out.ptr() + ((i * cc + k) * b + j) * inner);
  return x.tape->record(std::move(out), {x}, [x, a, b, cc, inner](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < cc; ++k) {
          Real* dst = gx.ptr() + ((i * b + j) * cc + k) * inner;
          const Real* src = g.ptr() + ((i * cc + k) * b + j) * inner;
          for (std::size_t e = 0; e < inner; ++e) dst[e] += src[e];
        }
  });
}

template <class Real>
Var<Real> transpose(Var<Real> x) {
  expect(x.value().rank() == 2, "transpose: expects a matrix");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<Real> out({c, r});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape->record(std::move(out), {x}, [x, r, c](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

template <class Real>
Var<Real> reshape(Var<Real> x, Shape dims) {
  Tensor<Real> out = x.value().reshaped(std::move(dims));
  return x.tape->record(std::move(out), {x}, [x](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class Real>
Var<Real> avg_pool_time(Var<Real> x, std::size_t stride) {
  expect(x.value().rank() == 3, "avg_pool_time: expects [N, L, C]");
  expect(stride >= 1, "avg_pool_time: stride must be positive");
  const std::size_t n = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l == 0) throw EmptySequenceError("avg_pool_time: empty sequence");
  const std::size_t lo = (l + stride - 1) / stride;
  Tensor<Real> out({n, lo, c});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < lo; ++t) {
      const std::size_t s0 = t * stride, s1 = std::min(l, s0 + stride);
      Real* o = out.ptr() + (b * lo + t) * c;
      for (std::size_t s = s0; s < s1; ++s)
        for (std::size_t j = 0; j < c; ++j) o[j] += xv[(b * l + s) * c + j];
      for (std::size_t j = 0; j < c; ++j) o[j] /= Real(s1 - s0);
    }
  return x.tape->record(std::move(out), {x}, [x, n, l, c, lo, stride](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t t = 0; t < lo; ++t) {
        const std::size_t s0 = t * stride, s1 = std::min(l, s0 + stride);
        const Real inv = Real(1) / Real(s1 - s0);
        for (std::size_t s = s0; s < s1; ++s)
          for (std::size_t j = 0; j < c; ++j) gx[(b * l + s) * c + j] += g[(b * lo + t) * c + j] * inv;
      }
  });
}

template <class Real>
Var<Real> adaptive_avg_pool(Var<Real> x, std::size_t out_len) {
  expect(x.value().rank() == 3, "adaptive_avg_pool: expects [N, L, C]");
  const std::size_t n = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l == 0) throw EmptySequenceError("adaptive_avg_pool: empty sequence");
  expect(out_len >= 1, "adaptive_avg_pool: output length must be positive");
  auto window = [l, out_len](std::size_t i) {
    const std::size_t s0 = i * l / out_len;
    const std::size_t s1 = ((i + 1) * l + out_len - 1) / out_len;
    return std::pair{s0, s1};
  };
  Tensor<Real> out({n, out_len, c});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < out_len; ++t) {
      const auto [s0, s1] = window(t);
      Real* o = out.ptr() + (b * out_len + t) * c;
      for (std::size_t s = s0; s < s1; ++s)
        for (std::size_t j = 0; j < c; ++j) o[j] += xv[(b * l + s) * c + j];
      for (std::size_t j = 0; j < c; ++j) o[j] /= Real(s1 - s0);
    }
  return x.tape->record(std::move(out), {x}, [x, n, l, c, out_len, window](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t t = 0; t < out_len; ++t) {
        const auto [s0, s1] = window(t);
        const Real inv = Real(1) / Real(s1 - s0);
        for (std::size_t s = s0; s < s1; ++s)
          for (std::size_t j = 0; j < c; ++j) gx[(b * l + s) * c + j] += g[(b * out_len + t) * c + j] * inv;
      }
  });
}

template <class Real>
Var<Real> conv1d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride) {
  expect(x.value().rank() == 3 && w.value().rank() == 3, "conv1d: expects x[N,L,Cin], w[K,Cin,Cout]");
  const std::size_t n = x.dim(0), l = x.dim(1), ci = x.dim(2);
  const std::size_t kk = w.dim(0), co = w.dim(2);
  expect(w.dim(1) == ci && b.dims() == Shape{co}, "conv1d: weight/bias dims");
  expect(stride >= 1 && kk >= 1, "conv1d: kernel and stride must be positive");
  const std::size_t pad = kk / 2;
  expect(l + 2 * pad >= kk, "conv1d: input shorter than kernel");
  const std::size_t lo = (l + 2 * pad - kk) / stride + 1;
  Tensor<Real> out({n, lo, co});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t bb = 0; bb < n; ++bb)
    for (std::size_t t = 0; t < lo; ++t) {
      Real* o = out.ptr() + (bb * lo + t) * co;
      std::copy_n(b.value().ptr(), co, o);
      for (std::size_t q = 0; q < kk; ++q) {
        const long src = long(t * stride + q) - long(pad);
        if (src < 0 || src >= long(l)) continue;
        kernels::gemm_nn(1, ci, co, xv.ptr() + (bb * l + std::size_t(src)) * ci, wv.ptr() + q * ci * co, o);
      }
    }
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b, n, l, ci, kk, co, pad, lo, stride](const Tensor<Real>& g) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    Real* gx = rg(x) ? gbuf(x).ptr() : nullptr;
    Real* gw = rg(w) ? gbuf(w).ptr() : nullptr;
    Real* gb = rg(b) ? gbuf(b).ptr() : nullptr;
    for (std::size_t bb = 0; bb < n; ++bb)
      for (std::size_t t = 0; t < lo; ++t) {
        const Real* gr = g.ptr() + (bb * lo + t) * co;
        if (gb)
          for (std::size_t j = 0; j < co; ++j) gb[j] += gr[j];
        for (std::size_t q = 0; q < kk; ++q) {
          const long src = long(t * stride + q) - long(pad);
          if (src < 0 || src >= long(l)) continue;
          const std::size_t row = (bb * l + std::size_t(src)) * ci;
          if (gx) kernels::gemm_nt(1, co, ci, gr, wv.ptr() + q * ci * co, gx + row);
          if (gw) kernels::gemm_tn(ci, 1, co, xv.ptr() + row, gr, gw + q * ci * co);
        }
      }
  });
}

template <class Real>
Var<Real> l2_normalize(Var<Real> x, double eps) {
  const auto& xv = x.value();
  const std::size_t c = xv.dims().back();
  const std::size_t rows = xv.size() / std::max<std::size_t>(c, 1);
  auto norms = std::make_shared<std::vector<Real>>(rows);
  Tensor<Real> out(xv.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real nr = std::max(std::sqrt(kernels::dot(xv.ptr() + r * c, xv.ptr() + r * c, c)), Real(eps));
    (*norms)[r] = nr;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] / nr;
  }
  return x.tape->record(std::move(out), {x}, [x, norms, rows, c, eps](const Tensor<Real>& g) {
    const auto& xv = x.value();
    auto& gx = gbuf(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real nr = (*norms)[r];
      const Real* gr = g.ptr() + r * c;
      const Real* xr = xv.ptr() + r * c;
      if (nr <= Real(eps)) {
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gr[j] / nr;
        continue;
      }
      const Real gy = kernels::dot(gr, xr, c) / nr;
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += (gr[j] - xr[j] / nr * gy) / nr;
    }
  });
}

template <class Real>
Var<Real> concat(const std::vector<Var<Real>>& xs, std::size_t axis) {
  expect(!xs.empty(), "concat: no inputs");
  Shape od = xs[0].dims();
  expect(axis < od.size(), "concat: axis out of range");
  od[axis] = 0;
  std::vector<AxisSplit> parts;
  for (const auto& x : xs) {
    Shape d = x.dims();
    expect(d.size() == od.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < d.size(); ++i)
      expect(i == axis || d[i] == xs[0].dims()[i], "concat: non-axis dims differ " + shape_str(d));
    od[axis] += d[axis];
    parts.push_back(split_axis(d, axis));
  }
  const std::size_t outer = parts[0].outer, inner = parts[0].inner;
  const std::size_t total = od[axis];
  Tensor<Real> out(od);
  std::size_t off = 0;
  for (std::size_t p = 0; p < xs.size(); ++p) {
    const auto& xv = xs[p].value();
    const std::size_t e = parts[p].extent;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(xv.ptr() + o * e * inner, e * inner, out.ptr() + (o * total + off) * inner);
    off += e;
  }
  return xs[0].tape->record(std::move(out), xs, [xs, parts, outer, inner, total](const Tensor<Real>& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < xs.size(); ++p) {
      const std::size_t e = parts[p].extent;
      if (rg(xs[p])) {
        auto& gx = gbuf(xs[p]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < e * inner; ++i) gx[o * e * inner + i] += g[(o * total + off) * inner + i];
      }
      off += e;
    }
  });
}

template <class Real>
Var<Real> slice(Var<Real> x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto s = split_axis(x.dims(), axis);
  expect(start + len <= s.extent, "slice: range exceeds axis extent");
  Shape od = x.dims();
  od[axis] = len;
  Tensor<Real> out(od);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.ptr() + (o * s.extent + start) * s.inner, len * s.inner, out.ptr() + o * len * s.inner);
  return x.tape->record(std::move(out), {x}, [x, s, start, len](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < len * s.inner; ++i) gx[(o * s.extent + start) * s.inner + i] += g[o * len * s.inner + i];
  });
}

template <class Real>
Var<Real> index_select0(Var<Real> x, const std::vector<std::size_t>& idx) {
  const auto& d = x.dims();
  expect(!d.empty(), "index_select0: rank-0 input");
  const std::size_t row = x.value().size() / std::max<std::size_t>(d[0], 1);
  Shape od = d;
  od[0] = idx.size();
  Tensor<Real> out(od);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    expect(idx[i] < d[0], "index_select0: index out of range");
    std::copy_n(x.value().ptr() + idx[i] * row, row, out.ptr() + i * row);
  }
  return x.tape->record(std::move(out), {x}, [x, idx, row](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) gx[idx[i] * row + j] += g[i * row + j];
  });
}

template <class Real>
Var<Real> resize_axis(Var<Real> x, std::size_t axis, std::size_t len) {
  const auto s = split_axis(x.dims(), axis);
  Shape od = x.dims();
  od[axis] = len;
  const std::size_t keep = std::min(len, s.extent);
  Tensor<Real> out(od);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.ptr() + o * s.extent * s.inner, keep * s.inner, out.ptr() + o * len * s.inner);
  return x.tape->record(std::move(out), {x}, [x, s, len, keep](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < keep * s.inner; ++i) gx[o * s.extent * s.inner + i] += g[o * len * s.inner + i];
  });
}

template <class Real>
Var<Real> replace_rows(Var<Real> x, Var<Real> token, const std::vector<std::uint8_t>& rows) {
  const std::size_t c = x.dims().back();
  expect(token.dims() == Shape{c}, "replace_rows: token dims");
  const std::size_t nrows = x.value().size() / c;
  expect(rows.size() == nrows, "replace_rows: row mask length");
  Tensor<Real> out = x.value();
  for (std::size_t r = 0; r < nrows; ++r)
    if (rows[r]) std::copy_n(token.value().ptr(), c, out.ptr() + r * c);
  return x.tape->record(std::move(out), {x, token}, [x, token, rows, c, nrows](const Tensor<Real>& g) {
    Real* gx = rg(x) ? gbuf(x).ptr() : nullptr;
    Real* gt = rg(token) ? gbuf(token).ptr() : nullptr;
    for (std::size_t r = 0; r < nrows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        if (rows[r]) {
          if (gt) gt[j] += g[r * c + j];
        } else if (gx) {
          gx[r * c + j] += g[r * c + j];
        }
      }
  });
}

template <class Real>
Var<Real> masked_mean(Var<Real> x, const Lengths& lengths) {
  expect(x.value().rank() == 3, "masked_mean: expects [N, L, C]");
  const std::size_t n = x.dim(0), l = x.dim(1), c = x.dim(2);
  if (l == 0) throw EmptySequenceError("masked_mean: empty sequence");
  check_lengths(lengths, n, l, "masked_mean");
  Tensor<Real> out({n, c});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t len = len_at(lengths, b, l);
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t j = 0; j < c; ++j) out[b * c + j] += xv[(b * l + t) * c + j];
    for (std::size_t j = 0; j < c; ++j) out[b * c + j] /= Real(len);
  }
  return x.tape->record(std::move(out), {x}, [x, lengths, n, l, c](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t len = len_at(lengths, b, l);
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < c; ++j) gx[(b * l + t) * c + j] += g[b * c + j] / Real(len);
    }
  });
}

namespace {

// Accumulates d(G * h(x, y)) into one side of the pair. When `x_side` is true,
// writes gx/gwx; otherwise gy/gwy. `d` holds the lx*ly token dot products.
template <class Real>
void pair_backward(const Real* x, std::size_t lx, const Real* wx, const Real* y, std::size_t ly, const Real* wy,
                   std::size_t c, Aggregation agg, Real gval, bool x_side, Real* gtok, Real* gw, std::vector<Real>& d) {
  d.resize(lx * ly);
  for (std::size_t a = 0; a < lx; ++a)
    for (std::size_t b = 0; b < ly; ++b) d[a * ly + b] = kernels::dot(x + a * c, y + b * c, c);
  const Real half = Real(0.5) * gval;
  if (agg == Aggregation::Max) {
    std::vector<std::size_t> row_arg(lx, 0), col_arg(ly, 0);
    for (std::size_t a = 0; a < lx; ++a)
      for (std::size_t b = 1; b < ly; ++b)
        if (d[a * ly + b] > d[a * ly + row_arg[a]]) row_arg[a] = b;
    for (std::size_t b = 0; b < ly; ++b)
      for (std::size_t a = 1; a < lx; ++a)
        if (d[a * ly + b] > d[col_arg[b] * ly + b]) col_arg[b] = a;
    if (x_side) {
      for (std::size_t a = 0; a < lx; ++a) {
        if (gw) gw[a] += half * d[a * ly + row_arg[a]];
        if (gtok) {
          const Real coef = half * wx[a];
          const Real* yb = y + row_arg[a] * c;
          for (std::size_t j = 0; j < c; ++j) gtok[a * c + j] += coef * yb[j];
        }
      }
      if (gtok)
        for (std::size_t b = 0; b < ly; ++b) {
          const Real coef = half * wy[b];
          const Real* yb = y + b * c;
          Real* ga = gtok + col_arg[b] * c;
          for (std::size_t j = 0; j < c; ++j) ga[j] += coef * yb[j];
        }
    } else {
      for (std::size_t b = 0; b < ly; ++b) {
        if (gw) gw[b] += half * d[col_arg[b] * ly + b];
        if (gtok) {
          const Real coef = half * wy[b];
          const Real* xa = x + col_arg[b] * c;
          for (std::size_t j = 0; j < c; ++j) gtok[b * c + j] += coef * xa[j];
        }
      }
      if (gtok)
        for (std::size_t a = 0; a < lx; ++a) {
          const Real coef = half * wx[a];
          const Real* xa = x + a * c;
          Real* gb = gtok + row_arg[a] * c;
          for (std::size_t j = 0; j < c; ++j) gb[j] += coef * xa[j];
        }
    }
    return;
  }
  // Mean aggregation: dh/dD[a,b] = 0.5 * (wx[a] / ly + wy[b] / lx).
  if (x_side) {
    if (gw)
      for (std::size_t a = 0; a < lx; ++a) {
        Real s = 0;
        for (std::size_t b = 0; b < ly; ++b) s += d[a * ly + b];
        gw[a] += half * s / Real(ly);
      }
    if (gtok)
      for (std::size_t a = 0; a < lx; ++a)
        for (std::size_t b = 0; b < ly; ++b) {
          const Real coef = half * (wx[a] / Real(ly) + wy[b] / Real(lx));
          for (std::size_t j = 0; j < c; ++j) gtok[a * c + j] += coef * y[b * c + j];
        }
  } else {
    if (gw)
      for (std::size_t b = 0; b < ly; ++b) {
        Real s = 0;
        for (std::size_t a = 0; a < lx; ++a) s += d[a * ly + b];
        gw[b] += half * s / Real(lx);
      }
    if (gtok)
      for (std::size_t b = 0; b < ly; ++b)
        for (std::size_t a = 0; a < lx; ++a) {
          const Real coef = half * (wx[a] / Real(ly) + wy[b] / Real(lx));
          for (std::size_t j = 0; j < c; ++j) gtok[b * c + j] += coef * x[a * c + j];
        }
  }
}

}  // namespace

template <class Real>
Var<Real> similarity_matrix(Var<Real> x, const Lengths& lx, Var<Real> wx, Var<Real> y, const Lengths& ly, Var<Real> wy,
                            Aggregation agg) {
  expect(x.value().rank() == 3 && y.value().rank() == 3, "similarity_matrix: expects [B, L, C] batches");
  const std::size_t b1 = x.dim(0), l1 = x.dim(1), c = x.dim(2);
  const std::size_t b2 = y.dim(0), l2 = y.dim(1);
  expect(y.dim(2) == c, "similarity_matrix: feature dims differ");
  expect(wx.dims() == Shape{b1, l1} && wy.dims() == Shape{b2, l2}, "similarity_matrix: weight dims");
  if (b1 == 0 || b2 == 0) throw ShapeError("similarity_matrix: empty batch");
  if (l1 == 0 || l2 == 0) throw EmptySequenceError("similarity_matrix: empty sequence");
  auto full = [](const Lengths& l, std::size_t n, std::size_t len) { return l.empty() ? Lengths(n, len) : l; };
  const Lengths lxs = full(lx, b1, l1), lys = full(ly, b2, l2);
  for (std::size_t i = 0; i < b1; ++i)
    if (lxs[i] == 0) throw EmptySequenceError("similarity_matrix: x sequence " + std::to_string(i) + " is empty");
  for (std::size_t j = 0; j < b2; ++j)
    if (lys[j] == 0) throw EmptySequenceError("similarity_matrix: y sequence " + std::to_string(j) + " is empty");
  check_lengths(lxs, b1, l1, "similarity_matrix");
  check_lengths(lys, b2, l2, "similarity_matrix");
  std::vector<std::size_t> ox(b1), oy(b2);
  for (std::size_t i = 0; i < b1; ++i) ox[i] = i * l1;
  for (std::size_t j = 0; j < b2; ++j) oy[j] = j * l2;
  kernels::PackedView<Real> xs{x.value().ptr(), wx.value().ptr(), ox.data(), lxs.data(), b1, c};
  kernels::PackedView<Real> ys{y.value().ptr(), wy.value().ptr(), oy.data(), lys.data(), b2, c};
  Tensor<Real> out({b1, b2});
  kernels::score_matrix(xs, ys, agg, out.ptr());
  return x.tape->record(std::move(out), {x, wx, y, wy},
                        [x, wx, y, wy, lxs, lys, b1, b2, l1, l2, c, agg](const Tensor<Real>& g) {
                          const Real* xp = x.value().ptr();
                          const Real* yp = y.value().ptr();
                          const Real* wxp = wx.value().ptr();
                          const Real* wyp = wy.value().ptr();
                          Real* gx = rg(x) ? gbuf(x).ptr() : nullptr;
                          Real* gwx = rg(wx) ? gbuf(wx).ptr() : nullptr;
                          Real* gy = rg(y) ? gbuf(y).ptr() : nullptr;
                          Real* gwy = rg(wy) ? gbuf(wy).ptr() : nullptr;
                          const bool big = b1 * b2 * l1 * l2 * c >= kernels::kParallelGrain;
                          if (gx || gwx) {
#pragma omp parallel for schedule(dynamic, 1) if (big)
                            for (std::size_t i = 0; i < b1; ++i) {
                              std::vector<Real> d;
                              for (std::size_t j = 0; j < b2; ++j)
                                pair_backward(xp + i * l1 * c, lxs[i], wxp + i * l1, yp + j * l2 * c, lys[j],
                                              wyp + j * l2, c, agg, g[i * b2 + j], true,
                                              gx ? gx + i * l1 * c : nullptr, gwx ? gwx + i * l1 : nullptr, d);
                            }
                          }
                          if (gy || gwy) {
#pragma omp parallel for schedule(dynamic, 1) if (big)
                            for (std::size_t j = 0; j < b2; ++j) {
                              std::vector<Real> d;
                              for (std::size_t i = 0; i < b1; ++i)
                                pair_backward(xp + i * l1 * c, lxs[i], wxp + i * l1, yp + j * l2 * c, lys[j],
                                              wyp + j * l2, c, agg, g[i * b2 + j], false,
                                              gy ? gy + j * l2 * c : nullptr, gwy ? gwy + j * l2 : nullptr, d);
                            }
                          }
                        });
}

template <class Real>
Var<Real> diagonal_nll(Var<Real> logits) {
  expect(logits.value().rank() == 2, "diagonal_nll: expects a matrix");
  const std::size_t b = logits.dim(0);
  if (logits.dim(1) != b) throw PairingError("diagonal_nll: matrix is not square " + shape_str(logits.dims()));
  if (b == 0) throw ShapeError("diagonal_nll: empty matrix");
  const auto& lv = logits.value();
  auto probs = std::make_shared<std::vector<Real>>(b * b);
  Real loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const Real* r = lv.ptr() + i * b;
    const Real mx = *std::max_element(r, r + b);
    Real z = 0;
    for (std::size_t j = 0; j < b; ++j) z += ((*probs)[i * b + j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < b; ++j) (*probs)[i * b + j] /= z;
    loss += (mx + std::log(z)) - r[i];
  }
  loss /= Real(b);
  return logits.tape->record(Tensor<Real>::scalar(loss), {logits}, [logits, probs, b](const Tensor<Real>& g) {
    auto& gl = gbuf(logits);
    const Real s = g.item() / Real(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) gl[i * b + j] += s * ((*probs)[i * b + j] - (i == j ? Real(1) : Real(0)));
  });
}

template <class Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().data()) s += v;
  return x.tape->record(Tensor<Real>::scalar(s), {x}, [x](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (auto& v : gx.data()) v += g.item();
  });
}

template <class Real>
Var<Real> mean(Var<Real> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / double(n));
}

template <class Real>
Var<Real> row_norm(Var<Real> x) {
  const auto& d = x.dims();
  expect(!d.empty() && d[0] > 0, "row_norm: expects [N, ...]");
  const std::size_t n = d[0], row = x.value().size() / n;
  Tensor<Real> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* r = x.value().ptr() + i * row;
    out[i] = std::sqrt(kernels::dot(r, r, row));
  }
  auto norms = std::make_shared<Tensor<Real>>(out);
  return x.tape->record(std::move(out), {x}, [x, norms, n, row](const Tensor<Real>& g) {
    auto& gx = gbuf(x);
    for (std::size_t i = 0; i < n; ++i) {
      const Real nr = (*norms)[i];
      if (nr == Real(0)) continue;
      const Real* r = x.value().ptr() + i * row;
      for (std::size_t j = 0; j < row; ++j) gx[i * row + j] += g[i] * r[j] / nr;
    }
  });
}

#define MMR_INSTANTIATE_OPS(R)                                                                                    \
  template Var<R> matmul(Var<R>, Var<R>);                                                                         \
  template Var<R> linear(Var<R>, Var<R>, std::optional<Var<R>>);                                                  \
  template Var<R> add(Var<R>, Var<R>);                                                                            \
  template Var<R> sub(Var<R>, Var<R>);                                                                            \
  template Var<R> mul(Var<R>, Var<R>);                                                                            \
  template Var<R> add_trailing(Var<R>, Var<R>);                                                                   \
  template Var<R> scale(Var<R>, double);                                                                          \
  template Var<R> div_scalar(Var<R>, Var<R>);                                                                     \
  template Var<R> gelu(Var<R>);                                                                                   \
  template Var<R> layer_norm(Var<R>, Var<R>, Var<R>, double);                                                     \
  template Var<R> softmax(Var<R>, std::size_t);                                                                   \
  template Var<R> masked_softmax(Var<R>, const Lengths&);                                                         \
  template Var<R> attention(Var<R>, Var<R>, Var<R>, std::size_t, const Lengths&);                                 \
  template Var<R> swap_axes12(Var<R>);                                                                            \
  template Var<R> transpose(Var<R>);                                                                              \
  template Var<R> reshape(Var<R>, Shape);                                                                         \
  template Var<R> avg_pool_time(Var<R>, std::size_t);                                                             \
  template Var<R> adaptive_avg_pool(Var<R>, std::size_t);                                                         \
  template Var<R> conv1d(Var<R>, Var<R>, Var<R>, std::size_t);                                                    \
  template Var<R> l2_normalize(Var<R>, double);                                                                   \
  template Var<R> concat(const std::vector<Var<R>>&, std::size_t);                                                \
  template Var<R> slice(Var<R>, std::size_t, std::size_t, std::size_t);                                           \
  template Var<R> index_select0(Var<R>, const std::vector<std::size_t>&);                                         \
  template Var<R> resize_axis(Var<R>, std::size_t, std::size_t);                                                  \
  template Var<R> replace_rows(Var<R>, Var<R>, const std::vector<std::uint8_t>&);                                 \
  template Var<R> masked_mean(Var<R>, const Lengths&);                                                            \
  template Var<R> similarity_matrix(Var<R>, const Lengths&, Var<R>, Var<R>, const Lengths&, Var<R>, Aggregation); \
  template Var<R> diagonal_nll(Var<R>);                                                                           \
  template Var<R> sum(Var<R>);                                                                                    \
  template Var<R> mean(Var<R>);                                                                                   \
  template Var<R> row_norm(Var<R>);

MMR_INSTANTIATE_OPS(float)
MMR_INSTANTIATE_OPS(double)

}  // namespace ad
}  // namespace mmr
