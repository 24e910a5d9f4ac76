#pragma once

// Dense kernels. Each parallel kernel has a serial twin in `kernels::serial`
// that is kept as the reference for tests and the benchmark.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace mmr {

enum class Aggregation { Max, Mean };

namespace kernels {

// Work below this many multiply-adds runs on the calling thread.
inline constexpr std::size_t kParallelGrain = 1 << 15;

template <class Real>
inline Real dot(const Real* a, const Real* b, std::size_t n) {
  Real s = 0;
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// c[M,N] += a[M,K] * b[K,N]
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const bool big = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = a[i * k + p];
      if (aip == Real(0)) continue;
      const Real* brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

/// c[M,N] += a[M,K] * b[N,K]^T
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const bool big = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
  }
}

/// c[M,N] += a[K,M]^T * b[K,N]
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  const bool big = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real api = a[p * m + i];
      if (api == Real(0)) continue;
      const Real* brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

/// Late-interaction similarity of two token sequences (rows of length `c`).
/// `scratch` must hold at least lx*ly + lx + ly values.
template <class Real>
Real pair_score(const Real* x, std::size_t lx, const Real* wx, const Real* y, std::size_t ly, const Real* wy,
                std::size_t c, Aggregation agg, Real* scratch) {
  Real* d = scratch;
  for (std::size_t a = 0; a < lx; ++a) {
    for (std::size_t b = 0; b < ly; ++b) d[a * ly + b] = dot(x + a * c, y + b * c, c);
  }
  Real fwd = 0;
  Real bwd = 0;
  if (agg == Aggregation::Max) {
    Real* colmax = scratch + lx * ly;
    std::fill(colmax, colmax + ly, -std::numeric_limits<Real>::infinity());
    for (std::size_t a = 0; a < lx; ++a) {
      Real rmax = -std::numeric_limits<Real>::infinity();
      for (std::size_t b = 0; b < ly; ++b) {
        const Real v = d[a * ly + b];
        rmax = std::max(rmax, v);
        colmax[b] = std::max(colmax[b], v);
      }
      fwd += wx[a] * rmax;
    }
    for (std::size_t b = 0; b < ly; ++b) bwd += wy[b] * colmax[b];
  } else {
    Real* colsum = scratch + lx * ly;
    std::fill(colsum, colsum + ly, Real(0));
    for (std::size_t a = 0; a < lx; ++a) {
      Real rsum = 0;
      for (std::size_t b = 0; b < ly; ++b) {
        rsum += d[a * ly + b];
        colsum[b] += d[a * ly + b];
      }
      fwd += wx[a] * (rsum / Real(ly));
    }
    for (std::size_t b = 0; b < ly; ++b) bwd += wy[b] * (colsum[b] / Real(lx));
  }
  return Real(0.5) * fwd + Real(0.5) * bwd;
}

/// A packed batch of variable-length sequences: sequence i occupies tokens
/// [offset[i], offset[i] + length[i]) in `tokens` (row stride `c`).
template <class Real>
struct PackedView {
  const Real* tokens = nullptr;
  const Real* weights = nullptr;  // one weight per token
  const std::size_t* offsets = nullptr;
  const std::size_t* lengths = nullptr;
  std::size_t count = 0;
  std::size_t c = 0;

  std::size_t max_length() const {
    std::size_t m = 0;
    for (std::size_t i = 0; i < count; ++i) m = std::max(m, lengths[i]);
    return m;
  }
};

/// out[i * ys.count + j] = pair_score(xs[i], ys[j]); parallel over blocks of rows
/// of the output, `block` y-sequences at a time.
template <class Real>
void score_matrix(const PackedView<Real>& xs, const PackedView<Real>& ys, Aggregation agg, Real* out,
                  std::size_t block = 256) {
  const std::size_t lx = xs.max_length();
  const std::size_t ly = ys.max_length();
  const std::size_t scratch_len = lx * ly + lx + ly;
  const std::size_t nb = (ys.count + block - 1) / block;
  const std::size_t tasks = xs.count * nb;
  const bool big = tasks > 1 && xs.count * ys.count * lx * ly * xs.c >= kParallelGrain;
#pragma omp parallel if (big)
  {
    std::vector<Real> scratch(scratch_len);
#pragma omp for schedule(dynamic, 1)
    for (std::size_t t = 0; t < tasks; ++t) {
      const std::size_t i = t / nb;
      const std::size_t j0 = (t % nb) * block;
      const std::size_t j1 = std::min(ys.count, j0 + block);
      const Real* x = xs.tokens + xs.offsets[i] * xs.c;
      const Real* wx = xs.weights + xs.offsets[i];
      for (std::size_t j = j0; j < j1; ++j) {
        out[i * ys.count + j] = pair_score(x, xs.lengths[i], wx, ys.tokens + ys.offsets[j] * ys.c, ys.lengths[j],
                                           ys.weights + ys.offsets[j], xs.c, agg, scratch.data());
      }
    }
  }
}

namespace serial {

template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] += s;
    }
}

/// Straight double loop over token pairs; no SIMD, no threads.
template <class Real>
Real pair_score(const Real* x, std::size_t lx, const Real* wx, const Real* y, std::size_t ly, const Real* wy,
                std::size_t c, Aggregation agg) {
  auto ip = [&](std::size_t a, std::size_t b) {
    Real s = 0;
    for (std::size_t q = 0; q < c; ++q) s += x[a * c + q] * y[b * c + q];
    return s;
  };
  Real fwd = 0;
  for (std::size_t a = 0; a < lx; ++a) {
    Real acc = agg == Aggregation::Max ? -std::numeric_limits<Real>::infinity() : Real(0);
    for (std::size_t b = 0; b < ly; ++b) acc = agg == Aggregation::Max ? std::max(acc, ip(a, b)) : acc + ip(a, b);
    fwd += wx[a] * (agg == Aggregation::Max ? acc : acc / Real(ly));
  }
  Real bwd = 0;
  for (std::size_t b = 0; b < ly; ++b) {
    Real acc = agg == Aggregation::Max ? -std::numeric_limits<Real>::infinity() : Real(0);
    for (std::size_t a = 0; a < lx; ++a) acc = agg == Aggregation::Max ? std::max(acc, ip(a, b)) : acc + ip(a, b);
    bwd += wy[b] * (agg == Aggregation::Max ? acc : acc / Real(lx));
  }
  return Real(0.5) * fwd + Real(0.5) * bwd;
}

template <class Real>
void score_matrix(const PackedView<Real>& xs, const PackedView<Real>& ys, Aggregation agg, Real* out) {
  for (std::size_t i = 0; i < xs.count; ++i)
    for (std::size_t j = 0; j < ys.count; ++j)
      out[i * ys.count + j] =
          pair_score(xs.tokens + xs.offsets[i] * xs.c, xs.lengths[i], xs.weights + xs.offsets[i],
                     ys.tokens + ys.offsets[j] * ys.c, ys.lengths[j], ys.weights + ys.offsets[j], xs.c, agg);
}

}  // namespace serial
}  // namespace kernels
}  // namespace mmr
