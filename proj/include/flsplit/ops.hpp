// Copyright 2026 The flsplit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#if defined(__SSE2__)
#include <emmintrin.h>
#endif

#include "flsplit/mask.hpp"
#include "flsplit/tensor.hpp"

namespace flsplit {

using TokenId = std::int32_t;
inline constexpr TokenId kIgnoreIndex = -100;

inline std::vector<std::size_t> iota_positions(std::size_t start, std::size_t count) {
  std::vector<std::size_t> p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = start + i;
  return p;
}

namespace detail {

// Four independent accumulators; the summation order depends only on n, so
// a row's result never depends on how many other rows share the call.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

#if defined(__SSE2__)
// Four dot products against one x row; every lane does exactly what dot() does.
inline void dot4(const double* x, const double* w0, const double* w1, const double* w2, const double* w3,
                 std::size_t k, double* out) {
  __m128d a0 = _mm_setzero_pd(), b0 = a0, a1 = a0, b1 = a0, a2 = a0, b2 = a0, a3 = a0, b3 = a0;
  std::size_t i = 0;
  for (; i + 4 <= k; i += 4) {
    const __m128d xl = _mm_loadu_pd(x + i), xh = _mm_loadu_pd(x + i + 2);
    a0 = _mm_add_pd(a0, _mm_mul_pd(xl, _mm_loadu_pd(w0 + i)));
    b0 = _mm_add_pd(b0, _mm_mul_pd(xh, _mm_loadu_pd(w0 + i + 2)));
    a1 = _mm_add_pd(a1, _mm_mul_pd(xl, _mm_loadu_pd(w1 + i)));
    b1 = _mm_add_pd(b1, _mm_mul_pd(xh, _mm_loadu_pd(w1 + i + 2)));
    a2 = _mm_add_pd(a2, _mm_mul_pd(xl, _mm_loadu_pd(w2 + i)));
    b2 = _mm_add_pd(b2, _mm_mul_pd(xh, _mm_loadu_pd(w2 + i + 2)));
    a3 = _mm_add_pd(a3, _mm_mul_pd(xl, _mm_loadu_pd(w3 + i)));
    b3 = _mm_add_pd(b3, _mm_mul_pd(xh, _mm_loadu_pd(w3 + i + 2)));
  }
  const double* ws[4] = {w0, w1, w2, w3};
  __m128d as[4] = {a0, a1, a2, a3}, bs[4] = {b0, b1, b2, b3};
  for (int c = 0; c < 4; ++c) {
    double lo[2], hi[2];
    _mm_storeu_pd(lo, as[c]);
    _mm_storeu_pd(hi, bs[c]);
    double s0 = lo[0];
    for (std::size_t t = i; t < k; ++t) s0 += x[t] * ws[c][t];
    out[c] = (s0 + lo[1]) + (hi[0] + hi[1]);
  }
}
#endif

// y[m,n] (+)= x[m,k] * w[n,k]^T
inline void gemm_nt(const double* x, const double* w, double* y, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x + i * k;
    double* yr = y + i * n;
    std::size_t j = 0;
#if defined(__SSE2__)
    for (; j + 4 <= n; j += 4) {
      double v[4];
      dot4(xr, w + j * k, w + (j + 1) * k, w + (j + 2) * k, w + (j + 3) * k, k, v);
      for (int c = 0; c < 4; ++c) yr[j + c] = accumulate ? yr[j + c] + v[c] : v[c];
    }
#endif
    for (; j < n; ++j) {
      const double v = dot(xr, w + j * k, k);
      yr[j] = accumulate ? yr[j] + v : v;
    }
  }
}

// y[m,n] (+)= x[m,k] * w[k,n]
inline void gemm_nn(const double* x, const double* w, double* y, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = y + i * n;
    if (!accumulate) std::fill(yr, yr + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double a = x[i * k + p];
      if (a == 0.0) continue;
      const double* wr = w + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += a * wr[j];
    }
  }
}

// y[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn_acc(const double* a, const double* b, double* y, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = a[i * k + p];
      if (s == 0.0) continue;
      double* yr = y + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += s * br[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorCode::kDimension, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1), false);
  return c;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

// dA = dC * B^T, dB = A^T * dC
inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc) {
  if (dc.rank() != 2 || dc.dim(0) != a.dim(0) || dc.dim(1) != b.dim(1)) {
    throw Error(ErrorCode::kDimension, "matmul_backward upstream " + shape_str(dc.shape()));
  }
  MatmulGrads g{Tensor(a.shape()), Tensor(b.shape())};
  detail::gemm_nt(dc.data().data(), b.data().data(), g.da.data().data(), a.dim(0), b.dim(1), a.dim(1), false);
  detail::gemm_tn_acc(a.data().data(), dc.data().data(), g.db.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return g;
}

// ---------------------------------------------------------------------------
// linear: x[..., in] * W[out, in]^T

inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.cols() != w.dim(1)) {
    throw Error(ErrorCode::kDimension, "linear " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  }
  Shape shape = x.shape();
  shape.back() = w.dim(0);
  Tensor y(std::move(shape));
  detail::gemm_nt(x.data().data(), w.data().data(), y.data().data(), x.rows(), w.dim(1), w.dim(0), false);
  return y;
}

inline Tensor linear_backward_input(const Tensor& dy, const Tensor& w) {
  Shape shape = dy.shape();
  shape.back() = w.dim(1);
  Tensor dx(std::move(shape));
  detail::gemm_nn(dy.data().data(), w.data().data(), dx.data().data(), dy.rows(), w.dim(0), w.dim(1), false);
  return dx;
}

inline void linear_backward_weight_acc(const Tensor& dy, const Tensor& x, Tensor& dw) {
  detail::gemm_tn_acc(dy.data().data(), x.data().data(), dw.data().data(), dy.rows(), dy.cols(), x.cols());
}

// ---------------------------------------------------------------------------
// RMSNorm along the last dimension

inline Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  if (weight.rank() != 1 || x.cols() != weight.dim(0)) {
    throw Error(ErrorCode::kDimension, "rms_norm " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const std::size_t d = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = &x[r * d];
    const double inv = 1.0 / std::sqrt(detail::dot(xr, xr, d) / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = weight[j] * (xr[j] * inv);
  }
  return y;
}

struct RmsNormGrads {
  Tensor dx;
  Tensor dweight;
};

// With n = x * inv and inv = (mean(x^2) + eps)^-1/2:
//   dx = inv * (g - n * mean(g * n)),  g = dy * weight
inline RmsNormGrads rms_norm_backward(const Tensor& x, const Tensor& weight, double eps, const Tensor& dy) {
  require_same_shape(x, dy, "rms_norm_backward");
  const std::size_t d = x.cols();
  RmsNormGrads g{Tensor(x.shape()), Tensor(weight.shape())};
  std::vector<double> gn(d), n(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = &x[r * d];
    const double* dyr = &dy[r * d];
    const double inv = 1.0 / std::sqrt(detail::dot(xr, xr, d) / static_cast<double>(d) + eps);
    double proj = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      n[j] = xr[j] * inv;
      gn[j] = dyr[j] * weight[j];
      proj += gn[j] * n[j];
      g.dweight[j] += dyr[j] * n[j];
    }
    proj /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) g.dx[r * d + j] = inv * (gn[j] - n[j] * proj);
  }
  return g;
}

// ---------------------------------------------------------------------------
// SiLU

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

inline Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  require_same_shape(x, dy, "silu_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = sigmoid(x[i]);
    dx[i] = dy[i] * s * (1.0 + x[i] * (1.0 - s));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy

inline double log_sum_exp(std::span<const double> row) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : row) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> row) {
  const double lse = log_sum_exp(row);
  std::vector<double> p(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) p[i] = std::exp(row[i] - lse);
  return p;
}

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor grad;          // d loss / d logits
  std::size_t count = 0;  // non-ignored rows
};

// Mean negative log-likelihood over rows whose target is not ignore_index.
inline CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                                                TokenId ignore_index = kIgnoreIndex) {
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != rows) {
    throw Error(ErrorCode::kDimension, "targets length " + std::to_string(targets.size()) + " vs " +
                                           std::to_string(rows) + " logit rows");
  }
  CrossEntropyResult out{0.0, Tensor(logits.shape()), 0};
  for (std::size_t r = 0; r < rows; ++r) {
    const TokenId t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw Error(ErrorCode::kIdOutOfRange, "target id " + std::to_string(t));
    }
    ++out.count;
  }
  if (out.count == 0) throw Error(ErrorCode::kDegenerateBatch, "every target is ignore_index");
  const double inv_count = 1.0 / static_cast<double>(out.count);
  for (std::size_t r = 0; r < rows; ++r) {
    const TokenId t = targets[r];
    if (t == ignore_index) continue;
    std::span<const double> row(&logits[r * vocab], vocab);
    const double lse = log_sum_exp(row);
    out.loss += (lse - row[static_cast<std::size_t>(t)]) * inv_count;
    for (std::size_t j = 0; j < vocab; ++j) out.grad[r * vocab + j] = std::exp(row[j] - lse) * inv_count;
    out.grad[r * vocab + static_cast<std::size_t>(t)] -= inv_count;
  }
  return out;
}

// ---------------------------------------------------------------------------
// heads layout helpers: [b, s, h*dh] <-> [b, h, s, dh]

inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (d % heads != 0) throw Error(ErrorCode::kDimension, "hidden size not divisible by heads");
  const std::size_t dh = d / heads;
  Tensor y({b, heads, s, dh});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(&x[(bi * s + t) * d + h * dh], dh, &y[((bi * heads + h) * s + t) * dh]);
  return y;
}

inline Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), dh = x.dim(3);
  const std::size_t d = heads * dh;
  Tensor y({b, s, d});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < s; ++t)
        std::copy_n(&x[((bi * heads + h) * s + t) * dh], dh, &y[(bi * s + t) * d + h * dh]);
  return y;
}

// ---------------------------------------------------------------------------
// rotary position embedding (rotate-half pairing) on [b, h, s, dh]

inline void apply_rope(Tensor& x, std::span<const std::size_t> positions, double base, bool inverse = false) {
  const std::size_t b = x.dim(0), heads = x.dim(1), s = x.dim(2), dh = x.dim(3);
  if (positions.size() != s) throw Error(ErrorCode::kDimension, "positions length must equal sequence length");
  if (dh % 2 != 0) throw Error(ErrorCode::kDimension, "head dim must be even for rotary embedding");
  const std::size_t half = dh / 2;
  std::vector<double> cosv(s * half), sinv(s * half);
  for (std::size_t t = 0; t < s; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[t]) * freq;
      cosv[t * half + i] = std::cos(angle);
      sinv[t * half + i] = inverse ? -std::sin(angle) : std::sin(angle);
    }
  }
  for (std::size_t bh = 0; bh < b * heads; ++bh) {
    for (std::size_t t = 0; t < s; ++t) {
      double* row = &x[(bh * s + t) * dh];
      for (std::size_t i = 0; i < half; ++i) {
        const double x1 = row[i], x2 = row[i + half];
        const double c = cosv[t * half + i], sn = sinv[t * half + i];
        row[i] = x1 * c - x2 * sn;
        row[i + half] = x2 * c + x1 * sn;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// scaled dot-product attention over pre-rotated q, k

struct AttentionCore {
  Tensor out;    // [b, h, s, dh]
  Tensor probs;  // [b, h, s, T]; zero on blocked keys
};

inline void check_positions(std::span<const std::size_t> positions, std::size_t keys, std::size_t max_context) {
  for (std::size_t p : positions) {
    if (p >= max_context) {
      throw Error(ErrorCode::kContextOverflow,
                  "position " + std::to_string(p) + " >= max context " + std::to_string(max_context));
    }
    if (p >= keys) throw Error(ErrorCode::kDimension, "query position beyond available keys");
  }
}

// Query row i sits at absolute slot positions[i]; key j sits at slot j.
// A row whose keys are all blocked produces zero output.
inline AttentionCore attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const MaskMeta& meta,
                                    std::span<const std::size_t> positions) {
  if (q.rank() != 4 || k.rank() != 4 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1) ||
      q.dim(3) != k.dim(3)) {
    throw Error(ErrorCode::kDimension,
                "attention q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " + shape_str(v.shape()));
  }
  const std::size_t b = q.dim(0), heads = q.dim(1), s = q.dim(2), dh = q.dim(3), keys = k.dim(2);
  if (meta.batch != b || meta.seq_len != keys) {
    throw Error(ErrorCode::kDimension, "mask meta does not describe " + std::to_string(b) + "x" + std::to_string(keys));
  }
  meta.validate();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionCore r{Tensor(q.shape()), Tensor({b, heads, s, keys})};
  std::vector<double> scores(keys);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::size_t pad = meta.pad_len(bi);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t bh = bi * heads + h;
      for (std::size_t i = 0; i < s; ++i) {
        const std::size_t last = positions[i];
        if (last < pad) continue;  // fully blocked row
        const double* qi = &q[(bh * s + i) * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = pad; j <= last; ++j) {
          scores[j] = detail::dot(qi, &k[(bh * keys + j) * dh], dh) * scale;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (std::size_t j = pad; j <= last; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        double* pr = &r.probs[(bh * s + i) * keys];
        double* orow = &r.out[(bh * s + i) * dh];
        for (std::size_t j = pad; j <= last; ++j) {
          const double p = scores[j] / sum;
          pr[j] = p;
          const double* vj = &v[(bh * keys + j) * dh];
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vj[c];
        }
      }
    }
  }
  return r;
}

struct AttentionGrads {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};

inline AttentionGrads attention_core_backward(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& probs,
                                              const Tensor& dout) {
  const std::size_t b = q.dim(0), heads = q.dim(1), s = q.dim(2), dh = q.dim(3), keys = k.dim(2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape())};
  std::vector<double> dp(keys);
  for (std::size_t bh = 0; bh < b * heads; ++bh) {
    for (std::size_t i = 0; i < s; ++i) {
      const double* pr = &probs[(bh * s + i) * keys];
      const double* dor = &dout[(bh * s + i) * dh];
      double weighted = 0.0;
      for (std::size_t j = 0; j < keys; ++j) {
        if (pr[j] == 0.0) {
          dp[j] = 0.0;
          continue;
        }
        dp[j] = detail::dot(dor, &v[(bh * keys + j) * dh], dh);
        weighted += pr[j] * dp[j];
        double* dvj = &g.dv[(bh * keys + j) * dh];
        for (std::size_t c = 0; c < dh; ++c) dvj[c] += pr[j] * dor[c];
      }
      const double* qi = &q[(bh * s + i) * dh];
      double* dqi = &g.dq[(bh * s + i) * dh];
      for (std::size_t j = 0; j < keys; ++j) {
        if (pr[j] == 0.0) continue;
        const double ds = pr[j] * (dp[j] - weighted) * scale;
        const double* kj = &k[(bh * keys + j) * dh];
        double* dkj = &g.dk[(bh * keys + j) * dh];
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// causal attention with rotary embedding, all inputs [b, h, s, dh]

struct AttentionOptions {
  double rope_base = 10000.0;
  std::size_t max_context = 128;
};

struct CausalAttentionResult {
  Tensor out;
  Tensor q_rot;
  Tensor k_rot;
  Tensor v;
  Tensor probs;
  std::vector<std::size_t> positions;
  AttentionOptions options;
};

inline CausalAttentionResult causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MaskMeta& meta,
                                              std::span<const std::size_t> positions,
                                              const AttentionOptions& options = {}) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 4) {
    throw Error(ErrorCode::kDimension, "causal_attention expects equal [b,h,s,d] q/k/v");
  }
  check_positions(positions, k.dim(2), options.max_context);
  CausalAttentionResult r{Tensor(), q, k, v, Tensor(), {positions.begin(), positions.end()}, options};
  apply_rope(r.q_rot, positions, options.rope_base);
  apply_rope(r.k_rot, positions, options.rope_base);
  auto core = attention_core(r.q_rot, r.k_rot, v, meta, positions);
  r.out = std::move(core.out);
  r.probs = std::move(core.probs);
  return r;
}

// Gradients with respect to the unrotated q, k and v.
inline AttentionGrads causal_attention_backward(const CausalAttentionResult& fwd, const Tensor& dout) {
  auto g = attention_core_backward(fwd.q_rot, fwd.k_rot, fwd.v, fwd.probs, dout);
  apply_rope(g.dq, fwd.positions, fwd.options.rope_base, /*inverse=*/true);
  apply_rope(g.dk, fwd.positions, fwd.options.rope_base, /*inverse=*/true);
  return g;
}

}  // namespace flsplit
