#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qrobust/tensor.hpp"

namespace qrobust {

enum class Padding { Valid, Same };

struct ConvAttrs {
  int stride_h = 1, stride_w = 1;
  Padding padding = Padding::Valid;
};

struct PoolAttrs {
  int pool_h = 2, pool_w = 2;
  int stride_h = 2, stride_w = 2;
  Padding padding = Padding::Valid;
};

struct BatchNormAttrs {
  double epsilon = 1e-3;
  double momentum = 0.99;  // running = momentum*running + (1-momentum)*batch
};

// Output extent and leading pad for one spatial axis.
// Same padding: out = ceil(in/stride), zero-padded symmetrically (extra pad
// goes to the trailing edge, TF convention).
inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, Padding pad) {
  if (pad == Padding::Same) return (in + stride - 1) / stride;
  return (in - k) / stride + 1;
}
inline int64_t conv_pad_before(int64_t in, int64_t k, int64_t stride, Padding pad) {
  if (pad == Padding::Valid) return 0;
  int64_t out = conv_out_extent(in, k, stride, pad);
  int64_t total = std::max<int64_t>((out - 1) * stride + k - in, 0);
  return total / 2;
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_rank(const char* op, const char* arg, int rank, int want) {
  if (rank != want)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " +
                     std::to_string(want) + ", got " + std::to_string(rank));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense (matmul + bias)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  detail::require_rank("dense", "input", x.rank(), 2);
  detail::require_rank("dense", "weight", w.rank(), 2);
  detail::require(x.dim(1) == w.dim(0),
                  "dense: input features " + std::to_string(x.dim(1)) +
                      " != weight rows " + std::to_string(w.dim(0)));
  const int64_t n = x.dim(0), d = x.dim(1), u = w.dim(1);
  if (b) detail::require(b->size() == u, "dense: bias length " + std::to_string(b->size()) +
                                             " != units " + std::to_string(u));
  Tensor<T> y({n, u});
  as_matrix(y, n, u).noalias() = as_matrix(x, n, d) * as_matrix(w, d, u);
  if (b)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < u; ++j) y.at2(i, j) += b->data[static_cast<size_t>(j)];
  return y;
}

template <typename T>
void dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g,
                    Tensor<T>& dx, Tensor<T>& dw, Tensor<T>* db) {
  const int64_t n = x.dim(0), d = x.dim(1), u = w.dim(1);
  dx = Tensor<T>({n, d});
  dw = Tensor<T>({d, u});
  as_matrix(dx, n, d).noalias() = as_matrix(g, n, u) * as_matrix(w, d, u).transpose();
  as_matrix(dw, d, u).noalias() = as_matrix(x, n, d).transpose() * as_matrix(g, n, u);
  if (db) {
    *db = Tensor<T>({u});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < u; ++j) db->data[static_cast<size_t>(j)] += g.at2(i, j);
  }
}

// ---------------------------------------------------------------------------
// Conv2d, NHWC input, kernel [kh, kw, Cin, F]. im2col + one matmul.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, int64_t kh, int64_t kw, const ConvAttrs& a) {
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t ho = conv_out_extent(h, kh, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(w, kw, a.stride_w, a.padding);
  const int64_t ph = conv_pad_before(h, kh, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, kw, a.stride_w, a.padding);
  Tensor<T> cols({n * ho * wo, kh * kw * c});
  int64_t row = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj, ++row) {
        T* dst = &cols.data[static_cast<size_t>(row * kh * kw * c)];
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t ii = oi * a.stride_h - ph + ki;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t jj = oj * a.stride_w - pw + kj;
            T* cell = dst + (ki * kw + kj) * c;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) {
              std::fill(cell, cell + c, T(0));
            } else {
              const T* src = &x.data[static_cast<size_t>(((ni * h + ii) * w + jj) * c)];
              std::copy(src, src + c, cell);
            }
          }
        }
      }
  return cols;
}

template <typename T>
void col2im_add(const Tensor<T>& cols, Tensor<T>& dx, int64_t kh, int64_t kw,
                const ConvAttrs& a) {
  const int64_t n = dx.dim(0), h = dx.dim(1), w = dx.dim(2), c = dx.dim(3);
  const int64_t ho = conv_out_extent(h, kh, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(w, kw, a.stride_w, a.padding);
  const int64_t ph = conv_pad_before(h, kh, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, kw, a.stride_w, a.padding);
  int64_t row = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj, ++row) {
        const T* src = &cols.data[static_cast<size_t>(row * kh * kw * c)];
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t ii = oi * a.stride_h - ph + ki;
          if (ii < 0 || ii >= h) continue;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t jj = oj * a.stride_w - pw + kj;
            if (jj < 0 || jj >= w) continue;
            T* dst = &dx.data[static_cast<size_t>(((ni * h + ii) * w + jj) * c)];
            const T* cell = src + (ki * kw + kj) * c;
            for (int64_t ci = 0; ci < c; ++ci) dst[ci] += cell[ci];
          }
        }
      }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b,
                         const ConvAttrs& a) {
  detail::require_rank("conv2d", "input", x.rank(), 4);
  detail::require_rank("conv2d", "kernel", k.rank(), 4);
  detail::require(x.dim(3) == k.dim(2),
                  "conv2d: input channels " + std::to_string(x.dim(3)) +
                      " != kernel channels " + std::to_string(k.dim(2)));
  const int64_t n = x.dim(0), kh = k.dim(0), kw = k.dim(1), c = k.dim(2), f = k.dim(3);
  if (a.padding == Padding::Valid)
    detail::require(x.dim(1) >= kh && x.dim(2) >= kw,
                    "conv2d: input " + shape_str(x.shape) + " smaller than kernel " +
                        shape_str(k.shape) + " with valid padding");
  if (b) detail::require(b->size() == f, "conv2d: bias length != filters");
  const int64_t ho = conv_out_extent(x.dim(1), kh, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(x.dim(2), kw, a.stride_w, a.padding);
  Tensor<T> cols = im2col(x, kh, kw, a);
  Tensor<T> y({n, ho, wo, f});
  as_matrix(y, n * ho * wo, f).noalias() =
      as_matrix(cols, n * ho * wo, kh * kw * c) * as_matrix(k, kh * kw * c, f);
  if (b)
    for (int64_t r = 0; r < n * ho * wo; ++r)
      for (int64_t j = 0; j < f; ++j)
        y.data[static_cast<size_t>(r * f + j)] += b->data[static_cast<size_t>(j)];
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g,
                     const ConvAttrs& a, Tensor<T>& dx, Tensor<T>& dk, Tensor<T>* db) {
  const int64_t n = x.dim(0), kh = k.dim(0), kw = k.dim(1), c = k.dim(2), f = k.dim(3);
  const int64_t rows = g.size() / f;
  Tensor<T> cols = im2col(x, kh, kw, a);
  dk = Tensor<T>({kh, kw, c, f});
  as_matrix(dk, kh * kw * c, f).noalias() =
      as_matrix(cols, rows, kh * kw * c).transpose() * as_matrix(g, rows, f);
  Tensor<T> dcols({rows, kh * kw * c});
  as_matrix(dcols, rows, kh * kw * c).noalias() =
      as_matrix(g, rows, f) * as_matrix(k, kh * kw * c, f).transpose();
  dx = Tensor<T>(x.shape);
  col2im_add(dcols, dx, kh, kw, a);
  if (db) {
    *db = Tensor<T>({f});
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < f; ++j)
        db->data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * f + j)];
  }
  (void)n;
}

// ---------------------------------------------------------------------------
// Depthwise conv2d, kernel [kh, kw, C] (channel multiplier 1).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b,
                            const ConvAttrs& a) {
  detail::require_rank("depthwise_conv2d", "input", x.rank(), 4);
  detail::require_rank("depthwise_conv2d", "kernel", k.rank(), 3);
  detail::require(x.dim(3) == k.dim(2),
                  "depthwise_conv2d: input channels " + std::to_string(x.dim(3)) +
                      " != kernel channels " + std::to_string(k.dim(2)));
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t kh = k.dim(0), kw = k.dim(1);
  if (b) detail::require(b->size() == c, "depthwise_conv2d: bias length != channels");
  const int64_t ho = conv_out_extent(h, kh, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(w, kw, a.stride_w, a.padding);
  const int64_t ph = conv_pad_before(h, kh, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, kw, a.stride_w, a.padding);
  Tensor<T> y({n, ho, wo, c});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj)
        for (int64_t ci = 0; ci < c; ++ci) {
          T acc = b ? b->data[static_cast<size_t>(ci)] : T(0);
          for (int64_t ki = 0; ki < kh; ++ki) {
            const int64_t ii = oi * a.stride_h - ph + ki;
            if (ii < 0 || ii >= h) continue;
            for (int64_t kj = 0; kj < kw; ++kj) {
              const int64_t jj = oj * a.stride_w - pw + kj;
              if (jj < 0 || jj >= w) continue;
              acc += x.at4(ni, ii, jj, ci) *
                     k.data[static_cast<size_t>((ki * kw + kj) * c + ci)];
            }
          }
          y.at4(ni, oi, oj, ci) = acc;
        }
  return y;
}

template <typename T>
void depthwise_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g,
                        const ConvAttrs& a, Tensor<T>& dx, Tensor<T>& dk, Tensor<T>* db) {
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t kh = k.dim(0), kw = k.dim(1);
  const int64_t ho = g.dim(1), wo = g.dim(2);
  const int64_t ph = conv_pad_before(h, kh, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, kw, a.stride_w, a.padding);
  dx = Tensor<T>(x.shape);
  dk = Tensor<T>(k.shape);
  if (db) *db = Tensor<T>({c});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj)
        for (int64_t ci = 0; ci < c; ++ci) {
          const T go = g.at4(ni, oi, oj, ci);
          if (db) db->data[static_cast<size_t>(ci)] += go;
          for (int64_t ki = 0; ki < kh; ++ki) {
            const int64_t ii = oi * a.stride_h - ph + ki;
            if (ii < 0 || ii >= h) continue;
            for (int64_t kj = 0; kj < kw; ++kj) {
              const int64_t jj = oj * a.stride_w - pw + kj;
              if (jj < 0 || jj >= w) continue;
              dx.at4(ni, ii, jj, ci) += go * k.data[static_cast<size_t>((ki * kw + kj) * c + ci)];
              dk.data[static_cast<size_t>((ki * kw + kj) * c + ci)] += go * x.at4(ni, ii, jj, ci);
            }
          }
        }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

// Subgradient 0 at exactly 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& g) {
  Tensor<T> dx = g;
  for (int64_t i = 0; i < x.size(); ++i)
    if (!(x[i] > T(0))) dx[i] = T(0);
  return dx;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) {
    // Branch on sign to avoid overflow in exp.
    if (v >= T(0)) {
      T e = std::exp(-v);
      v = T(1) / (T(1) + e);
    } else {
      T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& g) {
  Tensor<T> dx = g;
  for (int64_t i = 0; i < y.size(); ++i) dx[i] *= y[i] * (T(1) - y[i]);
  return dx;
}

// Softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x) {
  detail::require(x.rank() >= 1, "softmax: rank must be >= 1");
  const int64_t k = x.dim(x.rank() - 1);
  const int64_t rows = x.size() / k;
  Tensor<T> y = x;
  for (int64_t r = 0; r < rows; ++r) {
    T* p = &y.data[static_cast<size_t>(r * k)];
    T mx = p[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[j]);
    T sum = T(0);
    for (int64_t j = 0; j < k; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    for (int64_t j = 0; j < k; ++j) p[j] /= sum;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& g) {
  const int64_t k = y.dim(y.rank() - 1);
  const int64_t rows = y.size() / k;
  Tensor<T> dx = y;
  for (int64_t r = 0; r < rows; ++r) {
    const T* s = &y.data[static_cast<size_t>(r * k)];
    const T* gg = &g.data[static_cast<size_t>(r * k)];
    T dot = T(0);
    for (int64_t j = 0; j < k; ++j) dot += gg[j] * s[j];
    T* d = &dx.data[static_cast<size_t>(r * k)];
    for (int64_t j = 0; j < k; ++j) d[j] = s[j] * (gg[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Batchnorm over the last axis (per feature/channel).
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormCtx {
  Tensor<T> xhat;     // normalized input
  Tensor<T> inv_std;  // per-channel 1/sqrt(var+eps) actually used
  Tensor<T> centered; // x - mean (train mode only)
  int64_t m = 0;      // reduction count per channel
};

// Train mode: normalize with batch statistics and update running stats in
// place (population variance, Keras convention).
template <typename T>
Tensor<T> batchnorm_train_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, Tensor<T>& run_mean,
                                  Tensor<T>& run_var, const BatchNormAttrs& a,
                                  BatchNormCtx<T>& ctx) {
  const int64_t c = x.dim(x.rank() - 1);
  detail::require(gamma.size() == c && beta.size() == c && run_mean.size() == c &&
                      run_var.size() == c,
                  "batchnorm: parameter length != channels " + std::to_string(c));
  const int64_t m = x.size() / c;
  detail::require(m >= 1, "batchnorm: empty reduction");
  std::vector<T> mean(static_cast<size_t>(c), T(0)), var(static_cast<size_t>(c), T(0));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) mean[static_cast<size_t>(j)] += x[i * c + j];
  for (auto& v : mean) v /= static_cast<T>(m);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      T d = x[i * c + j] - mean[static_cast<size_t>(j)];
      var[static_cast<size_t>(j)] += d * d;
    }
  for (auto& v : var) v /= static_cast<T>(m);

  ctx.xhat = Tensor<T>(x.shape);
  ctx.centered = Tensor<T>(x.shape);
  ctx.inv_std = Tensor<T>({c});
  ctx.m = m;
  for (int64_t j = 0; j < c; ++j)
    ctx.inv_std[j] = T(1) / std::sqrt(var[static_cast<size_t>(j)] + static_cast<T>(a.epsilon));
  Tensor<T> y(x.shape);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      T cen = x[i * c + j] - mean[static_cast<size_t>(j)];
      T xh = cen * ctx.inv_std[j];
      ctx.centered[i * c + j] = cen;
      ctx.xhat[i * c + j] = xh;
      y[i * c + j] = gamma[j] * xh + beta[j];
    }
  const T mom = static_cast<T>(a.momentum);
  for (int64_t j = 0; j < c; ++j) {
    run_mean[j] = mom * run_mean[j] + (T(1) - mom) * mean[static_cast<size_t>(j)];
    run_var[j] = mom * run_var[j] + (T(1) - mom) * var[static_cast<size_t>(j)];
  }
  return y;
}

// Inference mode: deterministic affine map from frozen statistics.
template <typename T>
Tensor<T> batchnorm_infer_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, const Tensor<T>& run_mean,
                                  const Tensor<T>& run_var, const BatchNormAttrs& a,
                                  BatchNormCtx<T>& ctx) {
  const int64_t c = x.dim(x.rank() - 1);
  detail::require(gamma.size() == c && beta.size() == c && run_mean.size() == c &&
                      run_var.size() == c,
                  "batchnorm: parameter length != channels " + std::to_string(c));
  const int64_t m = x.size() / c;
  ctx.inv_std = Tensor<T>({c});
  ctx.m = m;
  for (int64_t j = 0; j < c; ++j)
    ctx.inv_std[j] = T(1) / std::sqrt(run_var[j] + static_cast<T>(a.epsilon));
  ctx.xhat = Tensor<T>(x.shape);
  Tensor<T> y(x.shape);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      T xh = (x[i * c + j] - run_mean[j]) * ctx.inv_std[j];
      ctx.xhat[i * c + j] = xh;
      y[i * c + j] = gamma[j] * xh + beta[j];
    }
  return y;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& gamma, const Tensor<T>& g, bool train_mode,
                        const BatchNormCtx<T>& ctx, Tensor<T>& dx, Tensor<T>& dgamma,
                        Tensor<T>& dbeta) {
  const int64_t c = gamma.size();
  const int64_t m = ctx.m;
  dgamma = Tensor<T>({c});
  dbeta = Tensor<T>({c});
  dx = Tensor<T>(ctx.xhat.shape);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      dgamma[j] += g[i * c + j] * ctx.xhat[i * c + j];
      dbeta[j] += g[i * c + j];
    }
  if (!train_mode) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < c; ++j) dx[i * c + j] = g[i * c + j] * gamma[j] * ctx.inv_std[j];
    return;
  }
  // Full train-mode backward through the batch statistics.
  std::vector<T> sum_dxhat(static_cast<size_t>(c), T(0)),
      sum_dxhat_xhat(static_cast<size_t>(c), T(0));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      T dxhat = g[i * c + j] * gamma[j];
      sum_dxhat[static_cast<size_t>(j)] += dxhat;
      sum_dxhat_xhat[static_cast<size_t>(j)] += dxhat * ctx.xhat[i * c + j];
    }
  const T inv_m = T(1) / static_cast<T>(m);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < c; ++j) {
      T dxhat = g[i * c + j] * gamma[j];
      dx[i * c + j] = ctx.inv_std[j] * (dxhat - inv_m * sum_dxhat[static_cast<size_t>(j)] -
                                        ctx.xhat[i * c + j] * inv_m *
                                            sum_dxhat_xhat[static_cast<size_t>(j)]);
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& x, const PoolAttrs& a,
                          std::vector<int64_t>& argmax) {
  detail::require_rank("max_pool", "input", x.rank(), 4);
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t ho = conv_out_extent(h, a.pool_h, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(w, a.pool_w, a.stride_w, a.padding);
  const int64_t ph = conv_pad_before(h, a.pool_h, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, a.pool_w, a.stride_w, a.padding);
  Tensor<T> y({n, ho, wo, c});
  argmax.assign(static_cast<size_t>(y.size()), -1);
  int64_t out = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj)
        for (int64_t ci = 0; ci < c; ++ci, ++out) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_idx = -1;
          for (int64_t ki = 0; ki < a.pool_h; ++ki) {
            const int64_t ii = oi * a.stride_h - ph + ki;
            if (ii < 0 || ii >= h) continue;
            for (int64_t kj = 0; kj < a.pool_w; ++kj) {
              const int64_t jj = oj * a.stride_w - pw + kj;
              if (jj < 0 || jj >= w) continue;
              const int64_t idx = ((ni * h + ii) * w + jj) * c + ci;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          detail::require(best_idx >= 0, "max_pool: empty window");
          y[out] = best;
          argmax[static_cast<size_t>(out)] = best_idx;
        }
  return y;
}

template <typename T>
Tensor<T> maxpool_backward(const Shape& x_shape, const Tensor<T>& g,
                           const std::vector<int64_t>& argmax) {
  Tensor<T> dx(x_shape);
  for (int64_t i = 0; i < g.size(); ++i) dx[argmax[static_cast<size_t>(i)]] += g[i];
  return dx;
}

// Average pool divides by the fixed window area; padded cells count as zeros.
template <typename T>
Tensor<T> avgpool_forward(const Tensor<T>& x, const PoolAttrs& a) {
  detail::require_rank("avg_pool", "input", x.rank(), 4);
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t ho = conv_out_extent(h, a.pool_h, a.stride_h, a.padding);
  const int64_t wo = conv_out_extent(w, a.pool_w, a.stride_w, a.padding);
  const int64_t ph = conv_pad_before(h, a.pool_h, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, a.pool_w, a.stride_w, a.padding);
  const T inv_area = T(1) / static_cast<T>(a.pool_h * a.pool_w);
  Tensor<T> y({n, ho, wo, c});
  int64_t out = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj)
        for (int64_t ci = 0; ci < c; ++ci, ++out) {
          T acc = T(0);
          for (int64_t ki = 0; ki < a.pool_h; ++ki) {
            const int64_t ii = oi * a.stride_h - ph + ki;
            if (ii < 0 || ii >= h) continue;
            for (int64_t kj = 0; kj < a.pool_w; ++kj) {
              const int64_t jj = oj * a.stride_w - pw + kj;
              if (jj < 0 || jj >= w) continue;
              acc += x[((ni * h + ii) * w + jj) * c + ci];
            }
          }
          y[out] = acc * inv_area;
        }
  return y;
}

template <typename T>
Tensor<T> avgpool_backward(const Shape& x_shape, const Tensor<T>& g, const PoolAttrs& a) {
  const int64_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3];
  const int64_t ho = g.dim(1), wo = g.dim(2);
  const int64_t ph = conv_pad_before(h, a.pool_h, a.stride_h, a.padding);
  const int64_t pw = conv_pad_before(w, a.pool_w, a.stride_w, a.padding);
  const T inv_area = T(1) / static_cast<T>(a.pool_h * a.pool_w);
  Tensor<T> dx(x_shape);
  int64_t out = 0;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oi = 0; oi < ho; ++oi)
      for (int64_t oj = 0; oj < wo; ++oj)
        for (int64_t ci = 0; ci < c; ++ci, ++out) {
          const T go = g[out] * inv_area;
          for (int64_t ki = 0; ki < a.pool_h; ++ki) {
            const int64_t ii = oi * a.stride_h - ph + ki;
            if (ii < 0 || ii >= h) continue;
            for (int64_t kj = 0; kj < a.pool_w; ++kj) {
              const int64_t jj = oj * a.stride_w - pw + kj;
              if (jj < 0 || jj >= w) continue;
              dx[((ni * h + ii) * w + jj) * c + ci] += go;
            }
          }
        }
  return dx;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean categorical cross-entropy from pre-softmax logits, fused with
// log-sum-exp for stability. labels are one-hot rows.
template <typename T>
T cce_from_logits_forward(const Tensor<T>& z, const Tensor<T>& y) {
  detail::require(z.same_shape(y), "cce: logits " + shape_str(z.shape) +
                                       " != labels " + shape_str(y.shape));
  detail::require_rank("cce", "logits", z.rank(), 2);
  const int64_t n = z.dim(0), k = z.dim(1);
  T total = T(0);
  for (int64_t r = 0; r < n; ++r) {
    const T* p = &z.data[static_cast<size_t>(r * k)];
    T mx = p[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[j]);
    T lse = T(0);
    for (int64_t j = 0; j < k; ++j) lse += std::exp(p[j] - mx);
    lse = std::log(lse) + mx;
    for (int64_t j = 0; j < k; ++j) total += y.at2(r, j) * (lse - p[j]);
  }
  return total / static_cast<T>(n);
}

template <typename T>
Tensor<T> cce_from_logits_backward(const Tensor<T>& z, const Tensor<T>& y, T g) {
  const int64_t n = z.dim(0);
  Tensor<T> dz = softmax_forward(z);
  for (int64_t i = 0; i < dz.size(); ++i)
    dz[i] = (dz[i] - y[i]) * g / static_cast<T>(n);
  return dz;
}

}  // namespace qrobust
