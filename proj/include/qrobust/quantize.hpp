#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "qrobust/errors.hpp"
#include "qrobust/rng.hpp"
#include "qrobust/tensor.hpp"

namespace qrobust {

enum class QuantKind {
  Fp32,              // identity
  Uniform,           // fixed-point grid, bits/integer_bits/symmetric
  Binary,            // {-s, +s}, s = mean|x|
  StochasticBinary,  // binary with stochastic rounding
  Ternary,           // {-s, 0, +s}, TWN-style threshold
  StochasticTernary, // ternary with stochastic rounding
  QuantizedRelu,     // nonnegative grid
};

struct QuantizerSpec {
  QuantKind kind = QuantKind::Fp32;
  int bits = 8;
  int integer_bits = 0;
  bool symmetric = false;
  uint64_t seed = 0;  // stream seed for the stochastic kinds
};

inline bool is_stochastic(QuantKind k) {
  return k == QuantKind::StochasticBinary || k == QuantKind::StochasticTernary;
}

// Deterministic counterpart used on inference-mode reads.
inline QuantKind deterministic_kind(QuantKind k) {
  if (k == QuantKind::StochasticBinary) return QuantKind::Binary;
  if (k == QuantKind::StochasticTernary) return QuantKind::Ternary;
  return k;
}

inline const char* quant_kind_name(QuantKind k) {
  switch (k) {
    case QuantKind::Fp32: return "fp32";
    case QuantKind::Uniform: return "uniform";
    case QuantKind::Binary: return "binary";
    case QuantKind::StochasticBinary: return "stochastic_binary";
    case QuantKind::Ternary: return "ternary";
    case QuantKind::StochasticTernary: return "stochastic_ternary";
    case QuantKind::QuantizedRelu: return "quantized_relu";
  }
  return "?";
}

// Flash bits per parameter under each scheme (footprint accounting).
inline int bits_per_param(const QuantizerSpec& q) {
  switch (q.kind) {
    case QuantKind::Fp32: return 32;
    case QuantKind::Uniform: return q.bits;
    case QuantKind::QuantizedRelu: return q.bits;
    case QuantKind::Binary:
    case QuantKind::StochasticBinary: return 1;
    case QuantKind::Ternary:
    case QuantKind::StochasticTernary: return 2;
  }
  return 32;
}

inline void validate_spec(const QuantizerSpec& q) {
  if (q.kind == QuantKind::Uniform || q.kind == QuantKind::QuantizedRelu) {
    if (q.bits < 1) throw ConfigError("quantizer: bits must be >= 1");
    if (q.integer_bits < 0) throw ConfigError("quantizer: integer_bits must be >= 0");
    if (q.integer_bits >= q.bits)
      throw ConfigError("quantizer: integer_bits must be < bits");
  }
}

// Data-dependent scale parameters, recomputed on every call (dynamic scales,
// no learned state).
template <typename T>
struct QuantScales {
  T s = T(1);      // binary/ternary magnitude
  T delta = T(0);  // ternary threshold
  T step = T(0);   // uniform grid step 2^-f
  T lo = T(0), hi = T(0);  // uniform clip edges
};

// Ternary rule: delta = 0.7*mean|x|, s = mean(|x| over |x|>delta), s = 1 when
// nothing exceeds the threshold. Binary rule: s = mean|x|.
template <typename T>
QuantScales<T> quant_scales(const QuantizerSpec& q, const Tensor<T>& x) {
  QuantScales<T> sc;
  switch (q.kind) {
    case QuantKind::Fp32:
      break;
    case QuantKind::Uniform: {
      const int f = q.bits - q.integer_bits - 1;
      sc.step = static_cast<T>(std::ldexp(1.0, -f));
      sc.hi = static_cast<T>(std::ldexp(1.0, q.integer_bits)) - sc.step;
      sc.lo = q.symmetric ? -sc.hi : -static_cast<T>(std::ldexp(1.0, q.integer_bits));
      break;
    }
    case QuantKind::QuantizedRelu: {
      const int f = q.bits - q.integer_bits;
      sc.step = static_cast<T>(std::ldexp(1.0, -f));
      sc.lo = T(0);
      sc.hi = static_cast<T>(std::ldexp(1.0, q.integer_bits)) - sc.step;
      break;
    }
    case QuantKind::Binary:
    case QuantKind::StochasticBinary: {
      T acc = T(0);
      for (const T& v : x.data) acc += std::abs(v);
      sc.s = x.size() ? acc / static_cast<T>(x.size()) : T(1);
      break;
    }
    case QuantKind::Ternary:
    case QuantKind::StochasticTernary: {
      T acc = T(0);
      for (const T& v : x.data) acc += std::abs(v);
      T mean_abs = x.size() ? acc / static_cast<T>(x.size()) : T(0);
      sc.delta = T(0.7) * mean_abs;
      T sum = T(0);
      int64_t cnt = 0;
      for (const T& v : x.data)
        if (std::abs(v) > sc.delta) {
          sum += std::abs(v);
          ++cnt;
        }
      sc.s = cnt ? sum / static_cast<T>(cnt) : T(1);
      break;
    }
  }
  return sc;
}

namespace detail {

template <typename T>
T uniform_level(T v, const QuantScales<T>& sc) {
  T q = std::nearbyint(v / sc.step) * sc.step;
  return std::min(std::max(q, sc.lo), sc.hi);
}

template <typename T>
void check_finite(const Tensor<T>& x, const char* who) {
  if (!x.all_finite())
    throw NumericalError(std::string(who) + ": non-finite input value");
}

}  // namespace detail

// Deterministic quantization onto the kind's codomain.
template <typename T>
Tensor<T> quantize(const QuantizerSpec& q, const Tensor<T>& x) {
  validate_spec(q);
  detail::check_finite(x, "quantize");
  if (q.kind == QuantKind::Fp32) return x;
  const QuantScales<T> sc = quant_scales(deterministic_kind(q.kind) == q.kind
                                             ? q
                                             : QuantizerSpec{deterministic_kind(q.kind),
                                                             q.bits, q.integer_bits,
                                                             q.symmetric, q.seed},
                                         x);
  Tensor<T> y = x;
  switch (deterministic_kind(q.kind)) {
    case QuantKind::Uniform:
    case QuantKind::QuantizedRelu:
      for (auto& v : y.data) v = detail::uniform_level(v, sc);
      break;
    case QuantKind::Binary:
      for (auto& v : y.data) v = v >= T(0) ? sc.s : -sc.s;
      break;
    case QuantKind::Ternary:
      for (auto& v : y.data) v = v > sc.delta ? sc.s : (v < -sc.delta ? -sc.s : T(0));
      break;
    default:
      break;
  }
  return y;
}

// Stochastic rounding: each element lands on one of its two neighboring
// codomain levels a < x < b with P(b) = (x-a)/(b-a); out-of-range elements
// clip deterministically. Deterministic given the rng state.
template <typename T>
Tensor<T> quantize_stochastic(const QuantizerSpec& q, const Tensor<T>& x, Rng& rng) {
  validate_spec(q);
  detail::check_finite(x, "quantize_stochastic");
  if (q.kind == QuantKind::Fp32) return x;
  const QuantScales<T> sc = quant_scales(q, x);
  Tensor<T> y = x;
  auto round_between = [&rng](T v, T a, T b) {
    if (b <= a) return a;
    const double p = static_cast<double>(v - a) / static_cast<double>(b - a);
    return rng.uniform() < p ? b : a;
  };
  switch (q.kind) {
    case QuantKind::Uniform:
    case QuantKind::QuantizedRelu:
      for (auto& v : y.data) {
        if (v <= sc.lo) {
          v = sc.lo;
        } else if (v >= sc.hi) {
          v = sc.hi;
        } else {
          T a = std::floor(v / sc.step) * sc.step;
          if (a < sc.lo) a = sc.lo;
          T b = std::min(a + sc.step, sc.hi);
          v = (v == a) ? a : round_between(v, a, b);
        }
      }
      break;
    case QuantKind::Binary:
    case QuantKind::StochasticBinary:
      for (auto& v : y.data) {
        if (sc.s == T(0)) {
          v = T(0);
        } else if (v <= -sc.s) {
          v = -sc.s;
        } else if (v >= sc.s) {
          v = sc.s;
        } else {
          v = round_between(v, -sc.s, sc.s);
        }
      }
      break;
    case QuantKind::Ternary:
    case QuantKind::StochasticTernary:
      for (auto& v : y.data) {
        if (v <= -sc.s) {
          v = -sc.s;
        } else if (v >= sc.s) {
          v = sc.s;
        } else if (v == T(0)) {
          // exact level, zero-width interval
        } else if (v > T(0)) {
          v = round_between(v, T(0), sc.s);
        } else {
          v = round_between(v, -sc.s, T(0));
        }
      }
      break;
    case QuantKind::Fp32:
      break;
  }
  return y;
}

// Straight-through estimator: gradient passes unchanged inside the
// quantizer's clip range, zero outside. Pass regions per kind:
//   uniform          |x| <= 2^integer_bits
//   quantized_relu   0 <= x <= 2^integer_bits
//   binary/ternary   |x| <= s (data-dependent, recomputed from x)
//   fp32             everywhere
template <typename T>
Tensor<T> ste_backward(const QuantizerSpec& q, const Tensor<T>& upstream,
                       const Tensor<T>& x) {
  if (upstream.size() != x.size())
    throw ShapeError("ste_backward: gradient size " + std::to_string(upstream.size()) +
                     " != input size " + std::to_string(x.size()));
  Tensor<T> g = upstream;
  switch (q.kind) {
    case QuantKind::Fp32:
      break;
    case QuantKind::Uniform: {
      const T bound = static_cast<T>(std::ldexp(1.0, q.integer_bits));
      for (int64_t i = 0; i < x.size(); ++i)
        if (std::abs(x[i]) > bound) g[i] = T(0);
      break;
    }
    case QuantKind::QuantizedRelu: {
      const T bound = static_cast<T>(std::ldexp(1.0, q.integer_bits));
      for (int64_t i = 0; i < x.size(); ++i)
        if (x[i] < T(0) || x[i] > bound) g[i] = T(0);
      break;
    }
    default: {
      const QuantScales<T> sc = quant_scales(q, x);
      for (int64_t i = 0; i < x.size(); ++i)
        if (std::abs(x[i]) > sc.s) g[i] = T(0);
      break;
    }
  }
  return g;
}

// STE pass-through mask (1 inside the clip range, 0 outside).
template <typename T>
Tensor<T> ste_mask(const QuantizerSpec& q, const Tensor<T>& x) {
  Tensor<T> ones = Tensor<T>::full(x.shape, T(1));
  return ste_backward(q, ones, x);
}

// ---------------------------------------------------------------------------
// Stochastic-portion quantization: mark ~ratio*N elements for quantization,
// selection probability inversely proportional to the per-element
// quantization error.
// ---------------------------------------------------------------------------

struct SqSchedule {
  double ratio_start = 0.5;
  double ratio_end = 1.0;
  int epochs_to_full = 10;
};

inline double sq_ratio(const SqSchedule& s, int epoch) {
  if (epoch < 0) throw ConfigError("sq_ratio: epoch must be >= 0");
  if (s.ratio_end < s.ratio_start)
    throw ConfigError("sq_ratio: ratio_end must be >= ratio_start");
  if (s.epochs_to_full <= 0) throw ConfigError("sq_ratio: epochs_to_full must be > 0");
  if (epoch >= s.epochs_to_full) return s.ratio_end;
  const double t = static_cast<double>(epoch) / static_cast<double>(s.epochs_to_full);
  return s.ratio_start + (s.ratio_end - s.ratio_start) * t;
}

// Weighted sampling without replacement (exponential-key method): element j
// gets key Exp(1)/w_j with w_j = 1/(error_j + eta); the round(ratio*N)
// smallest keys are selected.
template <typename T>
std::vector<uint8_t> sq_select(const Tensor<T>& errors, double ratio, Rng& rng) {
  const int64_t n = errors.size();
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  if (ratio <= 0.0) return mask;
  if (ratio >= 1.0) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  const double eta = 1e-8;
  const int64_t m = std::llround(ratio * static_cast<double>(n));
  if (m <= 0) return mask;
  std::vector<std::pair<double, int64_t>> keys;
  keys.reserve(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    const double w = 1.0 / (static_cast<double>(errors[j]) + eta);
    double u = rng.uniform();
    if (u <= 0.0) u = 0x1.0p-53;
    keys.emplace_back(-std::log(u) / w, j);
  }
  std::nth_element(keys.begin(), keys.begin() + (m - 1), keys.end());
  for (int64_t i = 0; i < m; ++i) mask[static_cast<size_t>(keys[static_cast<size_t>(i)].second)] = 1;
  return mask;
}

// |x - quantize(x)| elementwise, the error metric driving sq_select.
template <typename T>
Tensor<T> quantization_error(const QuantizerSpec& q, const Tensor<T>& x) {
  Tensor<T> e = quantize(q, x);
  for (int64_t i = 0; i < x.size(); ++i) e[i] = std::abs(x[i] - e[i]);
  return e;
}

}  // namespace qrobust
