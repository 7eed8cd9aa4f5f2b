#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qrobust/data.hpp"
#include "qrobust/model.hpp"
#include "qrobust/threads.hpp"

namespace qrobust {

enum class AttackKind { Fgsm, Pgd, CwL2, Square, Boundary, Zoo };
enum class Norm { L1, L2, Linf };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::CwL2: return "cw_l2";
    case AttackKind::Square: return "square";
    case AttackKind::Boundary: return "boundary";
    case AttackKind::Zoo: return "zoo";
  }
  return "?";
}

inline const char* norm_name(Norm n) {
  switch (n) {
    case Norm::L1: return "l1";
    case Norm::L2: return "l2";
    case Norm::Linf: return "linf";
  }
  return "?";
}

inline bool is_black_box(AttackKind k) {
  return k == AttackKind::Square || k == AttackKind::Boundary || k == AttackKind::Zoo;
}

struct AttackConfig {
  AttackKind kind = AttackKind::Fgsm;
  Norm norm = Norm::Linf;
  double eps = 0.0;
  double alpha = 0.0;           // pgd step size
  int iterations = 10;
  int binary_search_steps = 10; // zoo outer rounds
  double kappa = 0.0;           // cw confidence
  double c = 1.0;               // cw / zoo tradeoff constant
  double fd_h = 1e-4;           // zoo finite-difference step
  int coord_batch = 128;        // zoo coordinates per iteration
  double p_init = 0.05;         // square patch-fraction schedule start
  uint64_t seed = 0;
  double clip_lo = 0.0, clip_hi = 1.0;
};

// ---------------------------------------------------------------------------
// Oracle surfaces. Black-box attacks compile against PredictOracle, which
// exposes prediction only; a gradient call is unrepresentable through it.
// ---------------------------------------------------------------------------

template <typename T>
class PredictOracle {
 public:
  explicit PredictOracle(const Model<T>& m) : model_(m) { model_.set_training(false); }

  Tensor<T> predict(const Tensor<T>& x) const {
    queries_ += x.dim(0);
    return model_.predict(x);
  }

  int predict_class(const Tensor<T>& x) const {
    Tensor<T> p = predict(x);
    int best = 0;
    for (int64_t j = 1; j < p.dim(1); ++j)
      if (p.at2(0, j) > p.at2(0, best)) best = static_cast<int>(j);
    return best;
  }

  int64_t queries() const { return queries_; }
  void reset_queries() const { queries_ = 0; }
  int num_classes() const { return model_.num_classes; }
  const Shape& sample_shape() const { return model_.spec.input_shape; }

 private:
  mutable Model<T> model_;  // private frozen copy
  mutable int64_t queries_ = 0;
};

template <typename T>
class GradOracle {
 public:
  explicit GradOracle(const Model<T>& m) : model_(m), predictor_(m) {
    model_.set_training(false);
  }

  Tensor<T> predict(const Tensor<T>& x) const { return predictor_.predict(x); }
  int predict_class(const Tensor<T>& x) const { return predictor_.predict_class(x); }

  Tensor<T> logits(const Tensor<T>& x) const {
    queries_ += x.dim(0);
    return model_.logits(x);
  }

  // d(cross-entropy)/dx for one-hot y, batch of one.
  Tensor<T> loss_grad(const Tensor<T>& x, const Tensor<T>& y) const {
    queries_ += 1;
    model_.set_input(x);
    model_.graph.forward(model_.probs_node);
    Tensor<T> seed = softmax_forward(model_.graph.value(model_.logits_node));
    for (int64_t i = 0; i < seed.size(); ++i) seed[i] -= y[i];
    model_.graph.zero_grad();
    model_.graph.backward_from(model_.logits_node, std::move(seed));
    return model_.graph.grad(model_.input_node);
  }

  // (dz/dx)^T v: reverse pass seeded with v at the logits.
  Tensor<T> logits_vjp(const Tensor<T>& x, const Tensor<T>& v) const {
    queries_ += 1;
    model_.set_input(x);
    model_.graph.forward(model_.probs_node);
    model_.graph.zero_grad();
    model_.graph.backward_from(model_.logits_node, v);
    return model_.graph.grad(model_.input_node);
  }

  const PredictOracle<T>& predictor() const { return predictor_; }
  int64_t queries() const { return queries_ + predictor_.queries(); }
  void reset_queries() const {
    queries_ = 0;
    predictor_.reset_queries();
  }
  int num_classes() const { return model_.num_classes; }

 private:
  mutable Model<T> model_;
  PredictOracle<T> predictor_;
  mutable int64_t queries_ = 0;
};

// ---------------------------------------------------------------------------
// Norms and projections
// ---------------------------------------------------------------------------

template <typename T>
double norm_of(const Tensor<T>& d, Norm n) {
  double acc = 0.0;
  switch (n) {
    case Norm::L1:
      for (const T& v : d.data) acc += std::abs(static_cast<double>(v));
      return acc;
    case Norm::L2:
      for (const T& v : d.data) acc += static_cast<double>(v) * static_cast<double>(v);
      return std::sqrt(acc);
    case Norm::Linf:
      for (const T& v : d.data) acc = std::max(acc, std::abs(static_cast<double>(v)));
      return acc;
  }
  return acc;
}

// Euclidean projection onto the l1 ball (Duchi et al. simplex projection).
template <typename T>
void project_l1_ball(Tensor<T>& d, double eps) {
  if (norm_of(d, Norm::L1) <= eps) return;
  std::vector<double> mag(static_cast<size_t>(d.size()));
  for (int64_t i = 0; i < d.size(); ++i) mag[static_cast<size_t>(i)] =
      std::abs(static_cast<double>(d[i]));
  std::sort(mag.begin(), mag.end(), std::greater<double>());
  double cum = 0.0, theta = 0.0;
  int64_t rho = 0;
  for (size_t j = 0; j < mag.size(); ++j) {
    cum += mag[j];
    const double t = (cum - eps) / static_cast<double>(j + 1);
    if (mag[j] - t > 0) {
      rho = static_cast<int64_t>(j + 1);
      theta = t;
    }
  }
  (void)rho;
  for (int64_t i = 0; i < d.size(); ++i) {
    const double v = static_cast<double>(d[i]);
    const double shrunk = std::max(std::abs(v) - theta, 0.0);
    d[i] = static_cast<T>(v < 0 ? -shrunk : shrunk);
  }
}

template <typename T>
void project_norm_ball(Tensor<T>& d, Norm n, double eps) {
  switch (n) {
    case Norm::Linf:
      for (auto& v : d.data)
        v = static_cast<T>(std::min(std::max(static_cast<double>(v), -eps), eps));
      return;
    case Norm::L2: {
      const double nn = norm_of(d, Norm::L2);
      if (nn > eps && nn > 0) {
        const T scale = static_cast<T>(eps / nn);
        for (auto& v : d.data) v *= scale;
      }
      return;
    }
    case Norm::L1:
      project_l1_ball(d, eps);
      return;
  }
}

template <typename T>
void clip_inplace(Tensor<T>& x, double lo, double hi) {
  for (auto& v : x.data)
    v = static_cast<T>(std::min(std::max(static_cast<double>(v), lo), hi));
}

// ---------------------------------------------------------------------------
// Attack results
// ---------------------------------------------------------------------------

template <typename T>
struct AttackResult {
  Tensor<T> x_adv;
  bool no_op = false;   // attack could not move (e.g. zero gradient)
  bool found = false;   // attack-internal success criterion met
  int64_t queries = 0;
};

// ---------------------------------------------------------------------------
// FGSM (single step). linf: x + eps*sign(g); l1/l2: x + eps*g/||g||
// (normalized-gradient convention). Always clipped to the valid range.
// ---------------------------------------------------------------------------

template <typename T>
AttackResult<T> fgsm(const GradOracle<T>& oracle, const Tensor<T>& x, const Tensor<T>& y,
                     double eps, Norm norm, double clip_lo = 0.0, double clip_hi = 1.0) {
  if (eps < 0) throw ConfigError("fgsm: eps must be >= 0");
  AttackResult<T> res;
  if (eps == 0) {
    res.x_adv = x;
    return res;
  }
  Tensor<T> g = oracle.loss_grad(x, y);
  Tensor<T> xp = x;
  if (norm == Norm::Linf) {
    for (int64_t i = 0; i < x.size(); ++i) {
      const double s = g[i] > T(0) ? 1.0 : (g[i] < T(0) ? -1.0 : 0.0);
      xp[i] = static_cast<T>(static_cast<double>(x[i]) + eps * s);
    }
  } else {
    const double nn = norm_of(g, norm);
    if (nn == 0.0) {
      res.x_adv = x;
      res.no_op = true;
      return res;
    }
    for (int64_t i = 0; i < x.size(); ++i)
      xp[i] = static_cast<T>(static_cast<double>(x[i]) +
                             eps * static_cast<double>(g[i]) / nn);
  }
  clip_inplace(xp, clip_lo, clip_hi);
  res.x_adv = std::move(xp);
  return res;
}

// ---------------------------------------------------------------------------
// PGD: iterated gradient steps with projection back onto the eps-ball of the
// original input intersected with the clip range.
// ---------------------------------------------------------------------------

template <typename T>
AttackResult<T> pgd(const GradOracle<T>& oracle, const Tensor<T>& x, const Tensor<T>& y,
                    double eps, double alpha, int iterations, Norm norm,
                    double clip_lo = 0.0, double clip_hi = 1.0) {
  if (alpha <= 0) throw ConfigError("pgd: alpha must be > 0");
  if (eps < 0) throw ConfigError("pgd: eps must be >= 0");
  AttackResult<T> res;
  if (eps == 0) {
    res.x_adv = x;
    return res;
  }
  Tensor<T> cur = x;
  bool moved = false;
  for (int t = 0; t < iterations; ++t) {
    Tensor<T> g = oracle.loss_grad(cur, y);
    if (norm == Norm::Linf) {
      for (int64_t i = 0; i < cur.size(); ++i) {
        const double s = g[i] > T(0) ? 1.0 : (g[i] < T(0) ? -1.0 : 0.0);
        cur[i] = static_cast<T>(static_cast<double>(cur[i]) + alpha * s);
        moved = moved || s != 0.0;
      }
    } else {
      const double nn = norm_of(g, norm);
      if (nn == 0.0) continue;
      moved = true;
      for (int64_t i = 0; i < cur.size(); ++i)
        cur[i] = static_cast<T>(static_cast<double>(cur[i]) +
                                alpha * static_cast<double>(g[i]) / nn);
    }
    Tensor<T> delta = cur;
    for (int64_t i = 0; i < delta.size(); ++i) delta[i] -= x[i];
    project_norm_ball(delta, norm, eps);
    for (int64_t i = 0; i < cur.size(); ++i) cur[i] = x[i] + delta[i];
    clip_inplace(cur, clip_lo, clip_hi);
  }
  res.no_op = !moved;
  res.x_adv = std::move(cur);
  return res;
}

// ---------------------------------------------------------------------------
// Carlini-Wagner L2: minimize ||delta||_2^2 + c * f(x+delta) with
// f = max(z_true - max_{k!=true} z_k, -kappa), optimized with Adam in
// tanh-space so iterates respect the clip range by construction. Returns the
// lowest-norm successful iterate, else the final iterate with found=false.
// ---------------------------------------------------------------------------

template <typename T>
AttackResult<T> cw_l2(const GradOracle<T>& oracle, const Tensor<T>& x, const Tensor<T>& y,
                      int iterations, double c, double kappa, double clip_lo = 0.0,
                      double clip_hi = 1.0, double lr = 0.01) {
  if (iterations < 1) throw ConfigError("cw_l2: iterations must be >= 1");
  AttackResult<T> res;
  int true_class = 0;
  for (int64_t j = 1; j < y.size(); ++j)
    if (y[j] > y[true_class]) true_class = static_cast<int>(j);

  auto margin = [&](const Tensor<T>& z, int& runner_up) {
    runner_up = true_class == 0 ? 1 : 0;
    for (int64_t j = 0; j < z.size(); ++j) {
      if (static_cast<int>(j) == true_class) continue;
      if (z[j] > z[runner_up]) runner_up = static_cast<int>(j);
    }
    return static_cast<double>(z[true_class]) - static_cast<double>(z[runner_up]);
  };

  {  // already misclassified: delta = 0 is optimal
    int ru;
    Tensor<T> z0 = oracle.logits(x);
    if (margin(z0, ru) < 0) {
      res.x_adv = x;
      res.found = true;
      return res;
    }
  }

  const double half = (clip_hi - clip_lo) / 2.0;
  const double mid = (clip_hi + clip_lo) / 2.0;
  Tensor<double> w({x.size()});
  for (int64_t i = 0; i < x.size(); ++i) {
    double u = (static_cast<double>(x[i]) - mid) / half;
    u = std::min(std::max(u, -1.0 + 1e-6), 1.0 - 1e-6);
    w[i] = std::atanh(u);
  }
  Tensor<double> adam_m({x.size()}), adam_v({x.size()});
  const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;

  Tensor<T> best = x;
  double best_norm = std::numeric_limits<double>::infinity();
  bool found = false;
  Tensor<T> cur = x;

  for (int t = 1; t <= iterations; ++t) {
    for (int64_t i = 0; i < x.size(); ++i)
      cur[i] = static_cast<T>(mid + half * std::tanh(w[i]));
    Tensor<T> z = oracle.logits(cur);
    int runner_up;
    const double m = margin(z, runner_up);
    if (m < 0) {
      Tensor<T> d = cur;
      for (int64_t i = 0; i < d.size(); ++i) d[i] -= x[i];
      const double nn = norm_of(d, Norm::L2);
      if (nn < best_norm) {
        best_norm = nn;
        best = cur;
        found = true;
      }
    }
    // dObj/dx = 2*delta + c * d f/dx (f active above -kappa)
    Tensor<T> gx({x.size()});
    for (int64_t i = 0; i < x.size(); ++i)
      gx[i] = static_cast<T>(2.0 * (static_cast<double>(cur[i]) - static_cast<double>(x[i])));
    if (m > -kappa) {
      Tensor<T> v(z.shape);
      v[true_class] = static_cast<T>(c);
      v[runner_up] = static_cast<T>(-c);
      Tensor<T> gf = oracle.logits_vjp(cur, v);
      for (int64_t i = 0; i < x.size(); ++i) gx[i] += gf[i];
    }
    // through tanh, then Adam
    for (int64_t i = 0; i < x.size(); ++i) {
      const double th = std::tanh(w[i]);
      const double gw = static_cast<double>(gx[i]) * half * (1.0 - th * th);
      adam_m[i] = b1 * adam_m[i] + (1 - b1) * gw;
      adam_v[i] = b2 * adam_v[i] + (1 - b2) * gw * gw;
      const double mh = adam_m[i] / (1 - std::pow(b1, t));
      const double vh = adam_v[i] / (1 - std::pow(b2, t));
      w[i] -= lr * mh / (std::sqrt(vh) + aeps);
    }
  }
  res.found = found;
  res.x_adv = found ? best : cur;
  return res;
}

// ---------------------------------------------------------------------------
// Square attack: random-search over square patches, accepting only proposals
// that decrease the probability margin. linf: stripe init then +-eps square
// refinement; l2: bump patches renormalized onto the eps-sphere.
// ---------------------------------------------------------------------------

struct SquareAuditEntry {
  int64_t row = 0, col = 0, h = 0, w = 0;
  bool accepted = false;
  double margin_after = 0.0;
};

template <typename T>
AttackResult<T> square_attack(const PredictOracle<T>& oracle, const Tensor<T>& x,
                              const Tensor<T>& y, double eps, Norm norm, int iterations,
                              double p_init, uint64_t seed, double clip_lo = 0.0,
                              double clip_hi = 1.0,
                              std::vector<SquareAuditEntry>* audit = nullptr) {
  if (x.rank() != 4)
    throw ShapeError("square_attack: image-shaped input N x H x W x C required, got " +
                     shape_str(x.shape));
  if (norm == Norm::L1) throw ConfigError("square_attack: norm must be l2 or linf");
  AttackResult<T> res;
  if (eps == 0) {
    res.x_adv = x;
    return res;
  }
  const int64_t h = x.dim(1), w = x.dim(2), ch = x.dim(3);
  int true_class = 0;
  for (int64_t j = 1; j < y.size(); ++j)
    if (y[j] > y[true_class]) true_class = static_cast<int>(j);

  auto margin = [&](const Tensor<T>& xp) {
    Tensor<T> p = oracle.predict(xp);
    double other = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < p.dim(1); ++j)
      if (static_cast<int>(j) != true_class)
        other = std::max(other, static_cast<double>(p.at2(0, j)));
    return static_cast<double>(p.at2(0, true_class)) - other;
  };

  Rng rng(derive_stream(seed, 0x50A2E));
  Tensor<T> cur = x;
  double cur_margin = margin(cur);

  auto try_accept = [&](Tensor<T>& cand, int64_t r0, int64_t c0, int64_t hh, int64_t ww) {
    const double m = margin(cand);
    const bool acc = m < cur_margin;
    if (acc) {
      cur = cand;
      cur_margin = m;
    }
    if (audit) audit->push_back({r0, c0, hh, ww, acc, acc ? m : cur_margin});
    return acc;
  };

  if (norm == Norm::Linf) {
    // Column-stripe initialization.
    Tensor<T> cand = x;
    for (int64_t cc = 0; cc < w; ++cc)
      for (int64_t k = 0; k < ch; ++k) {
        const double sgn = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (int64_t rr = 0; rr < h; ++rr)
          cand.at4(0, rr, cc, k) = static_cast<T>(
              std::min(std::max(static_cast<double>(x.at4(0, rr, cc, k)) + sgn * eps,
                                clip_lo), clip_hi));
      }
    try_accept(cand, 0, 0, h, w);

    for (int t = 0; t < iterations && cur_margin >= 0; ++t) {
      const double frac = iterations > 1 ? static_cast<double>(t) / iterations : 0.0;
      double p = p_init;
      for (double cut : {0.001, 0.005, 0.02, 0.1, 0.2, 0.4, 0.6, 0.8})
        if (frac >= cut) p /= 2.0;
      int64_t s = std::max<int64_t>(
          1, std::llround(std::sqrt(p * static_cast<double>(h * w))));
      s = std::min({s, h, w});
      const int64_t r0 = rng.uniform_int(h - s + 1);
      const int64_t c0 = rng.uniform_int(w - s + 1);
      Tensor<T> cand2 = cur;
      for (int64_t k = 0; k < ch; ++k) {
        const double sgn = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (int64_t rr = r0; rr < r0 + s; ++rr)
          for (int64_t cc = c0; cc < c0 + s; ++cc)
            cand2.at4(0, rr, cc, k) = static_cast<T>(
                std::min(std::max(static_cast<double>(x.at4(0, rr, cc, k)) + sgn * eps,
                                  clip_lo), clip_hi));
      }
      try_accept(cand2, r0, c0, s, s);
    }
  } else {  // l2: bump patches with whole-perturbation renormalization
    for (int t = 0; t < iterations && cur_margin >= 0; ++t) {
      const double frac = iterations > 1 ? static_cast<double>(t) / iterations : 0.0;
      double p = p_init;
      for (double cut : {0.001, 0.005, 0.02, 0.1, 0.2, 0.4, 0.6, 0.8})
        if (frac >= cut) p /= 2.0;
      int64_t s = std::max<int64_t>(
          2, std::llround(std::sqrt(p * static_cast<double>(h * w))));
      s = std::min({s, h, w});
      const int64_t r0 = rng.uniform_int(h - s + 1);
      const int64_t c0 = rng.uniform_int(w - s + 1);
      Tensor<T> delta = cur;
      for (int64_t i = 0; i < delta.size(); ++i) delta[i] -= x[i];
      // Pyramid bump centered in the square, one sign per channel.
      const double mid_r = (static_cast<double>(s) - 1.0) / 2.0;
      for (int64_t k = 0; k < ch; ++k) {
        const double sgn = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (int64_t rr = 0; rr < s; ++rr)
          for (int64_t cc = 0; cc < s; ++cc) {
            const double dist = std::max(std::abs(rr - mid_r), std::abs(cc - mid_r));
            const double val = sgn * (1.0 - dist / (mid_r + 1.0));
            delta.at4(0, r0 + rr, c0 + cc, k) = static_cast<T>(val * eps);
          }
      }
      project_norm_ball(delta, Norm::L2, eps);
      const double nn = norm_of(delta, Norm::L2);
      if (nn > 0) {  // use the full budget
        const T scale = static_cast<T>(eps / nn);
        for (auto& v : delta.data) v *= scale;
      }
      Tensor<T> cand = x;
      for (int64_t i = 0; i < cand.size(); ++i) cand[i] += delta[i];
      clip_inplace(cand, clip_lo, clip_hi);
      try_accept(cand, r0, c0, s, s);
    }
  }
  res.found = cur_margin < 0;
  res.x_adv = std::move(cur);
  return res;
}

// ---------------------------------------------------------------------------
// Boundary attack: decision-based walk alternating an orthogonal step on the
// sphere around the original with a contraction step toward it; every
// accepted iterate stays misclassified. Step sizes adapt by x1.1 / /1.1 on
// trailing success windows.
// ---------------------------------------------------------------------------

template <typename T>
AttackResult<T> boundary_attack(const PredictOracle<T>& oracle, const Tensor<T>& x,
                                int true_class, int iterations, uint64_t seed,
                                double clip_lo = 0.0, double clip_hi = 1.0,
                                std::vector<Tensor<T>>* trajectory = nullptr) {
  Rng rng(derive_stream(seed, 0xB0DA));
  AttackResult<T> res;

  // Adversarial starting point by rejection sampling in the clip range.
  Tensor<T> cur(x.shape);
  bool started = false;
  for (int tries = 0; tries < 10000; ++tries) {
    for (auto& v : cur.data) v = static_cast<T>(rng.uniform(clip_lo, clip_hi));
    if (oracle.predict_class(cur) != true_class) {
      started = true;
      break;
    }
  }
  if (!started)
    throw NumericalError("boundary_attack: no adversarial starting point in 10^4 draws");
  if (trajectory) trajectory->push_back(cur);

  auto l2_to_x = [&](const Tensor<T>& p) {
    double acc = 0.0;
    for (int64_t i = 0; i < p.size(); ++i) {
      const double d = static_cast<double>(p[i]) - static_cast<double>(x[i]);
      acc += d * d;
    }
    return std::sqrt(acc);
  };

  Tensor<T> best = cur;
  double best_dist = l2_to_x(cur);

  double sphere_step = 0.01, source_step = 0.01;
  int orth_succ = 0, orth_tot = 0, step_succ = 0, step_tot = 0;

  for (int t = 0; t < iterations; ++t) {
    const double dist = l2_to_x(cur);
    if (dist == 0) break;
    // Orthogonal perturbation on the sphere around x through cur.
    Tensor<T> pert(x.shape);
    for (auto& v : pert.data) v = static_cast<T>(rng.normal());
    double dot = 0.0, dnorm2 = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) {
      const double di = static_cast<double>(cur[i]) - static_cast<double>(x[i]);
      dot += static_cast<double>(pert[i]) * di;
      dnorm2 += di * di;
    }
    for (int64_t i = 0; i < x.size(); ++i)
      pert[i] -= static_cast<T>(dot / dnorm2 *
                                (static_cast<double>(cur[i]) - static_cast<double>(x[i])));
    const double pnorm = norm_of(pert, Norm::L2);
    if (pnorm == 0) continue;
    const double pscale = sphere_step * dist / pnorm;
    Tensor<T> cand(x.shape);
    double cnorm = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) {
      const double v = static_cast<double>(cur[i]) +
                       pscale * static_cast<double>(pert[i]) - static_cast<double>(x[i]);
      cnorm += v * v;
      cand[i] = static_cast<T>(v);
    }
    cnorm = std::sqrt(cnorm);
    // Re-project onto the sphere of radius `dist` around x, then contract.
    for (int64_t i = 0; i < x.size(); ++i)
      cand[i] = static_cast<T>(static_cast<double>(x[i]) +
                               static_cast<double>(cand[i]) * dist / cnorm);
    clip_inplace(cand, clip_lo, clip_hi);
    ++orth_tot;
    if (oracle.predict_class(cand) != true_class) {
      ++orth_succ;
      // Contraction toward the original.
      Tensor<T> closer = cand;
      for (int64_t i = 0; i < x.size(); ++i)
        closer[i] = static_cast<T>(static_cast<double>(cand[i]) +
                                   source_step * (static_cast<double>(x[i]) -
                                                  static_cast<double>(cand[i])));
      clip_inplace(closer, clip_lo, clip_hi);
      ++step_tot;
      if (oracle.predict_class(closer) != true_class) {
        ++step_succ;
        cur = std::move(closer);
      } else {
        cur = std::move(cand);
      }
      if (trajectory) trajectory->push_back(cur);
      const double d2 = l2_to_x(cur);
      if (d2 < best_dist) {
        best_dist = d2;
        best = cur;
      }
    }
    // Adapt on 20-trial windows: aim for ~50% success on both steps.
    if (orth_tot >= 20) {
      sphere_step *= (orth_succ * 2 >= orth_tot) ? 1.1 : 1.0 / 1.1;
      orth_tot = orth_succ = 0;
    }
    if (step_tot >= 20) {
      source_step *= (step_succ * 2 >= step_tot) ? 1.1 : 1.0 / 1.1;
      step_tot = step_succ = 0;
    }
  }
  res.found = true;
  res.x_adv = std::move(best);
  return res;
}

// ---------------------------------------------------------------------------
// ZOO: zeroth-order coordinate-wise gradient estimation on the prediction
// oracle, Adam updates on delta, outer binary search over the tradeoff c.
// ---------------------------------------------------------------------------

// Central-difference gradient estimate on the given coordinates.
template <typename T, typename LossFn>
Tensor<T> zoo_fd_gradient(LossFn&& loss, const Tensor<T>& x,
                          const std::vector<int64_t>& coords, double h) {
  Tensor<T> g(x.shape);
  Tensor<T> probe = x;
  for (int64_t j : coords) {
    const T saved = probe[j];
    probe[j] = static_cast<T>(static_cast<double>(saved) + h);
    const double lp = loss(probe);
    probe[j] = static_cast<T>(static_cast<double>(saved) - h);
    const double lm = loss(probe);
    probe[j] = saved;
    g[j] = static_cast<T>((lp - lm) / (2.0 * h));
  }
  return g;
}

template <typename T>
AttackResult<T> zoo(const PredictOracle<T>& oracle, const Tensor<T>& x, const Tensor<T>& y,
                    int iterations, int binary_search_steps, double h, uint64_t seed,
                    double init_c = 1.0, int coord_batch = 128, double clip_lo = 0.0,
                    double clip_hi = 1.0, double lr = 0.1) {
  if (h <= 0) throw ConfigError("zoo: finite-difference step h must be > 0");
  Rng rng(derive_stream(seed, 0x2001));
  int true_class = 0;
  for (int64_t j = 1; j < y.size(); ++j)
    if (y[j] > y[true_class]) true_class = static_cast<int>(j);

  // Log-probability margin, the standard zeroth-order attack loss.
  auto f_margin = [&](const Tensor<T>& xp) {
    Tensor<T> p = oracle.predict(xp);
    const double eps_p = 1e-12;
    double other = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < p.dim(1); ++j)
      if (static_cast<int>(j) != true_class)
        other = std::max(other, std::log(static_cast<double>(p.at2(0, j)) + eps_p));
    const double mine = std::log(static_cast<double>(p.at2(0, true_class)) + eps_p);
    return std::max(mine - other, 0.0);
  };

  AttackResult<T> res;
  if (oracle.predict_class(x) != true_class) {
    res.x_adv = x;
    res.found = true;
    return res;
  }

  const int64_t d = x.size();
  Tensor<T> best = x;
  double best_norm = std::numeric_limits<double>::infinity();
  bool found = false;

  double c = init_c, c_lo = 0.0, c_hi = -1.0;  // c_hi < 0: unbounded above
  for (int round = 0; round < std::max(1, binary_search_steps); ++round) {
    Tensor<T> delta(x.shape);
    Tensor<double> am({d}), av({d});
    int64_t t = 0;
    bool round_found = false;
    for (int it = 0; it < iterations; ++it) {
      std::vector<int64_t> coords;
      const int64_t nb = std::min<int64_t>(coord_batch, d);
      for (int64_t b = 0; b < nb; ++b) coords.push_back(rng.uniform_int(d));
      Tensor<T> cur = x;
      for (int64_t i = 0; i < d; ++i) cur[i] += delta[i];
      clip_inplace(cur, clip_lo, clip_hi);
      auto obj = [&](const Tensor<T>& xp) { return c * f_margin(xp); };
      Tensor<T> g = zoo_fd_gradient(obj, cur, coords, h);
      ++t;
      for (int64_t j : coords) {
        const double gj = static_cast<double>(g[j]) + 2.0 * static_cast<double>(delta[j]);
        am[j] = 0.9 * am[j] + 0.1 * gj;
        av[j] = 0.999 * av[j] + 0.001 * gj * gj;
        const double mh = am[j] / (1 - std::pow(0.9, static_cast<double>(t)));
        const double vh = av[j] / (1 - std::pow(0.999, static_cast<double>(t)));
        delta[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + 1e-8));
      }
      Tensor<T> probe = x;
      for (int64_t i = 0; i < d; ++i) probe[i] += delta[i];
      clip_inplace(probe, clip_lo, clip_hi);
      if (oracle.predict_class(probe) != true_class) {
        round_found = true;
        Tensor<T> dd = probe;
        for (int64_t i = 0; i < d; ++i) dd[i] -= x[i];
        const double nn = norm_of(dd, Norm::L2);
        if (nn < best_norm) {
          best_norm = nn;
          best = probe;
          found = true;
        }
      }
    }
    // Binary search over c: success -> try smaller, failure -> larger.
    if (round_found) {
      c_hi = c;
      c = (c_lo + c_hi) / 2.0;
    } else {
      c_lo = c;
      c = c_hi < 0 ? c * 10.0 : (c_lo + c_hi) / 2.0;
    }
  }
  res.found = found;
  res.x_adv = found ? best : x;
  return res;
}

// ---------------------------------------------------------------------------
// Batch attack runner
// ---------------------------------------------------------------------------

template <typename T>
struct AdversarialBatch {
  Tensor<T> originals;
  Tensor<T> perturbed;
  std::vector<int> labels;
  std::vector<int64_t> queries;
  std::vector<uint8_t> success;        // argmax(predict(x')) != y
  std::vector<uint8_t> no_op;
  std::vector<uint8_t> error;
  std::vector<uint8_t> within_threshold;  // boundary: linf(delta) <= eps
  double accuracy_pct = 0.0;
  double clean_accuracy_pct = 0.0;
  double mean_norm = 0.0;
  double mean_queries = 0.0;
};

// Executes one attack over a slice of the dataset against a frozen model.
// White-box kinds receive the gradient oracle, black-box kinds the
// prediction oracle only (enforced here by construction). Per-sample errors
// are recorded as flags, never aborting the batch. eps = 0 is a no-op attack
// for every kind. Samples run independently on per-sample rng streams;
// QROBUST_THREADS > 1 processes chunks on worker threads with identical
// results.
template <typename T>
AdversarialBatch<T> run_attack(const Model<T>& model, const Dataset& data,
                               const std::vector<int64_t>& indices,
                               const AttackConfig& cfg) {
  AdversarialBatch<T> batch;
  const int64_t n = static_cast<int64_t>(indices.size());
  Shape xs = data.inputs.shape;
  xs[0] = std::max<int64_t>(n, 1);
  batch.originals = Tensor<T>(xs);
  batch.perturbed = Tensor<T>(xs);
  batch.labels.assign(static_cast<size_t>(n), 0);
  batch.queries.assign(static_cast<size_t>(n), 0);
  batch.success.assign(static_cast<size_t>(n), 0);
  batch.no_op.assign(static_cast<size_t>(n), 0);
  batch.error.assign(static_cast<size_t>(n), 0);
  if (cfg.kind == AttackKind::Boundary)
    batch.within_threshold.assign(static_cast<size_t>(n), 0);
  const int64_t stride = data.sample_stride();

  const Norm report_norm = (cfg.kind == AttackKind::CwL2 || cfg.kind == AttackKind::Zoo ||
                            cfg.kind == AttackKind::Boundary)
                               ? Norm::L2
                               : cfg.norm;

  std::vector<uint8_t> clean_ok(static_cast<size_t>(n), 0);
  std::vector<double> norms(static_cast<size_t>(n), 0.0);

  parallel_chunks(n, [&](int64_t lo, int64_t hi) {
    GradOracle<T> grad_oracle(model);
    PredictOracle<T> predict_oracle(model);
    for (int64_t i = lo; i < hi; ++i) {
      const int64_t src = indices[static_cast<size_t>(i)];
      Shape ss = data.inputs.shape;
      ss[0] = 1;
      Tensor<T> x(ss);
      for (int64_t j = 0; j < stride; ++j)
        x[j] = static_cast<T>(data.inputs[src * stride + j]);
      int label = 0;
      for (int64_t j = 0; j < data.labels.dim(1); ++j)
        if (data.labels.at2(src, j) > 0.5f) label = static_cast<int>(j);
      Tensor<T> y({data.labels.dim(1)});
      y[label] = T(1);

      const uint64_t sample_seed =
          derive_stream(cfg.seed, static_cast<uint64_t>(i), 0xA77);
      grad_oracle.reset_queries();
      predict_oracle.reset_queries();

      AttackResult<T> r;
      bool err = false;
      try {
        if (cfg.eps == 0.0 &&
            (cfg.kind == AttackKind::Fgsm || cfg.kind == AttackKind::Pgd ||
             cfg.kind == AttackKind::Square || cfg.kind == AttackKind::Boundary)) {
          r.x_adv = x;  // eps-budgeted attacks degenerate to the identity
        } else {
          switch (cfg.kind) {
            case AttackKind::Fgsm:
              r = fgsm(grad_oracle, x, y, cfg.eps, cfg.norm, cfg.clip_lo, cfg.clip_hi);
              break;
            case AttackKind::Pgd:
              r = pgd(grad_oracle, x, y, cfg.eps, cfg.alpha, cfg.iterations, cfg.norm,
                      cfg.clip_lo, cfg.clip_hi);
              break;
            case AttackKind::CwL2:
              r = cw_l2(grad_oracle, x, y, cfg.iterations, cfg.c, cfg.kappa, cfg.clip_lo,
                        cfg.clip_hi);
              break;
            case AttackKind::Square:
              r = square_attack(predict_oracle, x, y, cfg.eps, cfg.norm, cfg.iterations,
                                cfg.p_init, sample_seed, cfg.clip_lo, cfg.clip_hi);
              break;
            case AttackKind::Boundary:
              r = boundary_attack(predict_oracle, x, label, cfg.iterations, sample_seed,
                                  cfg.clip_lo, cfg.clip_hi);
              break;
            case AttackKind::Zoo:
              r = zoo(predict_oracle, x, y, cfg.iterations, cfg.binary_search_steps,
                      cfg.fd_h, sample_seed, cfg.c, cfg.coord_batch, cfg.clip_lo,
                      cfg.clip_hi);
              break;
          }
        }
      } catch (const std::exception&) {
        err = true;
        r.x_adv = x;
      }

      const int64_t q = is_black_box(cfg.kind) ? predict_oracle.queries()
                                               : grad_oracle.queries();
      const int clean_pred = predict_oracle.predict_class(x);
      const int adv_pred = predict_oracle.predict_class(r.x_adv);

      Tensor<T> delta = r.x_adv;
      for (int64_t j = 0; j < stride; ++j) delta[j] -= x[j];

      for (int64_t j = 0; j < stride; ++j) {
        batch.originals[i * stride + j] = x[j];
        batch.perturbed[i * stride + j] = r.x_adv[j];
      }
      clean_ok[static_cast<size_t>(i)] = clean_pred == label ? 1 : 0;
      norms[static_cast<size_t>(i)] = norm_of(delta, report_norm);
      batch.labels[static_cast<size_t>(i)] = label;
      batch.queries[static_cast<size_t>(i)] = q;
      batch.success[static_cast<size_t>(i)] = adv_pred != label ? 1 : 0;
      batch.no_op[static_cast<size_t>(i)] = r.no_op ? 1 : 0;
      batch.error[static_cast<size_t>(i)] = err ? 1 : 0;
      if (cfg.kind == AttackKind::Boundary)
        batch.within_threshold[static_cast<size_t>(i)] =
            norm_of(delta, Norm::Linf) <= cfg.eps ? 1 : 0;
    }
  });

  int64_t correct_clean = 0, correct_adv = 0;
  double norm_sum = 0.0, query_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    correct_clean += clean_ok[static_cast<size_t>(i)];
    correct_adv += batch.success[static_cast<size_t>(i)] ? 0 : 1;
    norm_sum += norms[static_cast<size_t>(i)];
    query_sum += static_cast<double>(batch.queries[static_cast<size_t>(i)]);
  }
  batch.clean_accuracy_pct = n ? 100.0 * static_cast<double>(correct_clean) / n : 0.0;
  batch.accuracy_pct = n ? 100.0 * static_cast<double>(correct_adv) / n : 0.0;
  batch.mean_norm = n ? norm_sum / static_cast<double>(n) : 0.0;
  batch.mean_queries = n ? query_sum / static_cast<double>(n) : 0.0;
  return batch;
}

// Persist an adversarial batch for replay: originals/perturbed as QRT1
// containers plus a label sidecar.
template <typename T>
void save_adversarial_batch(const std::string& prefix, const AdversarialBatch<T>& b) {
  TensorF orig(b.originals.shape), pert(b.perturbed.shape);
  for (int64_t i = 0; i < orig.size(); ++i) {
    orig[i] = static_cast<float>(b.originals[i]);
    pert[i] = static_cast<float>(b.perturbed[i]);
  }
  save_tensor_container(prefix + "_orig.qrt", orig);
  save_tensor_container(prefix + "_adv.qrt", pert);
  std::vector<uint8_t> labels;
  for (int l : b.labels) labels.push_back(static_cast<uint8_t>(l));
  save_labels(prefix + "_labels.bin", labels);
}

}  // namespace qrobust
