#pragma once

#include <string>
#include <vector>

#include "qrobust/graph.hpp"

namespace qrobust {

struct GradCheckBlock {
  std::string name;
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t excluded = 0;       // coordinates straddling a relu/pool kink
  bool skipped_approx = false;  // gradient path crosses an STE/frozen op
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_err = 0.0;

  bool pass(double tolerance) const {
    for (const auto& b : blocks)
      if (!b.skipped_approx && b.max_rel_err >= tolerance) return false;
    return true;
  }
};

// Central-difference comparison of backward() against (L(t+h)-L(t-h))/2h for
// every trainable parameter block and every graph input. Relative error uses
// an absolute floor so near-zero gradients are compared at the truncation
// scale of the oracle rather than blowing up:
//   rel = |analytic - fd| / max(|analytic|, |fd|, 1e-2)
// Coordinates whose +-h evaluations land on different sides of a relu kink
// or flip a max-pool winner are excluded (the loss is non-smooth there).
// Blocks whose gradient deliberately flows through a straight-through
// estimator are reported as skipped, not checked.
template <typename T>
GradCheckReport grad_check(Graph<T>& g, int loss_node, double h = 1e-3,
                           bool check_inputs = true) {
  GradCheckReport report;
  const double rel_floor = 1e-2;

  g.forward();
  g.zero_grad();
  g.backward(loss_node);

  std::vector<int> leaves;
  for (int id : g.parameters())
    if (g.node(id).trainable) leaves.push_back(id);
  if (check_inputs)
    for (int i = 0; i < g.size(); ++i)
      if (g.node(i).op == Op::Input && !g.node(i).value.data.empty()) leaves.push_back(i);

  // Analytic gradients, copied before FD evaluations disturb the tape.
  std::vector<Tensor<T>> analytic(leaves.size());
  for (size_t b = 0; b < leaves.size(); ++b) {
    const auto& n = g.node(leaves[b]);
    analytic[b] = n.has_grad ? n.grad : Tensor<T>::zeros(n.value.shape);
  }

  for (size_t b = 0; b < leaves.size(); ++b) {
    const int id = leaves[b];
    GradCheckBlock blk;
    blk.name = g.node(id).name;
    if (g.path_has_approx_grad(loss_node, id)) {
      blk.skipped_approx = true;
      report.blocks.push_back(std::move(blk));
      continue;
    }
    Tensor<T>& theta = g.node(id).value;
    for (int64_t i = 0; i < theta.size(); ++i) {
      const T saved = theta[i];
      theta[i] = saved + static_cast<T>(h);
      g.forward();
      const double lp = static_cast<double>(g.value(loss_node)[0]);
      const std::vector<int64_t> sig_p = g.kink_signature();
      theta[i] = saved - static_cast<T>(h);
      g.forward();
      const double lm = static_cast<double>(g.value(loss_node)[0]);
      const std::vector<int64_t> sig_m = g.kink_signature();
      theta[i] = saved;
      if (sig_p != sig_m) {
        ++blk.excluded;
        continue;
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double an = static_cast<double>(analytic[b][i]);
      const double rel =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), rel_floor});
      blk.max_rel_err = std::max(blk.max_rel_err, rel);
      ++blk.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, blk.max_rel_err);
    report.blocks.push_back(std::move(blk));
  }

  // Leave the tape consistent with the unperturbed leaves.
  g.forward();
  return report;
}

}  // namespace qrobust
