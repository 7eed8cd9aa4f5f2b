#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qrobust/model.hpp"

namespace qrobust {

// Rows = elements of `out_node`, cols = elements of `in_node`; one seeded
// reverse pass per row. Requires a valid forward pass on the graph.
// Quantize nodes contribute their straight-through (pass-through-in-range)
// derivative, i.e. the Jacobian the quantization-aware training loop sees.
template <typename T>
Tensor<T> jacobian_of_node(Graph<T>& g, int out_node, int in_node) {
  const int64_t rows = g.value(out_node).size();
  const int64_t cols = g.value(in_node).size();
  Tensor<T> jac({rows, cols});
  for (int64_t r = 0; r < rows; ++r) {
    g.zero_grad();
    Tensor<T> seed(g.value(out_node).shape);
    seed[r] = T(1);
    g.backward_from(out_node, std::move(seed));
    if (g.has_grad(in_node)) {
      const Tensor<T>& gi = g.grad(in_node);
      for (int64_t c = 0; c < cols; ++c) jac.at2(r, c) = gi[c];
    }
  }
  return jac;
}

// Jacobian of the pre-softmax logits w.r.t. the (flattened) input for one
// sample: K reverse passes, row k = d z_L^k / d x.
template <typename T>
Tensor<T> jacobian_full(Model<T>& m, const Tensor<T>& x) {
  if (m.training())
    throw std::runtime_error("jacobian_full: model must be in inference mode");
  if (x.dim(0) != 1)
    throw ShapeError("jacobian_full: expected a single sample, got batch of " +
                     std::to_string(x.dim(0)));
  m.set_input(x);
  m.graph.forward(m.probs_node);
  return jacobian_of_node(m.graph, m.logits_node, m.input_node);
}

// ||J(x)||_F^2, the Jacobian-regularization term for one input.
template <typename T>
double jr_term(Model<T>& m, const Tensor<T>& x) {
  Tensor<T> j = jacobian_full(m, x);
  double acc = 0.0;
  for (const T& v : j.data) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double mean_jr(Model<T>& m, const Tensor<T>& batch, int64_t max_samples = -1) {
  const int64_t n = max_samples < 0 ? batch.dim(0) : std::min(batch.dim(0), max_samples);
  const int64_t stride = batch.size() / batch.dim(0);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    Shape s = batch.shape;
    s[0] = 1;
    Tensor<T> xi(s);
    std::copy(batch.data.begin() + i * stride, batch.data.begin() + (i + 1) * stride,
              xi.data.begin());
    acc += jr_term(m, xi);
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

namespace detail {

// Inference-mode read of a weight value node (shadow or quantize-on-read).
template <typename T>
Tensor<T> read_weight(const Model<T>& m, int node_id) {
  const auto& n = m.graph.node(node_id);
  if (n.op == Op::Quantize)
    return quantize(n.qz.spec, m.graph.node(n.in[0]).value);
  return n.value;
}

}  // namespace detail

// Jacobian of one stage's map at a caller-supplied input (batch of one).
// The stage function is rebuilt in a standalone graph from the model's
// current inference-mode weight reads.
template <typename T>
Tensor<T> jacobian_stage(const Model<T>& m, size_t stage_idx, const Tensor<T>& z_prev) {
  const Stage& st = m.stages.at(stage_idx);
  if (z_prev.dim(0) != 1)
    throw ShapeError("jacobian_stage: expected a single sample");
  if (st.kind == StageKind::ResidualAdd) {
    // d(a+b)/da = I
    const int64_t d = z_prev.size();
    Tensor<T> jac({d, d});
    for (int64_t i = 0; i < d; ++i) jac.at2(i, i) = T(1);
    return jac;
  }
  Graph<T> g;
  int in = g.add_input("z_prev");
  int out = -1;
  const LayerSpec* l = st.layer_index >= 0
                           ? &m.spec.layers[static_cast<size_t>(st.layer_index)]
                           : nullptr;
  switch (st.kind) {
    case StageKind::AffineMap: {
      int w = g.add_constant(detail::read_weight(m, st.weight_nodes[0]), "w");
      if (st.op == Op::Dense) {
        out = g.dense(in, w, -1);
      } else if (st.op == Op::Conv2d) {
        // Pointwise halves of separable layers always run stride-1 valid.
        ConvAttrs a = l->kind == LayerKind::SeparableConv2d
                          ? ConvAttrs{1, 1, Padding::Valid}
                          : ConvAttrs{l->stride_h, l->stride_w, l->padding};
        out = g.conv2d(in, w, -1, a);
      } else {
        out = g.depthwise_conv2d(in, w, -1,
                                 ConvAttrs{l->stride_h, l->stride_w, l->padding});
      }
      break;
    }
    case StageKind::ActivationFn:
      out = st.op == Op::Relu ? g.relu(in)
            : st.op == Op::Sigmoid ? g.sigmoid(in)
                                   : g.softmax(in);
      break;
    case StageKind::BatchNormStage: {
      const auto& bn_node = m.graph.node(st.out_node);
      int gamma = g.add_constant(detail::read_weight(m, bn_node.in[1]), "gamma");
      int beta = g.add_constant(detail::read_weight(m, bn_node.in[2]), "beta");
      int mean = g.add_constant(m.graph.node(bn_node.in[3]).value, "mean");
      int var = g.add_constant(m.graph.node(bn_node.in[4]).value, "var");
      out = g.batchnorm(in, gamma, beta, mean, var, bn_node.bn);
      break;
    }
    case StageKind::PoolStage: {
      PoolAttrs a{l->pool_h, l->pool_w, l->stride_h, l->stride_w, l->padding};
      out = st.op == Op::MaxPool ? g.max_pool(in, a) : g.avg_pool(in, a);
      break;
    }
    case StageKind::FlattenStage:
      out = g.flatten(in);
      break;
    case StageKind::QuantStage:
      out = g.quantize_node(in, st.act_q, 0);
      break;
    case StageKind::ResidualAdd:
      break;  // handled above
  }
  g.set_value(in, z_prev);
  g.forward();
  return jacobian_of_node(g, out, in);
}

// Per-layer JR diagnostic: sum over stages of ||J_l(z_{l-1}(x_{i_l}))||_F^2
// with an independent uniformly drawn sample index per stage. Stages are the
// finest per-layer decomposition (affine maps, activations, batchnorm,
// pooling, reshapes); the final softmax head is excluded, matching the
// logits-space Jacobian convention.
template <typename T>
double per_layer_jr(Model<T>& m, const Tensor<T>& batch, Rng& rng) {
  if (m.training())
    throw std::runtime_error("per_layer_jr: model must be in inference mode");
  if (batch.dim(0) < 1) throw ShapeError("per_layer_jr: batch must be nonempty");
  m.set_input(batch);
  m.graph.forward(m.probs_node);
  // Snapshot stage inputs before mini-graph evaluation disturbs anything.
  std::vector<Tensor<T>> stage_inputs;
  stage_inputs.reserve(m.stages.size());
  for (const Stage& st : m.stages) stage_inputs.push_back(m.graph.value(st.in_node));

  double total = 0.0;
  for (size_t s = 0; s < m.stages.size(); ++s) {
    const Stage& st = m.stages[s];
    if (st.kind == StageKind::ActivationFn && st.act == Activation::Softmax) continue;
    const Tensor<T>& zin = stage_inputs[s];
    const int64_t i_l = rng.uniform_int(zin.dim(0));
    Shape row_shape = zin.shape;
    row_shape[0] = 1;
    const int64_t stride = zin.size() / zin.dim(0);
    Tensor<T> row(row_shape);
    std::copy(zin.data.begin() + i_l * stride, zin.data.begin() + (i_l + 1) * stride,
              row.data.begin());
    Tensor<T> j = jacobian_stage(m, s, row);
    for (const T& v : j.data) total += static_cast<double>(v) * static_cast<double>(v);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Sensitivity diagnostics: input/output l2 ratios, per-layer ratios, and the
// segment-sampled Frobenius bound check.
// ---------------------------------------------------------------------------

struct SensitivityReport {
  double input_ratio = 0.0;   // ||x_p - x_i|| / ||x_c - x_i||
  bool input_ratio_valid = false;
  double output_ratio = 0.0;  // ||z_L(x_p) - z_L(x_i)|| / ||z_L(x_c) - z_L(x_i)||
  bool output_ratio_valid = false;
  std::vector<double> per_layer_ratios;
  std::vector<uint8_t> per_layer_valid;
  double lhs_ratio = 0.0;     // ||z_L(x_p) - z_L(x_i)||^2 / ||x_p - x_i||^2
  bool lhs_valid = false;
  double frob_bound = 0.0;    // max ||J(x')||_F^2 over segment samples
  int segment_samples = 16;
  bool bound_holds = false;
};

namespace detail {

template <typename T>
double l2_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Probes the Frobenius-norm sensitivity bound: the squared output/input
// distortion ratio between x_i and a perturbed x_p must not exceed the
// maximal ||J||_F^2 along the segment between them (sampled at 16 equispaced
// points as a proxy for the mean-value point). Meaningful for smooth
// (sigmoid-only) networks; relu kinks void the mean-value assumption.
template <typename T>
SensitivityReport sensitivity_probe(Model<T>& m, const Tensor<T>& x_i,
                                    const Tensor<T>& x_c, const Tensor<T>& x_p) {
  SensitivityReport rep;
  auto layer_outputs = [&](const Tensor<T>& x) {
    m.set_input(x);
    m.graph.forward(m.probs_node);
    std::vector<Tensor<T>> outs;
    for (int id : m.layer_out_nodes) outs.push_back(m.graph.value(id));
    outs.push_back(m.graph.value(m.logits_node));
    return outs;
  };
  const auto oi = layer_outputs(x_i);
  const auto oc = layer_outputs(x_c);
  const auto op = layer_outputs(x_p);
  const size_t L = m.layer_out_nodes.size();

  const double din_p = detail::l2_diff(x_p, x_i);
  const double din_c = detail::l2_diff(x_c, x_i);
  if (din_c > 0.0) {
    rep.input_ratio = din_p / din_c;
    rep.input_ratio_valid = true;
  }
  const double dz_p = detail::l2_diff(op[L], oi[L]);
  const double dz_c = detail::l2_diff(oc[L], oi[L]);
  if (dz_c > 0.0) {
    rep.output_ratio = dz_p / dz_c;
    rep.output_ratio_valid = true;
  }
  for (size_t l = 0; l < L; ++l) {
    const double np = detail::l2_diff(op[l], oi[l]);
    const double nc = detail::l2_diff(oc[l], oi[l]);
    rep.per_layer_valid.push_back(nc > 0.0 ? 1 : 0);
    rep.per_layer_ratios.push_back(nc > 0.0 ? np / nc : 0.0);
  }
  if (din_p > 0.0) {
    rep.lhs_ratio = (dz_p * dz_p) / (din_p * din_p);
    rep.lhs_valid = true;
  }
  // Segment-sampled RHS of the bound.
  double bound = 0.0;
  for (int s = 0; s < rep.segment_samples; ++s) {
    const double t = rep.segment_samples == 1
                         ? 0.0
                         : static_cast<double>(s) / static_cast<double>(rep.segment_samples - 1);
    Tensor<T> x = x_i;
    for (int64_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<T>((1.0 - t) * static_cast<double>(x_i[i]) +
                            t * static_cast<double>(x_p[i]));
    bound = std::max(bound, jr_term(m, x));
  }
  rep.frob_bound = bound;
  rep.bound_holds = !rep.lhs_valid || rep.lhs_ratio <= bound * (1.0 + 1e-3);
  return rep;
}

}  // namespace qrobust
