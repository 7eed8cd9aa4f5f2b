#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "qrobust/data.hpp"
#include "qrobust/jacobian.hpp"
#include "qrobust/model.hpp"

namespace qrobust {

enum class JrMode { Off, Full, PerLayer };

inline const char* jr_mode_name(JrMode m) {
  switch (m) {
    case JrMode::Off: return "off";
    case JrMode::Full: return "full";
    case JrMode::PerLayer: return "per_layer";
  }
  return "?";
}

struct AdamaxConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

struct TrainConfig {
  int epochs = 50;  // desk-scale default; full-scale protocol uses 1000
  int batch_size = 64;
  double lr_min = 1e-6;
  double lr_max = 1e-3;
  AdamaxConfig adamax;
  double lambda_jr = 0.0;
  JrMode jr_mode = JrMode::PerLayer;
  std::optional<int> grad_quant_bits;
  std::optional<SqSchedule> sq_schedule;
  int jr_probe_samples = 32;  // per-epoch ||J||_F^2 diagnostics budget
  uint64_t seed = 0;
};

// lr(epoch) = lr_min + (lr_max - lr_min) * (1 + cos(pi*epoch/epochs)) / 2
inline double cosine_lr(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch > cfg.epochs)
    throw ConfigError("cosine_lr: epoch out of [0, epochs]");
  if (cfg.lr_min > cfg.lr_max) throw ConfigError("cosine_lr: lr_min > lr_max");
  const double t = cfg.epochs == 0 ? 0.0
                                   : static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * t));
}

// ---------------------------------------------------------------------------
// Adamax
// ---------------------------------------------------------------------------

template <typename T>
struct AdamaxState {
  std::vector<Tensor<T>> m;  // first moment
  std::vector<Tensor<T>> u;  // infinity-norm second moment
  int64_t t = 0;
};

template <typename T>
AdamaxState<T> adamax_init(const std::vector<Tensor<T>*>& params) {
  AdamaxState<T> st;
  for (const Tensor<T>* p : params) {
    st.m.push_back(Tensor<T>::zeros(p->shape));
    st.u.push_back(Tensor<T>::zeros(p->shape));
  }
  return st;
}

// m <- b1*m + (1-b1)*g;  u <- max(b2*u, |g|);
// theta <- theta - lr/(1 - b1^t) * m / (u + eps)
template <typename T>
void adamax_step(AdamaxState<T>& st, const std::vector<Tensor<T>*>& params,
                 const std::vector<Tensor<T>>& grads, double lr,
                 const AdamaxConfig& cfg = {}) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw ShapeError("adamax_step: state/params/grads size mismatch");
  st.t += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T step = static_cast<T>(lr / (1.0 - std::pow(cfg.beta1, static_cast<double>(st.t))));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& theta = *params[p];
    const Tensor<T>& g = grads[p];
    for (int64_t i = 0; i < theta.size(); ++i) {
      st.m[p][i] = b1 * st.m[p][i] + (T(1) - b1) * g[i];
      st.u[p][i] = std::max(b2 * st.u[p][i], std::abs(g[i]));
      theta[i] -= step * st.m[p][i] / (st.u[p][i] + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Joint loss: categorical cross-entropy plus the differentiable JR term.
// ---------------------------------------------------------------------------

struct LossHandles {
  int labels_node = -1;
  int cce_node = -1;
  int jr_node = -1;  // -1 when the regularizer is off
  int loss_node = -1;
  JrMode mode = JrMode::Off;
  std::vector<int> row_selectors;  // per-step random rows; full mode shares one row
};

namespace detail {

// Adjoint carried as [K, size(z)] matrices; entry (k, j) = d logit_k / d z_j.
// Free dimensions stay flattened, so reshape stages are identity.
template <typename T>
int flat_row(Graph<T>& g, int node) {
  return g.reshape(node, {1, -1});
}

// Multiplicity of each kernel tap: how many (output, input) cell pairs read
// it, per sample. ||J_conv||_F^2 = sum taps k^2 * multiplicity.
template <typename T>
Tensor<T> conv_tap_counts(const Shape& in_shape /*H,W,C per sample*/, const Shape& kshape,
                          int stride_h, int stride_w, Padding pad, bool depthwise) {
  const int64_t h = in_shape[0], w = in_shape[1];
  const int64_t kh = kshape[0], kw = kshape[1];
  const int64_t ho = conv_out_extent(h, kh, stride_h, pad);
  const int64_t wo = conv_out_extent(w, kw, stride_w, pad);
  const int64_t ph = conv_pad_before(h, kh, stride_h, pad);
  const int64_t pw = conv_pad_before(w, kw, stride_w, pad);
  auto count_axis = [](int64_t out, int64_t in, int64_t stride, int64_t pad_before,
                       int64_t k_idx) {
    int64_t c = 0;
    for (int64_t o = 0; o < out; ++o) {
      const int64_t i = o * stride - pad_before + k_idx;
      if (i >= 0 && i < in) ++c;
    }
    return c;
  };
  Tensor<T> counts(kshape);
  for (int64_t ki = 0; ki < kh; ++ki) {
    const int64_t ch = count_axis(ho, h, stride_h, ph, ki);
    for (int64_t kj = 0; kj < kw; ++kj) {
      const int64_t cw = count_axis(wo, w, stride_w, pw, kj);
      const T v = static_cast<T>(ch * cw);
      const int64_t inner = depthwise ? kshape[2] : kshape[2] * kshape[3];
      for (int64_t r = 0; r < inner; ++r) counts[(ki * kw + kj) * inner + r] = v;
    }
  }
  return counts;
}

// Per-sample input shape of each stage, derived from the layer shape chain.
inline std::vector<Shape> stage_input_shapes(const ModelSpec& spec,
                                             const std::vector<Stage>& stages) {
  const std::vector<LayerShapes> ls = infer_layer_shapes(spec);
  std::vector<Shape> out;
  Shape cur = spec.input_shape;
  int last_layer = -1;
  for (const Stage& st : stages) {
    if (st.layer_index >= 0 && st.layer_index != last_layer) {
      cur = st.layer_index == 0 ? spec.input_shape
                                : ls[static_cast<size_t>(st.layer_index - 1)].output;
      last_layer = st.layer_index;
    }
    out.push_back(cur);
    // advance through this stage
    const LayerSpec* l =
        st.layer_index >= 0 ? &spec.layers[static_cast<size_t>(st.layer_index)] : nullptr;
    switch (st.kind) {
      case StageKind::AffineMap:
        if (st.op == Op::Dense) {
          cur = {l->units};
        } else if (l->kind == LayerKind::SeparableConv2d && st.op == Op::Conv2d) {
          cur = {cur[0], cur[1], l->filters};  // pointwise 1x1
        } else {
          const int64_t c = st.op == Op::Conv2d ? l->filters : cur[2];
          cur = {conv_out_extent(cur[0], l->kernel_h, l->stride_h, l->padding),
                 conv_out_extent(cur[1], l->kernel_w, l->stride_w, l->padding), c};
        }
        break;
      case StageKind::PoolStage:
        cur = {conv_out_extent(cur[0], l->pool_h, l->stride_h, l->padding),
               conv_out_extent(cur[1], l->pool_w, l->stride_w, l->padding), cur[2]};
        break;
      case StageKind::FlattenStage:
        cur = {shape_size(cur)};
        break;
      default:
        break;  // shape preserved
    }
  }
  return out;
}

// Sum a list of scalar nodes.
template <typename T>
int sum_nodes(Graph<T>& g, const std::vector<int>& nodes) {
  if (nodes.empty()) return g.add_constant(Tensor<T>::scalar(T(0)), "jr_zero");
  int acc = nodes[0];
  for (size_t i = 1; i < nodes.size(); ++i) acc = g.add(acc, nodes[i]);
  return acc;
}

// ||J(x_r)||_F^2 as graph nodes: K adjoint rows propagated from the logits
// back to the model input with explicit ops, so one ordinary backward pass
// differentiates through the term (double backward). Dense-family stages
// only; convolutional models use the per-layer form.
template <typename T>
int build_full_jr(Model<T>& m, std::vector<int>& row_selectors) {
  Graph<T>& g = m.graph;
  const int K = m.num_classes;
  Tensor<T> eye({static_cast<int64_t>(K), static_cast<int64_t>(K)});
  for (int k = 0; k < K; ++k) eye.at2(k, k) = T(1);

  std::unordered_map<int, int> adjoint;  // forward node -> [K, size] adjoint node
  adjoint[m.logits_node] = g.add_constant(std::move(eye), "jr_seed");

  auto accumulate = [&](int node, int adj) {
    auto it = adjoint.find(node);
    if (it == adjoint.end())
      adjoint[node] = adj;
    else
      it->second = g.add(it->second, adj);
  };

  for (auto it = m.stages.rbegin(); it != m.stages.rend(); ++it) {
    const Stage& st = *it;
    auto found = adjoint.find(st.out_node);
    if (found == adjoint.end()) continue;  // outside the logits cone (softmax head)
    const int u_out = found->second;
    switch (st.kind) {
      case StageKind::AffineMap: {
        if (st.op != Op::Dense)
          throw ConfigError(
              "jr_mode=full supports dense-family models only; convolutional layers need "
              "jr_mode=per_layer");
        accumulate(st.in_node, g.matmul_tb(u_out, st.weight_nodes[0]));
        break;
      }
      case StageKind::ActivationFn: {
        if (st.act == Activation::Softmax)
          throw ConfigError("jr_mode=full: softmax inside the network is unsupported");
        int sel;
        if (st.act == Activation::Relu) {
          sel = g.select_row(st.in_node, 0);
          row_selectors.push_back(sel);
          accumulate(st.in_node, g.mul_rowb(u_out, g.heaviside(flat_row(g, sel))));
        } else {  // sigmoid: s(1-s) at the selected row
          sel = g.select_row(st.out_node, 0);
          row_selectors.push_back(sel);
          int srow = flat_row(g, sel);
          int deriv = g.mul(srow, g.affine(srow, T(-1), T(1)));
          accumulate(st.in_node, g.mul_rowb(u_out, deriv));
        }
        break;
      }
      case StageKind::BatchNormStage: {
        const auto& bn_node = g.node(st.out_node);
        int gamma_row = g.reshape(bn_node.in[1], {1, -1});
        int scale = g.mul(gamma_row, g.bn_inv_std(st.out_node));
        accumulate(st.in_node, g.mul_rowb(u_out, scale));
        break;
      }
      case StageKind::FlattenStage:
        accumulate(st.in_node, u_out);
        break;
      case StageKind::QuantStage: {
        int sel = g.select_row(st.in_node, 0);
        row_selectors.push_back(sel);
        accumulate(st.in_node, g.mul_rowb(u_out, g.ste_mask_node(flat_row(g, sel), st.act_q)));
        break;
      }
      case StageKind::ResidualAdd:
        accumulate(st.in_node, u_out);
        accumulate(st.residual_src, u_out);
        break;
      case StageKind::PoolStage:
        throw ConfigError(
            "jr_mode=full supports dense-family models only; pooling layers need "
            "jr_mode=per_layer");
    }
  }
  auto it = adjoint.find(m.input_node);
  if (it == adjoint.end())
    throw ConfigError("jr_mode=full: no differentiable path from logits to input");
  return g.sum_all(g.square(it->second));
}

// Per-layer JR: closed-form ||J_l||_F^2 per stage, each evaluated at an
// independently drawn batch row. Constant-Jacobian stages (pools, flatten,
// residual identity) contribute their exact constants with zero gradient.
template <typename T>
int build_per_layer_jr(Model<T>& m, std::vector<int>& row_selectors) {
  Graph<T>& g = m.graph;
  const std::vector<Shape> in_shapes = stage_input_shapes(m.spec, m.stages);
  std::vector<int> terms;
  for (size_t s = 0; s < m.stages.size(); ++s) {
    const Stage& st = m.stages[s];
    const Shape& in_shape = in_shapes[s];
    const LayerSpec* l =
        st.layer_index >= 0 ? &m.spec.layers[static_cast<size_t>(st.layer_index)] : nullptr;
    switch (st.kind) {
      case StageKind::AffineMap: {
        if (st.op == Op::Dense) {
          terms.push_back(g.sum_all(g.square(st.weight_nodes[0])));
        } else {
          // Kernel shape from the shadow parameter (a quantize node has no
          // value until the first forward pass).
          const auto& wn = g.node(st.weight_nodes[0]);
          const Shape kshape = wn.op == Op::Quantize ? g.node(wn.in[0]).value.shape
                                                     : wn.value.shape;
          const bool pointwise = l->kind == LayerKind::SeparableConv2d && st.op == Op::Conv2d;
          Tensor<T> counts = conv_tap_counts<T>(
              in_shape, kshape, pointwise ? 1 : l->stride_h, pointwise ? 1 : l->stride_w,
              pointwise ? Padding::Valid : l->padding, st.op == Op::DepthwiseConv2d);
          int cnode = g.add_constant(std::move(counts), "jr_tap_counts");
          terms.push_back(g.sum_all(g.mul(g.square(st.weight_nodes[0]), cnode)));
        }
        break;
      }
      case StageKind::ActivationFn: {
        if (st.act == Activation::Softmax) break;  // logits-space convention
        int sel;
        if (st.act == Activation::Relu) {
          sel = g.select_row(st.in_node, 0);
          row_selectors.push_back(sel);
          terms.push_back(g.sum_all(g.heaviside(sel)));
        } else {
          sel = g.select_row(st.out_node, 0);
          row_selectors.push_back(sel);
          int deriv = g.mul(sel, g.affine(sel, T(-1), T(1)));
          terms.push_back(g.sum_all(g.square(deriv)));
        }
        break;
      }
      case StageKind::BatchNormStage: {
        const auto& bn_node = g.node(st.out_node);
        int gamma_row = g.reshape(bn_node.in[1], {1, -1});
        int scale = g.mul(gamma_row, g.bn_inv_std(st.out_node));
        const T positions = static_cast<T>(shape_size(in_shape) / in_shape.back());
        terms.push_back(g.affine(g.sum_all(g.square(scale)), positions, T(0)));
        break;
      }
      case StageKind::PoolStage: {
        const int64_t out_size =
            conv_out_extent(in_shape[0], l->pool_h, l->stride_h, l->padding) *
            conv_out_extent(in_shape[1], l->pool_w, l->stride_w, l->padding) * in_shape[2];
        const double val = st.op == Op::MaxPool
                               ? static_cast<double>(out_size)
                               : static_cast<double>(out_size) /
                                     static_cast<double>(l->pool_h * l->pool_w);
        terms.push_back(g.add_constant(Tensor<T>::scalar(static_cast<T>(val)), "jr_pool"));
        break;
      }
      case StageKind::FlattenStage:
      case StageKind::ResidualAdd:
        terms.push_back(g.add_constant(
            Tensor<T>::scalar(static_cast<T>(shape_size(in_shape))), "jr_identity"));
        break;
      case StageKind::QuantStage: {
        int sel = g.select_row(st.in_node, 0);
        row_selectors.push_back(sel);
        terms.push_back(g.sum_all(g.ste_mask_node(sel, st.act_q)));
        break;
      }
    }
  }
  return detail::sum_nodes(g, terms);
}

}  // namespace detail

// Appends the loss head to the model graph: labels input, mean CCE over the
// batch, and (for lambda > 0) the JR term scaled by lambda. With lambda = 0
// the loss node is the CCE node itself. A model carries exactly one loss
// head; repeated calls must use the same (lambda, mode).
template <typename T>
LossHandles build_joint_loss(Model<T>& m, double lambda_jr, JrMode mode) {
  if (lambda_jr < 0) throw ConfigError("joint loss: lambda_jr must be >= 0");
  if (m.loss_built) {
    if (m.loss_lambda != lambda_jr || m.loss_mode_tag != static_cast<int>(mode))
      throw ConfigError(
          "joint loss: model already carries a loss head with different lambda/mode; "
          "build a fresh model");
    LossHandles h;
    h.mode = mode;
    h.labels_node = m.labels_node;
    h.cce_node = m.cce_node;
    h.jr_node = m.jr_node;
    h.loss_node = m.loss_node;
    h.row_selectors = m.jr_row_selectors;
    return h;
  }
  LossHandles h;
  h.mode = mode;
  h.labels_node = m.graph.add_input("labels");
  h.cce_node = m.graph.cce_from_logits(m.logits_node, h.labels_node);
  if (lambda_jr == 0.0 || mode == JrMode::Off) {
    h.loss_node = h.cce_node;
  } else {
    h.jr_node = mode == JrMode::Full ? detail::build_full_jr(m, h.row_selectors)
                                     : detail::build_per_layer_jr(m, h.row_selectors);
    h.loss_node = m.graph.add(
        h.cce_node, m.graph.affine(h.jr_node, static_cast<T>(lambda_jr), T(0)));
  }
  m.loss_built = true;
  m.loss_lambda = lambda_jr;
  m.loss_mode_tag = static_cast<int>(mode);
  m.labels_node = h.labels_node;
  m.cce_node = h.cce_node;
  m.jr_node = h.jr_node;
  m.loss_node = h.loss_node;
  m.jr_row_selectors = h.row_selectors;
  return h;
}

// Evaluates the joint loss on one batch (no parameter update).
template <typename T>
T evaluate_joint_loss(Model<T>& m, const LossHandles& h, const Tensor<T>& x,
                      const Tensor<T>& y, uint64_t row_seed = 0) {
  m.set_input(x);
  m.graph.set_value(h.labels_node, y);
  Rng rng(derive_stream(row_seed, 0x10E5));
  if (h.mode == JrMode::Full) {
    const int64_t r = rng.uniform_int(x.dim(0));
    for (int sel : h.row_selectors) m.graph.set_select_row(sel, r);
  } else {
    for (int sel : h.row_selectors)
      m.graph.set_select_row(sel, rng.uniform_int(x.dim(0)));
  }
  m.graph.forward();
  return m.graph.value(h.loss_node)[0];
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
  double loss = 0.0;      // mean batch loss
  double accuracy = 0.0;  // validation top-1, percent
  double mean_jr = 0.0;   // mean ||J||_F^2 on the probe subset
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;

  std::string to_csv() const {
    std::string out = "epoch,loss,acc,jr,lr\n";
    char buf[160];
    for (size_t e = 0; e < epochs.size(); ++e) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", e, epochs[e].loss,
                    epochs[e].accuracy, epochs[e].mean_jr, epochs[e].lr);
      out += buf;
    }
    return out;
  }
};

template <typename T>
Tensor<T> tensor_cast(const TensorF& t) {
  Tensor<T> out(t.shape);
  for (int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<T>(t[i]);
  return out;
}

template <typename T>
double top1_accuracy(Model<T>& m, const Tensor<T>& x, const Tensor<T>& y,
                     int64_t batch = 256) {
  const int64_t n = x.dim(0);
  const int64_t stride = x.size() / n;
  const int64_t k = y.dim(1);
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += batch) {
    const int64_t take = std::min(batch, n - at);
    Shape bs = x.shape;
    bs[0] = take;
    Tensor<T> bx(bs);
    std::copy(x.data.begin() + at * stride, x.data.begin() + (at + take) * stride,
              bx.data.begin());
    Tensor<T> probs = m.predict(bx);
    for (int64_t i = 0; i < take; ++i) {
      int64_t pred = 0, truth = 0;
      for (int64_t j = 1; j < k; ++j) {
        if (probs.at2(i, j) > probs.at2(i, pred)) pred = j;
        if (y.at2(at + i, j) > y.at2(at + i, truth)) truth = j;
      }
      if (pred == truth) ++correct;
    }
  }
  return n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

namespace detail {

// DoReFa-style stochastic gradient quantization: normalize by max|g|, round
// on the k-bit [0,1] grid stochastically, map back.
template <typename T>
void quantize_gradient(Tensor<T>& g, int bits, Rng& rng) {
  T s = T(0);
  for (const T& v : g.data) s = std::max(s, std::abs(v));
  if (s == T(0)) return;
  const double levels = std::ldexp(1.0, bits) - 1.0;
  for (auto& v : g.data) {
    const double u = (static_cast<double>(v) / static_cast<double>(s) + 1.0) / 2.0;
    const double scaled = u * levels;
    double lo = std::floor(scaled);
    const double frac = scaled - lo;
    if (rng.uniform() < frac) lo += 1.0;
    v = static_cast<T>((2.0 * (lo / levels) - 1.0) * static_cast<double>(s));
  }
}

}  // namespace detail

// Quantization-aware training: per step the shadow weights are read through
// their quantizers (with the stochastic-portion mask when a schedule is
// active), the forward/backward pass runs on the quantized reads, gradients
// are optionally quantized stochastically, and Adamax updates the
// full-precision shadow state. Deterministic given cfg.seed.
template <typename T>
TrainLog train(Model<T>& m, const Dataset& data, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("train: epochs must be >= 0");

  const std::vector<int64_t> train_idx = split_indices(data, Split::Train);
  std::vector<int64_t> val_idx = split_indices(data, Split::Test);
  if (train_idx.empty()) throw ConfigError("train: no training samples in dataset");
  if (val_idx.empty()) val_idx = train_idx;  // degenerate but usable

  const Dataset train_set = dataset_subset(data, train_idx);
  const Dataset val_set = dataset_subset(data, val_idx);
  const Tensor<T> tx = tensor_cast<T>(train_set.inputs);
  const Tensor<T> ty = tensor_cast<T>(train_set.labels);
  const Tensor<T> vx = tensor_cast<T>(val_set.inputs);
  const Tensor<T> vy = tensor_cast<T>(val_set.labels);

  LossHandles loss = build_joint_loss(m, cfg.lambda_jr, cfg.jr_mode);

  std::vector<Tensor<T>*> params;
  std::vector<int> param_ids;
  for (int id : m.graph.parameters())
    if (m.graph.node(id).trainable) {
      params.push_back(&m.graph.node(id).value);
      param_ids.push_back(id);
    }
  AdamaxState<T> opt = adamax_init(params);

  const int64_t n = tx.dim(0);
  const int64_t stride = tx.size() / n;
  const int64_t k = ty.dim(1);
  TrainLog log;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg, epoch);
    // Per-epoch shuffled batch order.
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(derive_stream(cfg.seed, 0xE90C, static_cast<uint64_t>(epoch)));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);

    const double ratio =
        cfg.sq_schedule ? sq_ratio(*cfg.sq_schedule, epoch) : 1.0;

    m.set_training(true);
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t at = 0; at < n; at += cfg.batch_size, ++batches) {
      const int64_t take = std::min<int64_t>(cfg.batch_size, n - at);
      Shape bs = tx.shape;
      bs[0] = take;
      Tensor<T> bx(bs);
      Tensor<T> by({take, k});
      for (int64_t i = 0; i < take; ++i) {
        const int64_t src = order[static_cast<size_t>(at + i)];
        std::copy(tx.data.begin() + src * stride, tx.data.begin() + (src + 1) * stride,
                  bx.data.begin() + i * stride);
        std::copy(ty.data.begin() + src * k, ty.data.begin() + (src + 1) * k,
                  by.data.begin() + i * k);
      }
      m.set_input(bx);
      m.graph.set_value(loss.labels_node, std::move(by));

      Rng row_rng(derive_stream(cfg.seed, 0x5E1E, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(batches)));
      if (loss.mode == JrMode::Full) {
        const int64_t r = row_rng.uniform_int(take);
        for (int sel : loss.row_selectors) m.graph.set_select_row(sel, r);
      } else {
        for (int sel : loss.row_selectors)
          m.graph.set_select_row(sel, row_rng.uniform_int(take));
      }

      if (cfg.sq_schedule) {
        size_t qi = 0;
        for (int qn : m.weight_quant_nodes) {
          auto& qs = m.graph.quantize_state(qn);
          const Tensor<T>& shadow = m.graph.value(m.graph.node(qn).in[0]);
          Tensor<T> err = quantization_error(
              QuantizerSpec{deterministic_kind(qs.spec.kind), qs.spec.bits,
                            qs.spec.integer_bits, qs.spec.symmetric, qs.spec.seed},
              shadow);
          Rng mask_rng(derive_stream(cfg.seed, 0x50E1 + qi++,
                                     static_cast<uint64_t>(epoch),
                                     static_cast<uint64_t>(batches)));
          qs.mask = sq_select(err, ratio, mask_rng);
        }
      }

      m.graph.forward();
      const double batch_loss = static_cast<double>(m.graph.value(loss.loss_node)[0]);
      if (!std::isfinite(batch_loss))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches));
      loss_sum += batch_loss;

      m.graph.zero_grad();
      m.graph.backward(loss.loss_node);
      std::vector<Tensor<T>> grads;
      grads.reserve(params.size());
      for (size_t p = 0; p < param_ids.size(); ++p) {
        const auto& node = m.graph.node(param_ids[p]);
        grads.push_back(node.has_grad ? node.grad : Tensor<T>::zeros(node.value.shape));
      }
      if (cfg.grad_quant_bits) {
        for (size_t p = 0; p < grads.size(); ++p) {
          Rng grng(derive_stream(cfg.seed, 0x69AD + p, static_cast<uint64_t>(epoch),
                                 static_cast<uint64_t>(batches)));
          detail::quantize_gradient(grads[p], *cfg.grad_quant_bits, grng);
        }
      }
      adamax_step(opt, params, grads, lr, cfg.adamax);
    }

    m.set_training(false);
    EpochRecord rec;
    rec.lr = lr;
    rec.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.accuracy = top1_accuracy(m, vx, vy);
    rec.mean_jr = cfg.jr_probe_samples > 0 ? mean_jr(m, vx, cfg.jr_probe_samples) : 0.0;
    log.epochs.push_back(rec);
  }

  m.set_training(false);
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

}  // namespace qrobust
