#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qrobust/graph.hpp"
#include "qrobust/quantize.hpp"
#include "qrobust/rng.hpp"

namespace qrobust {

enum class LayerKind {
  Conv2d,
  DepthwiseConv2d,
  SeparableConv2d,
  Dense,
  BatchNorm,
  MaxPool,
  AvgPool,
  Flatten,
  Activation,
};

enum class Activation { None, Relu, Sigmoid, Softmax };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise_conv2d";
    case LayerKind::SeparableConv2d: return "separable_conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::AvgPool: return "avg_pool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Activation: return "activation";
  }
  return "?";
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::string name;
  int64_t units = 0;    // dense
  int64_t filters = 0;  // conv2d / separable pointwise
  int kernel_h = 3, kernel_w = 3;
  int stride_h = 1, stride_w = 1;
  Padding padding = Padding::Same;
  int pool_h = 2, pool_w = 2;
  Activation activation = Activation::None;
  QuantizerSpec weight_quantizer;      // applied on read to kernels and biases
  QuantizerSpec activation_quantizer;  // applied after the activation
  bool use_bias = true;
};

struct ResidualLink {
  int from = 0;  // source layer index; its output is added to layer `to`'s output
  int to = 0;
};

struct ModelSpec {
  Shape input_shape;  // per-sample shape, e.g. {32,32,1} or {D}
  std::vector<LayerSpec> layers;
  std::vector<ResidualLink> residual;
};

// ---------------------------------------------------------------------------
// Shape propagation / validation (also drives footprint accounting).
// ---------------------------------------------------------------------------

struct LayerShapes {
  Shape output;                     // per-sample output shape
  std::vector<Shape> param_shapes;  // kernels/biases/bn params, build order
  std::vector<std::string> param_names;
  int64_t trainable = 0;
  int64_t non_trainable = 0;
};

inline std::string layer_default_name(const LayerSpec& l, size_t idx) {
  return l.name.empty() ? "l" + std::to_string(idx) + "_" + layer_kind_name(l.kind)
                        : l.name;
}

inline std::vector<LayerShapes> infer_layer_shapes(const ModelSpec& spec) {
  if (spec.input_shape.empty())
    throw ConfigError("model: input_shape must be non-empty");
  std::vector<LayerShapes> out;
  Shape cur = spec.input_shape;  // per-sample
  auto need_rank3 = [&](const LayerSpec& l, size_t i) {
    if (cur.size() != 3)
      throw ConfigError("model: layer " + std::to_string(i) + " (" +
                        layer_kind_name(l.kind) + ") needs H x W x C input, got " +
                        shape_str(cur) + " (add a flatten layer before dense stacks)");
  };
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string nm = layer_default_name(l, i);
    LayerShapes ls;
    switch (l.kind) {
      case LayerKind::Conv2d: {
        need_rank3(l, i);
        if (l.filters <= 0) throw ConfigError("model: conv2d '" + nm + "' needs filters > 0");
        const int64_t c = cur[2];
        ls.param_shapes.push_back({l.kernel_h, l.kernel_w, c, l.filters});
        ls.param_names.push_back(nm + "/kernel");
        if (l.use_bias) {
          ls.param_shapes.push_back({l.filters});
          ls.param_names.push_back(nm + "/bias");
        }
        cur = {conv_out_extent(cur[0], l.kernel_h, l.stride_h, l.padding),
               conv_out_extent(cur[1], l.kernel_w, l.stride_w, l.padding), l.filters};
        break;
      }
      case LayerKind::DepthwiseConv2d: {
        need_rank3(l, i);
        const int64_t c = cur[2];
        ls.param_shapes.push_back({l.kernel_h, l.kernel_w, c});
        ls.param_names.push_back(nm + "/depthwise_kernel");
        if (l.use_bias) {
          ls.param_shapes.push_back({c});
          ls.param_names.push_back(nm + "/bias");
        }
        cur = {conv_out_extent(cur[0], l.kernel_h, l.stride_h, l.padding),
               conv_out_extent(cur[1], l.kernel_w, l.stride_w, l.padding), c};
        break;
      }
      case LayerKind::SeparableConv2d: {
        need_rank3(l, i);
        if (l.filters <= 0)
          throw ConfigError("model: separable_conv2d '" + nm + "' needs filters > 0");
        const int64_t c = cur[2];
        ls.param_shapes.push_back({l.kernel_h, l.kernel_w, c});
        ls.param_names.push_back(nm + "/depthwise_kernel");
        ls.param_shapes.push_back({1, 1, c, l.filters});
        ls.param_names.push_back(nm + "/pointwise_kernel");
        if (l.use_bias) {
          ls.param_shapes.push_back({l.filters});
          ls.param_names.push_back(nm + "/bias");
        }
        cur = {conv_out_extent(cur[0], l.kernel_h, l.stride_h, l.padding),
               conv_out_extent(cur[1], l.kernel_w, l.stride_w, l.padding), l.filters};
        break;
      }
      case LayerKind::Dense: {
        if (cur.size() != 1)
          throw ConfigError("model: dense '" + nm + "' needs flat input, got " +
                            shape_str(cur) + " (insert a flatten layer)");
        if (l.units <= 0) throw ConfigError("model: dense '" + nm + "' needs units > 0");
        ls.param_shapes.push_back({cur[0], l.units});
        ls.param_names.push_back(nm + "/kernel");
        if (l.use_bias) {
          ls.param_shapes.push_back({l.units});
          ls.param_names.push_back(nm + "/bias");
        }
        cur = {l.units};
        break;
      }
      case LayerKind::BatchNorm: {
        const int64_t c = cur.back();
        ls.param_shapes = {{c}, {c}, {c}, {c}};
        ls.param_names = {nm + "/gamma", nm + "/beta", nm + "/moving_mean",
                          nm + "/moving_variance"};
        ls.non_trainable = 2 * c;  // running statistics
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        need_rank3(l, i);
        cur = {conv_out_extent(cur[0], l.pool_h, l.stride_h, l.padding),
               conv_out_extent(cur[1], l.pool_w, l.stride_w, l.padding), cur[2]};
        break;
      }
      case LayerKind::Flatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::Activation:
        if (l.activation == Activation::None)
          throw ConfigError("model: activation layer '" + nm + "' needs an activation");
        break;
    }
    for (const Shape& s : ls.param_shapes) ls.trainable += shape_size(s);
    ls.trainable -= ls.non_trainable;
    ls.output = cur;
    out.push_back(std::move(ls));
  }

  for (const ResidualLink& r : spec.residual) {
    if (r.from < 0 || r.to < 0 || r.from >= static_cast<int>(spec.layers.size()) ||
        r.to >= static_cast<int>(spec.layers.size()) || r.from >= r.to)
      throw ConfigError("model: residual link " + std::to_string(r.from) + "->" +
                        std::to_string(r.to) + " must satisfy 0 <= from < to < layers");
    if (out[static_cast<size_t>(r.from)].output != out[static_cast<size_t>(r.to)].output)
      throw ConfigError("model: residual link " + std::to_string(r.from) + "->" +
                        std::to_string(r.to) + " joins incompatible shapes " +
                        shape_str(out[static_cast<size_t>(r.from)].output) + " vs " +
                        shape_str(out[static_cast<size_t>(r.to)].output));
  }
  if (spec.layers.empty()) throw ConfigError("model: at least one layer required");
  const LayerSpec& last = spec.layers.back();
  if (last.activation != Activation::Softmax)
    throw ConfigError("model: final layer must use the softmax activation");
  return out;
}

// ---------------------------------------------------------------------------
// Stages: the per-layer decomposition used by the regularizer machinery.
// ---------------------------------------------------------------------------

enum class StageKind {
  AffineMap,     // dense / conv2d / depthwise (weights via quantize-on-read)
  ActivationFn,  // relu / sigmoid / softmax
  BatchNormStage,
  PoolStage,
  FlattenStage,
  ResidualAdd,
  QuantStage,  // activation quantizer
};

struct Stage {
  StageKind kind;
  int layer_index;  // owning layer in ModelSpec, -1 for residual adds
  int in_node, out_node;
  Op op = Op::Input;                 // graph op behind AffineMap/PoolStage
  Activation act = Activation::None; // ActivationFn
  QuantizerSpec act_q;               // QuantStage
  std::vector<int> weight_nodes;     // weight value nodes as read by the op
  int residual_src = -1;             // ResidualAdd second input
};

// ---------------------------------------------------------------------------
// Model: spec + full-precision shadow weights + quantizer assignments,
// realized as one reusable graph. Weights are quantized on read; the
// optimizer only ever touches the shadow parameters.
// ---------------------------------------------------------------------------

template <typename T>
struct Model {
  ModelSpec spec;
  Graph<T> graph;
  int input_node = -1;
  int logits_node = -1;
  int probs_node = -1;
  std::vector<Stage> stages;
  std::vector<int> layer_out_nodes;     // post-activation/residual node per layer
  std::vector<int> weight_quant_nodes;  // sq-maskable quantize nodes (kernels+biases)
  int64_t trainable_count = 0;
  int64_t non_trainable_count = 0;
  int num_classes = 0;

  // Loss head bookkeeping (one head per model; managed by the train module).
  bool loss_built = false;
  double loss_lambda = 0.0;
  int loss_mode_tag = 0;
  int labels_node = -1;
  int cce_node = -1;
  int jr_node = -1;
  int loss_node = -1;
  std::vector<int> jr_row_selectors;

  void set_training(bool on) { graph.set_training(on); }
  bool training() const { return graph.training(); }

  // Gradient-free prediction surface: softmax class probabilities.
  Tensor<T> predict(const Tensor<T>& x) {
    if (training())
      throw std::runtime_error("predict: model must be in inference mode");
    set_input(x);
    graph.forward(probs_node);
    return graph.value(probs_node);
  }

  // Pre-softmax logits for the same input.
  Tensor<T> logits(const Tensor<T>& x) {
    set_input(x);
    graph.forward(probs_node);
    return graph.value(logits_node);
  }

  void set_input(const Tensor<T>& x) {
    if (x.rank() != static_cast<int>(spec.input_shape.size()) + 1)
      throw ShapeError("model input: expected batch of " + shape_str(spec.input_shape) +
                       ", got " + shape_str(x.shape));
    for (size_t i = 0; i < spec.input_shape.size(); ++i)
      if (x.shape[i + 1] != spec.input_shape[i])
        throw ShapeError("model input: expected batch of " + shape_str(spec.input_shape) +
                         ", got " + shape_str(x.shape));
    graph.set_value(input_node, x);
  }
};

namespace detail {

template <typename T>
int attach_weight(Model<T>& m, Tensor<T> init, const std::string& name,
                  const QuantizerSpec& q, uint64_t stream) {
  int shadow = m.graph.add_parameter(std::move(init), name, true);
  if (q.kind == QuantKind::Fp32) return shadow;
  int qn = m.graph.quantize_node(shadow, q, stream);
  m.weight_quant_nodes.push_back(qn);
  return qn;
}

template <typename T>
Tensor<T> he_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

}  // namespace detail

// Instantiates the layer graph with He-uniform kernel init, zero biases and
// identity batchnorm. `seed` fixes the initialization streams.
template <typename T>
Model<T> build_model(const ModelSpec& spec, uint64_t seed) {
  const std::vector<LayerShapes> shapes = infer_layer_shapes(spec);
  Model<T> m;
  m.spec = spec;
  m.input_node = m.graph.add_input("input");

  int cur = m.input_node;
  int logits = -1;

  auto add_stage = [&](Stage s) { m.stages.push_back(std::move(s)); };

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string nm = layer_default_name(l, i);
    Rng init_rng(derive_stream(seed, i, 0xC0DE));
    const uint64_t qstream_k = derive_stream(seed, i, 1);
    const uint64_t qstream_b = derive_stream(seed, i, 2);
    const int li = static_cast<int>(i);

    switch (l.kind) {
      case LayerKind::Conv2d: {
        const Shape& ks = shapes[i].param_shapes[0];
        const int64_t fan_in = ks[0] * ks[1] * ks[2];
        int k = detail::attach_weight(m, detail::he_uniform<T>(ks, fan_in, init_rng),
                                      nm + "/kernel", l.weight_quantizer, qstream_k);
        int b = -1;
        if (l.use_bias)
          b = detail::attach_weight(m, Tensor<T>::zeros({l.filters}), nm + "/bias",
                                    l.weight_quantizer, qstream_b);
        ConvAttrs a{l.stride_h, l.stride_w, l.padding};
        int out = m.graph.conv2d(cur, k, b, a);
        add_stage({StageKind::AffineMap, li, cur, out, Op::Conv2d, Activation::None,
                   {}, {k}, -1});
        cur = out;
        break;
      }
      case LayerKind::DepthwiseConv2d: {
        const Shape& ks = shapes[i].param_shapes[0];
        const int64_t fan_in = ks[0] * ks[1];
        int k = detail::attach_weight(m, detail::he_uniform<T>(ks, fan_in, init_rng),
                                      nm + "/depthwise_kernel", l.weight_quantizer,
                                      qstream_k);
        int b = -1;
        if (l.use_bias)
          b = detail::attach_weight(m, Tensor<T>::zeros({ks[2]}), nm + "/bias",
                                    l.weight_quantizer, qstream_b);
        ConvAttrs a{l.stride_h, l.stride_w, l.padding};
        int out = m.graph.depthwise_conv2d(cur, k, b, a);
        add_stage({StageKind::AffineMap, li, cur, out, Op::DepthwiseConv2d,
                   Activation::None, {}, {k}, -1});
        cur = out;
        break;
      }
      case LayerKind::SeparableConv2d: {
        // Wired as its exact decomposition: depthwise stage then 1x1
        // pointwise, so the per-stage machinery sees both maps.
        const Shape& dks = shapes[i].param_shapes[0];
        const Shape& pks = shapes[i].param_shapes[1];
        int dk = detail::attach_weight(
            m, detail::he_uniform<T>(dks, dks[0] * dks[1], init_rng),
            nm + "/depthwise_kernel", l.weight_quantizer, qstream_k);
        int pk = detail::attach_weight(
            m, detail::he_uniform<T>(pks, pks[2], init_rng), nm + "/pointwise_kernel",
            l.weight_quantizer, derive_stream(seed, i, 3));
        int b = -1;
        if (l.use_bias)
          b = detail::attach_weight(m, Tensor<T>::zeros({l.filters}), nm + "/bias",
                                    l.weight_quantizer, qstream_b);
        ConvAttrs a{l.stride_h, l.stride_w, l.padding};
        int mid = m.graph.depthwise_conv2d(cur, dk, -1, a);
        add_stage({StageKind::AffineMap, li, cur, mid, Op::DepthwiseConv2d,
                   Activation::None, {}, {dk}, -1});
        int out = m.graph.conv2d(mid, pk, b, ConvAttrs{1, 1, Padding::Valid});
        add_stage({StageKind::AffineMap, li, mid, out, Op::Conv2d, Activation::None,
                   {}, {pk}, -1});
        cur = out;
        break;
      }
      case LayerKind::Dense: {
        const Shape& ws = shapes[i].param_shapes[0];
        int w = detail::attach_weight(m, detail::he_uniform<T>(ws, ws[0], init_rng),
                                      nm + "/kernel", l.weight_quantizer, qstream_k);
        int b = -1;
        if (l.use_bias)
          b = detail::attach_weight(m, Tensor<T>::zeros({l.units}), nm + "/bias",
                                    l.weight_quantizer, qstream_b);
        int out = m.graph.dense(cur, w, b);
        add_stage({StageKind::AffineMap, li, cur, out, Op::Dense, Activation::None,
                   {}, {w}, -1});
        cur = out;
        break;
      }
      case LayerKind::BatchNorm: {
        const int64_t c = shapes[i].param_shapes[0][0];
        int gamma = m.graph.add_parameter(Tensor<T>::full({c}, T(1)), nm + "/gamma", true);
        int beta = m.graph.add_parameter(Tensor<T>::zeros({c}), nm + "/beta", true);
        int mean = m.graph.add_parameter(Tensor<T>::zeros({c}), nm + "/moving_mean", false);
        int var = m.graph.add_parameter(Tensor<T>::full({c}, T(1)), nm + "/moving_variance",
                                        false);
        int g = gamma, bt = beta;
        if (l.weight_quantizer.kind != QuantKind::Fp32) {
          g = m.graph.quantize_node(gamma, l.weight_quantizer, qstream_k);
          m.weight_quant_nodes.push_back(g);
          bt = m.graph.quantize_node(beta, l.weight_quantizer, qstream_b);
          m.weight_quant_nodes.push_back(bt);
        }
        int out = m.graph.batchnorm(cur, g, bt, mean, var, BatchNormAttrs{});
        add_stage({StageKind::BatchNormStage, li, cur, out, Op::BatchNorm,
                   Activation::None, {}, {g}, -1});
        cur = out;
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        PoolAttrs a{l.pool_h, l.pool_w, l.stride_h, l.stride_w, l.padding};
        int out = l.kind == LayerKind::MaxPool ? m.graph.max_pool(cur, a)
                                               : m.graph.avg_pool(cur, a);
        add_stage({StageKind::PoolStage, li, cur, out,
                   l.kind == LayerKind::MaxPool ? Op::MaxPool : Op::AvgPool,
                   Activation::None, {}, {}, -1});
        cur = out;
        break;
      }
      case LayerKind::Flatten: {
        int out = m.graph.flatten(cur);
        add_stage({StageKind::FlattenStage, li, cur, out, Op::Flatten, Activation::None,
                   {}, {}, -1});
        cur = out;
        break;
      }
      case LayerKind::Activation:
        break;  // handled below like attached activations
    }

    // Attached (or standalone) activation, then the activation quantizer.
    Activation act = l.activation;
    const bool qrelu = l.activation_quantizer.kind == QuantKind::QuantizedRelu;
    if (qrelu && act != Activation::Relu && act != Activation::None)
      throw ConfigError("model: '" + nm +
                        "': quantized_relu replaces the activation; declared activation must "
                        "be relu or none");
    if (act == Activation::Softmax) {
      logits = cur;
      int out = m.graph.softmax(cur);
      add_stage({StageKind::ActivationFn, li, cur, out, Op::Softmax, act, {}, {}, -1});
      cur = out;
    } else if (!qrelu && act != Activation::None) {
      int out = act == Activation::Relu ? m.graph.relu(cur) : m.graph.sigmoid(cur);
      add_stage({StageKind::ActivationFn, li, cur, out,
                 act == Activation::Relu ? Op::Relu : Op::Sigmoid, act, {}, {}, -1});
      cur = out;
    }
    if (l.activation_quantizer.kind != QuantKind::Fp32) {
      int out = m.graph.quantize_node(cur, l.activation_quantizer,
                                      derive_stream(seed, i, 4));
      Stage s{StageKind::QuantStage, li, cur, out, Op::Quantize, Activation::None,
              {}, {}, -1};
      s.act_q = l.activation_quantizer;
      add_stage(std::move(s));
      cur = out;
    }

    m.layer_out_nodes.push_back(cur);

    for (const ResidualLink& r : spec.residual) {
      if (r.to != static_cast<int>(i)) continue;
      int src = m.layer_out_nodes[static_cast<size_t>(r.from)];
      int out = m.graph.add(cur, src);
      add_stage({StageKind::ResidualAdd, -1, cur, out, Op::Add, Activation::None,
                 {}, {}, src});
      cur = out;
      m.layer_out_nodes.back() = cur;
    }
  }

  if (logits < 0) throw ConfigError("model: no softmax output found");
  m.logits_node = logits;
  // The probability head is the last node of the model prefix.
  m.probs_node = m.layer_out_nodes.back();
  for (size_t i = 0; i < shapes.size(); ++i) {
    m.trainable_count += shapes[i].trainable;
    m.non_trainable_count += shapes[i].non_trainable;
  }
  m.num_classes = static_cast<int>(shapes.back().output.back());
  return m;
}

// ---------------------------------------------------------------------------
// Footprint accounting (Table-style): weight payload only; biases at the
// layer's weight bit-width; batchnorm running statistics excluded.
// ---------------------------------------------------------------------------

struct FootprintLayer {
  std::string name;
  int64_t params = 0;
  int bits = 32;
  int64_t bytes = 0;  // ceil(params*bits/8)
};

struct FootprintReport {
  std::vector<FootprintLayer> per_layer;
  int64_t total_params = 0;
  int64_t total_bits = 0;
  int64_t total_bytes = 0;       // sum of per-layer ceil bytes
  double total_kb_exact = 0.0;   // total_bits/8/1024, no rounding

  double exact_bytes() const { return static_cast<double>(total_bits) / 8.0; }
};

inline FootprintReport footprint(const ModelSpec& spec) {
  const std::vector<LayerShapes> shapes = infer_layer_shapes(spec);
  FootprintReport rep;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const int64_t count = shapes[i].trainable;  // excludes bn running stats
    if (count == 0) continue;
    FootprintLayer fl;
    fl.name = layer_default_name(spec.layers[i], i);
    fl.params = count;
    fl.bits = bits_per_param(spec.layers[i].weight_quantizer);
    fl.bytes = (count * fl.bits + 7) / 8;
    rep.total_params += count;
    rep.total_bits += count * fl.bits;
    rep.total_bytes += fl.bytes;
    rep.per_layer.push_back(std::move(fl));
  }
  rep.total_kb_exact = static_cast<double>(rep.total_bits) / 8.0 / 1024.0;
  return rep;
}

template <typename T>
FootprintReport footprint(const Model<T>& m) {
  return footprint(m.spec);
}

// Same architecture under a uniform replacement scheme (Table-II-style rows).
inline FootprintReport footprint_with_scheme(ModelSpec spec, const QuantizerSpec& scheme) {
  for (auto& l : spec.layers) l.weight_quantizer = scheme;
  return footprint(spec);
}

}  // namespace qrobust
