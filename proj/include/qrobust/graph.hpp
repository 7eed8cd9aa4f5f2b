#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "qrobust/ops.hpp"
#include "qrobust/quantize.hpp"
#include "qrobust/rng.hpp"

namespace qrobust {

// Node operations. The first block is the model-facing op set; the second is
// plumbing used for losses and the differentiable regularizer terms.
enum class Op {
  Input,
  Param,
  Const,
  Dense,
  Conv2d,
  DepthwiseConv2d,
  SeparableConv2d,
  BatchNorm,
  Relu,
  Sigmoid,
  Softmax,
  Add,
  MaxPool,
  AvgPool,
  Flatten,
  Reshape,
  Matmul,      // a[N,M] * b[M,K]
  MatmulTB,    // a[N,M] * b[K,M]^T
  Mul,         // elementwise
  MulRowB,     // x[R,C] * row[1,C] broadcast over rows
  Square,
  SumAll,      // -> [1]
  Affine,      // a*x + b, scalar a,b
  Heaviside,   // 1[x>0], zero gradient
  SelectRow,   // x[N,...] -> [1,...] at a mutable row index
  CceFromLogits,
  Quantize,    // quantize-on-read with STE backward
  BnInvStd,    // snapshot of a batchnorm node's 1/sqrt(var+eps), zero gradient
  SteMask,     // STE pass-through mask of a quantizer at this input, zero gradient
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Const: return "const";
    case Op::Dense: return "dense";
    case Op::Conv2d: return "conv2d";
    case Op::DepthwiseConv2d: return "depthwise_conv2d";
    case Op::SeparableConv2d: return "separable_conv2d";
    case Op::BatchNorm: return "batchnorm";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softmax: return "softmax";
    case Op::Add: return "add";
    case Op::MaxPool: return "max_pool";
    case Op::AvgPool: return "avg_pool";
    case Op::Flatten: return "flatten";
    case Op::Reshape: return "reshape";
    case Op::Matmul: return "matmul";
    case Op::MatmulTB: return "matmul_tb";
    case Op::Mul: return "mul";
    case Op::MulRowB: return "mul_rowb";
    case Op::Square: return "square";
    case Op::SumAll: return "sum_all";
    case Op::Affine: return "affine";
    case Op::Heaviside: return "heaviside";
    case Op::SelectRow: return "select_row";
    case Op::CceFromLogits: return "cce_from_logits";
    case Op::Quantize: return "quantize";
    case Op::BnInvStd: return "bn_inv_std";
    case Op::SteMask: return "ste_mask";
  }
  return "?";
}

// Reverse-mode tape over Tensor<T>. Nodes are appended in topological order;
// forward() re-executes the whole tape against the current leaf values, so a
// graph built once serves every training step. backward() visits each node
// exactly once in reverse order.
template <typename T>
class Graph {
 public:
  struct QuantizeState {
    QuantizerSpec spec;
    uint64_t stream = 0;   // rng stream seed
    uint64_t counter = 0;  // advanced once per stochastic forward
    std::vector<uint8_t> mask;  // optional sq mask; empty = quantize all
  };

  struct Node {
    Op op = Op::Input;
    std::vector<int> in;
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool trainable = false;
    std::string name;
    // op attributes
    ConvAttrs conv;
    PoolAttrs pool;
    BatchNormAttrs bn;
    T affine_a = T(1), affine_b = T(0);
    int64_t row_index = 0;
    Shape reshape_to;
    QuantizeState qz;
    // saved forward context
    BatchNormCtx<T> bn_ctx;
    std::vector<int64_t> argmax;
    Tensor<T> saved;  // separable intermediate
  };

  // --- leaves -------------------------------------------------------------

  int add_input(const std::string& name = "input") {
    Node n;
    n.op = Op::Input;
    n.name = name;
    return push(std::move(n));
  }

  int add_parameter(Tensor<T> v, const std::string& name, bool trainable = true) {
    Node n;
    n.op = Op::Param;
    n.value = std::move(v);
    n.name = name;
    n.trainable = trainable;
    int id = push(std::move(n));
    params_.push_back(id);
    return id;
  }

  int add_constant(Tensor<T> v, const std::string& name = "const") {
    Node n;
    n.op = Op::Const;
    n.value = std::move(v);
    n.name = name;
    return push(std::move(n));
  }

  // --- model ops ----------------------------------------------------------

  int dense(int x, int w, int b = -1) { return op2or3(Op::Dense, x, w, b); }
  int conv2d(int x, int k, int b, const ConvAttrs& a) {
    int id = op2or3(Op::Conv2d, x, k, b);
    nodes_[id].conv = a;
    return id;
  }
  int depthwise_conv2d(int x, int k, int b, const ConvAttrs& a) {
    int id = op2or3(Op::DepthwiseConv2d, x, k, b);
    nodes_[id].conv = a;
    return id;
  }
  int separable_conv2d(int x, int dk, int pk, int pb, const ConvAttrs& a) {
    Node n;
    n.op = Op::SeparableConv2d;
    n.in = {x, dk, pk};
    if (pb >= 0) n.in.push_back(pb);
    n.conv = a;
    return push(std::move(n));
  }
  int batchnorm(int x, int gamma, int beta, int mean, int var, const BatchNormAttrs& a) {
    Node n;
    n.op = Op::BatchNorm;
    n.in = {x, gamma, beta, mean, var};
    n.bn = a;
    return push(std::move(n));
  }
  int relu(int x) { return op1(Op::Relu, x); }
  int sigmoid(int x) { return op1(Op::Sigmoid, x); }
  int softmax(int x) { return op1(Op::Softmax, x); }
  int add(int a, int b) { return op2(Op::Add, a, b); }
  int max_pool(int x, const PoolAttrs& a) {
    int id = op1(Op::MaxPool, x);
    nodes_[id].pool = a;
    return id;
  }
  int avg_pool(int x, const PoolAttrs& a) {
    int id = op1(Op::AvgPool, x);
    nodes_[id].pool = a;
    return id;
  }
  int flatten(int x) { return op1(Op::Flatten, x); }
  int reshape(int x, Shape to) {
    int id = op1(Op::Reshape, x);
    nodes_[id].reshape_to = std::move(to);
    return id;
  }

  // --- plumbing ops -------------------------------------------------------

  int matmul(int a, int b) { return op2(Op::Matmul, a, b); }
  int matmul_tb(int a, int b) { return op2(Op::MatmulTB, a, b); }
  int mul(int a, int b) { return op2(Op::Mul, a, b); }
  int mul_rowb(int x, int row) { return op2(Op::MulRowB, x, row); }
  int square(int x) { return op1(Op::Square, x); }
  int sum_all(int x) { return op1(Op::SumAll, x); }
  int affine(int x, T a, T b) {
    int id = op1(Op::Affine, x);
    nodes_[id].affine_a = a;
    nodes_[id].affine_b = b;
    return id;
  }
  int heaviside(int x) { return op1(Op::Heaviside, x); }
  int select_row(int x, int64_t row = 0) {
    int id = op1(Op::SelectRow, x);
    nodes_[id].row_index = row;
    return id;
  }
  int cce_from_logits(int z, int y) { return op2(Op::CceFromLogits, z, y); }
  int quantize_node(int x, const QuantizerSpec& spec, uint64_t stream) {
    int id = op1(Op::Quantize, x);
    nodes_[id].qz.spec = spec;
    nodes_[id].qz.stream = stream;
    return id;
  }
  int bn_inv_std(int bn_node) {
    if (nodes_[bn_node].op != Op::BatchNorm)
      throw ShapeError("bn_inv_std: input is not a batchnorm node");
    return op1(Op::BnInvStd, bn_node);
  }
  int ste_mask_node(int x, const QuantizerSpec& spec) {
    int id = op1(Op::SteMask, x);
    nodes_[id].qz.spec = spec;
    return id;
  }

  // --- access ---------------------------------------------------------------

  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const std::vector<int>& parameters() const { return params_; }

  void set_value(int id, Tensor<T> v) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.op != Op::Input && n.op != Op::Param && n.op != Op::Const)
      throw ShapeError("set_value: node " + std::to_string(id) + " (" + op_name(n.op) +
                       ") is not a leaf");
    n.value = std::move(v);
    forward_valid_ = false;
  }
  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor<T>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].has_grad; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  void set_select_row(int id, int64_t row) {
    if (nodes_[static_cast<size_t>(id)].op != Op::SelectRow)
      throw ShapeError("set_select_row: node is not select_row");
    nodes_[static_cast<size_t>(id)].row_index = row;
  }
  QuantizeState& quantize_state(int id) {
    if (nodes_[static_cast<size_t>(id)].op != Op::Quantize)
      throw ShapeError("quantize_state: node is not quantize");
    return nodes_[static_cast<size_t>(id)].qz;
  }

  // --- execution ------------------------------------------------------------

  // Re-executes the tape against the current leaf values. A non-negative
  // `up_to` runs only the prefix [0, up_to]; later nodes keep stale values
  // and backward() from inside the prefix stays valid.
  void forward(int up_to = -1) {
    const int last = up_to < 0 ? size() - 1 : up_to;
    for (int i = 0; i <= last; ++i) forward_one(i);
    forward_valid_ = true;
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.grad = Tensor<T>();
      n.has_grad = false;
    }
  }

  // Reverse pass from a scalar loss node.
  void backward(int loss) {
    const Tensor<T>& lv = nodes_[static_cast<size_t>(loss)].value;
    if (lv.size() != 1)
      throw ShapeError("backward: loss node must be scalar, got " + shape_str(lv.shape));
    backward_from(loss, Tensor<T>::scalar(T(1)));
  }

  // Reverse pass seeded with an arbitrary cotangent at `out`.
  void backward_from(int out, Tensor<T> seed) {
    if (!forward_valid_)
      throw std::runtime_error("backward: no valid forward pass on this graph");
    if (!seed.same_shape(nodes_[static_cast<size_t>(out)].value))
      throw ShapeError("backward: seed shape " + shape_str(seed.shape) +
                       " != node value shape " +
                       shape_str(nodes_[static_cast<size_t>(out)].value.shape));
    accumulate_grad(out, std::move(seed));
    for (int i = out; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.has_grad) continue;
      backward_one(i);
    }
  }

  // Gradient map for every registered parameter and every graph input.
  std::unordered_map<int, Tensor<T>> gradients() const {
    std::unordered_map<int, Tensor<T>> out;
    for (int i = 0; i < size(); ++i) {
      const Node& n = nodes_[static_cast<size_t>(i)];
      if ((n.op == Op::Param || n.op == Op::Input) && n.has_grad) out[i] = n.grad;
    }
    return out;
  }

  // Concatenated discrete decisions of the current forward pass (relu signs,
  // pool argmax picks). Finite-difference checks exclude coordinates whose
  // two evaluations disagree here, since the loss is non-smooth across them.
  std::vector<int64_t> kink_signature() const {
    std::vector<int64_t> sig;
    for (const auto& n : nodes_) {
      if (n.op == Op::Relu || n.op == Op::Heaviside) {
        const Tensor<T>& x = nodes_[static_cast<size_t>(n.in[0])].value;
        for (int64_t i = 0; i < x.size(); ++i) sig.push_back(x[i] > T(0) ? 1 : 0);
      } else if (n.op == Op::MaxPool) {
        sig.insert(sig.end(), n.argmax.begin(), n.argmax.end());
      }
    }
    return sig;
  }

  // True when some loss->leaf path passes through an op whose analytic
  // gradient is deliberately not the true derivative (quantize STE,
  // heaviside-style frozen masks). Finite differences cannot be expected to
  // agree with backward() for such leaves.
  bool path_has_approx_grad(int loss, int leaf) const {
    std::vector<int8_t> in_cone(nodes_.size(), 0);  // ancestors of loss, inclusive
    collect_cone(loss, in_cone);
    std::vector<int8_t> hits_leaf(nodes_.size(), -1);  // memo: leaf reachable from node
    for (int i = 0; i < size(); ++i) {
      if (!in_cone[static_cast<size_t>(i)]) continue;
      const Node& n = nodes_[static_cast<size_t>(i)];
      const bool approx =
          (n.op == Op::Quantize && n.qz.spec.kind != QuantKind::Fp32) ||
          n.op == Op::Heaviside || n.op == Op::BnInvStd || n.op == Op::SteMask;
      if (!approx) continue;
      if (cone_memo(i, leaf, hits_leaf)) return true;
    }
    return false;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> params_;
  bool training_ = false;
  bool forward_valid_ = false;

  int push(Node n) {
    for (int i : n.in)
      if (i < 0 || i >= size())
        throw ShapeError(std::string(op_name(n.op)) + ": input node id out of range");
    nodes_.push_back(std::move(n));
    forward_valid_ = false;
    return size() - 1;
  }
  int op1(Op op, int x) {
    Node n;
    n.op = op;
    n.in = {x};
    return push(std::move(n));
  }
  int op2(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.in = {a, b};
    return push(std::move(n));
  }
  int op2or3(Op op, int a, int b, int c) {
    Node n;
    n.op = op;
    n.in = {a, b};
    if (c >= 0) n.in.push_back(c);
    return push(std::move(n));
  }

  const Tensor<T>& in_val(const Node& n, size_t i) const {
    return nodes_[static_cast<size_t>(n.in[i])].value;
  }

  void accumulate_grad(int id, Tensor<T> g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      if (!n.grad.same_shape(g))
        throw ShapeError("grad accumulate: shape mismatch at node " + std::to_string(id));
      for (int64_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  void forward_one(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::Input:
      case Op::Param:
      case Op::Const:
        if (n.value.data.empty())
          throw std::runtime_error("forward: leaf node '" + n.name + "' has no value");
        return;
      case Op::Dense: {
        const Tensor<T>* b = n.in.size() > 2 ? &in_val(n, 2) : nullptr;
        n.value = dense_forward(in_val(n, 0), in_val(n, 1), b);
        return;
      }
      case Op::Conv2d: {
        const Tensor<T>* b = n.in.size() > 2 ? &in_val(n, 2) : nullptr;
        n.value = conv2d_forward(in_val(n, 0), in_val(n, 1), b, n.conv);
        return;
      }
      case Op::DepthwiseConv2d: {
        const Tensor<T>* b = n.in.size() > 2 ? &in_val(n, 2) : nullptr;
        n.value = depthwise_forward(in_val(n, 0), in_val(n, 1), b, n.conv);
        return;
      }
      case Op::SeparableConv2d: {
        // Depthwise stage then 1x1 pointwise, exactly the two primitive
        // kernels in sequence (bitwise equal to composing them).
        n.saved = depthwise_forward(in_val(n, 0), in_val(n, 1), static_cast<const Tensor<T>*>(nullptr), n.conv);
        const Tensor<T>* pb = n.in.size() > 3 ? &in_val(n, 3) : nullptr;
        n.value = conv2d_forward(n.saved, in_val(n, 2), pb, ConvAttrs{1, 1, Padding::Valid});
        return;
      }
      case Op::BatchNorm: {
        Node& mean_node = nodes_[static_cast<size_t>(n.in[3])];
        Node& var_node = nodes_[static_cast<size_t>(n.in[4])];
        if (training_)
          n.value = batchnorm_train_forward(in_val(n, 0), in_val(n, 1), in_val(n, 2),
                                            mean_node.value, var_node.value, n.bn, n.bn_ctx);
        else
          n.value = batchnorm_infer_forward(in_val(n, 0), in_val(n, 1), in_val(n, 2),
                                            mean_node.value, var_node.value, n.bn, n.bn_ctx);
        return;
      }
      case Op::Relu:
        n.value = relu_forward(in_val(n, 0));
        return;
      case Op::Sigmoid:
        n.value = sigmoid_forward(in_val(n, 0));
        return;
      case Op::Softmax:
        n.value = softmax_forward(in_val(n, 0));
        return;
      case Op::Add: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        if (!a.same_shape(b))
          throw ShapeError("add: shape " + shape_str(a.shape) + " != " + shape_str(b.shape));
        n.value = a;
        for (int64_t i = 0; i < b.size(); ++i) n.value[i] += b[i];
        return;
      }
      case Op::MaxPool:
        n.value = maxpool_forward(in_val(n, 0), n.pool, n.argmax);
        return;
      case Op::AvgPool:
        n.value = avgpool_forward(in_val(n, 0), n.pool);
        return;
      case Op::Flatten: {
        const Tensor<T>& x = in_val(n, 0);
        if (x.rank() < 2) throw ShapeError("flatten: input rank must be >= 2");
        n.value = x.reshaped({x.dim(0), x.size() / x.dim(0)});
        return;
      }
      case Op::Reshape: {
        const Tensor<T>& x = in_val(n, 0);
        Shape to = n.reshape_to;
        int64_t rest = 1;
        int infer = -1;
        for (size_t i = 0; i < to.size(); ++i) {
          if (to[i] == -1) infer = static_cast<int>(i);
          else rest *= to[i];
        }
        if (infer >= 0) to[static_cast<size_t>(infer)] = x.size() / rest;
        n.value = x.reshaped(to);
        return;
      }
      case Op::Matmul: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
          throw ShapeError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
        n.value = Tensor<T>({a.dim(0), b.dim(1)});
        as_matrix(n.value, a.dim(0), b.dim(1)).noalias() =
            as_matrix(a, a.dim(0), a.dim(1)) * as_matrix(b, b.dim(0), b.dim(1));
        return;
      }
      case Op::MatmulTB: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
          throw ShapeError("matmul_tb: " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
        n.value = Tensor<T>({a.dim(0), b.dim(0)});
        as_matrix(n.value, a.dim(0), b.dim(0)).noalias() =
            as_matrix(a, a.dim(0), a.dim(1)) * as_matrix(b, b.dim(0), b.dim(1)).transpose();
        return;
      }
      case Op::Mul: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        if (!a.same_shape(b))
          throw ShapeError("mul: shape " + shape_str(a.shape) + " != " + shape_str(b.shape));
        n.value = a;
        for (int64_t i = 0; i < b.size(); ++i) n.value[i] *= b[i];
        return;
      }
      case Op::MulRowB: {
        const Tensor<T>& x = in_val(n, 0);
        const Tensor<T>& r = in_val(n, 1);
        const int64_t cols = x.dim(x.rank() - 1);
        if (r.size() != cols)
          throw ShapeError("mul_rowb: row length " + std::to_string(r.size()) +
                           " != columns " + std::to_string(cols));
        n.value = x;
        const int64_t rows = x.size() / cols;
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j) n.value[i * cols + j] *= r[j];
        return;
      }
      case Op::Square:
        n.value = in_val(n, 0);
        for (auto& v : n.value.data) v *= v;
        return;
      case Op::SumAll: {
        T acc = T(0);
        for (const T& v : in_val(n, 0).data) acc += v;
        n.value = Tensor<T>::scalar(acc);
        return;
      }
      case Op::Affine:
        n.value = in_val(n, 0);
        for (auto& v : n.value.data) v = n.affine_a * v + n.affine_b;
        return;
      case Op::Heaviside:
        n.value = in_val(n, 0);
        for (auto& v : n.value.data) v = v > T(0) ? T(1) : T(0);
        return;
      case Op::SelectRow: {
        const Tensor<T>& x = in_val(n, 0);
        if (n.row_index < 0 || n.row_index >= x.dim(0))
          throw ShapeError("select_row: row " + std::to_string(n.row_index) +
                           " out of range [0," + std::to_string(x.dim(0)) + ")");
        Shape out_shape = x.shape;
        out_shape[0] = 1;
        const int64_t stride = x.size() / x.dim(0);
        Tensor<T> y(out_shape);
        std::copy(x.data.begin() + n.row_index * stride,
                  x.data.begin() + (n.row_index + 1) * stride, y.data.begin());
        n.value = std::move(y);
        return;
      }
      case Op::CceFromLogits:
        n.value = Tensor<T>::scalar(cce_from_logits_forward(in_val(n, 0), in_val(n, 1)));
        return;
      case Op::Quantize: {
        const Tensor<T>& x = in_val(n, 0);
        Tensor<T> q;
        if (training_ && is_stochastic(n.qz.spec.kind)) {
          Rng rng(derive_stream(n.qz.spec.seed, n.qz.stream, n.qz.counter));
          n.qz.counter++;
          q = quantize_stochastic(n.qz.spec, x, rng);
        } else {
          q = quantize(n.qz.spec, x);
        }
        if (!n.qz.mask.empty()) {
          if (static_cast<int64_t>(n.qz.mask.size()) != x.size())
            throw ShapeError("quantize: sq mask size != tensor size");
          for (int64_t i = 0; i < x.size(); ++i)
            if (!n.qz.mask[static_cast<size_t>(i)]) q[i] = x[i];
        }
        n.value = std::move(q);
        return;
      }
      case Op::BnInvStd: {
        const Node& bn = nodes_[static_cast<size_t>(n.in[0])];
        n.value = bn.bn_ctx.inv_std.reshaped({1, bn.bn_ctx.inv_std.size()});
        return;
      }
      case Op::SteMask:
        n.value = ste_mask(n.qz.spec, in_val(n, 0));
        return;
    }
  }

  void backward_one(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor<T>& g = n.grad;
    switch (n.op) {
      case Op::Input:
      case Op::Param:
      case Op::Const:
        return;
      case Op::Dense: {
        Tensor<T> dx, dw, db;
        dense_backward(in_val(n, 0), in_val(n, 1), g, dx, dw,
                       n.in.size() > 2 ? &db : nullptr);
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(dw));
        if (n.in.size() > 2) accumulate_grad(n.in[2], std::move(db));
        return;
      }
      case Op::Conv2d: {
        Tensor<T> dx, dk, db;
        conv2d_backward(in_val(n, 0), in_val(n, 1), g, n.conv, dx, dk,
                        n.in.size() > 2 ? &db : nullptr);
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(dk));
        if (n.in.size() > 2) accumulate_grad(n.in[2], std::move(db));
        return;
      }
      case Op::DepthwiseConv2d: {
        Tensor<T> dx, dk, db;
        depthwise_backward(in_val(n, 0), in_val(n, 1), g, n.conv, dx, dk,
                           n.in.size() > 2 ? &db : nullptr);
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(dk));
        if (n.in.size() > 2) accumulate_grad(n.in[2], std::move(db));
        return;
      }
      case Op::SeparableConv2d: {
        Tensor<T> dmid, dpk, dpb;
        conv2d_backward(n.saved, in_val(n, 2), g, ConvAttrs{1, 1, Padding::Valid}, dmid,
                        dpk, n.in.size() > 3 ? &dpb : nullptr);
        Tensor<T> dx, ddk;
        depthwise_backward(in_val(n, 0), in_val(n, 1), dmid, n.conv, dx, ddk,
                           static_cast<Tensor<T>*>(nullptr));
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(ddk));
        accumulate_grad(n.in[2], std::move(dpk));
        if (n.in.size() > 3) accumulate_grad(n.in[3], std::move(dpb));
        return;
      }
      case Op::BatchNorm: {
        Tensor<T> dx, dgamma, dbeta;
        batchnorm_backward(in_val(n, 1), g, training_, n.bn_ctx, dx, dgamma, dbeta);
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(dgamma));
        accumulate_grad(n.in[2], std::move(dbeta));
        return;
      }
      case Op::Relu:
        accumulate_grad(n.in[0], relu_backward(in_val(n, 0), g));
        return;
      case Op::Sigmoid:
        accumulate_grad(n.in[0], sigmoid_backward(n.value, g));
        return;
      case Op::Softmax:
        accumulate_grad(n.in[0], softmax_backward(n.value, g));
        return;
      case Op::Add:
        accumulate_grad(n.in[0], g);
        accumulate_grad(n.in[1], g);
        return;
      case Op::MaxPool:
        accumulate_grad(n.in[0], maxpool_backward(in_val(n, 0).shape, g, n.argmax));
        return;
      case Op::AvgPool:
        accumulate_grad(n.in[0], avgpool_backward(in_val(n, 0).shape, g, n.pool));
        return;
      case Op::Flatten:
      case Op::Reshape:
        accumulate_grad(n.in[0], g.reshaped(in_val(n, 0).shape));
        return;
      case Op::Matmul: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        Tensor<T> da({a.dim(0), a.dim(1)}), db({b.dim(0), b.dim(1)});
        as_matrix(da, a.dim(0), a.dim(1)).noalias() =
            as_matrix(g, a.dim(0), b.dim(1)) * as_matrix(b, b.dim(0), b.dim(1)).transpose();
        as_matrix(db, b.dim(0), b.dim(1)).noalias() =
            as_matrix(a, a.dim(0), a.dim(1)).transpose() * as_matrix(g, a.dim(0), b.dim(1));
        accumulate_grad(n.in[0], std::move(da));
        accumulate_grad(n.in[1], std::move(db));
        return;
      }
      case Op::MatmulTB: {
        // y = a b^T;  da = g b;  db = g^T a
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        Tensor<T> da({a.dim(0), a.dim(1)}), db({b.dim(0), b.dim(1)});
        as_matrix(da, a.dim(0), a.dim(1)).noalias() =
            as_matrix(g, a.dim(0), b.dim(0)) * as_matrix(b, b.dim(0), b.dim(1));
        as_matrix(db, b.dim(0), b.dim(1)).noalias() =
            as_matrix(g, a.dim(0), b.dim(0)).transpose() * as_matrix(a, a.dim(0), a.dim(1));
        accumulate_grad(n.in[0], std::move(da));
        accumulate_grad(n.in[1], std::move(db));
        return;
      }
      case Op::Mul: {
        const Tensor<T>& a = in_val(n, 0);
        const Tensor<T>& b = in_val(n, 1);
        Tensor<T> da = g, db = g;
        for (int64_t i = 0; i < g.size(); ++i) {
          da[i] *= b[i];
          db[i] *= a[i];
        }
        accumulate_grad(n.in[0], std::move(da));
        accumulate_grad(n.in[1], std::move(db));
        return;
      }
      case Op::MulRowB: {
        const Tensor<T>& x = in_val(n, 0);
        const Tensor<T>& r = in_val(n, 1);
        const int64_t cols = x.dim(x.rank() - 1);
        const int64_t rows = x.size() / cols;
        Tensor<T> dx = g;
        Tensor<T> dr(r.shape);
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < cols; ++j) {
            dx[i * cols + j] *= r[j];
            dr[j] += g[i * cols + j] * x[i * cols + j];
          }
        accumulate_grad(n.in[0], std::move(dx));
        accumulate_grad(n.in[1], std::move(dr));
        return;
      }
      case Op::Square: {
        const Tensor<T>& x = in_val(n, 0);
        Tensor<T> dx = g;
        for (int64_t i = 0; i < x.size(); ++i) dx[i] *= T(2) * x[i];
        accumulate_grad(n.in[0], std::move(dx));
        return;
      }
      case Op::SumAll:
        accumulate_grad(n.in[0], Tensor<T>::full(in_val(n, 0).shape, g[0]));
        return;
      case Op::Affine: {
        Tensor<T> dx = g;
        for (auto& v : dx.data) v *= n.affine_a;
        accumulate_grad(n.in[0], std::move(dx));
        return;
      }
      case Op::Heaviside:
      case Op::BnInvStd:
      case Op::SteMask:
        return;  // frozen: no gradient by construction
      case Op::SelectRow: {
        const Tensor<T>& x = in_val(n, 0);
        Tensor<T> dx(x.shape);
        const int64_t stride = x.size() / x.dim(0);
        std::copy(g.data.begin(), g.data.end(), dx.data.begin() + n.row_index * stride);
        accumulate_grad(n.in[0], std::move(dx));
        return;
      }
      case Op::CceFromLogits:
        accumulate_grad(n.in[0], cce_from_logits_backward(in_val(n, 0), in_val(n, 1), g[0]));
        return;  // labels receive no gradient
      case Op::Quantize: {
        Tensor<T> dx = ste_backward(n.qz.spec, g, in_val(n, 0));
        if (!n.qz.mask.empty()) {
          const Tensor<T>& up = g;
          for (int64_t i = 0; i < dx.size(); ++i)
            if (!n.qz.mask[static_cast<size_t>(i)]) dx[i] = up[i];  // unquantized: identity
        }
        accumulate_grad(n.in[0], std::move(dx));
        return;
      }
    }
  }

  void collect_cone(int from, std::vector<int8_t>& seen) const {
    if (seen[static_cast<size_t>(from)]) return;
    seen[static_cast<size_t>(from)] = 1;
    for (int i : nodes_[static_cast<size_t>(from)].in) collect_cone(i, seen);
  }

  // Memoized: is `target` inside the input cone of `from`?
  bool cone_memo(int from, int target, std::vector<int8_t>& memo) const {
    if (from == target) return true;
    if (memo[static_cast<size_t>(from)] != -1) return memo[static_cast<size_t>(from)] != 0;
    bool hit = false;
    for (int i : nodes_[static_cast<size_t>(from)].in)
      if (cone_memo(i, target, memo)) {
        hit = true;
        break;
      }
    memo[static_cast<size_t>(from)] = hit ? 1 : 0;
    return hit;
  }
};

// ---------------------------------------------------------------------------
// Eager single-op execution: the public op surface. Executes exactly the
// kernels the graph uses.
// ---------------------------------------------------------------------------

enum class OpKind {
  Dense,
  Conv2d,
  DepthwiseConv2d,
  SeparableConv2d,
  BatchNorm,
  Relu,
  Sigmoid,
  Softmax,
  Add,
  MaxPool,
  AvgPool,
  Flatten,
};

struct OpAttrs {
  ConvAttrs conv;
  PoolAttrs pool;
  BatchNormAttrs bn;
  bool training = false;
};

// Input lists per kind:
//   Dense            {x, w[, b]}
//   Conv2d           {x, k[, b]}
//   DepthwiseConv2d  {x, k[, b]}
//   SeparableConv2d  {x, dk, pk[, pb]}
//   BatchNorm        {x, gamma, beta, mean, var}  (stateless; train mode
//                    normalizes by batch statistics without updating stats)
//   others           {x} or {a, b}
template <typename T>
Tensor<T> forward_op(OpKind kind, const std::vector<const Tensor<T>*>& in,
                     const OpAttrs& attrs = {}) {
  auto want = [&](size_t lo, size_t hi, const char* who) {
    if (in.size() < lo || in.size() > hi)
      throw ShapeError(std::string(who) + ": expected " + std::to_string(lo) + ".." +
                       std::to_string(hi) + " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::Dense:
      want(2, 3, "dense");
      return dense_forward(*in[0], *in[1], in.size() > 2 ? in[2] : nullptr);
    case OpKind::Conv2d:
      want(2, 3, "conv2d");
      return conv2d_forward(*in[0], *in[1], in.size() > 2 ? in[2] : nullptr, attrs.conv);
    case OpKind::DepthwiseConv2d:
      want(2, 3, "depthwise_conv2d");
      return depthwise_forward(*in[0], *in[1], in.size() > 2 ? in[2] : nullptr, attrs.conv);
    case OpKind::SeparableConv2d: {
      want(3, 4, "separable_conv2d");
      Tensor<T> mid = depthwise_forward(*in[0], *in[1], static_cast<const Tensor<T>*>(nullptr), attrs.conv);
      return conv2d_forward(mid, *in[2], in.size() > 3 ? in[3] : nullptr,
                            ConvAttrs{1, 1, Padding::Valid});
    }
    case OpKind::BatchNorm: {
      want(5, 5, "batchnorm");
      BatchNormCtx<T> ctx;
      if (attrs.training) {
        Tensor<T> mean = *in[3], var = *in[4];  // stateless copy
        return batchnorm_train_forward(*in[0], *in[1], *in[2], mean, var, attrs.bn, ctx);
      }
      return batchnorm_infer_forward(*in[0], *in[1], *in[2], *in[3], *in[4], attrs.bn, ctx);
    }
    case OpKind::Relu:
      want(1, 1, "relu");
      return relu_forward(*in[0]);
    case OpKind::Sigmoid:
      want(1, 1, "sigmoid");
      return sigmoid_forward(*in[0]);
    case OpKind::Softmax:
      want(1, 1, "softmax");
      return softmax_forward(*in[0]);
    case OpKind::Add: {
      want(2, 2, "add");
      if (!in[0]->same_shape(*in[1]))
        throw ShapeError("add: shape " + shape_str(in[0]->shape) + " != " +
                         shape_str(in[1]->shape));
      Tensor<T> y = *in[0];
      for (int64_t i = 0; i < y.size(); ++i) y[i] += (*in[1])[i];
      return y;
    }
    case OpKind::MaxPool: {
      want(1, 1, "max_pool");
      std::vector<int64_t> argmax;
      return maxpool_forward(*in[0], attrs.pool, argmax);
    }
    case OpKind::AvgPool:
      want(1, 1, "avg_pool");
      return avgpool_forward(*in[0], attrs.pool);
    case OpKind::Flatten: {
      want(1, 1, "flatten");
      const Tensor<T>& x = *in[0];
      return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    }
  }
  throw ShapeError("forward_op: unknown op kind");
}

// Free-function reverse pass: runs backward from `loss_node` and returns the
// gradient map (parameters and graph inputs).
template <typename T>
std::unordered_map<int, Tensor<T>> backward(Graph<T>& g, int loss_node) {
  g.zero_grad();
  g.backward(loss_node);
  return g.gradients();
}

}  // namespace qrobust
