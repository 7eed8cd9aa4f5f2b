#include "qrobust/model_json.hpp"

#include <fstream>

namespace qrobust {

namespace {

[[noreturn]] void bad(const std::string& msg) { throw ConfigError(msg); }

QuantKind quant_kind_from_name(const std::string& s) {
  if (s == "fp32") return QuantKind::Fp32;
  if (s == "uniform") return QuantKind::Uniform;
  if (s == "binary") return QuantKind::Binary;
  if (s == "stochastic_binary") return QuantKind::StochasticBinary;
  if (s == "ternary") return QuantKind::Ternary;
  if (s == "stochastic_ternary") return QuantKind::StochasticTernary;
  if (s == "quantized_relu") return QuantKind::QuantizedRelu;
  bad("unknown quantizer kind '" + s + "'");
}

LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "depthwise_conv2d") return LayerKind::DepthwiseConv2d;
  if (s == "separable_conv2d") return LayerKind::SeparableConv2d;
  if (s == "dense") return LayerKind::Dense;
  if (s == "batchnorm") return LayerKind::BatchNorm;
  if (s == "max_pool") return LayerKind::MaxPool;
  if (s == "avg_pool") return LayerKind::AvgPool;
  if (s == "flatten") return LayerKind::Flatten;
  if (s == "activation") return LayerKind::Activation;
  bad("unknown layer kind '" + s + "'");
}

Activation activation_from_name(const std::string& s) {
  if (s == "none") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "softmax") return Activation::Softmax;
  bad("unknown activation '" + s + "'");
}

Padding padding_from_name(const std::string& s) {
  if (s == "same") return Padding::Same;
  if (s == "valid") return Padding::Valid;
  bad("unknown padding '" + s + "' (expected same|valid)");
}

AttackKind attack_kind_from_name(const std::string& s) {
  if (s == "fgsm") return AttackKind::Fgsm;
  if (s == "pgd") return AttackKind::Pgd;
  if (s == "cw_l2") return AttackKind::CwL2;
  if (s == "square") return AttackKind::Square;
  if (s == "boundary") return AttackKind::Boundary;
  if (s == "zoo") return AttackKind::Zoo;
  bad("unknown attack kind '" + s + "'");
}

Norm norm_from_name(const std::string& s) {
  if (s == "l1") return Norm::L1;
  if (s == "l2") return Norm::L2;
  if (s == "linf") return Norm::Linf;
  bad("unknown norm '" + s + "' (expected l1|l2|linf)");
}

JrMode jr_mode_from_name(const std::string& s) {
  if (s == "off") return JrMode::Off;
  if (s == "full") return JrMode::Full;
  if (s == "per_layer") return JrMode::PerLayer;
  bad("unknown jr_mode '" + s + "' (expected off|full|per_layer)");
}

Json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) bad("cannot open config file '" + path + "'");
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    bad("JSON parse error in '" + path + "': " + e.what());
  }
}

}  // namespace

QuantizerSpec quantizer_from_json(const Json& j) {
  QuantizerSpec q;
  if (j.is_string()) {
    q.kind = quant_kind_from_name(j.get<std::string>());
  } else {
    q.kind = quant_kind_from_name(j.value("kind", "fp32"));
    q.bits = j.value("bits", 8);
    q.integer_bits = j.value("integer_bits", 0);
    q.symmetric = j.value("symmetric", false);
    q.seed = j.value("seed", 0ULL);
  }
  validate_spec(q);
  return q;
}

Json quantizer_to_json(const QuantizerSpec& q) {
  Json j;
  j["kind"] = quant_kind_name(q.kind);
  if (q.kind == QuantKind::Uniform || q.kind == QuantKind::QuantizedRelu) {
    j["bits"] = q.bits;
    j["integer_bits"] = q.integer_bits;
    j["symmetric"] = q.symmetric;
  }
  if (is_stochastic(q.kind)) j["seed"] = q.seed;
  return j;
}

QuantizerSpec quantizer_from_name(const std::string& name) {
  QuantizerSpec q;
  if (name == "fp32") {
    q.kind = QuantKind::Fp32;
  } else if (name == "8bit") {
    q.kind = QuantKind::Uniform;
    q.bits = 8;
  } else if (name == "4bit") {
    q.kind = QuantKind::Uniform;
    q.bits = 4;
  } else if (name == "2bit") {
    q.kind = QuantKind::Uniform;
    q.bits = 2;
  } else if (name == "ternary") {
    q.kind = QuantKind::Ternary;
  } else if (name == "stq") {
    q.kind = QuantKind::StochasticTernary;
  } else if (name == "binary") {
    q.kind = QuantKind::Binary;
  } else if (name == "sbinary") {
    q.kind = QuantKind::StochasticBinary;
  } else {
    bad("unknown scheme '" + name +
        "' (expected fp32|8bit|4bit|2bit|ternary|stq|binary|sbinary)");
  }
  return q;
}

ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec spec;
  if (!j.contains("input_shape")) bad("model spec: missing input_shape");
  for (const auto& e : j.at("input_shape")) spec.input_shape.push_back(e.get<int64_t>());
  if (!j.contains("layers")) bad("model spec: missing layers");
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_name(lj.value("kind", ""));
    l.name = lj.value("name", "");
    l.units = lj.value("units", 0);
    l.filters = lj.value("filters", 0);
    if (lj.contains("kernel")) {
      l.kernel_h = lj.at("kernel").at(0).get<int>();
      l.kernel_w = lj.at("kernel").at(1).get<int>();
    }
    if (lj.contains("stride")) {
      l.stride_h = lj.at("stride").at(0).get<int>();
      l.stride_w = lj.at("stride").at(1).get<int>();
    } else if (l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) {
      l.stride_h = l.stride_w = 2;
    }
    if (lj.contains("pool")) {
      l.pool_h = lj.at("pool").at(0).get<int>();
      l.pool_w = lj.at("pool").at(1).get<int>();
      if (!lj.contains("stride")) {
        l.stride_h = l.pool_h;
        l.stride_w = l.pool_w;
      }
    }
    l.padding = padding_from_name(lj.value("padding", "same"));
    l.activation = activation_from_name(lj.value("activation", "none"));
    l.use_bias = lj.value("use_bias", true);
    if (lj.contains("weight_quantizer"))
      l.weight_quantizer = quantizer_from_json(lj.at("weight_quantizer"));
    if (lj.contains("activation_quantizer"))
      l.activation_quantizer = quantizer_from_json(lj.at("activation_quantizer"));
    spec.layers.push_back(std::move(l));
  }
  if (j.contains("residual"))
    for (const auto& rj : j.at("residual"))
      spec.residual.push_back({rj.at("from").get<int>(), rj.at("to").get<int>()});
  return spec;
}

Json model_spec_to_json(const ModelSpec& spec) {
  Json j;
  j["input_shape"] = spec.input_shape;
  Json layers = Json::array();
  for (const auto& l : spec.layers) {
    Json lj;
    lj["kind"] = layer_kind_name(l.kind);
    if (!l.name.empty()) lj["name"] = l.name;
    if (l.kind == LayerKind::Dense) lj["units"] = l.units;
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::SeparableConv2d)
      lj["filters"] = l.filters;
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::DepthwiseConv2d ||
        l.kind == LayerKind::SeparableConv2d) {
      lj["kernel"] = {l.kernel_h, l.kernel_w};
      lj["stride"] = {l.stride_h, l.stride_w};
      lj["padding"] = l.padding == Padding::Same ? "same" : "valid";
    }
    if (l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) {
      lj["pool"] = {l.pool_h, l.pool_w};
      lj["stride"] = {l.stride_h, l.stride_w};
      lj["padding"] = l.padding == Padding::Same ? "same" : "valid";
    }
    if (l.activation != Activation::None) lj["activation"] = activation_name(l.activation);
    if (!l.use_bias) lj["use_bias"] = false;
    if (l.weight_quantizer.kind != QuantKind::Fp32)
      lj["weight_quantizer"] = quantizer_to_json(l.weight_quantizer);
    if (l.activation_quantizer.kind != QuantKind::Fp32)
      lj["activation_quantizer"] = quantizer_to_json(l.activation_quantizer);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  if (!spec.residual.empty()) {
    Json res = Json::array();
    for (const auto& r : spec.residual) res.push_back({{"from", r.from}, {"to", r.to}});
    j["residual"] = std::move(res);
  }
  return j;
}

ModelSpec load_model_spec(const std::string& path) {
  return model_spec_from_json(load_json_file(path));
}

AttackConfig attack_from_json(const Json& j) {
  AttackConfig a;
  a.kind = attack_kind_from_name(j.value("kind", ""));
  a.norm = norm_from_name(j.value("norm", "linf"));
  a.eps = j.value("eps", 0.0);
  a.alpha = j.value("alpha", 0.0);
  a.iterations = j.value("iterations", 10);
  a.binary_search_steps = j.value("binary_search_steps", 10);
  a.kappa = j.value("kappa", 0.0);
  a.c = j.value("c", 1.0);
  a.fd_h = j.value("h", 1e-4);
  a.coord_batch = j.value("coord_batch", 128);
  a.p_init = j.value("p_init", 0.05);
  a.seed = j.value("seed", 0ULL);
  if (j.contains("clip")) {
    a.clip_lo = j.at("clip").at(0).get<double>();
    a.clip_hi = j.at("clip").at(1).get<double>();
  }
  if (a.eps < 0) bad("attack: eps must be >= 0");
  if (a.iterations < 1) bad("attack: iterations must be >= 1");
  return a;
}

Json attack_to_json(const AttackConfig& a) {
  Json j;
  j["kind"] = attack_kind_name(a.kind);
  j["norm"] = norm_name(a.norm);
  j["eps"] = a.eps;
  if (a.kind == AttackKind::Pgd) j["alpha"] = a.alpha;
  j["iterations"] = a.iterations;
  if (a.kind == AttackKind::Zoo) {
    j["binary_search_steps"] = a.binary_search_steps;
    j["h"] = a.fd_h;
    j["coord_batch"] = a.coord_batch;
  }
  if (a.kind == AttackKind::CwL2 || a.kind == AttackKind::Zoo) {
    j["kappa"] = a.kappa;
    j["c"] = a.c;
  }
  if (a.kind == AttackKind::Square) j["p_init"] = a.p_init;
  j["seed"] = a.seed;
  j["clip"] = {a.clip_lo, a.clip_hi};
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig rc;
  rc.echo = j;
  rc.model_path = j.value("model", "");
  if (j.contains("data")) {
    const Json& d = j.at("data");
    rc.data.kind = d.value("kind", "synthetic");
    rc.data.samples = d.value("samples", 512);
    rc.data.classes = d.value("classes", 2);
    if (d.contains("shape")) {
      rc.data.shape.clear();
      for (const auto& e : d.at("shape")) rc.data.shape.push_back(e.get<int64_t>());
    }
    rc.data.data_seed = d.value("seed", 1ULL);
    rc.data.spread = d.value("spread", 0.12);
    rc.data.test_fraction = d.value("test_fraction", 0.2);
    rc.data.dir = d.value("dir", "");
    rc.data.grayscale = d.value("grayscale", true);
    if (d.contains("select_classes"))
      for (const auto& e : d.at("select_classes"))
        rc.data.keep_classes.push_back(e.get<int>());
    rc.data.inputs_path = d.value("inputs", "");
    rc.data.labels_path = d.value("labels", "");
    rc.data.num_classes = d.value("classes_total", 0);
    if (rc.data.kind != "synthetic" && rc.data.kind != "cifar10" &&
        rc.data.kind != "tensors")
      bad("data.kind must be synthetic|cifar10|tensors");
  }
  if (j.contains("train")) {
    const Json& t = j.at("train");
    rc.train.epochs = t.value("epochs", 50);
    rc.train.batch_size = t.value("batch_size", 64);
    rc.train.lr_min = t.value("lr_min", 1e-6);
    rc.train.lr_max = t.value("lr_max", 1e-3);
    if (t.contains("adamax")) {
      rc.train.adamax.beta1 = t.at("adamax").value("beta1", 0.9);
      rc.train.adamax.beta2 = t.at("adamax").value("beta2", 0.999);
      rc.train.adamax.eps = t.at("adamax").value("eps", 1e-7);
    }
    rc.train.lambda_jr = t.value("lambda_jr", 0.0);
    rc.train.jr_mode = jr_mode_from_name(t.value("jr_mode", "per_layer"));
    if (t.contains("grad_quant_bits") && !t.at("grad_quant_bits").is_null())
      rc.train.grad_quant_bits = t.at("grad_quant_bits").get<int>();
    if (t.contains("sq_schedule") && !t.at("sq_schedule").is_null()) {
      SqSchedule s;
      s.ratio_start = t.at("sq_schedule").value("ratio_start", 0.5);
      s.ratio_end = t.at("sq_schedule").value("ratio_end", 1.0);
      s.epochs_to_full = t.at("sq_schedule").value("epochs_to_full", 10);
      rc.train.sq_schedule = s;
    }
    rc.train.jr_probe_samples = t.value("jr_probe_samples", 32);
    if (rc.train.lambda_jr < 0) bad("train.lambda_jr must be >= 0");
    if (rc.train.lr_min > rc.train.lr_max) bad("train.lr_min must be <= train.lr_max");
  }
  if (j.contains("attacks"))
    for (const auto& aj : j.at("attacks")) rc.attacks.push_back(attack_from_json(aj));
  if (j.contains("eval")) rc.attack_samples = j.at("eval").value("attack_samples", 100);
  if (j.contains("kfold")) {
    rc.kfold_k = j.at("kfold").value("k", 10);
    rc.kfold_epochs = j.at("kfold").value("epochs", -1);
  }
  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    if (s.contains("fgsm_eps")) {
      rc.sweep.fgsm_eps.clear();
      for (const auto& e : s.at("fgsm_eps")) rc.sweep.fgsm_eps.push_back(e.get<double>());
    }
    if (s.contains("pgd_eps")) {
      rc.sweep.pgd_eps.clear();
      for (const auto& e : s.at("pgd_eps")) rc.sweep.pgd_eps.push_back(e.get<double>());
    }
    rc.sweep.pgd_alpha = s.value("pgd_alpha", 2.0 / 255.0);
    rc.sweep.pgd_iterations = s.value("pgd_iterations", 7);
    rc.sweep.square_iterations = s.value("square_iterations", 1000);
    rc.sweep.square_linf_eps = s.value("square_linf_eps", 0.05);
    rc.sweep.square_l2_eps = s.value("square_l2_eps", 1.0);
  }
  rc.out_dir = j.value("out", "runs/out");
  rc.seed = j.value("seed", 0ULL);
  rc.train.seed = rc.seed;
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(load_json_file(path));
}

Dataset load_dataset(const DataConfig& d) {
  if (d.kind == "synthetic") {
    return make_synthetic_blobs(d.samples, d.classes, d.shape, d.data_seed, d.spread,
                                d.test_fraction);
  }
  if (d.kind == "cifar10") {
    Dataset ds = load_cifar10(d.dir);
    if (d.grayscale) ds.inputs = preprocess(ds.inputs);
    if (!d.keep_classes.empty()) ds = select_classes(ds, d.keep_classes);
    return ds;
  }
  // tensors
  Dataset ds = load_tensors(d.inputs_path, d.labels_path, d.num_classes);
  return ds;
}

}  // namespace qrobust
