#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrobust/attacks.hpp"
#include "qrobust/model.hpp"
#include "qrobust/train.hpp"

namespace qrobust {

using Json = nlohmann::ordered_json;

// --- model spec file --------------------------------------------------------

QuantizerSpec quantizer_from_json(const Json& j);
Json quantizer_to_json(const QuantizerSpec& q);

// Named shorthand for Table-style scheme rows:
// fp32, 8bit, 4bit, 2bit, ternary, stq, binary, sbinary.
QuantizerSpec quantizer_from_name(const std::string& name);

ModelSpec model_spec_from_json(const Json& j);
Json model_spec_to_json(const ModelSpec& spec);
ModelSpec load_model_spec(const std::string& path);

// --- run config file --------------------------------------------------------

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | cifar10 | tensors
  // synthetic
  int64_t samples = 512;
  int classes = 2;
  Shape shape = {8, 8, 1};
  uint64_t data_seed = 1;
  double spread = 0.12;
  double test_fraction = 0.2;
  // cifar10
  std::string dir;
  bool grayscale = true;
  std::vector<int> keep_classes;  // empty = all
  // tensors
  std::string inputs_path;
  std::string labels_path;
  int num_classes = 0;
};

struct SweepConfig {
  std::vector<double> fgsm_eps = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  std::vector<double> pgd_eps = {8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0};
  double pgd_alpha = 2.0 / 255.0;
  int pgd_iterations = 7;
  int square_iterations = 1000;  // desk-scale default; full protocol uses 10000
  double square_linf_eps = 0.05;
  double square_l2_eps = 1.0;
};

struct RunConfig {
  std::string model_path;
  DataConfig data;
  TrainConfig train;
  std::vector<AttackConfig> attacks;
  int64_t attack_samples = 100;
  int kfold_k = 10;
  int kfold_epochs = -1;  // -1: use train.epochs
  SweepConfig sweep;
  std::string out_dir = "runs/out";
  uint64_t seed = 0;
  Json echo;  // resolved config as parsed+overridden, embedded in reports
};

AttackConfig attack_from_json(const Json& j);
Json attack_to_json(const AttackConfig& a);

RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

Dataset load_dataset(const DataConfig& d);

}  // namespace qrobust
