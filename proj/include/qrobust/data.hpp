#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qrobust/errors.hpp"
#include "qrobust/rng.hpp"
#include "qrobust/tensor.hpp"

namespace qrobust {

enum class Split : uint8_t { Train = 0, Test = 1 };

// Immutable after load; inputs [N, ...], labels one-hot [N, K].
struct Dataset {
  TensorF inputs;
  TensorF labels;
  std::vector<uint8_t> split;  // Split per sample
  int num_classes = 0;

  int64_t size() const { return inputs.data.empty() ? 0 : inputs.dim(0); }
  int64_t sample_stride() const { return inputs.size() / inputs.dim(0); }
};

// Raw CIFAR-10 binary layout: records of 3073 bytes (1 label byte + 3072
// channel-planar pixel bytes). Loads data_batch_1..5.bin as Train and
// test_batch.bin as Test from `dir`; missing trailing files are tolerated but
// at least one file must exist. Pixels are kept as raw 0..255 values;
// preprocess() converts them.
Dataset load_cifar10(const std::string& dir);

// Normalize to [0,1] and convert RGB to grayscale (BT.601 luminosity
// weights 0.299/0.587/0.114): gray = (0.299 R + 0.587 G + 0.114 B)/255,
// output N x H x W x 1. Single-channel input is scaled by 1/255 only.
TensorF preprocess(const TensorF& images);

// Generic tensor container "QRT1", little-endian:
//   magic[4]="QRT1", u32 dtype (1=f32, 2=u8), u32 rank, u32 extents[rank],
//   payload. Labels live in a sidecar file of one byte per sample.
void save_tensor_container(const std::string& path, const TensorF& t);
void save_tensor_container_u8(const std::string& path, const Shape& shape,
                              const std::vector<uint8_t>& bytes);
TensorF load_tensor_container(const std::string& path);
std::vector<uint8_t> load_tensor_container_u8(const std::string& path, Shape* shape = nullptr);

void save_labels(const std::string& path, const std::vector<uint8_t>& labels);
std::vector<uint8_t> load_labels(const std::string& path);

// Dataset from a QRT1 inputs file plus its label sidecar. num_classes = 0
// infers max(label)+1.
Dataset load_tensors(const std::string& inputs_path, const std::string& labels_path,
                     int num_classes = 0);

// ---------------------------------------------------------------------------
// K-fold cross validation
// ---------------------------------------------------------------------------

struct FoldPlan {
  int k = 0;
  std::vector<int> assignments;  // fold index per sample
  uint64_t seed = 0;
};

// Deterministic shuffled partition; fold sizes differ by at most one.
FoldPlan kfold(int64_t n, int k, uint64_t seed);

// Population variance (1/K) * sum (a_f - mean)^2, accuracies in percent.
double fold_variance(const std::vector<double>& per_fold_accuracies);

// ---------------------------------------------------------------------------
// Dataset utilities
// ---------------------------------------------------------------------------

Dataset dataset_subset(const Dataset& ds, const std::vector<int64_t>& indices);

// Keep only the given classes and relabel them 0..C-1 (one-hot over C).
Dataset select_classes(const Dataset& ds, const std::vector<int>& classes);

std::vector<int64_t> split_indices(const Dataset& ds, Split s);

// Gaussian class blobs with `noise_dims` trailing uninformative dimensions,
// clipped to [0,1]: the self-contained desk-scale stand-in dataset.
Dataset make_synthetic_blobs(int64_t samples, int classes, const Shape& sample_shape,
                             uint64_t seed, double spread = 0.12,
                             double test_fraction = 0.2);

// One-hot labels from class indices.
TensorF one_hot(const std::vector<uint8_t>& labels, int num_classes);

}  // namespace qrobust
