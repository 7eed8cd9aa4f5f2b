#include "qrobust/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace qrobust {

namespace {

constexpr int64_t kCifarRecord = 3073;  // 1 label byte + 32*32*3 pixel bytes
constexpr int64_t kCifarPixels = 3072;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

// Reads one CIFAR file; appends raw pixel rows (NHWC, 0..255) and labels.
void read_cifar_file(const std::string& path, std::vector<float>& pixels,
                     std::vector<uint8_t>& labels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cifar10: cannot open '" + path + "'");
  is.seekg(0, std::ios::end);
  const int64_t bytes = static_cast<int64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  if (bytes == 0 || bytes % kCifarRecord != 0)
    throw DataError("cifar10: '" + path + "' has " + std::to_string(bytes) +
                    " bytes, not a multiple of the 3073-byte record (truncated at byte " +
                    std::to_string((bytes / kCifarRecord) * kCifarRecord) + ")");
  const int64_t n = bytes / kCifarRecord;
  std::vector<unsigned char> rec(static_cast<size_t>(kCifarRecord));
  for (int64_t r = 0; r < n; ++r) {
    if (!is.read(reinterpret_cast<char*>(rec.data()), kCifarRecord))
      throw DataError("cifar10: '" + path + "' truncated at byte " +
                      std::to_string(r * kCifarRecord));
    if (rec[0] > 9)
      throw DataError("cifar10: '" + path + "' label " + std::to_string(int(rec[0])) +
                      " > 9 at byte offset " + std::to_string(r * kCifarRecord));
    labels.push_back(rec[0]);
    // channel-planar (1024 R, 1024 G, 1024 B) -> NHWC
    const size_t base = pixels.size();
    pixels.resize(base + static_cast<size_t>(kCifarPixels));
    for (int64_t p = 0; p < 1024; ++p) {
      pixels[base + static_cast<size_t>(p * 3 + 0)] = static_cast<float>(rec[1 + p]);
      pixels[base + static_cast<size_t>(p * 3 + 1)] = static_cast<float>(rec[1 + 1024 + p]);
      pixels[base + static_cast<size_t>(p * 3 + 2)] = static_cast<float>(rec[1 + 2048 + p]);
    }
  }
}

}  // namespace

TensorF one_hot(const std::vector<uint8_t>& labels, int num_classes) {
  TensorF y({static_cast<int64_t>(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes)
      throw DataError("one_hot: label " + std::to_string(int(labels[i])) +
                      " >= num_classes " + std::to_string(num_classes));
    y.at2(static_cast<int64_t>(i), labels[i]) = 1.0f;
  }
  return y;
}

Dataset load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<float> pixels;
  std::vector<uint8_t> labels;
  std::vector<uint8_t> split;
  int64_t n_train = 0;
  for (int b = 1; b <= 5; ++b) {
    const std::string path = dir + "/data_batch_" + std::to_string(b) + ".bin";
    if (!fs::exists(path)) {
      if (b == 1) throw DataError("cifar10: missing '" + path + "'");
      break;
    }
    read_cifar_file(path, pixels, labels);
    n_train = static_cast<int64_t>(labels.size());
  }
  const std::string test_path = dir + "/test_batch.bin";
  if (fs::exists(test_path)) read_cifar_file(test_path, pixels, labels);
  const int64_t n = static_cast<int64_t>(labels.size());
  split.assign(static_cast<size_t>(n), static_cast<uint8_t>(Split::Test));
  for (int64_t i = 0; i < n_train; ++i) split[static_cast<size_t>(i)] =
      static_cast<uint8_t>(Split::Train);
  Dataset ds;
  ds.inputs = TensorF({n, 32, 32, 3}, std::move(pixels));
  ds.labels = one_hot(labels, 10);
  ds.split = std::move(split);
  ds.num_classes = 10;
  return ds;
}

TensorF preprocess(const TensorF& images) {
  if (images.rank() != 4)
    throw ShapeError("preprocess: expected N x H x W x C, got " + shape_str(images.shape));
  const int64_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (c != 3 && c != 1)
    throw ShapeError("preprocess: expected 1 or 3 channels, got " + std::to_string(c));
  TensorF out({n, h, w, 1});
  const int64_t pixels = n * h * w;
  if (c == 3) {
    for (int64_t p = 0; p < pixels; ++p) {
      const float r = images[p * 3 + 0], g = images[p * 3 + 1], b = images[p * 3 + 2];
      out[p] = (0.299f * r + 0.587f * g + 0.114f * b) / 255.0f;
    }
  } else {
    for (int64_t p = 0; p < pixels; ++p) out[p] = images[p] / 255.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// QRT1 container
// ---------------------------------------------------------------------------

namespace {

void write_container(const std::string& path, uint32_t dtype, const Shape& shape,
                     const void* payload, size_t payload_bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("container: cannot open '" + path + "' for writing");
  os.write("QRT1", 4);
  put_u32(os, dtype);
  put_u32(os, static_cast<uint32_t>(shape.size()));
  for (int64_t e : shape) put_u32(os, static_cast<uint32_t>(e));
  os.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
  if (!os) throw DataError("container: write failed for '" + path + "'");
}

struct ContainerHeader {
  uint32_t dtype = 0;
  Shape shape;
  int64_t count = 0;
};

ContainerHeader read_header(std::istream& is, const std::string& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "QRT1", 4) != 0)
    throw DataError("container: bad magic in '" + path + "' (expected QRT1)");
  ContainerHeader h;
  uint32_t rank;
  if (!get_u32(is, h.dtype) || !get_u32(is, rank))
    throw DataError("container: truncated header in '" + path + "'");
  h.count = 1;
  for (uint32_t r = 0; r < rank; ++r) {
    uint32_t e;
    if (!get_u32(is, e)) throw DataError("container: truncated extents in '" + path + "'");
    h.shape.push_back(static_cast<int64_t>(e));
    h.count *= e;
  }
  return h;
}

void check_payload(std::istream& is, const std::string& path, int64_t want_bytes) {
  const auto pos = is.tellg();
  is.seekg(0, std::ios::end);
  const int64_t have = static_cast<int64_t>(is.tellg()) - static_cast<int64_t>(pos);
  is.seekg(pos);
  if (have != want_bytes)
    throw DataError("container: '" + path + "' payload is " + std::to_string(have) +
                    " bytes, expected " + std::to_string(want_bytes));
}

}  // namespace

void save_tensor_container(const std::string& path, const TensorF& t) {
  static_assert(sizeof(float) == 4);
  write_container(path, 1, t.shape, t.data.data(), t.data.size() * 4);
}

void save_tensor_container_u8(const std::string& path, const Shape& shape,
                              const std::vector<uint8_t>& bytes) {
  if (static_cast<int64_t>(bytes.size()) != shape_size(shape))
    throw DataError("container: payload size != shape product");
  write_container(path, 2, shape, bytes.data(), bytes.size());
}

TensorF load_tensor_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("container: cannot open '" + path + "'");
  const ContainerHeader h = read_header(is, path);
  if (h.dtype == 1) {
    check_payload(is, path, h.count * 4);
    std::vector<float> data(static_cast<size_t>(h.count));
    is.read(reinterpret_cast<char*>(data.data()), h.count * 4);
    // Stored little-endian; this toolkit targets little-endian hosts.
    return TensorF(h.shape, std::move(data));
  }
  if (h.dtype == 2) {
    check_payload(is, path, h.count);
    std::vector<uint8_t> bytes(static_cast<size_t>(h.count));
    is.read(reinterpret_cast<char*>(bytes.data()), h.count);
    TensorF t(h.shape);
    for (int64_t i = 0; i < h.count; ++i) t[i] = static_cast<float>(bytes[static_cast<size_t>(i)]);
    return t;
  }
  throw DataError("container: '" + path + "' has unknown dtype code " +
                  std::to_string(h.dtype));
}

std::vector<uint8_t> load_tensor_container_u8(const std::string& path, Shape* shape) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("container: cannot open '" + path + "'");
  const ContainerHeader h = read_header(is, path);
  if (h.dtype != 2)
    throw DataError("container: '" + path + "' is not a u8 container");
  check_payload(is, path, h.count);
  std::vector<uint8_t> bytes(static_cast<size_t>(h.count));
  is.read(reinterpret_cast<char*>(bytes.data()), h.count);
  if (shape) *shape = h.shape;
  return bytes;
}

void save_labels(const std::string& path, const std::vector<uint8_t>& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("labels: cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size()));
}

std::vector<uint8_t> load_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("labels: cannot open '" + path + "'");
  is.seekg(0, std::ios::end);
  const int64_t n = static_cast<int64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  std::vector<uint8_t> labels(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(labels.data()), n);
  return labels;
}

Dataset load_tensors(const std::string& inputs_path, const std::string& labels_path,
                     int num_classes) {
  TensorF inputs = load_tensor_container(inputs_path);
  if (inputs.rank() < 2)
    throw DataError("load_tensors: inputs must have a leading sample dimension");
  std::vector<uint8_t> labels = load_labels(labels_path);
  if (static_cast<int64_t>(labels.size()) != inputs.dim(0))
    throw DataError("load_tensors: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(inputs.dim(0)) + " samples");
  if (num_classes == 0) {
    uint8_t mx = 0;
    for (uint8_t l : labels) mx = std::max(mx, l);
    num_classes = mx + 1;
  }
  Dataset ds;
  ds.inputs = std::move(inputs);
  ds.labels = one_hot(labels, num_classes);
  ds.split.assign(labels.size(), static_cast<uint8_t>(Split::Train));
  ds.num_classes = num_classes;
  return ds;
}

// ---------------------------------------------------------------------------
// K-fold
// ---------------------------------------------------------------------------

FoldPlan kfold(int64_t n, int k, uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: K must be >= 2");
  if (n < k)
    throw ConfigError("kfold: N=" + std::to_string(n) + " < K=" + std::to_string(k));
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(derive_stream(seed, 0xF01D));
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.assignments.assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i)
    plan.assignments[static_cast<size_t>(perm[static_cast<size_t>(i)])] =
        static_cast<int>(i % k);
  return plan;
}

double fold_variance(const std::vector<double>& accs) {
  if (accs.empty()) throw ConfigError("fold_variance: no fold accuracies");
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  return var / static_cast<double>(accs.size());
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

Dataset dataset_subset(const Dataset& ds, const std::vector<int64_t>& indices) {
  Dataset out;
  Shape xs = ds.inputs.shape;
  xs[0] = static_cast<int64_t>(indices.size());
  out.inputs = TensorF(xs);
  out.labels = TensorF({static_cast<int64_t>(indices.size()), ds.labels.dim(1)});
  const int64_t stride = ds.sample_stride();
  const int64_t k = ds.labels.dim(1);
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t src = indices[i];
    std::copy(ds.inputs.data.begin() + src * stride,
              ds.inputs.data.begin() + (src + 1) * stride,
              out.inputs.data.begin() + static_cast<int64_t>(i) * stride);
    std::copy(ds.labels.data.begin() + src * k, ds.labels.data.begin() + (src + 1) * k,
              out.labels.data.begin() + static_cast<int64_t>(i) * k);
    out.split.push_back(ds.split[static_cast<size_t>(src)]);
  }
  out.num_classes = ds.num_classes;
  return out;
}

Dataset select_classes(const Dataset& ds, const std::vector<int>& classes) {
  std::vector<int> remap(static_cast<size_t>(ds.num_classes), -1);
  for (size_t c = 0; c < classes.size(); ++c) remap[static_cast<size_t>(classes[c])] =
      static_cast<int>(c);
  std::vector<int64_t> keep;
  std::vector<uint8_t> new_labels;
  for (int64_t i = 0; i < ds.size(); ++i) {
    int cls = 0;
    for (int64_t j = 0; j < ds.labels.dim(1); ++j)
      if (ds.labels.at2(i, j) > 0.5f) cls = static_cast<int>(j);
    if (remap[static_cast<size_t>(cls)] >= 0) {
      keep.push_back(i);
      new_labels.push_back(static_cast<uint8_t>(remap[static_cast<size_t>(cls)]));
    }
  }
  Dataset out = dataset_subset(ds, keep);
  out.labels = one_hot(new_labels, static_cast<int>(classes.size()));
  out.num_classes = static_cast<int>(classes.size());
  return out;
}

std::vector<int64_t> split_indices(const Dataset& ds, Split s) {
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < ds.size(); ++i)
    if (ds.split[static_cast<size_t>(i)] == static_cast<uint8_t>(s)) idx.push_back(i);
  return idx;
}

Dataset make_synthetic_blobs(int64_t samples, int classes, const Shape& sample_shape,
                             uint64_t seed, double spread, double test_fraction) {
  const int64_t d = shape_size(sample_shape);
  Rng rng(derive_stream(seed, 0xB10B5));
  // Class centers: informative half of the dimensions, noise in the rest.
  std::vector<std::vector<double>> centers(static_cast<size_t>(classes),
                                           std::vector<double>(static_cast<size_t>(d), 0.5));
  const int64_t informative = std::max<int64_t>(1, d / 2);
  for (int c = 0; c < classes; ++c)
    for (int64_t j = 0; j < informative; ++j)
      centers[static_cast<size_t>(c)][static_cast<size_t>(j)] = rng.uniform(0.15, 0.85);

  Shape xs = sample_shape;
  xs.insert(xs.begin(), samples);
  Dataset ds;
  ds.inputs = TensorF(xs);
  std::vector<uint8_t> labels;
  for (int64_t i = 0; i < samples; ++i) {
    const int c = static_cast<int>(i % classes);
    labels.push_back(static_cast<uint8_t>(c));
    for (int64_t j = 0; j < d; ++j) {
      const double base = j < informative ? centers[static_cast<size_t>(c)][static_cast<size_t>(j)]
                                          : rng.uniform(0.0, 1.0);
      const double noise = j < informative ? rng.normal(0.0, spread) : 0.0;
      ds.inputs[i * d + j] =
          static_cast<float>(std::min(1.0, std::max(0.0, base + noise)));
    }
  }
  ds.labels = one_hot(labels, classes);
  ds.num_classes = classes;
  const int64_t n_test = static_cast<int64_t>(static_cast<double>(samples) * test_fraction);
  ds.split.assign(static_cast<size_t>(samples), static_cast<uint8_t>(Split::Train));
  // Deterministic tail split keeps class balance (samples interleave classes).
  for (int64_t i = samples - n_test; i < samples; ++i)
    ds.split[static_cast<size_t>(i)] = static_cast<uint8_t>(Split::Test);
  return ds;
}

}  // namespace qrobust
