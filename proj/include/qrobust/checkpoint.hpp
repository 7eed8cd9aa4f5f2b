#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qrobust/model.hpp"

namespace qrobust {

// "QRB1" parameter checkpoint, little-endian:
//   magic[4] = "QRB1"
//   u32 block_count
//   per block: u32 name_len, name bytes (UTF-8), u32 rank, u32 extents[rank],
//              f32 payload, row-major
//
// Blocks hold the full-precision shadow weights; quantization is applied on
// read at inference/training time and never baked into the file.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

inline bool get_f32(std::istream& is, float& f) {
  uint32_t v;
  if (!get_u32(is, v)) return false;
  std::memcpy(&f, &v, 4);
  return true;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, TensorF>>& blocks) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  os.write("QRB1", 4);
  detail::put_u32(os, static_cast<uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape) detail::put_u32(os, static_cast<uint32_t>(e));
    for (float v : t.data) detail::put_f32(os, v);
  }
  if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<std::pair<std::string, TensorF>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "QRB1", 4) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "' (expected QRB1)");
  uint32_t count;
  if (!detail::get_u32(is, count)) throw DataError("checkpoint: truncated header");
  std::vector<std::pair<std::string, TensorF>> blocks;
  for (uint32_t b = 0; b < count; ++b) {
    uint32_t name_len;
    if (!detail::get_u32(is, name_len))
      throw DataError("checkpoint: truncated at block " + std::to_string(b));
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw DataError("checkpoint: truncated name at block " + std::to_string(b));
    uint32_t rank;
    if (!detail::get_u32(is, rank))
      throw DataError("checkpoint: truncated rank at block '" + name + "'");
    Shape shape;
    int64_t total = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t e;
      if (!detail::get_u32(is, e))
        throw DataError("checkpoint: truncated extents at block '" + name + "'");
      shape.push_back(static_cast<int64_t>(e));
      total *= e;
    }
    std::vector<float> data(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i)
      if (!detail::get_f32(is, data[static_cast<size_t>(i)]))
        throw DataError("checkpoint: truncated payload at block '" + name + "'");
    blocks.emplace_back(std::move(name), TensorF(std::move(shape), std::move(data)));
  }
  return blocks;
}

// Model round-trip: shadow parameters by name (f32 payload; a double model
// narrows through float, matching the on-disk precision).
template <typename T>
void save_model(const std::string& path, const Model<T>& m) {
  std::vector<std::pair<std::string, TensorF>> blocks;
  for (int id : m.graph.parameters()) {
    const auto& n = m.graph.node(id);
    TensorF t(n.value.shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(n.value[i]);
    blocks.emplace_back(n.name, std::move(t));
  }
  save_checkpoint(path, blocks);
}

template <typename T>
void load_model(const std::string& path, Model<T>& m) {
  auto blocks = load_checkpoint(path);
  std::map<std::string, const TensorF*> by_name;
  for (const auto& [name, t] : blocks) by_name[name] = &t;
  for (int id : m.graph.parameters()) {
    auto& n = m.graph.node(id);
    auto it = by_name.find(n.name);
    if (it == by_name.end())
      throw DataError("checkpoint: missing block '" + n.name + "' in '" + path + "'");
    if (it->second->shape != n.value.shape)
      throw DataError("checkpoint: block '" + n.name + "' shape " +
                      shape_str(it->second->shape) + " != model shape " +
                      shape_str(n.value.shape));
    Tensor<T> v(n.value.shape);
    for (int64_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((*it->second)[i]);
    m.graph.set_value(id, std::move(v));
  }
}

}  // namespace qrobust
