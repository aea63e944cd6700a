#pragma once

// Checkpoint serialization. Little-endian binary:
//   magic "SADP", version u32, precision tag u8 (4 = single, 8 = double),
//   tensor count u32, then per tensor: name length u32, UTF-8 name,
//   4 dims as u32, raw values.
// Round-trips are bitwise exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "scaleadapt/model.hpp"
#include "scaleadapt/tensor.hpp"

namespace scaleadapt {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char buf[4];
  if (!is.read(reinterpret_cast<char*>(buf), 4))
    throw io_error("truncated checkpoint: " + path);
  return std::uint32_t(buf[0]) | (std::uint32_t(buf[1]) << 8) |
         (std::uint32_t(buf[2]) << 16) | (std::uint32_t(buf[3]) << 24);
}

}  // namespace detail

template <class T>
using TensorDict = std::map<std::string, Tensor<T>>;

template <class T>
void save_tensors(const std::string& path, const TensorDict<T>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os.write("SADP", 4);
  detail::write_u32(os, 1);
  const char tag = static_cast<char>(sizeof(T));
  os.write(&tag, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.n));
    detail::write_u32(os, static_cast<std::uint32_t>(t.c));
    detail::write_u32(os, static_cast<std::uint32_t>(t.h));
    detail::write_u32(os, static_cast<std::uint32_t>(t.w));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  }
  if (!os) throw io_error("write failed: " + path);
}

template <class T>
TensorDict<T> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SADP", 4) != 0)
    throw io_error("bad checkpoint magic: " + path);
  const std::uint32_t version = detail::read_u32(is, path);
  if (version != 1)
    throw io_error("unsupported checkpoint version " +
                   std::to_string(version) + ": " + path);
  char tag;
  if (!is.read(&tag, 1)) throw io_error("truncated checkpoint: " + path);
  if (tag != static_cast<char>(sizeof(T)))
    throw io_error("precision mismatch (tag " + std::to_string(int(tag)) +
                   ", expected " + std::to_string(sizeof(T)) + "): " + path);
  const std::uint32_t count = detail::read_u32(is, path);
  TensorDict<T> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::read_u32(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw io_error("truncated checkpoint: " + path);
    const int n = static_cast<int>(detail::read_u32(is, path));
    const int c = static_cast<int>(detail::read_u32(is, path));
    const int h = static_cast<int>(detail::read_u32(is, path));
    const int w = static_cast<int>(detail::read_u32(is, path));
    Tensor<T> t(n, c, h, w);
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(T))))
      throw io_error("truncated checkpoint: " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

namespace detail {

template <class T>
Tensor<T> bias_tensor(const std::vector<T>& b) {
  Tensor<T> t(1, static_cast<int>(b.size()), 1, 1);
  t.data = b;
  return t;
}

template <class T>
void put_layer(TensorDict<T>& d, const std::string& prefix,
               const ConvLayer<T>& layer) {
  d[prefix + ".w"] = layer.weights;
  d[prefix + ".b"] = bias_tensor(layer.bias);
}

template <class T>
void get_layer(const TensorDict<T>& d, const std::string& prefix,
               ConvLayer<T>& layer, const std::string& path) {
  auto wi = d.find(prefix + ".w");
  auto bi = d.find(prefix + ".b");
  if (wi == d.end() || bi == d.end())
    throw io_error("checkpoint missing tensor " + prefix + ": " + path);
  layer.weights = wi->second;
  layer.bias = bi->second.data;
}

}  // namespace detail

template <class T>
void save_model(const std::string& path, const Model<T>& m) {
  TensorDict<T> d;
  detail::put_layer(d, "backbone.conv1", m.backbone.conv1);
  detail::put_layer(d, "backbone.conv2", m.backbone.conv2);
  detail::put_layer(d, "backbone.conv3", m.backbone.conv3);
  detail::put_layer(d, "head.scale", m.head.scale);
  detail::put_layer(d, "head.free", m.head.free);
  detail::put_layer(d, "head.score", m.head.score);
  save_tensors(path, d);
}

template <class T>
Model<T> load_model(const std::string& path) {
  const TensorDict<T> d = load_tensors<T>(path);
  Model<T> m;
  detail::get_layer(d, "backbone.conv1", m.backbone.conv1, path);
  detail::get_layer(d, "backbone.conv2", m.backbone.conv2, path);
  detail::get_layer(d, "backbone.conv3", m.backbone.conv3, path);
  detail::get_layer(d, "head.scale", m.head.scale, path);
  detail::get_layer(d, "head.free", m.head.free, path);
  detail::get_layer(d, "head.score", m.head.score, path);
  m.num_classes = m.head.score.weights.n;
  return m;
}

}  // namespace scaleadapt
