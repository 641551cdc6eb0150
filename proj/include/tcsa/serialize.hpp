#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tcsa/network.hpp"

namespace tcsa {

// Flat binary parameter container:
//   magic "TCSA", version u32, tensor count u32, then per tensor
//   name length u32, name bytes, rank u32, extents u32 x rank,
//   f32 payload little-endian. See docs/formats.md.
struct NamedTensorF32 {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> values;
};

void write_container(const std::string& path, const std::vector<NamedTensorF32>& tensors);
std::vector<NamedTensorF32> read_container(const std::string& path);

template <class T>
void save_model(Model<T>& m, const std::string& path) {
  std::vector<NamedTensorF32> out;
  auto dump = [&](const std::string& name, TensorT<T>& t) {
    NamedTensorF32 nt;
    nt.name = name;
    for (auto e : t.shape) nt.extents.push_back(static_cast<std::uint32_t>(e));
    nt.values.reserve(t.numel());
    for (T v : *t.data) nt.values.push_back(static_cast<float>(v));
    out.push_back(std::move(nt));
  };
  visit_params(m, dump);
  visit_buffers(m, [&](const std::string& name, TensorT<T>& t) { dump("buffer." + name, t); });
  write_container(path, out);
}

template <class T>
void load_model(Model<T>& m, const std::string& path) {
  auto tensors = read_container(path);
  std::size_t cursor = 0;
  auto fill = [&](const std::string& name, TensorT<T>& t) {
    if (cursor >= tensors.size()) throw TensorError("load: missing tensor " + name);
    const auto& nt = tensors[cursor++];
    const std::string want = nt.name;
    if (want != name && want != "buffer." + name)
      throw TensorError("load: expected " + name + ", found " + want);
    if (nt.values.size() != t.numel()) throw TensorError("load: size mismatch for " + name);
    for (std::size_t i = 0; i < t.numel(); ++i) (*t.data)[i] = static_cast<T>(nt.values[i]);
  };
  visit_params(m, fill);
  visit_buffers(m, fill);
  if (cursor != tensors.size()) throw TensorError("load: trailing tensors in container");
}

}  // namespace tcsa
