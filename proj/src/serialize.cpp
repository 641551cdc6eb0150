#include "tcsa/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tcsa {

namespace {

constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("container: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_container(const std::string& path, const std::vector<NamedTensorF32>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("container: cannot open " + path);
  os.write("TCSA", 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.extents.size()));
    for (auto e : t.extents) put_u32(os, e);
    for (float v : t.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("container: write failed for " + path);
}

std::vector<NamedTensorF32> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("container: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TCSA", 4) != 0)
    throw std::runtime_error("container: bad magic in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) throw std::runtime_error("container: unsupported version");
  const std::uint32_t count = get_u32(is);
  std::vector<NamedTensorF32> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorF32 t;
    const std::uint32_t nlen = get_u32(is);
    t.name.resize(nlen);
    is.read(t.name.data(), nlen);
    const std::uint32_t rank = get_u32(is);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.extents.push_back(get_u32(is));
      numel *= t.extents.back();
    }
    t.values.resize(numel);
    for (std::size_t j = 0; j < numel; ++j) {
      const std::uint32_t bits = get_u32(is);
      float v;
      std::memcpy(&v, &bits, 4);
      t.values[j] = v;
    }
    if (!is) throw std::runtime_error("container: truncated file");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace tcsa
