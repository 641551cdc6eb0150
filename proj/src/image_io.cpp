#include "tcsa/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tcsa {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error(path + ": " + why);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(path, "cannot open");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& in, std::size_t hint,
                                       const std::string& path) {
  std::vector<std::uint8_t> out;
  out.reserve(hint);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) fail(path, "zlib init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::uint8_t buf[65536];
  int ret = Z_OK;
  while (ret != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof(buf);
    ret = inflate(&zs, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(path, "corrupt PNG (zlib error)");
    }
    out.insert(out.end(), buf, buf + sizeof(buf) - zs.avail_out);
  }
  inflateEnd(&zs);
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

Image decode_png(const std::vector<std::uint8_t>& file, const std::string& path) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0) fail(path, "not a PNG");
  std::size_t pos = 8;
  std::size_t width = 0, height = 0, channels = 0;
  int bit_depth = 0, color_type = -1;
  std::vector<std::uint8_t> idat;
  bool done = false;
  while (!done) {
    if (pos + 8 > file.size()) fail(path, "corrupt PNG (truncated chunk)");
    const std::uint32_t len = be32(&file[pos]);
    const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
    if (pos + 12 + len > file.size()) fail(path, "corrupt PNG (truncated chunk)");
    const std::uint8_t* data = &file[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) fail(path, "corrupt PNG (bad IHDR)");
      width = be32(data);
      height = be32(data + 4);
      bit_depth = data[8];
      color_type = data[9];
      if (data[12] != 0) fail(path, "interlaced PNG not supported");
      if (bit_depth != 8) fail(path, "only 8-bit PNG supported");
      switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 6: channels = 4; break;
        default: fail(path, "unsupported PNG color type");
      }
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      done = true;
    }
    pos += 12 + len;
  }
  if (width == 0 || height == 0 || idat.empty()) fail(path, "corrupt PNG (missing data)");
  const std::size_t stride = width * channels;
  auto raw = zlib_inflate(idat, (stride + 1) * height, path);
  if (raw.size() != (stride + 1) * height) fail(path, "corrupt PNG (bad image size)");

  std::vector<std::uint8_t> pixels(stride * height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = &raw[y * (stride + 1) + 1];
    std::uint8_t* dst = &pixels[y * stride];
    const std::uint8_t* prev = y > 0 ? &pixels[(y - 1) * stride] : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= channels ? dst[i - channels] : 0;
      const int b = prev ? prev[i] : 0;
      const int c = (prev && i >= channels) ? prev[i - channels] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: fail(path, "corrupt PNG (bad filter)");
      }
      dst[i] = static_cast<std::uint8_t>(v);
    }
  }

  Image img;
  img.width = width;
  img.height = height;
  if (channels == 4) {
    img.channels = 3;
    img.pixels.resize(width * height * 3);
    for (std::size_t p = 0; p < width * height; ++p)
      for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = pixels[p * 4 + c];
  } else {
    img.channels = channels;
    img.pixels = std::move(pixels);
  }
  return img;
}

Image decode_pnm(const std::vector<std::uint8_t>& file, const std::string& path) {
  std::size_t pos = 2;
  const bool color = file[1] == '6';
  auto next_int = [&]() {
    while (pos < file.size() &&
           (std::isspace(file[pos]) || file[pos] == '#')) {
      if (file[pos] == '#')
        while (pos < file.size() && file[pos] != '\n') ++pos;
      else
        ++pos;
    }
    std::size_t v = 0;
    bool any = false;
    while (pos < file.size() && std::isdigit(file[pos])) {
      v = v * 10 + (file[pos++] - '0');
      any = true;
    }
    if (!any) fail(path, "corrupt PNM header");
    return v;
  };
  Image img;
  img.width = next_int();
  img.height = next_int();
  const std::size_t maxval = next_int();
  if (maxval != 255) fail(path, "only 8-bit PNM supported");
  ++pos;  // single whitespace after maxval
  img.channels = color ? 3 : 1;
  const std::size_t need = img.width * img.height * img.channels;
  if (file.size() - pos < need) fail(path, "corrupt PNM (truncated pixels)");
  img.pixels.assign(file.begin() + static_cast<long>(pos),
                    file.begin() + static_cast<long>(pos + need));
  return img;
}

}  // namespace

Image load_image(const std::string& path) {
  auto file = read_file(path);
  if (file.size() >= 8 && file[0] == 0x89 && file[1] == 'P') return decode_png(file, path);
  if (file.size() >= 2 && file[0] == 'P' && (file[1] == '5' || file[1] == '6'))
    return decode_pnm(file, path);
  fail(path, "unrecognized image format (need PNG, PGM, or PPM)");
}

void save_pgm(const std::string& path, std::size_t width, std::size_t height,
              const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) fail(path, "pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(path, "cannot open for writing");
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) fail(path, "write failed");
}

Image resize_nearest(const Image& src, std::size_t width, std::size_t height) {
  Image out;
  out.width = width;
  out.height = height;
  out.channels = src.channels;
  out.pixels.resize(width * height * src.channels);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(src.height - 1, y * src.height / height);
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(src.width - 1, x * src.width / width);
      for (std::size_t c = 0; c < src.channels; ++c)
        out.pixels[(y * width + x) * src.channels + c] = src.at(sy, sx, c);
    }
  }
  return out;
}

Image to_rgb(const Image& src) {
  if (src.channels == 3) return src;
  Image out;
  out.width = src.width;
  out.height = src.height;
  out.channels = 3;
  out.pixels.resize(src.width * src.height * 3);
  for (std::size_t p = 0; p < src.width * src.height; ++p)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[p * 3 + c] = src.pixels[p];
  return out;
}

}  // namespace tcsa
