#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "tcsa/config.hpp"
#include "tcsa/image_io.hpp"
#include "tcsa/metrics.hpp"
#include "tcsa/serialize.hpp"
#include "tcsa/trace_io.hpp"
#include "testutil.hpp"

using namespace tcsa;

namespace {

std::string temp_path(const std::string& name) { return "/tmp/tcsa_test_" + name; }

void put32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

void add_chunk(std::string& png, const char* type, const std::string& body) {
  put32(png, static_cast<std::uint32_t>(body.size()));
  std::string tb = std::string(type) + body;
  png += tb;
  const auto crc = crc32(0, reinterpret_cast<const Bytef*>(tb.data()), static_cast<uInt>(tb.size()));
  put32(png, static_cast<std::uint32_t>(crc));
}

// Minimal straight-line PNG writer for fixtures.
void write_png(const std::string& path, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& rgb) {
  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put32(ihdr, static_cast<std::uint32_t>(w));
  put32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);  // no interlace
  add_chunk(png, "IHDR", ihdr);

  std::string raw;
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back(0);  // filter none
    for (std::size_t x = 0; x < w * 3; ++x)
      raw.push_back(static_cast<char>(rgb[y * w * 3 + x]));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(bound, '\0');
  REQUIRE(compress(reinterpret_cast<Bytef*>(packed.data()), &bound,
                   reinterpret_cast<const Bytef*>(raw.data()),
                   static_cast<uLong>(raw.size())) == Z_OK);
  packed.resize(bound);
  add_chunk(png, "IDAT", packed);
  add_chunk(png, "IEND", "");

  std::ofstream os(path, std::ios::binary);
  os << png;
}

}  // namespace

TEST_CASE("config: stage and model keys land in the right slots") {
  ModelConfig cfg = ModelConfig::paper_config();
  apply_config_text(
      "# comment line\n"
      "model.height = 256\n"
      "model.classes = 4\n"
      "encoder.stage2.rho = 0.45   # trailing comment\n"
      "decoder.stage1.mode = merge\n"
      "options.cosine_similarity = true\n",
      cfg);
  CHECK(cfg.height == 256);
  CHECK(cfg.num_classes == 4);
  CHECK(cfg.stages[1].rho == doctest::Approx(0.45));
  CHECK(cfg.stages[4].mode == CompressMode::kMergeOnly);
  CHECK(cfg.compress.cosine_similarity);
}

TEST_CASE("config: an unknown key is an error naming the key") {
  ModelConfig cfg;
  try {
    apply_config_text("encoder.stage1.rho_x = 0.2\n", cfg);
    FAIL("expected a parse error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("encoder.stage1.rho_x") != std::string::npos);
  }
  CHECK_THROWS(apply_config_text("bogus line\n", cfg));
  CHECK_THROWS(apply_config_text("model.nope = 1\n", cfg));
  CHECK_THROWS(apply_config_text("encoder.stage9.rho = 0.5\n", cfg));
}

TEST_CASE("mode names round trip") {
  for (auto m : {CompressMode::kNone, CompressMode::kPruneOnly, CompressMode::kMergeOnly,
                 CompressMode::kPruneAndMerge})
    CHECK(parse_mode(to_string(m)) == m);
  CHECK_THROWS(parse_mode("both"));
}

TEST_CASE("trace text round trips") {
  LayerTraceRecord r;
  r.layer = 3;
  r.total_tokens = 6;
  r.kept_tokens = 4;
  r.merged_edges = 1;
  r.top_k = 2;
  r.heads = 2;
  r.mask = {1, 0, 1, 1, 0, 1};
  r.kept = {0, 2, 3, 5};
  r.edges = {{1, 0, 0.625}};
  r.topk = {{0, 2}, {1, 2}, {2, 0}, {0, 1}, {2, 1}, {1, 0}};

  std::ostringstream os;
  write_trace(os, {r, r});
  std::istringstream is(os.str());
  auto parsed = parse_trace(is);
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0] == r);
  CHECK(parsed[1] == r);
}

TEST_CASE("trace parser rejects malformed input") {
  std::istringstream stray("end\n");
  CHECK_THROWS(parse_trace(stray));
  std::istringstream unterminated("layer 0 N=2 n=2 r=0 k=1 heads=1\nmask c\n");
  CHECK_THROWS(parse_trace(unterminated));
  std::istringstream badcount(
      "layer 0 N=2 n=2 r=0 k=1 heads=1\nmask c\nkept 0\nend\n");
  CHECK_THROWS(parse_trace(badcount));
}

TEST_CASE("parameter container round trips and checks its framing") {
  const auto path = temp_path("container.bin");
  std::vector<NamedTensorF32> tensors;
  tensors.push_back({"a", {2, 3}, {1, 2, 3, 4, 5, 6}});
  tensors.push_back({"b", {1}, {-0.5f}});
  write_container(path, tensors);
  auto back = read_container(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].extents == std::vector<std::uint32_t>{2, 3});
  CHECK(back[0].values == tensors[0].values);
  CHECK(back[1].values[0] == -0.5f);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  try {
    read_container(path);
    FAIL("expected a format error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(path) != std::string::npos);
  }
  CHECK_THROWS(read_container(temp_path("missing.bin")));
  std::remove(path.c_str());
}

TEST_CASE("model weights survive a save and load") {
  ModelConfig cfg = ModelConfig::toy_config();
  cfg.height = cfg.width = 32;
  auto m = model_init<float>(cfg);
  const auto path = temp_path("weights.bin");
  save_model(m, path);

  cfg.seed = 99;
  auto other = model_init<float>(cfg);
  CHECK(*other.embed.w.data != *m.embed.w.data);
  load_model(other, path);
  bool all_equal = true;
  visit_params(m, [&](const std::string& name, Tensor& t) {
    visit_params(other, [&](const std::string& name2, Tensor& t2) {
      if (name == name2 && *t.data != *t2.data) all_equal = false;
    });
  });
  CHECK(all_equal);
  CHECK(*other.embed.w.data == *m.embed.w.data);
  std::remove(path.c_str());
}

TEST_CASE("metrics: hand values") {
  // pred covers half of a 4-pixel object
  auto m = segmentation_metrics({1, 1, 0, 0, 0, 0}, {1, 1, 1, 1, 0, 0}, 2);
  CHECK(m.dsc[1] == doctest::Approx(2.0 * 2 / (2 + 4)));
  CHECK(m.miou == doctest::Approx(0.5 * (2.0 / 4.0 + 2.0 / 4.0)));

  auto perfect = segmentation_metrics({0, 1, 2}, {0, 1, 2}, 3);
  CHECK(perfect.mean_dsc == doctest::Approx(1.0));
  CHECK(perfect.miou == doctest::Approx(1.0));

  // class 2 absent from both masks scores 1
  auto absent = segmentation_metrics({0, 1}, {0, 1}, 3);
  CHECK(absent.dsc[2] == doctest::Approx(1.0));

  CHECK_THROWS(segmentation_metrics({0}, {0, 1}, 2));
}

TEST_CASE("pgm round trips through the loader") {
  const auto path = temp_path("mask.pgm");
  std::vector<std::uint8_t> px = {0, 1, 2, 3, 4, 5};
  save_pgm(path, 3, 2, px);
  auto img = load_image(path);
  CHECK(img.width == 3);
  CHECK(img.height == 2);
  CHECK(img.channels == 1);
  CHECK(img.pixels == px);
  std::remove(path.c_str());
}

TEST_CASE("png decode recovers the pixel values") {
  const auto path = temp_path("img.png");
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> rgb(5 * 4 * 3);
  for (auto& v : rgb) v = static_cast<std::uint8_t>(rng());
  write_png(path, 5, 4, rgb);
  auto img = load_image(path);
  CHECK(img.width == 5);
  CHECK(img.height == 4);
  CHECK(img.channels == 3);
  CHECK(img.pixels == rgb);
  std::remove(path.c_str());
}

TEST_CASE("corrupt image files raise errors naming the file") {
  const auto path = temp_path("broken.png");
  {
    std::ofstream os(path, std::ios::binary);
    os << "\x89PNG\r\n\x1a\nnot really";
  }
  try {
    load_image(path);
    FAIL("expected a decode error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(path) != std::string::npos);
  }
  CHECK_THROWS(load_image(temp_path("absent.png")));
  std::remove(path.c_str());
}

TEST_CASE("resize and channel expansion helpers") {
  Image g;
  g.width = 2;
  g.height = 1;
  g.channels = 1;
  g.pixels = {10, 200};
  auto up = resize_nearest(g, 4, 2);
  CHECK(up.width == 4);
  CHECK(up.height == 2);
  CHECK(up.pixels[0] == 10);
  CHECK(up.pixels[3] == 200);
  auto rgb = to_rgb(g);
  CHECK(rgb.channels == 3);
  CHECK(rgb.pixels == std::vector<std::uint8_t>{10, 10, 10, 200, 200, 200});
}
