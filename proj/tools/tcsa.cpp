// Command line front end: inference, cost reports, routing traces and a
// small synthetic training loop.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "tcsa/config.hpp"
#include "tcsa/flops.hpp"
#include "tcsa/image_io.hpp"
#include "tcsa/metrics.hpp"
#include "tcsa/network.hpp"
#include "tcsa/serialize.hpp"
#include "tcsa/synthetic.hpp"
#include "tcsa/trace_io.hpp"

namespace {

using namespace tcsa;

int threads_from_env() {
  const char* v = std::getenv("TCSA_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n > 0 ? n : 1;
}

struct CommonArgs {
  std::string config_path;
  std::string mode;
  std::uint64_t seed = 0;
  bool have_seed = false;
};

ModelConfig build_config(const CommonArgs& a, const ModelConfig& base) {
  ModelConfig cfg = base;
  if (!a.config_path.empty()) apply_config_file(a.config_path, cfg);
  if (a.have_seed) cfg.seed = a.seed;
  return cfg;
}

std::optional<CompressMode> mode_override(const CommonArgs& a) {
  if (a.mode.empty()) return std::nullopt;
  return parse_mode(a.mode);
}

Tensor image_to_tensor(const Image& img, std::size_t height, std::size_t width) {
  Image rgb = to_rgb(resize_nearest(img, width, height));
  Tensor t({1, height, width, 3});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        t.at(0, y, x, c) = static_cast<float>(rgb.at(y, x, c)) / 255.0f;
  return t;
}

std::vector<std::uint8_t> argmax_mask(const Tensor& logits) {
  const std::size_t h = logits.shape[1], w = logits.shape[2], cls = logits.shape[3];
  std::vector<std::uint8_t> mask(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cls; ++c)
      if ((*logits.data)[p * cls + c] > (*logits.data)[p * cls + best]) best = c;
    mask[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

void dump_trace(const std::string& path, const SegmentationOutput<float>& out) {
  std::vector<LayerTraceRecord> records;
  for (std::size_t i = 0; i < out.states.size(); ++i)
    records.push_back(make_trace_record(static_cast<int>(i), out.states[i], out.traces[i]));
  write_trace_file(path, records);
}

int run_infer(const CommonArgs& common, const std::string& image_path,
              const std::string& weights_path, const std::string& out_path,
              const std::string& trace_path) {
  ModelConfig cfg = build_config(common, ModelConfig::paper_config());
  auto model = model_init<float>(cfg);
  if (!weights_path.empty()) load_model(model, weights_path);

  Tensor input = image_to_tensor(load_image(image_path), cfg.height, cfg.width);
  ForwardOptions<float> opt;
  opt.trace = !trace_path.empty();
  opt.mode_override = mode_override(common);
  auto out = forward<float>(nullptr, model, input, opt);

  save_pgm(out_path, cfg.width, cfg.height, argmax_mask(out.logits));
  if (!trace_path.empty()) dump_trace(trace_path, out);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int run_flops(const CommonArgs& common, const std::string& out_path, bool kv) {
  ModelConfig cfg = build_config(common, ModelConfig::paper_config());
  auto report = count_model(cfg, mode_override(common));
  const std::string text = kv ? report.to_kv() : report.to_text();
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream os(out_path, std::ios::binary);
    os << text;
    if (!os) {
      std::cerr << "error: cannot write " << out_path << "\n";
      return 1;
    }
  }
  return 0;
}

int run_trace(const CommonArgs& common, const std::string& out_path) {
  ModelConfig cfg = build_config(common, ModelConfig::toy_config());
  auto model = model_init<float>(cfg);
  auto sample = make_synthetic_sample<float>(cfg.height, cfg.width, cfg.num_classes, cfg.seed);
  ForwardOptions<float> opt;
  opt.trace = true;
  opt.mode_override = mode_override(common);
  auto out = forward<float>(nullptr, model, sample.image, opt);
  dump_trace(out_path, out);
  std::cout << "wrote " << out_path << " (" << out.states.size() << " layers)\n";
  return 0;
}

int run_overfit(const CommonArgs& common, int steps, float lr, const std::string& weights_out) {
  ModelConfig cfg = build_config(common, ModelConfig::toy_config());
  auto model = model_init<float>(cfg);
  auto sample = make_synthetic_sample<float>(cfg.height, cfg.width, cfg.num_classes, cfg.seed);

  for (int step = 1; step <= steps; ++step) {
    const float loss = train_step(model, sample.image, sample.target, lr);
    if (step == 1 || step % 10 == 0 || step == steps)
      std::printf("step %4d  loss %.6f\n", step, static_cast<double>(loss));
  }

  auto out = forward<float>(nullptr, model, sample.image);
  auto mask = argmax_mask(out.logits);
  std::vector<int> pred(mask.begin(), mask.end());
  auto metrics = segmentation_metrics(pred, sample.target, cfg.num_classes);
  std::printf("mean dsc %.4f  miou %.4f\n", metrics.mean_dsc, metrics.miou);
  if (!weights_out.empty()) save_model(model, weights_out);
  return metrics.mean_dsc >= 0.95 ? 0 : 2;
}

int run_selftest(const CommonArgs& common) {
  ModelConfig cfg = build_config(common, ModelConfig::toy_config());
  auto model = model_init<float>(cfg);
  auto sample = make_synthetic_sample<float>(cfg.height, cfg.width, cfg.num_classes, cfg.seed);
  auto out = forward<float>(nullptr, model, sample.image);
  check_finite(out.logits, "selftest logits");
  auto report = count_model(cfg);
  std::cout << "forward ok, logits " << out.logits.shape[1] << "x" << out.logits.shape[2] << "x"
            << out.logits.shape[3] << ", cost " << report.total << " macs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-compressed segmentation network"};
  app.require_subcommand(1);
  (void)threads_from_env();

  CommonArgs common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "configuration file");
    cmd->add_option("--mode", common.mode, "none | prune | merge | prune_merge");
    cmd->add_option("--seed", common.seed, "rng seed")->each([&](const std::string&) {
      common.have_seed = true;
    });
  };

  std::string image_path, weights_path, out_path, trace_path;
  int steps = 300;
  float lr = 0.1f;
  bool kv = false;

  auto* infer = app.add_subcommand("infer", "segment an image");
  add_common(infer);
  infer->add_option("--image", image_path, "input image (png / pgm / ppm)")->required();
  infer->add_option("--weights", weights_path, "parameter container");
  infer->add_option("--out", out_path, "output mask (pgm)")->required();
  infer->add_option("--trace", trace_path, "routing trace output");

  auto* flops = app.add_subcommand("flops", "analytic cost report");
  add_common(flops);
  flops->add_option("--out", out_path, "write report here instead of stdout");
  flops->add_flag("--kv", kv, "machine readable key=value output");

  auto* trace = app.add_subcommand("trace", "routing trace on a synthetic sample");
  add_common(trace);
  trace->add_option("--out", out_path, "trace output path")->required();

  auto* overfit = app.add_subcommand("overfit", "train on one synthetic sample");
  add_common(overfit);
  overfit->add_option("--steps", steps, "gradient steps");
  overfit->add_option("--lr", lr, "learning rate");
  overfit->add_option("--out", out_path, "save trained parameters here");

  auto* selftest = app.add_subcommand("selftest", "quick forward smoke check");
  add_common(selftest);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*infer) return run_infer(common, image_path, weights_path, out_path, trace_path);
    if (*flops) return run_flops(common, out_path, kv);
    if (*trace) return run_trace(common, out_path);
    if (*overfit) return run_overfit(common, steps, lr, out_path);
    if (*selftest) return run_selftest(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
