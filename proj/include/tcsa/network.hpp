#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tcsa/attention.hpp"
#include "tcsa/compression.hpp"
#include "tcsa/dbffn.hpp"
#include "tcsa/decompression.hpp"
#include "tcsa/ops.hpp"

namespace tcsa {

struct StageConfig {
  std::size_t channels = 64;
  std::size_t depth = 2;
  double rho = 1.0;       // keep fraction
  double rho_m = 0.0;     // merge fraction
  double lambda = 1.0 / 8.0;
  std::size_t head_dim = 32;
  CompressMode mode = CompressMode::kPruneAndMerge;
};

struct ModelConfig {
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t num_classes = 9;
  std::size_t embed_dim = 64;
  std::uint64_t seed = 0;
  std::array<StageConfig, 8> stages;  // 0..3 encoder, 4..7 decoder
  CompressOptions compress;
  bool use_mlp_ffn = false;  // ablation toggle: plain MLP feed-forward

  void validate() const {
    if (height % 32 != 0 || width % 32 != 0)
      throw TensorError("config: input extents must be divisible by 32");
    for (std::size_t i = 0; i < 8; ++i) {
      if (stages[i].channels % stages[i].head_dim != 0)
        throw TensorError("config: channels not divisible by head_dim in stage " + std::to_string(i + 1));
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (stages[4 + i].channels != stages[3 - i].channels)
        throw TensorError("config: decoder stage " + std::to_string(5 + i) +
                          " must mirror encoder channels");
    }
  }

  static ModelConfig paper_config() {
    ModelConfig c;
    c.height = c.width = 224;
    c.num_classes = 9;
    c.embed_dim = 64;
    const std::size_t ch[4] = {64, 128, 256, 512};
    const std::size_t depth[8] = {2, 2, 8, 1, 1, 8, 2, 2};
    const double rho[4] = {0.5, 0.4, 0.3, 0.1};
    const double rho_m[4] = {0.3, 0.2, 0.1, 0.1};
    for (std::size_t i = 0; i < 4; ++i) {
      c.stages[i].channels = ch[i];
      c.stages[i].depth = depth[i];
      c.stages[i].rho = rho[i];
      c.stages[i].rho_m = rho_m[i];
      // decoder mirrors the encoder stage at the same resolution
      c.stages[4 + i].channels = ch[3 - i];
      c.stages[4 + i].depth = depth[4 + i];
      c.stages[4 + i].rho = rho[3 - i];
      c.stages[4 + i].rho_m = rho_m[3 - i];
    }
    return c;
  }

  static ModelConfig toy_config() {
    ModelConfig c;
    c.height = c.width = 64;
    c.num_classes = 3;
    c.embed_dim = 16;
    const std::size_t ch[4] = {16, 32, 64, 128};
    const std::size_t depth[8] = {1, 1, 2, 1, 1, 2, 1, 1};
    const double rho[4] = {0.5, 0.4, 0.3, 0.1};
    const double rho_m[4] = {0.3, 0.2, 0.1, 0.1};
    for (std::size_t i = 0; i < 4; ++i) {
      c.stages[i].channels = ch[i];
      c.stages[i].depth = depth[i];
      c.stages[i].rho = rho[i];
      c.stages[i].rho_m = rho_m[i];
      c.stages[i].head_dim = 16;
      c.stages[4 + i].channels = ch[3 - i];
      c.stages[4 + i].depth = depth[4 + i];
      c.stages[4 + i].rho = rho[3 - i];
      c.stages[4 + i].rho_m = rho_m[3 - i];
      c.stages[4 + i].head_dim = 16;
    }
    return c;
  }
};

template <class T>
struct BlockParams {
  TensorT<T> pos_w, pos_b;       // positional depthwise 3x3
  TensorT<T> ln1_gamma, ln1_beta;
  TensorT<T> score_w1, score_w2;  // importance scoring projections
  AttentionParams<T> attn;
  TensorT<T> ln2_gamma, ln2_beta;
  DbffnParams<T> ffn;
  MlpFfnParams<T> mlp_ffn;
};

template <class T>
struct PatchConvParams {
  TensorT<T> w, b;               // [k,k,Cin,Cout]
  TensorT<T> ln_gamma, ln_beta;  // on Cout
};

template <class T>
struct ExpandParams {
  TensorT<T> w, b;               // pointwise Cin -> f^2 * Cout
  TensorT<T> ln_gamma, ln_beta;  // on Cout
  std::size_t factor = 2;
  std::size_t out_channels = 0;
};

template <class T>
struct SkipFuseParams {
  TensorT<T> w, b;  // [2C, C]
};

template <class T>
struct SegmentationOutput {
  TensorT<T> logits;  // [B,H,W,num_classes]
  std::vector<CompressionState<T>> states;
  std::vector<AttentionTrace<T>> traces;
};

template <class T>
struct Model {
  ModelConfig cfg;
  PatchConvParams<T> embed;                  // 7x7 stride 4
  std::array<PatchConvParams<T>, 3> merges;  // encoder stages 2..4
  std::array<std::vector<BlockParams<T>>, 8> blocks;
  std::array<ExpandParams<T>, 3> expands;    // decoder 2x upsamplings
  std::array<SkipFuseParams<T>, 3> skips;    // at H/16, H/8, H/4
  ExpandParams<T> head_expand;               // final 4x
  TensorT<T> head_w, head_b;                 // C -> num_classes
};

namespace detail {

template <class T, class Rng>
TensorT<T> param(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  auto t = trunc_normal<T>(std::move(shape), sigma, rng);
  t.set_requires_grad();
  return t;
}

template <class T>
TensorT<T> zero_param(std::vector<std::size_t> shape) {
  auto t = TensorT<T>::zeros(std::move(shape));
  t.set_requires_grad();
  return t;
}

template <class T>
TensorT<T> one_param(std::vector<std::size_t> shape) {
  auto t = TensorT<T>::full(std::move(shape), T(1));
  t.set_requires_grad();
  return t;
}

}  // namespace detail

template <class T, class Rng>
BlockParams<T> block_init(const StageConfig& sc, Rng& rng, bool use_mlp_ffn, double sigma = 0.02) {
  using namespace detail;
  const std::size_t C = sc.channels;
  BlockParams<T> p;
  p.pos_w = param<T>({C, 3, 3}, sigma, rng);
  p.pos_b = zero_param<T>({C});
  p.ln1_gamma = one_param<T>({C});
  p.ln1_beta = zero_param<T>({C});
  p.score_w1 = param<T>({C, C}, sigma, rng);
  p.score_w2 = param<T>({C, C}, sigma, rng);
  p.attn.wq = param<T>({C, C}, sigma, rng);
  p.attn.wk = param<T>({C, C}, sigma, rng);
  p.attn.wv = param<T>({C, C}, sigma, rng);
  p.attn.head_dim = sc.head_dim;
  p.attn.lambda = sc.lambda;
  p.ln2_gamma = one_param<T>({C});
  p.ln2_beta = zero_param<T>({C});
  if (use_mlp_ffn)
    p.mlp_ffn = mlp_ffn_init<T>(C, rng, sigma);
  else
    p.ffn = dbffn_init<T>(C, rng, sigma);
  return p;
}

template <class T>
Model<T> model_init(const ModelConfig& cfg) {
  cfg.validate();
  using namespace detail;
  std::mt19937_64 rng(cfg.seed);
  const double sigma = 0.02;
  Model<T> m;
  m.cfg = cfg;

  auto patch = [&](std::size_t k, std::size_t cin, std::size_t cout) {
    PatchConvParams<T> p;
    p.w = param<T>({k, k, cin, cout}, sigma, rng);
    p.b = zero_param<T>({cout});
    p.ln_gamma = one_param<T>({cout});
    p.ln_beta = zero_param<T>({cout});
    return p;
  };
  m.embed = patch(7, 3, cfg.stages[0].channels);
  for (std::size_t i = 0; i < 3; ++i)
    m.merges[i] = patch(3, cfg.stages[i].channels, cfg.stages[i + 1].channels);

  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t d = 0; d < cfg.stages[s].depth; ++d)
      m.blocks[s].push_back(block_init<T>(cfg.stages[s], rng, cfg.use_mlp_ffn, sigma));

  auto expand = [&](std::size_t cin, std::size_t cout, std::size_t factor) {
    ExpandParams<T> e;
    e.factor = factor;
    e.out_channels = cout;
    e.w = param<T>({cin, factor * factor * cout}, sigma, rng);
    e.b = zero_param<T>({factor * factor * cout});
    e.ln_gamma = one_param<T>({cout});
    e.ln_beta = zero_param<T>({cout});
    return e;
  };
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t cin = cfg.stages[4 + i].channels;
    const std::size_t cout = cfg.stages[5 + i].channels;
    m.expands[i] = expand(cin, cout, 2);
    m.skips[i].w = param<T>({2 * cout, cout}, sigma, rng);
    m.skips[i].b = zero_param<T>({cout});
  }
  m.head_expand = expand(cfg.stages[7].channels, cfg.embed_dim, 4);
  m.head_w = param<T>({cfg.embed_dim, cfg.num_classes}, sigma, rng);
  m.head_b = zero_param<T>({cfg.num_classes});
  return m;
}

// Visits every trainable tensor with a stable name, in a fixed order. The
// same order defines the serialized layout.
template <class T, class Fn>
void visit_params(Model<T>& m, Fn&& fn) {
  auto patch = [&](const std::string& pfx, PatchConvParams<T>& p) {
    fn(pfx + ".w", p.w);
    fn(pfx + ".b", p.b);
    fn(pfx + ".ln_gamma", p.ln_gamma);
    fn(pfx + ".ln_beta", p.ln_beta);
  };
  auto ffn = [&](const std::string& pfx, DbffnParams<T>& p) {
    fn(pfx + ".pre_gamma", p.pre_gamma);
    fn(pfx + ".pre_beta", p.pre_beta);
    fn(pfx + ".expand_w", p.expand_w);
    fn(pfx + ".expand_b", p.expand_b);
    fn(pfx + ".expand_gamma", p.expand_gamma);
    fn(pfx + ".expand_beta", p.expand_beta);
    fn(pfx + ".dw3_w", p.dw3_w);
    fn(pfx + ".dw3_b", p.dw3_b);
    fn(pfx + ".dw7_w", p.dw7_w);
    fn(pfx + ".dw7_b", p.dw7_b);
    fn(pfx + ".dw3b_w", p.dw3b_w);
    fn(pfx + ".dw3b_b", p.dw3b_b);
    fn(pfx + ".pw3_w", p.pw3_w);
    fn(pfx + ".pw3_b", p.pw3_b);
    fn(pfx + ".bn3_gamma", p.bn3_gamma);
    fn(pfx + ".bn3_beta", p.bn3_beta);
    fn(pfx + ".dw7b_w", p.dw7b_w);
    fn(pfx + ".dw7b_b", p.dw7b_b);
    fn(pfx + ".pw7_w", p.pw7_w);
    fn(pfx + ".pw7_b", p.pw7_b);
    fn(pfx + ".bn7_gamma", p.bn7_gamma);
    fn(pfx + ".bn7_beta", p.bn7_beta);
    fn(pfx + ".fuse_w", p.fuse_w);
    fn(pfx + ".fuse_b", p.fuse_b);
    fn(pfx + ".out_gamma", p.out_gamma);
    fn(pfx + ".out_beta", p.out_beta);
  };
  patch("embed", m.embed);
  for (std::size_t i = 0; i < 3; ++i) patch("merge" + std::to_string(i + 2), m.merges[i]);
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t d = 0; d < m.blocks[s].size(); ++d) {
      auto& b = m.blocks[s][d];
      const std::string pfx = "stage" + std::to_string(s + 1) + ".block" + std::to_string(d);
      fn(pfx + ".pos_w", b.pos_w);
      fn(pfx + ".pos_b", b.pos_b);
      fn(pfx + ".ln1_gamma", b.ln1_gamma);
      fn(pfx + ".ln1_beta", b.ln1_beta);
      fn(pfx + ".score_w1", b.score_w1);
      fn(pfx + ".score_w2", b.score_w2);
      fn(pfx + ".attn_wq", b.attn.wq);
      fn(pfx + ".attn_wk", b.attn.wk);
      fn(pfx + ".attn_wv", b.attn.wv);
      fn(pfx + ".ln2_gamma", b.ln2_gamma);
      fn(pfx + ".ln2_beta", b.ln2_beta);
      if (m.cfg.use_mlp_ffn) {
        fn(pfx + ".ffn.w1", b.mlp_ffn.w1);
        fn(pfx + ".ffn.b1", b.mlp_ffn.b1);
        fn(pfx + ".ffn.w2", b.mlp_ffn.w2);
        fn(pfx + ".ffn.b2", b.mlp_ffn.b2);
      } else {
        ffn(pfx + ".ffn", b.ffn);
      }
    }
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string pfx = "expand" + std::to_string(i + 1);
    fn(pfx + ".w", m.expands[i].w);
    fn(pfx + ".b", m.expands[i].b);
    fn(pfx + ".ln_gamma", m.expands[i].ln_gamma);
    fn(pfx + ".ln_beta", m.expands[i].ln_beta);
    fn("skip" + std::to_string(i + 1) + ".w", m.skips[i].w);
    fn("skip" + std::to_string(i + 1) + ".b", m.skips[i].b);
  }
  fn("head_expand.w", m.head_expand.w);
  fn("head_expand.b", m.head_expand.b);
  fn("head_expand.ln_gamma", m.head_expand.ln_gamma);
  fn("head_expand.ln_beta", m.head_expand.ln_beta);
  fn("head.w", m.head_w);
  fn("head.b", m.head_b);
}

// Batch-norm running statistics (state, not trained).
template <class T, class Fn>
void visit_buffers(Model<T>& m, Fn&& fn) {
  if (m.cfg.use_mlp_ffn) return;
  auto bn = [&](const std::string& pfx, ops::BatchNormStateT<T>& s) {
    fn(pfx + ".mean", s.running_mean);
    fn(pfx + ".var", s.running_var);
  };
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t d = 0; d < m.blocks[s].size(); ++d) {
      auto& f = m.blocks[s][d].ffn;
      const std::string pfx = "stage" + std::to_string(s + 1) + ".block" + std::to_string(d) + ".ffn";
      bn(pfx + ".pre", f.pre_state);
      bn(pfx + ".expand", f.expand_state);
      bn(pfx + ".bn3", f.bn3_state);
      bn(pfx + ".bn7", f.bn7_state);
      bn(pfx + ".out", f.out_state);
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> patch_embed(TapeT<T>* tape, const TensorT<T>& img, PatchConvParams<T>& p) {
  if (img.rank() != 4 || img.shape[3] != 3) throw TensorError("patch_embed: expected [B,H,W,3]");
  if (img.shape[1] % 4 != 0 || img.shape[2] % 4 != 0)
    throw TensorError("patch_embed: extents not divisible by 4");
  TensorT<T> x = ops::conv2d(tape, img, p.w, p.b, 4, 3);
  return ops::layernorm(tape, x, p.ln_gamma, p.ln_beta);
}

template <class T>
TensorT<T> patch_merge(TapeT<T>* tape, const TensorT<T>& x, PatchConvParams<T>& p) {
  if (x.rank() != 4) throw TensorError("patch_merge: rank != 4");
  if (x.shape[1] % 2 != 0 || x.shape[2] % 2 != 0)
    throw TensorError("patch_merge: odd spatial extent");
  TensorT<T> y = ops::conv2d(tape, x, p.w, p.b, 2, 1);
  return ops::layernorm(tape, y, p.ln_gamma, p.ln_beta);
}

template <class T>
TensorT<T> patch_expand(TapeT<T>* tape, const TensorT<T>& x, ExpandParams<T>& p) {
  TensorT<T> y = ops::conv1x1(tape, x, p.w, p.b);
  y = ops::pixel_shuffle(tape, y, p.factor);
  return ops::layernorm(tape, y, p.ln_gamma, p.ln_beta);
}

template <class T>
TensorT<T> skip_fuse(TapeT<T>* tape, const TensorT<T>& dec, const TensorT<T>& enc,
                     SkipFuseParams<T>& p) {
  if (dec.shape != enc.shape) throw TensorError("skip_fuse: mismatched spatial extents");
  TensorT<T> cat = ops::concat_channels(tape, dec, enc);
  return ops::conv1x1(tape, cat, p.w, p.b);
}

template <class T>
struct ForwardOptions {
  bool training = false;
  bool trace = false;
  std::optional<CompressMode> mode_override;
};

template <class T>
TensorT<T> block_forward(TapeT<T>* tape, const TensorT<T>& x, BlockParams<T>& p,
                         const StageConfig& sc, const ModelConfig& cfg,
                         const ForwardOptions<T>& opt, SegmentationOutput<T>* out) {
  if (x.rank() != 4 || x.shape[3] != sc.channels) throw TensorError("block: channel mismatch");
  const std::size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
  const CompressMode mode = opt.mode_override.value_or(sc.mode);

  // positional encoding, residual depthwise conv
  TensorT<T> h = ops::add(tape, x, ops::dwconv(tape, x, p.pos_w, p.pos_b));

  // compressed attention on the token view, per batch item
  TensorT<T> normed = ops::layernorm(tape, h, p.ln1_gamma, p.ln1_beta);
  TensorT<T> flat = normed.reshaped({B * H * W, C});
  TensorT<T> ca_out;
  for (std::size_t b = 0; b < B; ++b) {
    TensorT<T> tokens = ops::slice_rows(tape, flat, b * H * W, H * W);
    auto [compressed, state] =
        compress(tape, tokens, p.score_w1, p.score_w2, sc.rho, sc.rho_m, mode, cfg.compress);
    auto [attended, trace] = tksa(tape, compressed, p.attn);
    TensorT<T> restored = decompress(tape, attended, state);
    if (out && opt.trace && b == 0) {
      out->states.push_back(state);
      out->traces.push_back(trace);
    }
    ca_out = (b == 0) ? restored : ops::concat_rows(tape, ca_out, restored);
  }
  h = ops::add(tape, h, ca_out.reshaped({B, H, W, C}));

  // feed-forward
  TensorT<T> n2 = ops::layernorm(tape, h, p.ln2_gamma, p.ln2_beta);
  TensorT<T> f = cfg.use_mlp_ffn ? mlp_ffn_forward(tape, n2, p.mlp_ffn)
                                 : dbffn_forward(tape, n2, p.ffn, opt.training);
  return ops::add(tape, h, f);
}

template <class T>
SegmentationOutput<T> forward(TapeT<T>* tape, Model<T>& m, const TensorT<T>& img,
                              const ForwardOptions<T>& opt = {}) {
  m.cfg.validate();
  if (img.rank() != 4 || img.shape[1] != m.cfg.height || img.shape[2] != m.cfg.width ||
      img.shape[3] != 3)
    throw TensorError("forward: input shape does not match config");

  SegmentationOutput<T> out;
  auto run_stage = [&](TensorT<T> x, std::size_t s) {
    for (auto& blk : m.blocks[s]) x = block_forward(tape, x, blk, m.cfg.stages[s], m.cfg, opt, &out);
    return x;
  };

  TensorT<T> x = patch_embed(tape, img, m.embed);
  std::array<TensorT<T>, 3> skips;
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) x = patch_merge(tape, x, m.merges[s - 1]);
    x = run_stage(x, s);
    if (s < 3) skips[s] = x;
  }
  x = run_stage(x, 4);
  for (std::size_t i = 0; i < 3; ++i) {
    x = patch_expand(tape, x, m.expands[i]);
    x = skip_fuse(tape, x, skips[2 - i], m.skips[i]);
    x = run_stage(x, 5 + i);
  }
  x = patch_expand(tape, x, m.head_expand);
  out.logits = ops::conv1x1(tape, x, m.head_w, m.head_b);
  return out;
}

// 0.5 * cross-entropy + 0.5 * soft Dice with smoothing 1e-5.
template <class T>
TensorT<T> segmentation_loss(TapeT<T>* tape, const TensorT<T>& logits, const std::vector<int>& target) {
  return ops::ce_dice_loss(tape, logits, target, T(0.5), T(0.5), T(1e-5));
}

// Plain gradient descent, one batch. Returns the loss value.
template <class T>
T train_step(Model<T>& m, const TensorT<T>& img, const std::vector<int>& target, T lr) {
  TapeT<T> tape;
  ForwardOptions<T> opt;
  opt.training = true;
  auto out = forward(&tape, m, img, opt);
  TensorT<T> loss = segmentation_loss(&tape, out.logits, target);
  const T value = (*loss.data)[0];
  tape.backward(loss);
  visit_params(m, [&](const std::string&, TensorT<T>& p) {
    for (std::size_t i = 0; i < p.numel(); ++i) (*p.data)[i] -= lr * (*p.grad)[i];
    p.zero_grad();
  });
  return value;
}

}  // namespace tcsa
