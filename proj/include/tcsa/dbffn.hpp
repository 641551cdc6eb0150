#pragma once

#include <random>

#include "tcsa/ops.hpp"
#include "tcsa/tensor.hpp"

namespace tcsa {

// Dual-branch feed-forward. Channel plan: C -> 2C pointwise expand, parallel
// 3x3 / 7x7 depthwise branches on 2C, concatenate to 4C, second depthwise
// stage on 4C paired with pointwise reductions to C (depthwise separable; a
// pure depthwise cannot change the channel count the printed shapes demand),
// concatenate to 2C, pointwise fuse back to C.
template <class T>
struct DbffnParams {
  std::size_t channels = 0;

  TensorT<T> pre_gamma, pre_beta;          // BN on C
  ops::BatchNormStateT<T> pre_state;

  TensorT<T> expand_w, expand_b;           // 1x1, C -> 2C
  TensorT<T> expand_gamma, expand_beta;    // BN on 2C
  ops::BatchNormStateT<T> expand_state;

  TensorT<T> dw3_w, dw3_b;                 // depthwise 3x3 on 2C
  TensorT<T> dw7_w, dw7_b;                 // depthwise 7x7 on 2C

  TensorT<T> dw3b_w, dw3b_b;               // depthwise 3x3 on 4C
  TensorT<T> pw3_w, pw3_b;                 // pointwise 4C -> C
  TensorT<T> bn3_gamma, bn3_beta;
  ops::BatchNormStateT<T> bn3_state;

  TensorT<T> dw7b_w, dw7b_b;               // depthwise 7x7 on 4C
  TensorT<T> pw7_w, pw7_b;                 // pointwise 4C -> C
  TensorT<T> bn7_gamma, bn7_beta;
  ops::BatchNormStateT<T> bn7_state;

  TensorT<T> fuse_w, fuse_b;               // 1x1, 2C -> C
  TensorT<T> out_gamma, out_beta;          // BN on C
  ops::BatchNormStateT<T> out_state;
};

template <class T, class Rng>
DbffnParams<T> dbffn_init(std::size_t C, Rng& rng, double sigma = 0.02) {
  DbffnParams<T> p;
  p.channels = C;
  auto bn = [&](std::size_t n, TensorT<T>& g, TensorT<T>& b, ops::BatchNormStateT<T>& s) {
    g = TensorT<T>::full({n}, T(1));
    g.set_requires_grad();
    b = TensorT<T>::zeros({n});
    b.set_requires_grad();
    s.running_mean = TensorT<T>::zeros({n});
    s.running_var = TensorT<T>::full({n}, T(1));
  };
  auto lin = [&](std::size_t in, std::size_t out, TensorT<T>& w, TensorT<T>& b) {
    w = trunc_normal<T>({in, out}, sigma, rng);
    w.set_requires_grad();
    b = TensorT<T>::zeros({out});
    b.set_requires_grad();
  };
  auto dw = [&](std::size_t ch, std::size_t k, TensorT<T>& w, TensorT<T>& b) {
    w = trunc_normal<T>({ch, k, k}, sigma, rng);
    w.set_requires_grad();
    b = TensorT<T>::zeros({ch});
    b.set_requires_grad();
  };
  bn(C, p.pre_gamma, p.pre_beta, p.pre_state);
  lin(C, 2 * C, p.expand_w, p.expand_b);
  bn(2 * C, p.expand_gamma, p.expand_beta, p.expand_state);
  dw(2 * C, 3, p.dw3_w, p.dw3_b);
  dw(2 * C, 7, p.dw7_w, p.dw7_b);
  dw(4 * C, 3, p.dw3b_w, p.dw3b_b);
  lin(4 * C, C, p.pw3_w, p.pw3_b);
  bn(C, p.bn3_gamma, p.bn3_beta, p.bn3_state);
  dw(4 * C, 7, p.dw7b_w, p.dw7b_b);
  lin(4 * C, C, p.pw7_w, p.pw7_b);
  bn(C, p.bn7_gamma, p.bn7_beta, p.bn7_state);
  lin(2 * C, C, p.fuse_w, p.fuse_b);
  bn(C, p.out_gamma, p.out_beta, p.out_state);
  return p;
}

template <class T>
TensorT<T> dbffn_forward(TapeT<T>* tape, const TensorT<T>& x, DbffnParams<T>& p, bool training) {
  if (x.rank() != 4 || x.shape[3] != p.channels) throw TensorError("dbffn: channel mismatch");
  using namespace ops;
  TensorT<T> pre = batchnorm(tape, x, p.pre_gamma, p.pre_beta, p.pre_state, training);
  TensorT<T> expanded = conv1x1(tape, pre, p.expand_w, p.expand_b);
  TensorT<T> xhat = batchnorm(tape, expanded, p.expand_gamma, p.expand_beta, p.expand_state, training);

  TensorT<T> left = gelu(tape, dwconv(tape, xhat, p.dw3_w, p.dw3_b));
  TensorT<T> right = gelu(tape, dwconv(tape, xhat, p.dw7_w, p.dw7_b));
  TensorT<T> cat = concat_channels(tape, left, right);  // 4C

  TensorT<T> l2 = conv1x1(tape, dwconv(tape, cat, p.dw3b_w, p.dw3b_b), p.pw3_w, p.pw3_b);
  l2 = batchnorm(tape, l2, p.bn3_gamma, p.bn3_beta, p.bn3_state, training);
  TensorT<T> r2 = conv1x1(tape, dwconv(tape, cat, p.dw7b_w, p.dw7b_b), p.pw7_w, p.pw7_b);
  r2 = batchnorm(tape, r2, p.bn7_gamma, p.bn7_beta, p.bn7_state, training);

  TensorT<T> fused = conv1x1(tape, concat_channels(tape, l2, r2), p.fuse_w, p.fuse_b);
  return batchnorm(tape, fused, p.out_gamma, p.out_beta, p.out_state, training);
}

// MLP feed-forward baseline for the ablation toggle: pointwise expand by 4,
// GELU, pointwise reduce.
template <class T>
struct MlpFfnParams {
  std::size_t channels = 0;
  TensorT<T> w1, b1, w2, b2;
};

template <class T, class Rng>
MlpFfnParams<T> mlp_ffn_init(std::size_t C, Rng& rng, double sigma = 0.02) {
  MlpFfnParams<T> p;
  p.channels = C;
  p.w1 = trunc_normal<T>({C, 4 * C}, sigma, rng);
  p.w1.set_requires_grad();
  p.b1 = TensorT<T>::zeros({4 * C});
  p.b1.set_requires_grad();
  p.w2 = trunc_normal<T>({4 * C, C}, sigma, rng);
  p.w2.set_requires_grad();
  p.b2 = TensorT<T>::zeros({C});
  p.b2.set_requires_grad();
  return p;
}

template <class T>
TensorT<T> mlp_ffn_forward(TapeT<T>* tape, const TensorT<T>& x, MlpFfnParams<T>& p) {
  if (x.rank() != 4 || x.shape[3] != p.channels) throw TensorError("mlp_ffn: channel mismatch");
  TensorT<T> h = ops::conv1x1(tape, x, p.w1, p.b1);
  h = ops::gelu(tape, h);
  return ops::conv1x1(tape, h, p.w2, p.b2);
}

}  // namespace tcsa
