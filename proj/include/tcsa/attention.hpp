#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "tcsa/ops.hpp"
#include "tcsa/tensor.hpp"

namespace tcsa {

template <class T>
struct AttentionParams {
  TensorT<T> wq, wk, wv;  // [C,C]
  std::size_t head_dim = 32;
  double lambda = 1.0 / 8.0;
  // Restores the literal unscaled relevance product; scaling by
  // 1/sqrt(head_dim) is the default to keep softmax out of saturation.
  bool unscaled_attention = false;
};

template <class T>
struct AttentionTrace {
  std::size_t k = 0;
  std::size_t tokens = 0;
  std::vector<TensorT<T>> relevance;   // per head [m,m], only when requested
  std::vector<IndexMatrix> indices;    // per head [m,k]
  std::vector<TensorT<T>> weights;     // per head [m,k], post-softmax
};

// k = max(1, round(lambda * m)), clamped to m.
inline std::size_t effective_k(std::size_t m, double lambda) {
  if (m == 0) throw TensorError("effective_k: empty sequence");
  auto k = static_cast<std::size_t>(std::max<long long>(1, std::llround(lambda * static_cast<double>(m))));
  return std::min(k, m);
}

// Top-k sparse attention over the compressed token sequence. Per head:
// relevance = Q K^t / sqrt(head_dim), keep the k strongest keys per query,
// softmax over exactly those k scores, weighted-gather the values.
// forced_indices (test hook) freezes the per-head selection.
template <class T>
std::pair<TensorT<T>, AttentionTrace<T>> tksa(TapeT<T>* tape, const TensorT<T>& x,
                                              const AttentionParams<T>& params,
                                              bool keep_relevance = false,
                                              const std::vector<IndexMatrix>* forced_indices = nullptr) {
  if (x.rank() != 2 || x.shape[0] == 0) throw TensorError("tksa: empty input");
  const std::size_t m = x.shape[0], C = x.shape[1];
  if (params.head_dim == 0 || C % params.head_dim != 0)
    throw TensorError("tksa: channels not divisible by head_dim");
  const std::size_t heads = C / params.head_dim;
  const std::size_t d = params.head_dim;
  const std::size_t k = effective_k(m, params.lambda);

  TensorT<T> q = ops::matmul(tape, x, params.wq);
  TensorT<T> kk = ops::matmul(tape, x, params.wk);
  TensorT<T> v = ops::matmul(tape, x, params.wv);

  AttentionTrace<T> trace;
  trace.k = k;
  trace.tokens = m;

  TensorT<T> out;
  for (std::size_t h = 0; h < heads; ++h) {
    TensorT<T> qh = ops::slice_channels(tape, q, h * d, d);
    TensorT<T> kh = ops::slice_channels(tape, kk, h * d, d);
    TensorT<T> vh = ops::slice_channels(tape, v, h * d, d);
    TensorT<T> rel = ops::matmul(tape, qh, ops::transpose2d(tape, kh));
    if (!params.unscaled_attention)
      rel = ops::scale(tape, rel, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    if (keep_relevance) trace.relevance.push_back(rel.clone());

    TensorT<T> selected;
    IndexMatrix idx;
    if (forced_indices) {
      idx = (*forced_indices)[h];
      // gather the frozen entries of rel row by row
      std::vector<long> flat;
      flat.reserve(idx.idx.size());
      TensorT<T> rel_flat = rel.reshaped({m * m, 1});
      for (std::size_t i = 0; i < idx.rows; ++i)
        for (std::size_t j = 0; j < idx.cols; ++j)
          flat.push_back(static_cast<long>(i) * static_cast<long>(m) + idx.at(i, j));
      selected = ops::take_rows(tape, rel_flat, flat).reshaped({idx.rows, idx.cols});
    } else {
      auto [vals, ix] = ops::topk_rows(tape, rel, k);
      selected = vals;
      idx = ix;
    }
    TensorT<T> weights = ops::softmax_rows(tape, selected);
    TensorT<T> gathered = ops::gather_rows(tape, vh, idx);
    TensorT<T> head_out = ops::weighted_sum_rows(tape, weights, gathered);

    trace.indices.push_back(idx);
    trace.weights.push_back(weights.clone());
    out = (h == 0) ? head_out : ops::concat_channels(tape, out, head_out);
  }
  return {out, trace};
}

}  // namespace tcsa
