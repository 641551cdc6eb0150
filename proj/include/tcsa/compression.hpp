#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "tcsa/ops.hpp"
#include "tcsa/tensor.hpp"

namespace tcsa {

enum class CompressMode { kNone, kPruneOnly, kMergeOnly, kPruneAndMerge };

inline const char* to_string(CompressMode m) {
  switch (m) {
    case CompressMode::kNone: return "none";
    case CompressMode::kPruneOnly: return "prune";
    case CompressMode::kMergeOnly: return "merge";
    case CompressMode::kPruneAndMerge: return "prune_merge";
  }
  return "?";
}

struct CompressOptions {
  // When set, rho is read as the fraction removed rather than kept.
  bool rho_is_prune_fraction = false;
  // Cosine similarity instead of raw dot product for merge edge weights.
  bool cosine_similarity = false;
};

template <class T>
struct PruneResult {
  std::vector<std::uint8_t> mask;     // length N, 1 = retained
  std::vector<long> kept_indices;     // strictly increasing, length n
  TensorT<T> scores;                  // [N,1]
  TensorT<T> passthrough;             // [N,C], pruned rows = input rows, kept rows zero
  TensorT<T> kept_tokens;             // [n,C]
  T threshold = T(0);                 // n-th largest score
};

template <class T>
struct MergeResult {
  TensorT<T> merged_tokens;            // [(n-r),C]
  std::vector<std::uint8_t> split_layout;  // per kept rank, 0 = set A, 1 = set B
  std::vector<long> merged_a;          // indices (within A) of the r merged A-nodes
  std::vector<long> edge_targets;      // per merged A-node, its B target
  std::vector<T> edge_scores;          // matching similarity scores
  std::vector<long> group_size;        // per B-node, tokens fused into it (itself counts 1)
  std::size_t n_kept = 0;
  std::size_t num_a = 0;
  std::size_t num_b = 0;
  std::size_t r = 0;
};

template <class T>
struct CompressionState {
  std::size_t original_tokens = 0;
  CompressMode mode = CompressMode::kNone;
  bool has_prune = false;
  bool has_merge = false;
  PruneResult<T> prune;
  MergeResult<T> merge;
  TensorT<T> input;  // kept for the identity shortcut in mode none
};

// n = max(2, round(N*rho)), clamped to N. Minimum of 2 guards the bipartite split.
inline std::size_t keep_count(std::size_t n_tokens, double rho) {
  auto n = static_cast<std::size_t>(std::max<long long>(2, std::llround(rho * static_cast<double>(n_tokens))));
  return std::min(n, n_tokens);
}

inline std::size_t merge_count(std::size_t n_kept, double rho_m) {
  const auto cap = n_kept / 2;
  const auto r = static_cast<std::size_t>(std::max<long long>(0, std::llround(rho_m * static_cast<double>(n_kept))));
  return std::min(r, cap);
}

// T = GAP(x) W1 ; scores = (x W2) T^t
template <class T>
std::pair<TensorT<T>, TensorT<T>> importance_scores(TapeT<T>* tape, const TensorT<T>& x,
                                                    const TensorT<T>& w1, const TensorT<T>& w2) {
  if (x.rank() != 2 || x.shape[0] == 0) throw TensorError("importance_scores: empty input");
  TensorT<T> semantic = ops::matmul(tape, ops::gap_tokens(tape, x), w1);          // [1,C]
  TensorT<T> projected = ops::matmul(tape, x, w2);                                // [N,C]
  TensorT<T> scores = ops::matmul(tape, projected, ops::transpose2d(tape, semantic));  // [N,1]
  return {scores, semantic};
}

// Hard top-n selection by score; ties resolved to the lower index. Selection
// indices carry no gradient, token values stay differentiable.
template <class T>
PruneResult<T> prune(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& scores, double rho) {
  if (x.rank() != 2) throw TensorError("prune: rank != 2");
  const std::size_t N = x.shape[0];
  if (scores.numel() != N) throw TensorError("prune: score length mismatch");
  const std::size_t n = keep_count(N, rho);

  std::vector<long> order(N);
  std::iota(order.begin(), order.end(), 0L);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    return (*scores.data)[static_cast<std::size_t>(a)] > (*scores.data)[static_cast<std::size_t>(b)];
  });

  PruneResult<T> res;
  res.scores = scores;
  res.threshold = (*scores.data)[static_cast<std::size_t>(order[n - 1])];
  res.mask.assign(N, 0);
  for (std::size_t i = 0; i < n; ++i) res.mask[static_cast<std::size_t>(order[i])] = 1;
  for (std::size_t i = 0; i < N; ++i)
    if (res.mask[i]) res.kept_indices.push_back(static_cast<long>(i));

  std::vector<T> inv(N);
  for (std::size_t i = 0; i < N; ++i) inv[i] = res.mask[i] ? T(0) : T(1);
  res.passthrough = ops::row_scale(tape, x, inv);
  res.kept_tokens = ops::take_rows(tape, x, res.kept_indices);
  return res;
}

// Bipartite merge over the kept tokens: alternate ranks into A/B, one edge per
// A-node to its most similar B-node, keep the r strongest edges, fuse by group
// mean, output [A-hat, B-hat].
template <class T>
MergeResult<T> merge(TapeT<T>* tape, const TensorT<T>& kept, double rho_m,
                     const CompressOptions& opt = {}) {
  if (kept.rank() != 2) throw TensorError("merge: rank != 2");
  const std::size_t n = kept.shape[0];
  MergeResult<T> res;
  res.n_kept = n;
  if (n < 2) {
    res.merged_tokens = kept;
    res.split_layout.assign(n, 0);
    res.num_a = n;
    return res;
  }
  res.split_layout.resize(n);
  std::vector<long> a_rows, b_rows;
  for (std::size_t i = 0; i < n; ++i) {
    res.split_layout[i] = static_cast<std::uint8_t>(i % 2);
    (i % 2 == 0 ? a_rows : b_rows).push_back(static_cast<long>(i));
  }
  res.num_a = a_rows.size();
  res.num_b = b_rows.size();
  const std::size_t C = kept.shape[1];

  TensorT<T> a = ops::take_rows(tape, kept, a_rows);
  TensorT<T> b = ops::take_rows(tape, kept, b_rows);

  // Edge weights: per A-node max similarity over B (lower index wins ties).
  // Similarity selection is done off the tape; only token values flow gradients.
  std::vector<long> best_target(res.num_a);
  std::vector<T> best_score(res.num_a);
  auto norm_of = [&](const TensorT<T>& t, std::size_t row) {
    T s = T(0);
    for (std::size_t c = 0; c < C; ++c) s += t.at(row, c) * t.at(row, c);
    return std::sqrt(s) + T(1e-12);
  };
  for (std::size_t i = 0; i < res.num_a; ++i) {
    long arg = 0;
    T best = T(0);
    for (std::size_t j = 0; j < res.num_b; ++j) {
      T dot = T(0);
      for (std::size_t c = 0; c < C; ++c) dot += a.at(i, c) * b.at(j, c);
      if (opt.cosine_similarity) dot /= norm_of(a, i) * norm_of(b, j);
      if (j == 0 || dot > best) {
        best = dot;
        arg = static_cast<long>(j);
      }
    }
    best_target[i] = arg;
    best_score[i] = best;
  }

  res.r = merge_count(n, rho_m);
  std::vector<long> edge_order(res.num_a);
  std::iota(edge_order.begin(), edge_order.end(), 0L);
  std::stable_sort(edge_order.begin(), edge_order.end(),
                   [&](long x, long y) { return best_score[static_cast<std::size_t>(x)] >
                                               best_score[static_cast<std::size_t>(y)]; });
  std::vector<std::uint8_t> is_merged(res.num_a, 0);
  std::vector<long> merged_sorted(edge_order.begin(), edge_order.begin() + static_cast<long>(res.r));
  std::sort(merged_sorted.begin(), merged_sorted.end());
  for (long ai : merged_sorted) {
    is_merged[static_cast<std::size_t>(ai)] = 1;
    res.merged_a.push_back(ai);
    res.edge_targets.push_back(best_target[static_cast<std::size_t>(ai)]);
    res.edge_scores.push_back(best_score[static_cast<std::size_t>(ai)]);
  }

  res.group_size.assign(res.num_b, 1);
  for (long t : res.edge_targets) res.group_size[static_cast<std::size_t>(t)] += 1;

  // B-hat: group mean of each B-node and everything fused into it.
  TensorT<T> b_hat;
  if (res.r > 0) {
    TensorT<T> merged_src = ops::take_rows(tape, a, res.merged_a);
    TensorT<T> summed = ops::scatter_add_rows(tape, merged_src, res.edge_targets, res.num_b);
    std::vector<T> inv_size(res.num_b);
    TensorT<T> totals = ops::add(tape, b, summed);
    for (std::size_t j = 0; j < res.num_b; ++j) inv_size[j] = T(1) / static_cast<T>(res.group_size[j]);
    b_hat = ops::row_scale(tape, totals, inv_size);
  } else {
    b_hat = b;
  }

  std::vector<long> unmerged;
  for (std::size_t i = 0; i < res.num_a; ++i)
    if (!is_merged[i]) unmerged.push_back(static_cast<long>(i));
  TensorT<T> a_hat = unmerged.empty() ? TensorT<T>({0, C}) : ops::take_rows(tape, a, unmerged);
  res.merged_tokens = a_hat.shape[0] == 0 ? b_hat : ops::concat_rows(tape, a_hat, b_hat);
  return res;
}

template <class T>
std::pair<TensorT<T>, CompressionState<T>> compress(TapeT<T>* tape, const TensorT<T>& x,
                                                    const TensorT<T>& w1, const TensorT<T>& w2,
                                                    double rho, double rho_m, CompressMode mode,
                                                    const CompressOptions& opt = {}) {
  if (x.rank() != 2) throw TensorError("compress: rank != 2");
  CompressionState<T> state;
  state.original_tokens = x.shape[0];
  state.mode = mode;
  const double keep_rho = opt.rho_is_prune_fraction ? 1.0 - rho : rho;

  switch (mode) {
    case CompressMode::kNone: {
      state.input = x;
      return {x, state};
    }
    case CompressMode::kPruneOnly: {
      auto [scores, semantic] = importance_scores(tape, x, w1, w2);
      (void)semantic;
      state.prune = prune(tape, x, scores, keep_rho);
      state.has_prune = true;
      return {state.prune.kept_tokens, state};
    }
    case CompressMode::kMergeOnly: {
      // Trivial keep-all prune so decompression has a uniform path.
      state.prune.mask.assign(x.shape[0], 1);
      for (std::size_t i = 0; i < x.shape[0]; ++i) state.prune.kept_indices.push_back(static_cast<long>(i));
      std::vector<T> zero(x.shape[0], T(0));
      state.prune.passthrough = ops::row_scale(tape, x, zero);
      state.prune.kept_tokens = x;
      state.has_prune = true;
      state.merge = merge(tape, x, rho_m, opt);
      state.has_merge = true;
      return {state.merge.merged_tokens, state};
    }
    case CompressMode::kPruneAndMerge: {
      auto [scores, semantic] = importance_scores(tape, x, w1, w2);
      (void)semantic;
      state.prune = prune(tape, x, scores, keep_rho);
      state.has_prune = true;
      state.merge = merge(tape, state.prune.kept_tokens, rho_m, opt);
      state.has_merge = true;
      return {state.merge.merged_tokens, state};
    }
  }
  throw TensorError("compress: unknown mode");
}

}  // namespace tcsa
