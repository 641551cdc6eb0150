#pragma once

#include <vector>

#include "tcsa/compression.hpp"
#include "tcsa/ops.hpp"

namespace tcsa {

// Inverse of merge: split the processed tokens back into A' and B', restore
// every merged A slot as a copy of its B target, and interleave to the
// original kept-token order. A' holds |A| - r rows (the even split printed in
// the merge description cannot hold once r edges are fused away).
template <class T>
TensorT<T> unmerge(TapeT<T>* tape, const TensorT<T>& xa, const MergeResult<T>& m) {
  if (xa.rank() != 2) throw TensorError("unmerge: rank != 2");
  if (xa.shape[0] != m.merged_tokens.shape[0]) throw TensorError("unmerge: length mismatch with state");
  const std::size_t n = m.n_kept;
  if (n < 2 || m.num_b == 0) return xa;

  const std::size_t num_unmerged_a = m.num_a - m.r;
  std::vector<std::uint8_t> is_merged(m.num_a, 0);
  std::vector<long> merged_rank(m.num_a, -1);
  for (std::size_t e = 0; e < m.merged_a.size(); ++e) {
    is_merged[static_cast<std::size_t>(m.merged_a[e])] = 1;
    merged_rank[static_cast<std::size_t>(m.merged_a[e])] = static_cast<long>(e);
  }
  // Row of xa providing each original kept slot.
  std::vector<long> source(n);
  std::size_t a_seen = 0, b_seen = 0, unmerged_seen = 0;
  for (std::size_t rank = 0; rank < n; ++rank) {
    if (m.split_layout[rank] == 0) {
      const std::size_t ai = a_seen++;
      if (is_merged[ai]) {
        source[rank] = static_cast<long>(num_unmerged_a) +
                       m.edge_targets[static_cast<std::size_t>(merged_rank[ai])];
      } else {
        source[rank] = static_cast<long>(unmerged_seen++);
      }
    } else {
      source[rank] = static_cast<long>(num_unmerged_a + b_seen++);
    }
  }
  return ops::take_rows(tape, xa, source);
}

// O = X_p + scatter(X_d back into the retained positions): processed tokens
// return to their original sequence slots, pruned tokens come back through
// the passthrough branch.
template <class T>
TensorT<T> decompress(TapeT<T>* tape, const TensorT<T>& xa, const CompressionState<T>& state) {
  if (xa.rank() != 2) throw TensorError("decompress: rank != 2");
  if (state.mode == CompressMode::kNone) {
    if (xa.shape[0] != state.original_tokens) throw TensorError("decompress: shape mismatch");
    return xa;
  }
  TensorT<T> restored = state.has_merge ? unmerge(tape, xa, state.merge) : xa;
  if (restored.shape[0] != state.prune.kept_indices.size())
    throw TensorError("decompress: shape mismatch");
  TensorT<T> placed = ops::scatter_rows(tape, restored, state.prune.kept_indices, state.original_tokens);
  return ops::add(tape, state.prune.passthrough, placed);
}

}  // namespace tcsa
