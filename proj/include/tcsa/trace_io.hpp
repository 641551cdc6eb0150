#pragma once

#include <iosfwd>
#include <string>
#include <tuple>
#include <vector>

#include "tcsa/attention.hpp"
#include "tcsa/compression.hpp"

namespace tcsa {

// One per-layer record of the compression and attention bookkeeping.
//
// Text grammar (one record per layer):
//   layer <id> N=<N> n=<n> r=<r> k=<k> heads=<h>
//   mask <hex>            # N bits, token i = bit i, packed MSB-first per digit
//   kept <i0> <i1> ...
//   edge <src> <tgt> <score>    # r lines, src = merged A-node, tgt = B-node
//   topk <j0> ... <j(k-1)>      # one line per query row, heads in order
//   end
struct LayerTraceRecord {
  int layer = 0;
  std::size_t total_tokens = 0;   // N
  std::size_t kept_tokens = 0;    // n
  std::size_t merged_edges = 0;   // r
  std::size_t top_k = 0;          // k
  std::size_t heads = 0;
  std::vector<std::uint8_t> mask;
  std::vector<long> kept;
  std::vector<std::tuple<long, long, double>> edges;
  std::vector<std::vector<long>> topk;  // heads * m rows of k indices

  bool operator==(const LayerTraceRecord&) const = default;
};

template <class T>
LayerTraceRecord make_trace_record(int layer, const CompressionState<T>& state,
                                   const AttentionTrace<T>& trace) {
  LayerTraceRecord rec;
  rec.layer = layer;
  rec.total_tokens = state.original_tokens;
  rec.top_k = trace.k;
  rec.heads = trace.indices.size();
  if (state.has_prune) {
    rec.mask = state.prune.mask;
    rec.kept = state.prune.kept_indices;
    rec.kept_tokens = state.prune.kept_indices.size();
  } else {
    rec.mask.assign(state.original_tokens, 1);
    rec.kept.resize(state.original_tokens);
    for (std::size_t i = 0; i < state.original_tokens; ++i) rec.kept[i] = static_cast<long>(i);
    rec.kept_tokens = state.original_tokens;
  }
  if (state.has_merge) {
    rec.merged_edges = state.merge.r;
    for (std::size_t e = 0; e < state.merge.r; ++e)
      rec.edges.emplace_back(state.merge.merged_a[e], state.merge.edge_targets[e],
                             static_cast<double>(state.merge.edge_scores[e]));
  }
  for (const auto& im : trace.indices)
    for (std::size_t i = 0; i < im.rows; ++i)
      rec.topk.emplace_back(im.idx.begin() + static_cast<long>(i * im.cols),
                            im.idx.begin() + static_cast<long>((i + 1) * im.cols));
  return rec;
}

void write_trace(std::ostream& os, const std::vector<LayerTraceRecord>& records);
std::vector<LayerTraceRecord> parse_trace(std::istream& is);

void write_trace_file(const std::string& path, const std::vector<LayerTraceRecord>& records);
std::vector<LayerTraceRecord> parse_trace_file(const std::string& path);

}  // namespace tcsa
