#include "tcsa/trace_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace tcsa {

namespace {

std::string mask_to_hex(const std::vector<std::uint8_t>& mask) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < mask.size(); i += 4) {
    int v = 0;
    for (std::size_t b = 0; b < 4; ++b)
      if (i + b < mask.size() && mask[i + b]) v |= 8 >> b;
    out.push_back(digits[v]);
  }
  return out;
}

std::vector<std::uint8_t> hex_to_mask(const std::string& hex, std::size_t n) {
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const char c = hex.at(i / 4);
    const int v = (c >= 'a') ? c - 'a' + 10 : (c >= 'A') ? c - 'A' + 10 : c - '0';
    mask[i] = (v & (8 >> (i % 4))) ? 1 : 0;
  }
  return mask;
}

}  // namespace

void write_trace(std::ostream& os, const std::vector<LayerTraceRecord>& records) {
  for (const auto& r : records) {
    os << "layer " << r.layer << " N=" << r.total_tokens << " n=" << r.kept_tokens
       << " r=" << r.merged_edges << " k=" << r.top_k << " heads=" << r.heads << "\n";
    os << "mask " << mask_to_hex(r.mask) << "\n";
    os << "kept";
    for (long i : r.kept) os << " " << i;
    os << "\n";
    for (const auto& [src, tgt, score] : r.edges)
      os << "edge " << src << " " << tgt << " " << std::setprecision(17) << score << "\n";
    for (const auto& row : r.topk) {
      os << "topk";
      for (long j : row) os << " " << j;
      os << "\n";
    }
    os << "end\n";
  }
}

std::vector<LayerTraceRecord> parse_trace(std::istream& is) {
  std::vector<LayerTraceRecord> out;
  std::string line;
  LayerTraceRecord cur;
  bool open = false;
  auto expect_kv = [](const std::string& tok, const char* key) {
    const std::string pfx = std::string(key) + "=";
    if (tok.rfind(pfx, 0) != 0) throw std::runtime_error("trace: expected " + pfx + " got " + tok);
    return std::stoul(tok.substr(pfx.size()));
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "layer") {
      if (open) throw std::runtime_error("trace: nested layer record");
      cur = LayerTraceRecord{};
      std::string tok;
      ls >> cur.layer;
      ls >> tok;
      cur.total_tokens = expect_kv(tok, "N");
      ls >> tok;
      cur.kept_tokens = expect_kv(tok, "n");
      ls >> tok;
      cur.merged_edges = expect_kv(tok, "r");
      ls >> tok;
      cur.top_k = expect_kv(tok, "k");
      ls >> tok;
      cur.heads = expect_kv(tok, "heads");
      open = true;
    } else if (tag == "mask") {
      std::string hex;
      ls >> hex;
      cur.mask = hex_to_mask(hex, cur.total_tokens);
    } else if (tag == "kept") {
      long v;
      while (ls >> v) cur.kept.push_back(v);
    } else if (tag == "edge") {
      long s, t;
      double score;
      ls >> s >> t >> score;
      cur.edges.emplace_back(s, t, score);
    } else if (tag == "topk") {
      std::vector<long> row;
      long v;
      while (ls >> v) row.push_back(v);
      cur.topk.push_back(std::move(row));
    } else if (tag == "end") {
      if (!open) throw std::runtime_error("trace: stray end");
      if (cur.kept.size() != cur.kept_tokens) throw std::runtime_error("trace: kept count mismatch");
      if (cur.edges.size() != cur.merged_edges) throw std::runtime_error("trace: edge count mismatch");
      out.push_back(std::move(cur));
      open = false;
    } else {
      throw std::runtime_error("trace: unknown line tag '" + tag + "'");
    }
  }
  if (open) throw std::runtime_error("trace: unterminated layer record");
  return out;
}

void write_trace_file(const std::string& path, const std::vector<LayerTraceRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("trace: cannot open " + path);
  write_trace(os, records);
}

std::vector<LayerTraceRecord> parse_trace_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("trace: cannot open " + path);
  return parse_trace(is);
}

}  // namespace tcsa
