#include "tcsa/flops.hpp"

#include <sstream>

namespace tcsa {

namespace {

struct ClassTally {
  std::map<std::string, std::uint64_t>* per_class;
  std::uint64_t sum = 0;

  void add(const std::string& cls, std::uint64_t macs) {
    (*per_class)[cls] += macs;
    sum += macs;
  }
};

std::uint64_t u64(double v) { return static_cast<std::uint64_t>(v); }

void tally_attention(ClassTally& t, std::size_t n_in, double rho, double rho_m, double lambda,
                     std::size_t C, CompressMode mode) {
  const std::uint64_t N = n_in, c = C;
  std::size_t m = N;
  if (mode == CompressMode::kPruneOnly || mode == CompressMode::kPruneAndMerge) {
    const std::size_t n = keep_count(N, rho);
    // scoring: GAP projection + token projection (2 N C^2) and score dots (N C)
    t.add("compression.scoring", 2 * N * c * c + N * c);
    if (mode == CompressMode::kPruneAndMerge) {
      t.add("compression.merge_similarity", u64(double(n / 2) * double(n / 2) * double(c)));
      m = n - merge_count(n, rho_m);
    } else {
      m = n;
    }
  } else if (mode == CompressMode::kMergeOnly) {
    t.add("compression.merge_similarity", u64(double(N / 2) * double(N / 2) * double(c)));
    m = N - merge_count(N, rho_m);
  }
  const std::uint64_t mm = m;
  const std::uint64_t k = effective_k(m, lambda);
  t.add("attention.projections", 3 * mm * c * c);
  t.add("attention.relevance", mm * mm * c);
  t.add("attention.fusion", mm * k * c);
  t.add("elementwise", mm * k);  // softmax over the selected scores
}

void tally_dbffn(ClassTally& t, std::size_t n, std::size_t C) {
  const std::uint64_t N = n, c = C;
  t.add("dbffn.pointwise", 12 * N * c * c);   // expand 2C, two 4C->C reductions, fuse 2C->C
  t.add("dbffn.depthwise", 348 * N * c);      // 3x3+7x7 on 2C, then on 4C
  t.add("elementwise", 10 * N * c);           // five BNs and two GELUs
}

void tally_block(ClassTally& t, std::size_t n, const StageConfig& sc, CompressMode mode,
                 bool mlp_ffn) {
  const std::uint64_t N = n, c = sc.channels;
  t.add("positional_dwconv", 9 * N * c);
  tally_attention(t, n, sc.rho, sc.rho_m, sc.lambda, sc.channels, mode);
  if (mlp_ffn) {
    t.add("dbffn.pointwise", 8 * N * c * c);
    t.add("elementwise", 4 * N * c);
  } else {
    tally_dbffn(t, n, sc.channels);
  }
  t.add("elementwise", 5 * N * c);  // two layernorms, three residual adds
}

std::uint64_t count_total(const ModelConfig& cfg, std::optional<CompressMode> mode_override,
                          FlopsReport* report) {
  std::map<std::string, std::uint64_t> scratch;
  std::uint64_t total = 0;
  auto stage_tokens = [&](std::size_t s) {
    // stages 1..4 at H/4..H/32, decoder mirrors back up
    const std::size_t level = s < 4 ? s : 7 - s;
    const std::size_t div = 4u << level;
    return (cfg.height / div) * (cfg.width / div);
  };

  for (std::size_t s = 0; s < 8; ++s) {
    ClassTally t{report ? &report->per_class : &scratch};
    const StageConfig& sc = cfg.stages[s];
    const CompressMode mode = mode_override.value_or(sc.mode);
    const std::size_t n = stage_tokens(s);
    for (std::size_t d = 0; d < sc.depth; ++d) tally_block(t, n, sc, mode, cfg.use_mlp_ffn);
    if (report) report->per_stage[s] = t.sum;
    total += t.sum;
  }

  // stem, resamplers, skips, head
  ClassTally t{report ? &report->per_class : &scratch};
  const std::size_t n4 = (cfg.height / 4) * (cfg.width / 4);
  t.add("patch.embed", u64(double(n4) * cfg.stages[0].channels * 49.0 * 3.0));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t level = i + 1;
    const std::size_t nout = (cfg.height >> (2 + level)) * (cfg.width >> (2 + level));
    t.add("patch.merge", u64(double(nout) * cfg.stages[i + 1].channels * 9.0 * cfg.stages[i].channels));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t cin = cfg.stages[4 + i].channels;
    const std::size_t cout = cfg.stages[5 + i].channels;
    const std::size_t level = 3 - i;
    const std::size_t nin = (cfg.height >> (2 + level)) * (cfg.width >> (2 + level));
    t.add("patch.expand", u64(double(nin) * cin * 4.0 * cout));
    t.add("skip.fuse", u64(double(nin * 4) * 2.0 * cout * cout));
  }
  t.add("patch.expand", u64(double(n4) * cfg.stages[7].channels * 16.0 * cfg.embed_dim));
  t.add("head.projection", u64(double(cfg.height * cfg.width) * cfg.embed_dim * cfg.num_classes));
  if (report) report->stem_head = t.sum;
  total += t.sum;
  return total;
}

}  // namespace

std::uint64_t count_attention(std::size_t n_in, double rho, double rho_m, double lambda,
                              std::size_t channels, std::size_t head_dim, CompressMode mode) {
  (void)head_dim;  // per-head split does not change the MAC count
  std::map<std::string, std::uint64_t> scratch;
  ClassTally t{&scratch};
  tally_attention(t, n_in, rho, rho_m, lambda, channels, mode);
  return t.sum;
}

std::uint64_t count_dbffn(std::size_t n, std::size_t channels) {
  std::map<std::string, std::uint64_t> scratch;
  ClassTally t{&scratch};
  tally_dbffn(t, n, channels);
  return t.sum;
}

FlopsReport count_model(const ModelConfig& cfg, std::optional<CompressMode> mode_override) {
  FlopsReport report;
  report.total = count_total(cfg, mode_override, &report);
  report.baseline = count_total(cfg, CompressMode::kNone, nullptr);
  report.reduction =
      report.baseline == 0 ? 0.0 : 1.0 - static_cast<double>(report.total) / static_cast<double>(report.baseline);
  return report;
}

std::string FlopsReport::to_text() const {
  std::ostringstream os;
  os << "FLOPs report (1 MAC = 1 FLOP; softmax/GELU/norm = 1 op per element;\n"
     << "double all figures to compare against 2-op conventions)\n\n";
  os << "per op class:\n";
  for (const auto& [k, v] : per_class) os << "  " << k << " = " << v << "\n";
  os << "\nper stage:\n";
  for (std::size_t s = 0; s < 8; ++s) os << "  stage" << (s + 1) << " = " << per_stage[s] << "\n";
  os << "  stem_head = " << stem_head << "\n";
  os << "\ntotal = " << total << "\n";
  os << "baseline (no compression) = " << baseline << "\n";
  os << "reduction = " << reduction * 100.0 << "%\n";
  return os.str();
}

std::string FlopsReport::to_kv() const {
  std::ostringstream os;
  for (const auto& [k, v] : per_class) os << "class." << k << " = " << v << "\n";
  for (std::size_t s = 0; s < 8; ++s) os << "stage." << (s + 1) << " = " << per_stage[s] << "\n";
  os << "stem_head = " << stem_head << "\n";
  os << "total = " << total << "\n";
  os << "baseline = " << baseline << "\n";
  os << "reduction_percent = " << static_cast<std::uint64_t>(reduction * 100.0 + 0.5) << "\n";
  return os.str();
}

}  // namespace tcsa
