#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "tcsa/network.hpp"

namespace tcsa {

// Analytic multiply-accumulate counter. Convention: 1 MAC = 1 FLOP;
// softmax / GELU / normalization cost 1 op per output element. Double the
// totals to compare against 2-op-per-MAC conventions.
struct FlopsReport {
  std::map<std::string, std::uint64_t> per_class;
  std::array<std::uint64_t, 8> per_stage{};
  std::uint64_t stem_head = 0;
  std::uint64_t total = 0;
  std::uint64_t baseline = 0;  // same config with compression off
  double reduction = 0.0;      // 1 - total/baseline

  std::string to_text() const;
  std::string to_kv() const;
};

// One attention layer including compression overhead, for N_in input tokens.
std::uint64_t count_attention(std::size_t n_in, double rho, double rho_m, double lambda,
                              std::size_t channels, std::size_t head_dim, CompressMode mode);

// One DBFFN application over n tokens of C channels.
std::uint64_t count_dbffn(std::size_t n, std::size_t channels);

FlopsReport count_model(const ModelConfig& cfg,
                        std::optional<CompressMode> mode_override = std::nullopt);

}  // namespace tcsa
