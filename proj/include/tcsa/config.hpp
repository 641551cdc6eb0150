#pragma once

#include <string>

#include "tcsa/network.hpp"

namespace tcsa {

// Line-oriented `key = value` configuration with dotted stage paths, e.g.
//   encoder.stage2.rho = 0.4
//   model.classes = 9
// '#' starts a comment. Unknown keys are an error naming the key.
void apply_config_text(const std::string& text, ModelConfig& cfg);
void apply_config_file(const std::string& path, ModelConfig& cfg);

CompressMode parse_mode(const std::string& name);

}  // namespace tcsa
