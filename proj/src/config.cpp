#include "tcsa/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tcsa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("config: bad boolean for key '" + key + "': " + v);
}

void apply_stage_key(StageConfig& sc, const std::string& field, const std::string& value,
                     const std::string& key) {
  if (field == "channels")
    sc.channels = std::stoul(value);
  else if (field == "depth")
    sc.depth = std::stoul(value);
  else if (field == "rho")
    sc.rho = std::stod(value);
  else if (field == "rho_m")
    sc.rho_m = std::stod(value);
  else if (field == "lambda")
    sc.lambda = std::stod(value);
  else if (field == "head_dim")
    sc.head_dim = std::stoul(value);
  else if (field == "mode")
    sc.mode = parse_mode(value);
  else
    throw std::runtime_error("config: unknown key '" + key + "'");
}

}  // namespace

CompressMode parse_mode(const std::string& name) {
  if (name == "none") return CompressMode::kNone;
  if (name == "prune") return CompressMode::kPruneOnly;
  if (name == "merge") return CompressMode::kMergeOnly;
  if (name == "prune_merge") return CompressMode::kPruneAndMerge;
  throw std::runtime_error("config: unknown mode '" + name + "'");
}

void apply_config_text(const std::string& text, ModelConfig& cfg) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not 'key = value'");

    if (key.rfind("encoder.stage", 0) == 0 || key.rfind("decoder.stage", 0) == 0) {
      const bool enc = key[0] == 'e';
      const std::string rest = key.substr(13);  // after "encoder.stage"
      const auto dot = rest.find('.');
      if (dot == std::string::npos) throw std::runtime_error("config: unknown key '" + key + "'");
      const std::size_t stage = std::stoul(rest.substr(0, dot));
      if (stage < 1 || stage > 4) throw std::runtime_error("config: unknown key '" + key + "'");
      StageConfig& sc = cfg.stages[enc ? stage - 1 : 3 + stage];
      apply_stage_key(sc, rest.substr(dot + 1), value, key);
    } else if (key == "model.height") {
      cfg.height = std::stoul(value);
    } else if (key == "model.width") {
      cfg.width = std::stoul(value);
    } else if (key == "model.classes") {
      cfg.num_classes = std::stoul(value);
    } else if (key == "model.embed_dim") {
      cfg.embed_dim = std::stoul(value);
    } else if (key == "model.seed") {
      cfg.seed = std::stoull(value);
    } else if (key == "options.rho_is_prune_fraction") {
      cfg.compress.rho_is_prune_fraction = parse_bool(value, key);
    } else if (key == "options.cosine_similarity") {
      cfg.compress.cosine_similarity = parse_bool(value, key);
    } else if (key == "options.use_mlp_ffn") {
      cfg.use_mlp_ffn = parse_bool(value, key);
    } else {
      throw std::runtime_error("config: unknown key '" + key + "'");
    }
  }
}

void apply_config_file(const std::string& path, ModelConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  apply_config_text(buf.str(), cfg);
}

}  // namespace tcsa
