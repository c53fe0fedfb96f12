#include "ghoststereo/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "ghoststereo/errors.hpp"

namespace gs {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("ModelConfig: " + msg); };
  if (schema_version != 1) fail("unsupported schema_version");
  if (max_disparity <= 0 || max_disparity % 4 != 0) fail("max_disparity must be positive and divisible by 4");
  if (disparity_levels() % 8 != 0)
    fail("max_disparity/4 must be divisible by 8 (three hourglass halvings)");
  if (num_groups <= 0) fail("num_groups must be positive");
  if (fused_channels % num_groups != 0) fail("num_groups must divide fused_channels");
  if (topk < 1 || topk > disparity_levels()) fail("topk must be in [1, max_disparity/4]");
  if (ghost_ratio < 2) fail("ghost_ratio must be >= 2");
  if (se_reduction < 1) fail("se_reduction must be >= 1");
  if (stem_channels < 1 || bypass_channels < 1 || fused_channels < 1) fail("channel widths must be positive");
  for (i64 c : feature_channels)
    if (c < 1) fail("feature_channels must be positive");
  if (aggregation_channels[0] != num_groups)
    fail("aggregation_channels[0] must equal num_groups (correlation volume width)");
  for (i64 c : aggregation_channels)
    if (c < 1) fail("aggregation_channels must be positive");
  if (expansion_ratio < 1) fail("expansion_ratio must be >= 1");
  if (encoder_stage_depth < 1) fail("encoder_stage_depth must be >= 1");
  if (loss_lambda_quarter < 0 || loss_lambda_full < 0) fail("loss weights must be non-negative");
}

ModelConfig desk_preset() {
  ModelConfig c;
  c.max_disparity = 32;
  c.num_groups = 8;
  c.topk = 2;
  c.stem_channels = 8;
  c.feature_channels = {16, 24, 32, 48};
  c.bypass_channels = 16;
  c.fused_channels = 32;
  c.aggregation_channels = {8, 16, 32, 48};
  c.encoder_stage_depth = 1;
  return c;
}

ModelConfig paper_preset() { return ModelConfig{}; }

ModelConfig preset_by_name(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

json config_to_json(const ModelConfig& c) {
  return json{{"schema_version", c.schema_version},
              {"max_disparity", c.max_disparity},
              {"num_groups", c.num_groups},
              {"topk", c.topk},
              {"ghost_ratio", c.ghost_ratio},
              {"se_reduction", c.se_reduction},
              {"use_se", c.use_se},
              {"use_cve", c.use_cve},
              {"use_cva", c.use_cva},
              {"stem_channels", c.stem_channels},
              {"feature_channels", c.feature_channels},
              {"bypass_channels", c.bypass_channels},
              {"fused_channels", c.fused_channels},
              {"aggregation_channels", c.aggregation_channels},
              {"expansion_ratio", c.expansion_ratio},
              {"encoder_stage_depth", c.encoder_stage_depth},
              {"loss_lambda_quarter", c.loss_lambda_quarter},
              {"loss_lambda_full", c.loss_lambda_full},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "schema_version",   "max_disparity",      "num_groups",
      "topk",             "ghost_ratio",        "se_reduction",
      "use_se",           "use_cve",            "use_cva",
      "stem_channels",    "feature_channels",   "bypass_channels",
      "fused_channels",   "aggregation_channels", "expansion_ratio",
      "encoder_stage_depth", "loss_lambda_quarter", "loss_lambda_full",
      "seed"};
  if (!j.is_object()) throw ConfigError("config JSON must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
  }
  ModelConfig c;
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("schema_version", c.schema_version);
  get("max_disparity", c.max_disparity);
  get("num_groups", c.num_groups);
  get("topk", c.topk);
  get("ghost_ratio", c.ghost_ratio);
  get("se_reduction", c.se_reduction);
  get("use_se", c.use_se);
  get("use_cve", c.use_cve);
  get("use_cva", c.use_cva);
  get("stem_channels", c.stem_channels);
  get("feature_channels", c.feature_channels);
  get("bypass_channels", c.bypass_channels);
  get("fused_channels", c.fused_channels);
  get("aggregation_channels", c.aggregation_channels);
  get("expansion_ratio", c.expansion_ratio);
  get("encoder_stage_depth", c.encoder_stage_depth);
  get("loss_lambda_quarter", c.loss_lambda_quarter);
  get("loss_lambda_full", c.loss_lambda_full);
  get("seed", c.seed);
  c.validate();
  return c;
}

std::string config_to_string(const ModelConfig& c) { return config_to_json(c).dump(2); }

ModelConfig config_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return config_from_json(j);
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

void save_config_file(const ModelConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << config_to_string(c) << "\n";
}

std::string config_hash(const ModelConfig& c) {
  const std::string body = config_to_json(c).dump();
  const std::string blob = "blob " + std::to_string(body.size()) + '\0' + body;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace gs
