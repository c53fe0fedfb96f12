#pragma once

#include <array>
#include <string>
#include <vector>

#include "ghoststereo/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace gs {

// Every architectural knob the network needs. The paper fixes the topology
// but leaves most widths and counts open; this struct makes each choice
// explicit, serializable, and overridable.
struct ModelConfig {
  int schema_version = 1;

  i64 max_disparity = 192;  // full-resolution search range, divisible by 4
  i64 num_groups = 32;      // correlation groups G
  i64 topk = 2;             // candidates kept by the disparity regression

  i64 ghost_ratio = 2;    // intrinsic channels = ceil(out / ratio)
  i64 se_reduction = 4;
  bool use_se = true;

  bool use_cve = true;  // cost volume enhancement (attention + post conv)
  bool use_cva = true;  // ghost bottlenecks in the hourglass (vs plain conv3d)

  i64 stem_channels = 16;
  std::array<i64, 4> feature_channels = {24, 40, 80, 160};  // scales 1/4..1/32
  i64 bypass_channels = 32;
  i64 fused_channels = 320;  // matching feature width, divisible by num_groups
  std::array<i64, 4> aggregation_channels = {32, 64, 128, 192};  // hourglass plan
  i64 expansion_ratio = 2;     // bottleneck expansion = ratio * out_channels
  i64 encoder_stage_depth = 2; // bottlenecks per encoder stage

  double loss_lambda_quarter = 0.3;
  double loss_lambda_full = 1.0;

  i64 seed = 0;

  i64 disparity_levels() const { return max_disparity / 4; }

  // Throws ConfigError describing the first violated invariant.
  void validate() const;
};

ModelConfig desk_preset();
ModelConfig paper_preset();
ModelConfig preset_by_name(const std::string& name);

nlohmann::json config_to_json(const ModelConfig& c);
// Strict: unknown keys and schema_version mismatches are rejected.
ModelConfig config_from_json(const nlohmann::json& j);

std::string config_to_string(const ModelConfig& c);
ModelConfig config_from_string(const std::string& text);
ModelConfig load_config_file(const std::string& path);
void save_config_file(const ModelConfig& c, const std::string& path);

// git-style content hash (SHA-1 over a blob header + canonical JSON)
std::string config_hash(const ModelConfig& c);

}  // namespace gs
