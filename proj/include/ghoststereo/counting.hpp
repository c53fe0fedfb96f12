#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ghoststereo/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

namespace gs {

// Analytic descriptions of network blocks, used for exact parameter and MAC
// accounting without instantiating tensors.
//
// Conventions:
//   params: learnable only — conv/linear weights, biases, BN gamma+beta
//           (2 per channel). Running statistics are not learnable.
//   MACs:   conv = weight-elements x output positions,
//           transposed conv = weight-elements x input positions,
//           linear = cin x cout. Elementwise work (BN, activations,
//           gating multiplies) is not counted.

struct ConvDesc {
  int rank = 3;  // spatial dims
  i64 cin = 0, cout = 0, groups = 1;
  std::vector<i64> kernel;   // size == rank
  std::vector<i64> stride;   // size == rank
  std::vector<i64> padding;  // size == rank
  bool bias = false;
  bool bn = true;
  bool transposed = false;
};

struct LinearDesc {
  i64 cin = 0, cout = 0;
  bool bias = true;
};

struct SEDesc {
  i64 channels = 0;
  i64 reduction = 4;
};

struct GhostDesc {
  int rank = 3;
  i64 cin = 0, cout = 0;
  i64 ratio = 2;                // intrinsic = ceil(cout / ratio)
  std::vector<i64> cheap_kernel;  // depthwise kernel, size == rank
  bool bn = true;
  bool bias = false;
};

struct BottleneckDesc {
  int rank = 3;
  i64 cin = 0, expansion = 0, cout = 0;
  i64 stride = 1;
  bool use_se = true;
  i64 ratio = 2;
  i64 se_reduction = 4;
};

struct BlockDesc;

struct CompositeDesc {
  std::string name;
  std::vector<BlockDesc> parts;
};

struct BlockDesc {
  std::variant<ConvDesc, LinearDesc, SEDesc, GhostDesc, BottleneckDesc, CompositeDesc> v;
};

i64 ghost_intrinsic_channels(i64 cout, i64 ratio);

// Exact learnable parameter count.
i64 count_params(const BlockDesc& block);

// Multiply-accumulate count for one forward pass. `spatial` is the input
// spatial extent (size == rank of the blocks inside); it is advanced to the
// block's output extent so sequential composites chain correctly.
i64 count_macs(const BlockDesc& block, std::vector<i64>& spatial);
i64 count_macs(const BlockDesc& block, const std::vector<i64>& spatial_in);

// Parses {"kind": "conv3d" | "conv2d" | "linear" | "se3d" | "ghost3d" |
// "bottleneck3d" | "composite", ...}; throws on unknown kinds.
BlockDesc block_desc_from_json(const nlohmann::json& j);

}  // namespace gs
