#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ghoststereo/counting.hpp"
#include "ghoststereo/ops.hpp"

namespace gs {

// Base class for parameterized blocks. Parameters and stat buffers are
// registered at construction so checkpointing and the optimizer can walk
// the full tree by name. Construction order is the init RNG draw order,
// which makes whole-model initialization deterministic per seed.
class Module {
 public:
  virtual ~Module() = default;

  void set_training(bool t);
  bool is_training() const { return training_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Array*>> named_buffers();
  i64 num_parameters() const;

 protected:
  Tensor add_param(const std::string& name, Array init);
  void add_buffer(const std::string& name, Array* buf);
  void add_child(const std::string& name, Module* m);

 private:
  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Array*>>& out);

  bool training_ = true;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Array*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

struct ConvSpec {
  int rank = 2;
  i64 cin = 0, cout = 0;
  std::vector<i64> kernel;  // size rank, or single value broadcast
  i64 stride = 1;
  i64 groups = 1;
  bool bias = false;
  // padding defaults to k/2 per axis ("same" for odd kernels, stride 1)
  std::vector<i64> padding;
};

class Conv : public Module {
 public:
  Conv(const ConvSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x) const;
  ConvDesc describe(bool with_bn = false) const;

 private:
  ConvSpec spec_;
  Tensor weight_, bias_;
  ConvOpts opts_;
};

class ConvTranspose : public Module {
 public:
  // kernel 4, stride 2, padding 1: exact 2x upsampling
  ConvTranspose(int rank, i64 cin, i64 cout, i64 kernel, i64 stride, i64 padding, Rng& rng);
  Tensor forward(const Tensor& x) const;
  ConvDesc describe(bool with_bn = false) const;

 private:
  int rank_;
  i64 kernel_, stride_, padding_;
  Tensor weight_;
};

class BatchNorm : public Module {
 public:
  explicit BatchNorm(i64 channels);
  Tensor forward(const Tensor& x);
  i64 channels() const { return channels_; }

 private:
  i64 channels_;
  Tensor gamma_, beta_;
  Array running_mean_, running_var_;
};

class Linear : public Module {
 public:
  Linear(i64 cin, i64 cout, Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor weight_, bias_;
};

// conv -> BN -> optional ReLU, the standard unit everywhere in the network
class ConvBnAct : public Module {
 public:
  ConvBnAct(const ConvSpec& spec, bool act, Rng& rng);
  Tensor forward(const Tensor& x);
  BlockDesc describe() const;

 private:
  Conv conv_;
  BatchNorm bn_;
  bool act_;
};

// Ghost module: pointwise primary conv for intrinsic channels, depthwise
// cheap conv for the redundant ones, concatenated and truncated to cout.
struct GhostSpec {
  int rank = 3;
  i64 cin = 0, cout = 0;
  i64 ratio = 2;
  i64 cheap_kernel = 3;
  bool relu = true;  // projection instances run without activation
};

class GhostModule : public Module {
 public:
  GhostModule(const GhostSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x);
  GhostDesc describe() const;
  i64 intrinsic_channels() const { return intrinsic_; }

 private:
  GhostSpec spec_;
  i64 intrinsic_;
  Conv primary_, cheap_;
  BatchNorm primary_bn_, cheap_bn_;
};

// Squeeze-and-excitation: global pool -> FC -> ReLU -> FC -> hard-sigmoid
// gate, per-channel rescaling. Rank-agnostic (pools all spatial dims).
class SqueezeExcite : public Module {
 public:
  SqueezeExcite(i64 channels, i64 reduction, Rng& rng);
  Tensor forward(const Tensor& x) const;
  SEDesc describe() const;

 private:
  i64 channels_, reduction_;
  Linear fc1_, fc2_;
};

// Ghost bottleneck, stride 1 (identity shortcut) or stride 2 (downsampling
// DW + PW shortcut, stride-2 DW between expansion and SE in the main path).
struct BottleneckSpec {
  int rank = 3;
  i64 cin = 0, expansion = 0, cout = 0;
  i64 stride = 1;
  bool use_se = true;
  i64 ratio = 2;
  i64 se_reduction = 4;
};

class GhostBottleneck : public Module {
 public:
  GhostBottleneck(const BottleneckSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x);
  BottleneckDesc describe() const;

 private:
  BottleneckSpec spec_;
  GhostModule expand_, project_;
  std::unique_ptr<Conv> down_dw_;
  std::unique_ptr<BatchNorm> down_bn_;
  std::unique_ptr<SqueezeExcite> se_;
  std::unique_ptr<Conv> shortcut_dw_, shortcut_pw_;
  std::unique_ptr<BatchNorm> shortcut_dw_bn_, shortcut_pw_bn_;
};

// Plain conv3x3(xN) block used by the ablation twin in place of a ghost
// bottleneck: conv(stride) -> BN -> ReLU.
class VanillaConvBlock : public Module {
 public:
  VanillaConvBlock(int rank, i64 cin, i64 cout, i64 stride, Rng& rng);
  Tensor forward(const Tensor& x);
  BlockDesc describe() const;

 private:
  ConvBnAct block_;
};

// Common interface so the hourglass can swap ghost and vanilla blocks.
class AggBlock : public Module {
 public:
  static std::unique_ptr<AggBlock> make(bool ghost, const BottleneckSpec& spec, Rng& rng);
  virtual Tensor forward(const Tensor& x) = 0;
  virtual BlockDesc describe() const = 0;
};

}  // namespace gs
