#include "ghoststereo/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "ghoststereo/errors.hpp"

namespace gs {

void Module::set_training(bool t) {
  training_ = t;
  for (auto& [name, child] : children_) child->set_training(t);
}

Tensor Module::add_param(const std::string& name, Array init) {
  Tensor t(std::move(init), /*requires_grad=*/true);
  params_.emplace_back(name, t);
  return t;
}

void Module::add_buffer(const std::string& name, Array* buf) {
  buffers_.emplace_back(name, buf);
}

void Module::add_child(const std::string& name, Module* m) {
  children_.emplace_back(name, m);
}

void Module::collect_params(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
  for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
  for (const auto& [name, child] : children_) child->collect_params(prefix + name + ".", out);
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect_params("", out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Module::collect_buffers(const std::string& prefix,
                             std::vector<std::pair<std::string, Array*>>& out) {
  for (auto& [name, b] : buffers_) out.emplace_back(prefix + name, b);
  for (auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
}

std::vector<std::pair<std::string, Array*>> Module::named_buffers() {
  std::vector<std::pair<std::string, Array*>> out;
  collect_buffers("", out);
  return out;
}

i64 Module::num_parameters() const {
  i64 n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

namespace {

std::vector<i64> expand_kernel(const std::vector<i64>& k, int rank) {
  if (static_cast<int>(k.size()) == rank) return k;
  if (k.size() == 1) return std::vector<i64>(rank, k[0]);
  throw std::invalid_argument("kernel spec does not match rank");
}

Array kaiming_normal(const Shape& shape, i64 fan_in, Rng& rng) {
  Array w(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (i64 i = 0; i < w.numel(); ++i) w[i] = std * rng.normal();
  return w;
}

}  // namespace

Conv::Conv(const ConvSpec& spec, Rng& rng) : spec_(spec) {
  spec_.kernel = expand_kernel(spec.kernel, spec.rank);
  Shape ws{spec_.cout, spec_.cin / spec_.groups};
  for (i64 k : spec_.kernel) ws.push_back(k);
  if (spec_.cin % spec_.groups != 0 || spec_.cout % spec_.groups != 0)
    throw GroupDivisibilityError("Conv: channels not divisible by groups");
  i64 fan_in = (spec_.cin / spec_.groups);
  for (i64 k : spec_.kernel) fan_in *= k;
  weight_ = add_param("weight", kaiming_normal(ws, fan_in, rng));
  if (spec_.bias) bias_ = add_param("bias", Array::zeros({spec_.cout}));
  opts_.stride.assign(spec_.rank, spec_.stride);
  if (spec_.padding.empty()) {
    opts_.padding.resize(spec_.rank);
    for (int i = 0; i < spec_.rank; ++i) opts_.padding[i] = spec_.kernel[i] / 2;
  } else {
    opts_.padding = spec_.padding;
  }
  opts_.groups = spec_.groups;
}

Tensor Conv::forward(const Tensor& x) const { return conv_nd(x, weight_, bias_, opts_); }

ConvDesc Conv::describe(bool with_bn) const {
  ConvDesc d;
  d.rank = spec_.rank;
  d.cin = spec_.cin;
  d.cout = spec_.cout;
  d.groups = spec_.groups;
  d.kernel = spec_.kernel;
  d.stride = opts_.stride;
  d.padding = opts_.padding;
  d.bias = spec_.bias;
  d.bn = with_bn;
  return d;
}

ConvTranspose::ConvTranspose(int rank, i64 cin, i64 cout, i64 kernel, i64 stride, i64 padding,
                             Rng& rng)
    : rank_(rank), kernel_(kernel), stride_(stride), padding_(padding) {
  Shape ws{cin, cout};
  for (int i = 0; i < rank; ++i) ws.push_back(kernel);
  i64 fan_in = cin;
  for (int i = 0; i < rank; ++i) fan_in *= kernel;
  weight_ = add_param("weight", kaiming_normal(ws, fan_in, rng));
}

Tensor ConvTranspose::forward(const Tensor& x) const {
  return conv_transpose_nd(x, weight_, Tensor(), std::vector<i64>(rank_, stride_),
                           std::vector<i64>(rank_, padding_));
}

ConvDesc ConvTranspose::describe(bool with_bn) const {
  ConvDesc d;
  d.rank = rank_;
  d.cin = weight_.dim(0);
  d.cout = weight_.dim(1);
  d.kernel.assign(rank_, kernel_);
  d.stride.assign(rank_, stride_);
  d.padding.assign(rank_, padding_);
  d.bn = with_bn;
  d.transposed = true;
  return d;
}

BatchNorm::BatchNorm(i64 channels)
    : channels_(channels),
      running_mean_(Array::zeros({channels})),
      running_var_(Array::full({channels}, 1.0)) {
  gamma_ = add_param("weight", Array::full({channels}, 1.0));
  beta_ = add_param("bias", Array::zeros({channels}));
  add_buffer("running_mean", &running_mean_);
  add_buffer("running_var", &running_var_);
}

Tensor BatchNorm::forward(const Tensor& x) {
  return batch_norm(x, gamma_, beta_, running_mean_, running_var_, is_training());
}

Linear::Linear(i64 cin, i64 cout, Rng& rng) {
  weight_ = add_param("weight", kaiming_normal({cout, cin}, cin, rng));
  bias_ = add_param("bias", Array::zeros({cout}));
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight_, bias_); }

ConvBnAct::ConvBnAct(const ConvSpec& spec, bool act, Rng& rng)
    : conv_(spec, rng), bn_(spec.cout), act_(act) {
  add_child("conv", &conv_);
  add_child("bn", &bn_);
}

Tensor ConvBnAct::forward(const Tensor& x) {
  Tensor y = bn_.forward(conv_.forward(x));
  return act_ ? relu(y) : y;
}

BlockDesc ConvBnAct::describe() const { return BlockDesc{conv_.describe(/*with_bn=*/true)}; }

namespace {

ConvSpec ghost_primary_spec(const GhostSpec& s, i64 intrinsic) {
  ConvSpec c;
  c.rank = s.rank;
  c.cin = s.cin;
  c.cout = intrinsic;
  c.kernel = {1};
  return c;
}

ConvSpec ghost_cheap_spec(const GhostSpec& s, i64 intrinsic) {
  ConvSpec c;
  c.rank = s.rank;
  c.cin = intrinsic;
  c.cout = intrinsic * (s.ratio - 1);
  c.kernel = {s.cheap_kernel};
  c.groups = intrinsic;
  return c;
}

}  // namespace

GhostModule::GhostModule(const GhostSpec& spec, Rng& rng)
    : spec_((spec.ratio < 2 ? throw std::invalid_argument("GhostModule: ratio must be >= 2")
                            : spec)),
      intrinsic_(ghost_intrinsic_channels(spec.cout, spec.ratio)),
      primary_(ghost_primary_spec(spec, intrinsic_), rng),
      cheap_(ghost_cheap_spec(spec, intrinsic_), rng),
      primary_bn_(intrinsic_),
      cheap_bn_(intrinsic_ * (spec.ratio - 1)) {
  add_child("primary", &primary_);
  add_child("primary_bn", &primary_bn_);
  add_child("cheap", &cheap_);
  add_child("cheap_bn", &cheap_bn_);
}

Tensor GhostModule::forward(const Tensor& x) {
  Tensor intr = primary_bn_.forward(primary_.forward(x));
  if (spec_.relu) intr = relu(intr);
  Tensor chp = cheap_bn_.forward(cheap_.forward(intr));
  if (spec_.relu) chp = relu(chp);
  Tensor y = concat({intr, chp}, 1);
  if (y.dim(1) != spec_.cout) y = narrow(y, 1, 0, spec_.cout);
  return y;
}

GhostDesc GhostModule::describe() const {
  GhostDesc d;
  d.rank = spec_.rank;
  d.cin = spec_.cin;
  d.cout = spec_.cout;
  d.ratio = spec_.ratio;
  d.cheap_kernel.assign(spec_.rank, spec_.cheap_kernel);
  d.bn = true;
  d.bias = false;
  return d;
}

SqueezeExcite::SqueezeExcite(i64 channels, i64 reduction, Rng& rng)
    : channels_(channels),
      reduction_(reduction),
      fc1_(channels, channels / reduction, rng),
      fc2_(channels / reduction, channels, rng) {
  if (channels % reduction != 0)
    throw GroupDivisibilityError("SqueezeExcite: channels " + std::to_string(channels) +
                                 " not divisible by reduction " + std::to_string(reduction));
  add_child("fc1", &fc1_);
  add_child("fc2", &fc2_);
}

Tensor SqueezeExcite::forward(const Tensor& x) const {
  Tensor s = global_avg_pool(x);                      // [B, C]
  s = hard_sigmoid(fc2_.forward(relu(fc1_.forward(s))));
  Shape bs{x.dim(0), channels_};
  for (int d = 2; d < x.rank(); ++d) bs.push_back(1);
  return mul(x, reshape(s, bs));
}

SEDesc SqueezeExcite::describe() const { return SEDesc{channels_, reduction_}; }

GhostBottleneck::GhostBottleneck(const BottleneckSpec& spec, Rng& rng)
    : spec_(spec),
      expand_(GhostSpec{spec.rank, spec.cin, spec.expansion, spec.ratio, 3, /*relu=*/true}, rng),
      project_(GhostSpec{spec.rank, spec.expansion, spec.cout, spec.ratio, 3, /*relu=*/false},
               rng) {
  if (spec.stride != 1 && spec.stride != 2)
    throw std::invalid_argument("GhostBottleneck: stride must be 1 or 2");
  if (spec.stride == 1 && spec.cin != spec.cout)
    throw ShapeMismatchError("GhostBottleneck: stride-1 requires cin == cout (identity shortcut)");
  add_child("expand", &expand_);
  if (spec.stride == 2) {
    ConvSpec dw;
    dw.rank = spec.rank;
    dw.cin = spec.expansion;
    dw.cout = spec.expansion;
    dw.kernel = {3};
    dw.stride = 2;
    dw.groups = spec.expansion;
    down_dw_ = std::make_unique<Conv>(dw, rng);
    down_bn_ = std::make_unique<BatchNorm>(spec.expansion);
    add_child("down_dw", down_dw_.get());
    add_child("down_bn", down_bn_.get());
  }
  if (spec.use_se) {
    se_ = std::make_unique<SqueezeExcite>(spec.expansion, spec.se_reduction, rng);
    add_child("se", se_.get());
  }
  add_child("project", &project_);
  if (spec.stride == 2) {
    ConvSpec sdw;
    sdw.rank = spec.rank;
    sdw.cin = spec.cin;
    sdw.cout = spec.cin;
    sdw.kernel = {3};
    sdw.stride = 2;
    sdw.groups = spec.cin;
    shortcut_dw_ = std::make_unique<Conv>(sdw, rng);
    shortcut_dw_bn_ = std::make_unique<BatchNorm>(spec.cin);
    ConvSpec spw;
    spw.rank = spec.rank;
    spw.cin = spec.cin;
    spw.cout = spec.cout;
    spw.kernel = {1};
    shortcut_pw_ = std::make_unique<Conv>(spw, rng);
    shortcut_pw_bn_ = std::make_unique<BatchNorm>(spec.cout);
    add_child("shortcut_dw", shortcut_dw_.get());
    add_child("shortcut_dw_bn", shortcut_dw_bn_.get());
    add_child("shortcut_pw", shortcut_pw_.get());
    add_child("shortcut_pw_bn", shortcut_pw_bn_.get());
  }
}

Tensor GhostBottleneck::forward(const Tensor& x) {
  Tensor y = expand_.forward(x);
  if (down_dw_) y = down_bn_->forward(down_dw_->forward(y));
  if (se_) y = se_->forward(y);
  y = project_.forward(y);
  Tensor sc = x;
  if (shortcut_dw_) {
    sc = shortcut_dw_bn_->forward(shortcut_dw_->forward(sc));
    sc = shortcut_pw_bn_->forward(shortcut_pw_->forward(sc));
  }
  return add(y, sc);
}

BottleneckDesc GhostBottleneck::describe() const {
  BottleneckDesc d;
  d.rank = spec_.rank;
  d.cin = spec_.cin;
  d.expansion = spec_.expansion;
  d.cout = spec_.cout;
  d.stride = spec_.stride;
  d.use_se = spec_.use_se;
  d.ratio = spec_.ratio;
  d.se_reduction = spec_.se_reduction;
  return d;
}

VanillaConvBlock::VanillaConvBlock(int rank, i64 cin, i64 cout, i64 stride, Rng& rng)
    : block_(
          [&] {
            ConvSpec c;
            c.rank = rank;
            c.cin = cin;
            c.cout = cout;
            c.kernel = {3};
            c.stride = stride;
            return c;
          }(),
          /*act=*/true, rng) {
  add_child("block", &block_);
}

Tensor VanillaConvBlock::forward(const Tensor& x) { return block_.forward(x); }

BlockDesc VanillaConvBlock::describe() const { return block_.describe(); }

namespace {

class GhostAggBlock : public AggBlock {
 public:
  GhostAggBlock(const BottleneckSpec& spec, Rng& rng) : impl_(spec, rng) {
    add_child("bottleneck", &impl_);
  }
  Tensor forward(const Tensor& x) override { return impl_.forward(x); }
  BlockDesc describe() const override { return BlockDesc{impl_.describe()}; }

 private:
  GhostBottleneck impl_;
};

class VanillaAggBlock : public AggBlock {
 public:
  VanillaAggBlock(const BottleneckSpec& spec, Rng& rng)
      : impl_(spec.rank, spec.cin, spec.cout, spec.stride, rng) {
    add_child("conv_block", &impl_);
  }
  Tensor forward(const Tensor& x) override { return impl_.forward(x); }
  BlockDesc describe() const override { return impl_.describe(); }

 private:
  VanillaConvBlock impl_;
};

}  // namespace

std::unique_ptr<AggBlock> AggBlock::make(bool ghost, const BottleneckSpec& spec, Rng& rng) {
  if (ghost) return std::make_unique<GhostAggBlock>(spec, rng);
  return std::make_unique<VanillaAggBlock>(spec, rng);
}

}  // namespace gs
