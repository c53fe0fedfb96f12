#include "ghoststereo/counting.hpp"

#include <nlohmann/json.hpp>
#include <stdexcept>

#include "ghoststereo/errors.hpp"

namespace gs {

namespace {

i64 prod(const std::vector<i64>& v) {
  i64 p = 1;
  for (i64 x : v) p *= x;
  return p;
}

std::vector<i64> conv_out_spatial(const ConvDesc& c, const std::vector<i64>& in) {
  if (static_cast<int>(in.size()) != c.rank)
    throw std::invalid_argument("count_macs: spatial rank mismatch");
  std::vector<i64> out(in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    if (c.transposed) {
      out[i] = (in[i] - 1) * c.stride[i] - 2 * c.padding[i] + c.kernel[i];
    } else {
      out[i] = (in[i] + 2 * c.padding[i] - c.kernel[i]) / c.stride[i] + 1;
    }
    if (out[i] < 1) throw std::invalid_argument("count_macs: empty spatial extent");
  }
  return out;
}

ConvDesc ghost_primary(const GhostDesc& g) {
  ConvDesc c;
  c.rank = g.rank;
  c.cin = g.cin;
  c.cout = ghost_intrinsic_channels(g.cout, g.ratio);
  c.groups = 1;
  c.kernel.assign(g.rank, 1);
  c.stride.assign(g.rank, 1);
  c.padding.assign(g.rank, 0);
  c.bias = g.bias;
  c.bn = g.bn;
  return c;
}

ConvDesc ghost_cheap(const GhostDesc& g) {
  const i64 intr = ghost_intrinsic_channels(g.cout, g.ratio);
  ConvDesc c;
  c.rank = g.rank;
  c.cin = intr;
  c.cout = intr * (g.ratio - 1);
  c.groups = intr;
  c.kernel = g.cheap_kernel;
  c.stride.assign(g.rank, 1);
  c.padding.resize(g.rank);
  for (int i = 0; i < g.rank; ++i) c.padding[i] = g.cheap_kernel[i] / 2;
  c.bias = g.bias;
  c.bn = g.bn;
  return c;
}

ConvDesc dw(int rank, i64 ch, i64 k, i64 stride, bool bn) {
  ConvDesc c;
  c.rank = rank;
  c.cin = ch;
  c.cout = ch;
  c.groups = ch;
  c.kernel.assign(rank, k);
  c.stride.assign(rank, stride);
  c.padding.assign(rank, k / 2);
  c.bn = bn;
  return c;
}

ConvDesc pw(int rank, i64 cin, i64 cout, bool bn) {
  ConvDesc c;
  c.rank = rank;
  c.cin = cin;
  c.cout = cout;
  c.kernel.assign(rank, 1);
  c.stride.assign(rank, 1);
  c.padding.assign(rank, 0);
  c.bn = bn;
  return c;
}

// The bottleneck expressed in terms of its primitive blocks; shared by the
// param and MAC walkers so the two stay consistent.
struct BottleneckParts {
  GhostDesc expand, project;
  ConvDesc down;              // stride-2 DW in main path
  ConvDesc shortcut_dw, shortcut_pw;
  SEDesc se;
  bool has_down = false, has_shortcut = false, has_se = false;
};

BottleneckParts bottleneck_parts(const BottleneckDesc& b) {
  BottleneckParts p;
  p.expand.rank = b.rank;
  p.expand.cin = b.cin;
  p.expand.cout = b.expansion;
  p.expand.ratio = b.ratio;
  p.expand.cheap_kernel.assign(b.rank, 3);
  p.project = p.expand;
  p.project.cin = b.expansion;
  p.project.cout = b.cout;
  if (b.stride == 2) {
    p.has_down = true;
    p.down = dw(b.rank, b.expansion, 3, 2, true);
    p.has_shortcut = true;
    p.shortcut_dw = dw(b.rank, b.cin, 3, 2, true);
    p.shortcut_pw = pw(b.rank, b.cin, b.cout, true);
  }
  if (b.use_se) {
    p.has_se = true;
    p.se.channels = b.expansion;
    p.se.reduction = b.se_reduction;
  }
  return p;
}

}  // namespace

i64 ghost_intrinsic_channels(i64 cout, i64 ratio) { return (cout + ratio - 1) / ratio; }

i64 count_params(const BlockDesc& block) {
  return std::visit(
      [](const auto& d) -> i64 {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, ConvDesc>) {
          i64 n = d.cout * (d.cin / d.groups) * prod(d.kernel);
          if (d.transposed) n = d.cin * d.cout * prod(d.kernel);  // same product, kept explicit
          if (d.bias) n += d.cout;
          if (d.bn) n += 2 * d.cout;
          return n;
        } else if constexpr (std::is_same_v<T, LinearDesc>) {
          return d.cin * d.cout + (d.bias ? d.cout : 0);
        } else if constexpr (std::is_same_v<T, SEDesc>) {
          const i64 mid = d.channels / d.reduction;
          LinearDesc f1{d.channels, mid, true}, f2{mid, d.channels, true};
          return count_params(BlockDesc{f1}) + count_params(BlockDesc{f2});
        } else if constexpr (std::is_same_v<T, GhostDesc>) {
          return count_params(BlockDesc{ghost_primary(d)}) +
                 count_params(BlockDesc{ghost_cheap(d)});
        } else if constexpr (std::is_same_v<T, BottleneckDesc>) {
          BottleneckParts p = bottleneck_parts(d);
          i64 n = count_params(BlockDesc{p.expand}) + count_params(BlockDesc{p.project});
          if (p.has_down) n += count_params(BlockDesc{p.down});
          if (p.has_se) n += count_params(BlockDesc{p.se});
          if (p.has_shortcut)
            n += count_params(BlockDesc{p.shortcut_dw}) + count_params(BlockDesc{p.shortcut_pw});
          return n;
        } else {  // CompositeDesc
          i64 n = 0;
          for (const auto& part : d.parts) n += count_params(part);
          return n;
        }
      },
      block.v);
}

i64 count_macs(const BlockDesc& block, std::vector<i64>& spatial) {
  return std::visit(
      [&spatial](const auto& d) -> i64 {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, ConvDesc>) {
          const i64 weights = d.cout * (d.cin / d.groups) * prod(d.kernel);
          // transposed conv touches every weight once per *input* position
          const i64 positions = d.transposed ? prod(spatial) : 0;
          std::vector<i64> out = conv_out_spatial(d, spatial);
          const i64 macs = weights * (d.transposed ? positions : prod(out));
          spatial = std::move(out);
          return macs;
        } else if constexpr (std::is_same_v<T, LinearDesc>) {
          return d.cin * d.cout;
        } else if constexpr (std::is_same_v<T, SEDesc>) {
          const i64 mid = d.channels / d.reduction;
          return d.channels * mid + mid * d.channels;
        } else if constexpr (std::is_same_v<T, GhostDesc>) {
          std::vector<i64> s = spatial;
          i64 n = count_macs(BlockDesc{ghost_primary(d)}, s);
          n += count_macs(BlockDesc{ghost_cheap(d)}, s);
          spatial = std::move(s);
          return n;
        } else if constexpr (std::is_same_v<T, BottleneckDesc>) {
          BottleneckParts p = bottleneck_parts(d);
          std::vector<i64> main = spatial;
          i64 n = count_macs(BlockDesc{p.expand}, main);
          if (p.has_down) n += count_macs(BlockDesc{p.down}, main);
          if (p.has_se) n += count_macs(BlockDesc{p.se}, main);
          n += count_macs(BlockDesc{p.project}, main);
          if (p.has_shortcut) {
            std::vector<i64> sc = spatial;
            n += count_macs(BlockDesc{p.shortcut_dw}, sc);
            n += count_macs(BlockDesc{p.shortcut_pw}, sc);
          }
          spatial = std::move(main);
          return n;
        } else {  // CompositeDesc
          i64 n = 0;
          for (const auto& part : d.parts) n += count_macs(part, spatial);
          return n;
        }
      },
      block.v);
}

i64 count_macs(const BlockDesc& block, const std::vector<i64>& spatial_in) {
  std::vector<i64> s = spatial_in;
  return count_macs(block, s);
}

BlockDesc block_desc_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  auto vec = [&](const char* key, int rank, i64 fallback) {
    std::vector<i64> v(rank, fallback);
    if (j.contains(key)) v = j.at(key).get<std::vector<i64>>();
    return v;
  };
  if (kind == "conv2d" || kind == "conv3d") {
    ConvDesc c;
    c.rank = kind == "conv2d" ? 2 : 3;
    c.cin = j.at("cin").get<i64>();
    c.cout = j.at("cout").get<i64>();
    c.groups = j.value("groups", 1);
    c.kernel = vec("kernel", c.rank, 3);
    c.stride = vec("stride", c.rank, 1);
    c.padding = vec("padding", c.rank, 0);
    c.bias = j.value("bias", false);
    c.bn = j.value("bn", false);
    c.transposed = j.value("transposed", false);
    return BlockDesc{c};
  }
  if (kind == "linear") {
    return BlockDesc{LinearDesc{j.at("cin").get<i64>(), j.at("cout").get<i64>(),
                                j.value("bias", true)}};
  }
  if (kind == "se2d" || kind == "se3d") {
    return BlockDesc{SEDesc{j.at("channels").get<i64>(), j.value("reduction", i64{4})}};
  }
  if (kind == "ghost2d" || kind == "ghost3d") {
    GhostDesc g;
    g.rank = kind == "ghost2d" ? 2 : 3;
    g.cin = j.at("cin").get<i64>();
    g.cout = j.at("cout").get<i64>();
    g.ratio = j.value("ratio", i64{2});
    g.cheap_kernel = vec("cheap_kernel", g.rank, 3);
    g.bn = j.value("bn", false);
    g.bias = j.value("bias", false);
    return BlockDesc{g};
  }
  if (kind == "bottleneck2d" || kind == "bottleneck3d") {
    BottleneckDesc b;
    b.rank = kind == "bottleneck2d" ? 2 : 3;
    b.cin = j.at("cin").get<i64>();
    b.expansion = j.at("expansion").get<i64>();
    b.cout = j.at("cout").get<i64>();
    b.stride = j.value("stride", i64{1});
    b.use_se = j.value("use_se", true);
    b.ratio = j.value("ratio", i64{2});
    b.se_reduction = j.value("se_reduction", i64{4});
    return BlockDesc{b};
  }
  if (kind == "composite") {
    CompositeDesc c;
    c.name = j.value("name", "");
    for (const auto& part : j.at("parts")) c.parts.push_back(block_desc_from_json(part));
    return BlockDesc{c};
  }
  throw ConfigError("block_desc_from_json: unknown block kind '" + kind + "'");
}

}  // namespace gs
