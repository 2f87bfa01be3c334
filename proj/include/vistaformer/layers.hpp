#pragma once
// Building blocks of the encoder: gated patch-embedding convolution, global
// and neighbourhood attention sub-layers, the depthwise-convolution FFN and
// the pre-norm transformer block.
//
// Token layout inside a stage is channels-last (B, T, H, W, C); every (b, t)
// slice is an independent sequence of H*W tokens.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "complexity.hpp"
#include "conv.hpp"
#include "nn_ops.hpp"
#include "tensor.hpp"

namespace vf {

// Visitor signature for parameter enumeration: (name, tensor, decays).
template <class S>
using ParamVisitor = std::function<void(const std::string&, Tensor<S>&, bool)>;

template <class S>
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with nonzero dropout rates

  bool stochastic() const { return training && rng != nullptr; }
};

namespace init {

// Normal(0, std) resampled until it falls within two standard deviations.
template <class S>
Tensor<S> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<S> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) {
    double r;
    do r = dist(rng);
    while (std::abs(r) > 2.0 * stddev);
    x = static_cast<S>(r);
  }
  return Tensor<S>::from(std::move(shape), std::move(v));
}

template <class S>
Tensor<S> fan_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor<S>::uniform(std::move(shape), rng, static_cast<S>(-bound), static_cast<S>(bound));
}

}  // namespace init

template <class S>
struct LinearParams {
  Tensor<S> weight;  // (out, in)
  Tensor<S> bias;    // (out)

  static LinearParams make(Index in, Index out, Rng& rng) {
    return {init::trunc_normal<S>({out, in}, rng), Tensor<S>::zeros({out})};
  }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".weight", weight, true);
    f(prefix + ".bias", bias, false);
  }
};

template <class S>
Tensor<S> apply(const LinearParams<S>& p, const Tensor<S>& x) {
  return linear(x, p.weight, p.bias);
}

template <class S>
struct ConvParams {
  Tensor<S> weight;  // (Cout, Cin/groups, kt, kh, kw)
  Tensor<S> bias;    // (Cout)

  static ConvParams make(Index cin_per_group, Index cout, Dims3 k, Rng& rng) {
    const Index fan_in = cin_per_group * k[0] * k[1] * k[2];
    auto w = init::fan_uniform<S>({cout, cin_per_group, k[0], k[1], k[2]}, fan_in, rng);
    auto b = init::fan_uniform<S>({cout}, fan_in, rng);
    return {w, b};
  }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".weight", weight, true);
    f(prefix + ".bias", bias, false);
  }
};

template <class S>
struct NormParams {
  Tensor<S> gamma, beta;

  static NormParams make(Index c) { return {Tensor<S>::ones({c}), Tensor<S>::zeros({c})}; }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".weight", gamma, false);
    f(prefix + ".bias", beta, false);
  }
};

// ---------------------------------------------------------------------------
// Gated downsampling convolution: feature(x) * sigmoid(gate(x)). The feature
// branch carries no activation. Without a gate it degrades to a plain
// strided convolution.

template <class S>
struct GatedConv3dParams {
  ConvParams<S> feature;
  std::optional<ConvParams<S>> gate;
  Dims3 stride{1, 1, 1};

  static GatedConv3dParams make(Index cin, Index cout, Dims3 kernel, Dims3 stride, bool gated, Rng& rng) {
    GatedConv3dParams p;
    p.feature = ConvParams<S>::make(cin, cout, kernel, rng);
    if (gated) p.gate = ConvParams<S>::make(cin, cout, kernel, rng);
    p.stride = stride;
    return p;
  }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    feature.visit(prefix + ".feature", f);
    if (gate) gate->visit(prefix + ".gate", f);
  }
};

template <class S>
Tensor<S> gated_conv3d(const Tensor<S>& x, const GatedConv3dParams<S>& p) {
  const Tensor<S> features = conv3d(x, p.feature.weight, p.feature.bias, p.stride);
  if (!p.gate) return features;
  if (p.gate->weight.shape() != p.feature.weight.shape() || p.gate->bias.shape() != p.feature.bias.shape())
    throw ConfigError("gated_conv3d: gate branch " + shape_str(p.gate->weight.shape()) +
                      " does not match feature branch " + shape_str(p.feature.weight.shape()));
  const Tensor<S> gate = sigmoid(conv3d(x, p.gate->weight, p.gate->bias, p.stride));
  return mul(features, gate);
}

// ---------------------------------------------------------------------------
// Attention sub-layers

template <class S>
struct AttentionParams {
  LinearParams<S> qkv;   // C -> 3C, fused [Q | K | V]
  LinearParams<S> proj;  // C -> C
  Index num_heads = 1;
  double attn_dropout = 0.0;

  static AttentionParams make(Index c, Index heads, double attn_dropout, Rng& rng) {
    if (heads <= 0 || c % heads != 0)
      throw ConfigError("attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) +
                        " heads");
    if (attn_dropout < 0.0 || attn_dropout >= 1.0) throw ConfigError("attention dropout must lie in [0,1)");
    return {LinearParams<S>::make(c, 3 * c, rng), LinearParams<S>::make(c, c, rng), heads, attn_dropout};
  }
  Index channels() const { return proj.weight.dim(0); }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    qkv.visit(prefix + ".qkv", f);
    proj.visit(prefix + ".proj", f);
  }
};

template <class S>
struct NeighbourhoodParams {
  AttentionParams<S> attn;
  Index kernel = 13;
  // Grids smaller than the kernel are zero-padded up to kernel x kernel before
  // projection, as fixed-window kernels require; padded keys are masked, so
  // the result is identical to attending over the unpadded grid.
  bool pad_to_kernel = true;

  void visit(const std::string& prefix, const ParamVisitor<S>& f) { attn.visit(prefix, f); }
};

namespace detail {
template <class S>
AttentionDropout attention_dropout(const AttentionParams<S>& p, const ForwardContext<S>& ctx) {
  if (!ctx.stochastic()) return {};
  return {p.attn_dropout, ctx.rng};
}
}  // namespace detail

// Multi-head self-attention over (sequences, N, C) tokens.
template <class S>
Tensor<S> mhsa(const Tensor<S>& x, const AttentionParams<S>& p, const ForwardContext<S>& ctx = {}) {
  if (x.ndim() != 3 || x.dim(2) != p.channels())
    throw ShapeError("mhsa: input " + shape_str(x.shape()) + " for " + std::to_string(p.channels()) + " channels");
  const Index nseq = x.dim(0), N = x.dim(1), C = x.dim(2);
  record_analytic(nseq * attn_flops(1, N, C), attn_memory(1, N, C));
  Tensor<S> qkv;
  {
    LayerScope scope("", FlopCategory::Attention);
    qkv = apply(p.qkv, x);
  }
  const Tensor<S> heads_out = multi_head_attention(qkv, p.num_heads, detail::attention_dropout(p, ctx));
  return apply(p.proj, heads_out);
}

// 2D neighbourhood attention over (sequences, H, W, C) token grids.
template <class S>
Tensor<S> na2d(const Tensor<S>& x, const NeighbourhoodParams<S>& p, const ForwardContext<S>& ctx = {}) {
  if (x.ndim() != 4 || x.dim(3) != p.attn.channels())
    throw ShapeError("na2d: input " + shape_str(x.shape()) + " for " + std::to_string(p.attn.channels()) +
                     " channels");
  const Index H = x.dim(1), W = x.dim(2), C = x.dim(3);
  record_analytic(x.dim(0) * na_flops(H, W, C, p.kernel), na_memory(H, W, C, p.kernel));
  Tensor<S> grid = x;
  if (p.pad_to_kernel) {
    grid = pad_end(grid, 1, std::max<Index>(0, p.kernel - H));
    grid = pad_end(grid, 2, std::max<Index>(0, p.kernel - W));
  }
  Tensor<S> qkv;
  {
    LayerScope scope("", FlopCategory::Attention);
    qkv = apply(p.attn.qkv, grid);
  }
  Tensor<S> out =
      neighbourhood_attention(qkv, p.attn.num_heads, p.kernel, H, W, detail::attention_dropout(p.attn, ctx));
  if (out.dim(1) != H) out = narrow(out, 1, 0, H);
  if (out.dim(2) != W) out = narrow(out, 2, 0, W);
  return apply(p.attn.proj, out);
}

// ---------------------------------------------------------------------------
// Feed-forward network with a depthwise 3x3x3 convolution between the two
// linears supplying positional information.

template <class S>
struct FfnParams {
  LinearParams<S> lin1;  // C -> mult*C
  ConvParams<S> dw;      // depthwise over mult*C channels
  LinearParams<S> lin2;  // mult*C -> C
  Index mult = 4;
  double dropout = 0.0;

  static FfnParams make(Index c, Index mult, double dropout, Rng& rng) {
    FfnParams p;
    p.lin1 = LinearParams<S>::make(c, mult * c, rng);
    p.dw = ConvParams<S>::make(1, mult * c, {3, 3, 3}, rng);
    p.lin2 = LinearParams<S>::make(mult * c, c, rng);
    p.mult = mult;
    p.dropout = dropout;
    return p;
  }
  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    lin1.visit(prefix + ".lin1", f);
    dw.visit(prefix + ".dwconv", f);
    lin2.visit(prefix + ".lin2", f);
  }
};

// lin2(GELU(dwconv(lin1(x)))) on channels-last (B, T, H, W, C) input, with
// dropout after lin2 when training. No residual.
template <class S>
Tensor<S> mix_ffn_branch(const Tensor<S>& x, const FfnParams<S>& p, const ForwardContext<S>& ctx = {}) {
  if (x.ndim() != 5) throw ShapeError("mix_ffn expects (B,T,H,W,C), got " + shape_str(x.shape()));
  const Index hidden = p.lin1.weight.dim(0);
  if (p.dw.weight.dim(0) != hidden || p.lin2.weight.dim(1) != hidden)
    throw ConfigError("mix_ffn: hidden widths of lin1/dwconv/lin2 disagree");
  Tensor<S> h = apply(p.lin1, x);
  h = permute(h, {0, 4, 1, 2, 3});
  h = conv3d(h, p.dw.weight, p.dw.bias, {1, 1, 1}, {1, 1, 1}, hidden);
  h = permute(h, {0, 2, 3, 4, 1});
  h = gelu(h);
  h = apply(p.lin2, h);
  if (ctx.stochastic()) h = dropout(h, p.dropout, *ctx.rng);
  return h;
}

template <class S>
Tensor<S> mix_ffn(const Tensor<S>& x, const FfnParams<S>& p, const ForwardContext<S>& ctx = {}) {
  return add(mix_ffn_branch(x, p, ctx), x);
}

// ---------------------------------------------------------------------------
// Pre-norm transformer block:
//   y   = x + drop_path(attn(norm1(x)))
//   out = y + drop_path(ffn(norm2(y)))

template <class S>
struct BlockParams {
  NormParams<S> norm1, norm2;
  std::variant<AttentionParams<S>, NeighbourhoodParams<S>> attention;
  FfnParams<S> ffn;
  double drop_path_rate = 0.0;

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    norm1.visit(prefix + ".norm1", f);
    std::visit([&](auto& a) { a.visit(prefix + ".attn", f); }, attention);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

// Attention sub-layer (without residual) on channels-last (B, T, H, W, C).
template <class S>
Tensor<S> attention_branch(const Tensor<S>& x, const BlockParams<S>& p, const ForwardContext<S>& ctx) {
  const Index B = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4);
  LayerScope scope("attn");
  const Tensor<S> h = layer_norm(x, p.norm1.gamma, p.norm1.beta);
  if (const auto* na = std::get_if<NeighbourhoodParams<S>>(&p.attention)) {
    return reshape(na2d(reshape(h, {B * T, H, W, C}), *na, ctx), x.shape());
  }
  const auto& mh = std::get<AttentionParams<S>>(p.attention);
  return reshape(mhsa(reshape(h, {B * T, H * W, C}), mh, ctx), x.shape());
}

template <class S>
Tensor<S> transformer_block(const Tensor<S>& x, const BlockParams<S>& p, const ForwardContext<S>& ctx = {}) {
  if (x.ndim() != 5) throw ShapeError("transformer_block expects (B,T,H,W,C), got " + shape_str(x.shape()));
  Tensor<S> a = attention_branch(x, p, ctx);
  if (ctx.stochastic()) a = drop_path(a, p.drop_path_rate, *ctx.rng);
  const Tensor<S> y = add(x, a);
  Tensor<S> f;
  {
    LayerScope scope("ffn");
    f = mix_ffn_branch(layer_norm(y, p.norm2.gamma, p.norm2.beta), p.ffn, ctx);
  }
  if (ctx.stochastic()) f = drop_path(f, p.drop_path_rate, *ctx.rng);
  return add(y, f);
}

template <class S>
BlockParams<S> make_block(Index c, Index heads, Index mlp_mult, std::optional<Index> na_kernel, bool na_pad,
                          double dropout_rate, double drop_path_rate, Rng& rng) {
  BlockParams<S> p;
  p.norm1 = NormParams<S>::make(c);
  auto attn = AttentionParams<S>::make(c, heads, dropout_rate, rng);
  if (na_kernel) {
    if (*na_kernel < 1 || *na_kernel % 2 == 0)
      throw ConfigError("neighbourhood size must be odd and >= 1, got " + std::to_string(*na_kernel));
    p.attention = NeighbourhoodParams<S>{attn, *na_kernel, na_pad};
  } else {
    p.attention = attn;
  }
  p.norm2 = NormParams<S>::make(c);
  p.ffn = FfnParams<S>::make(c, mlp_mult, dropout_rate, rng);
  p.drop_path_rate = drop_path_rate;
  return p;
}

}  // namespace vf
