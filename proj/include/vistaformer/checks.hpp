#pragma once
// Self-checks shared by the CLI and the acceptance runner: finite-difference
// gradient checks of every layer, attention equivalences and the token
// permutation property.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "model.hpp"
#include "train.hpp"

namespace vf {

// Tiny three-stage model used by the end-to-end and equivalence checks.
inline ModelConfig micro_model_config(AttentionKind kind = AttentionKind::MHSA) {
  ModelConfig m;
  m.in_channels = 3;
  m.num_classes = 4;
  m.max_seq_len = 4;
  m.attention = kind;
  m.dropout_rate = 0;
  m.drop_path_rate = 0;
  m.stages = {{8, {1, 2, 2}, {1, 2, 2}, 1, 2, 2}, {16, {2, 2, 2}, {2, 2, 2}, 1, 2, 2}, {32, {2, 2, 2}, {2, 2, 2}, 1, 4, 2}};
  return m;
}

template <class S>
double max_abs_difference(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_difference: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data()[i] - b.data()[i])));
  return m;
}

struct GradCheckRow {
  std::string name;
  GradCheckReport report;
};

namespace detail {

using T64 = Tensor<double>;

inline void randomise(LinearParams<double>& p, Rng& rng) {
  p.weight = T64::randn(p.weight.shape(), rng, 0.5);
  p.bias = T64::randn(p.bias.shape(), rng, 0.2);
}

inline std::vector<T64> params_of(const std::function<void(const ParamVisitor<double>&)>& visit) {
  std::vector<T64> out;
  visit([&](const std::string&, T64& t, bool) { out.push_back(t); });
  return out;
}

inline BlockParams<double> random_block(Index c, Index heads, std::optional<Index> k, Rng& rng) {
  auto p = make_block<double>(c, heads, 2, k, true, 0.0, 0.0, rng);
  p.norm1.gamma = T64::uniform({c}, rng, 0.5, 1.5);
  p.norm1.beta = T64::randn({c}, rng, 0.1);
  std::visit(
      [&](auto& a) {
        if constexpr (std::is_same_v<std::decay_t<decltype(a)>, AttentionParams<double>>) {
          randomise(a.qkv, rng);
          randomise(a.proj, rng);
        } else {
          randomise(a.attn.qkv, rng);
          randomise(a.attn.proj, rng);
        }
      },
      p.attention);
  randomise(p.ffn.lin1, rng);
  randomise(p.ffn.lin2, rng);
  return p;
}

}  // namespace detail

// Central-difference checks in 64-bit, one row per layer, optionally plus the
// micro model end to end. Layers use tolerance 1e-4, the full model 1e-3.
inline std::vector<GradCheckRow> gradient_suite(std::uint64_t seed = 7, bool include_model = true) {
  using detail::T64;
  std::vector<GradCheckRow> rows;
  Rng rng(seed);
  GradCheckOptions opt;
  auto run = [&](const std::string& name, const std::function<T64()>& f, std::vector<T64> wrt,
                 const GradCheckOptions& o) { rows.push_back({name, grad_check(f, std::move(wrt), o)}); };
  std::uint64_t proj = 100;

  {
    auto a = T64::randn({3, 4}, rng), b = T64::randn({4, 5}, rng);
    run("matmul", [&, s = ++proj] { return random_projection(matmul(a, b), s); }, {a, b}, opt);
  }
  {
    auto x = T64::randn({2, 3, 4}, rng), w = T64::randn({5, 4}, rng), b = T64::randn({5}, rng);
    run("linear", [&, s = ++proj] { return random_projection(linear(x, w, b), s); }, {x, w, b}, opt);
  }
  {
    auto x = T64::randn({2, 3, 4}, rng);
    run("softmax", [&, s = ++proj] { return random_projection(softmax(x, 1), s); }, {x}, opt);
    run("sigmoid", [&, s = ++proj] { return random_projection(sigmoid(x), s); }, {x}, opt);
    run("gelu", [&, s = ++proj] { return random_projection(gelu(x), s); }, {x}, opt);
    run("permute", [&, s = ++proj] { return random_projection(permute(x, {2, 0, 1}), s); }, {x}, opt);
    run("max_along", [&, s = ++proj] { return random_projection(max_along(x, 2), s); }, {x}, opt);
    auto g = T64::uniform({4}, rng, 0.5, 1.5), b = T64::randn({4}, rng);
    run("layer_norm", [&, s = ++proj] { return random_projection(layer_norm(x, g, b), s); }, {x, g, b}, opt);
  }
  {
    auto x = T64::randn({1, 4, 3, 5, 4}, rng), w = T64::randn({4, 2, 2, 3, 2}, rng), b = T64::randn({4}, rng);
    run("conv3d (grouped, strided, padded)",
        [&, s = ++proj] { return random_projection(conv3d(x, w, b, {1, 2, 1}, {1, 1, 0}, 2), s); }, {x, w, b}, opt);
    auto wd = T64::randn({4, 1, 3, 3, 3}, rng);
    run("conv3d (depthwise 3x3x3)",
        [&, s = ++proj] { return random_projection(conv3d(x, wd, b, {1, 1, 1}, {1, 1, 1}, 4), s); }, {x, wd, b}, opt);
  }
  {
    auto x = T64::randn({1, 2, 2, 3, 4}, rng);
    run("trilinear_resize", [&, s = ++proj] { return random_projection(trilinear_resize(x, {3, 5, 6}), s); }, {x},
        opt);
  }
  {
    auto p = GatedConv3dParams<double>::make(3, 5, {2, 2, 2}, {2, 2, 2}, true, rng);
    auto x = T64::randn({1, 3, 4, 6, 6}, rng, 2.0);
    auto wrt = detail::params_of([&](const ParamVisitor<double>& f) { p.visit("g", f); });
    wrt.insert(wrt.begin(), x);
    run("gated_conv3d", [&, s = ++proj] { return random_projection(gated_conv3d(x, p), s); }, wrt, opt);
  }
  {
    auto p = AttentionParams<double>::make(4, 2, 0.0, rng);
    detail::randomise(p.qkv, rng);
    detail::randomise(p.proj, rng);
    auto x = T64::randn({2, 5, 4}, rng);
    run("mhsa", [&, s = ++proj] { return random_projection(mhsa(x, p), s); },
        {x, p.qkv.weight, p.qkv.bias, p.proj.weight, p.proj.bias}, opt);
    for (bool pad : {true, false}) {
      NeighbourhoodParams<double> na{p, 3, pad};
      auto xg = T64::randn({2, 4, 5, 4}, rng);
      run(std::string("na2d (k=3") + (pad ? ", padded)" : ")"),
          [&, s = ++proj] { return random_projection(na2d(xg, na), s); },
          {xg, p.qkv.weight, p.qkv.bias, p.proj.weight, p.proj.bias}, opt);
    }
  }
  {
    auto p = FfnParams<double>::make(4, 2, 0.0, rng);
    detail::randomise(p.lin1, rng);
    detail::randomise(p.lin2, rng);
    auto x = T64::randn({1, 2, 3, 3, 4}, rng);
    auto wrt = detail::params_of([&](const ParamVisitor<double>& f) { p.visit("f", f); });
    wrt.insert(wrt.begin(), x);
    run("mix_ffn", [&, s = ++proj] { return random_projection(mix_ffn(x, p), s); }, wrt, opt);
  }
  for (std::optional<Index> k : {std::optional<Index>{}, std::optional<Index>{3}}) {
    auto p = detail::random_block(4, 2, k, rng);
    auto x = T64::randn({1, 2, 3, 3, 4}, rng);
    auto wrt = detail::params_of([&](const ParamVisitor<double>& f) { p.visit("b", f); });
    wrt.insert(wrt.begin(), x);
    run(k ? "transformer_block (na)" : "transformer_block (mhsa)",
        [&, s = ++proj] { return random_projection(transformer_block(x, p), s); }, wrt, opt);
  }
  {
    auto logits = T64::randn({2, 3, 2, 2}, rng);
    std::vector<std::uint8_t> labels{0, 1, 2, kIgnoreLabel, 2, 2, 0, 1};
    run("cross_entropy_masked", [&] { return cross_entropy_masked(logits, labels).loss; }, {logits}, opt);
  }
  if (include_model) {
    auto m = VistaFormer<double>::build(micro_model_config(), seed + 1);
    auto x = T64::randn({1, 3, 4, 8, 8}, rng);
    std::vector<T64> wrt{x};
    for (auto& [n, t] : m.named_parameters()) wrt.push_back(t);
    GradCheckOptions e2e;
    e2e.tol = 1e-3;
    e2e.eps = 1e-5;
    e2e.max_coords_per_tensor = 6;
    run("micro model end-to-end", [&, s = ++proj] { return random_projection(m.forward(x), s); }, wrt, e2e);
  }
  return rows;
}

// Micro-model logits of MHSA and of NA with a window covering the largest
// stage grid, weights copied across. NA halves the configured heads, so the
// NA config doubles them to keep per-layer head counts equal.
inline double na_covering_window_gap(bool pad_to_kernel = true, std::uint64_t seed = 21) {
  auto mcfg = micro_model_config();
  auto ncfg = mcfg;
  ncfg.attention = AttentionKind::Neighbourhood;
  ncfg.na_kernel = 5;  // stage-1 grid of an 8x8 input is 4x4
  ncfg.na_pad_to_kernel = pad_to_kernel;
  for (auto& s : ncfg.stages) s.num_heads *= 2;
  auto a = VistaFormer<double>::build(mcfg, seed);
  auto b = VistaFormer<double>::build(ncfg, seed + 1);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) throw ContractError("na_covering_window_gap: parameter layouts differ");
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto d = pb[i].second.mutable_data();
    std::copy(pa[i].second.data().begin(), pa[i].second.data().end(), d.begin());
  }
  Rng rng(seed + 2);
  const auto x = Tensor<double>::randn({2, 3, 4, 8, 8}, rng);
  return max_abs_difference(a.forward(x), b.forward(x));
}

// NA with k=1 against its closed form: each token attends only to itself,
// so the output is proj(v(x)).
inline double na_self_only_gap(std::uint64_t seed = 31) {
  Rng rng(seed);
  const Index C = 8;
  auto p = AttentionParams<double>::make(C, 2, 0.0, rng);
  detail::randomise(p.qkv, rng);
  detail::randomise(p.proj, rng);
  NeighbourhoodParams<double> na{p, 1, true};
  const auto x = Tensor<double>::randn({2, 5, 6, C}, rng);
  const auto y = na2d(x, na);
  const auto wv = narrow(p.qkv.weight, 0, 2 * C, C), bv = narrow(p.qkv.bias, 0, 2 * C, C);
  const auto ref = linear(linear(x, wv, bv), p.proj.weight, p.proj.bias);
  return max_abs_difference(y, ref);
}

// Norm + MHSA sub-layer applied to a (1, 1, H, W, C) volume and to the same
// volume with its H*W tokens shuffled; returns the worst mismatch after
// undoing the shuffle.
inline double attention_permutation_gap(std::uint64_t seed = 41) {
  Rng rng(seed);
  const Index H = 4, W = 5, C = 8, N = H * W;
  auto p = detail::random_block(C, 2, std::nullopt, rng);
  const auto x = Tensor<double>::randn({1, 1, H, W, C}, rng);
  std::vector<Index> perm(static_cast<std::size_t>(N));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> xp(static_cast<std::size_t>(N * C));
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c) xp[i * C + c] = x.data()[perm[i] * C + c];
  const auto y = attention_branch(x, p, {});
  const auto yp = attention_branch(Tensor<double>::from({1, 1, H, W, C}, xp), p, {});
  double gap = 0;
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c) gap = std::max(gap, std::abs(yp.data()[i * C + c] - y.data()[perm[i] * C + c]));
  return gap;
}

}  // namespace vf
