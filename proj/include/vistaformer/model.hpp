#pragma once
// Three-stage encoder + lightweight decoder segmentation network.
//
// Encoder stage i: gated patch-embedding conv -> channels-last tokens ->
// transformer blocks -> back to (B, C_i, T_i, H_i, W_i).
// Decoder: every stage output is resized spatially to the input (H, W) with
// its temporal length kept, a temporal convolution spanning that whole length
// maps it to decoder_channels and collapses T (or max-pooling over T), the
// three maps are concatenated and a 1x1 convolution emits class logits.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "model_config.hpp"

namespace vf {

template <class S>
struct EncoderOutputs {
  std::vector<Tensor<S>> stages;  // (B, C_i, T_i, H_i, W_i)
};

template <class S>
struct StageParams {
  GatedConv3dParams<S> embed;
  std::vector<BlockParams<S>> blocks;
};

struct ParameterCount {
  std::vector<std::pair<std::string, std::uint64_t>> groups;  // in build order
  std::uint64_t total = 0;
};

template <class S>
class VistaFormer {
 public:
  static VistaFormer build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VistaFormer m;
    m.cfg_ = cfg;
    Rng rng(seed);
    Index cin = cfg.in_channels;
    const auto eff = cfg.effective_stages();
    for (const auto& s : eff) {
      StageParams<S> sp;
      sp.embed = GatedConv3dParams<S>::make(cin, s.embed_dim, s.patch, s.stride, cfg.gated_conv_enabled, rng);
      for (Index b = 0; b < s.num_blocks; ++b) {
        std::optional<Index> k;
        if (cfg.attention == AttentionKind::Neighbourhood) k = cfg.na_kernel;
        sp.blocks.push_back(make_block<S>(s.embed_dim, s.num_heads, s.mlp_mult, k, cfg.na_pad_to_kernel,
                                          cfg.dropout_rate, cfg.drop_path_rate, rng));
      }
      m.stages_.push_back(std::move(sp));
      cin = s.embed_dim;
    }
    const auto tlens = cfg.stage_temporal_lengths();
    Index head_in = 0;
    for (std::size_t i = 0; i < eff.size(); ++i) {
      if (cfg.decoder_reduce == DecoderReduce::Conv1d) {
        m.temporal_.push_back(ConvParams<S>::make(eff[i].embed_dim, cfg.decoder_channels, {tlens[i], 1, 1}, rng));
        head_in += cfg.decoder_channels;
      } else {
        head_in += eff[i].embed_dim;
      }
    }
    m.head_ = ConvParams<S>::make(head_in, cfg.num_classes, {1, 1, 1}, rng);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<StageParams<S>>& stages() { return stages_; }
  const std::vector<StageParams<S>>& stages() const { return stages_; }
  std::vector<ConvParams<S>>& temporal_convs() { return temporal_; }
  ConvParams<S>& head() { return head_; }

  // Enumerates every trainable tensor with a stable dotted name.
  void visit_parameters(const ParamVisitor<S>& f) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const std::string p = "encoder.stage" + std::to_string(i + 1);
      stages_[i].embed.visit(p + ".embed", f);
      for (std::size_t b = 0; b < stages_[i].blocks.size(); ++b)
        stages_[i].blocks[b].visit(p + ".block" + std::to_string(b), f);
    }
    for (std::size_t i = 0; i < temporal_.size(); ++i)
      temporal_[i].visit("decoder.temporal" + std::to_string(i + 1), f);
    head_.visit("head", f);
  }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    visit_parameters([&](const std::string& n, Tensor<S>& t, bool) { out.emplace_back(n, t); });
    return out;
  }

  // Pads (B, C, T, H, W) input: T up to max_seq_len, H and W up to a multiple
  // of the spatial reduction. Padding is zeros at the trailing edge.
  Tensor<S> pad_input(const Tensor<S>& x) const {
    if (x.ndim() != 5) throw ShapeError("model input must be (B,C,T,H,W), got " + shape_str(x.shape()));
    if (x.dim(1) != cfg_.in_channels)
      throw ShapeError("model input has " + std::to_string(x.dim(1)) + " channels, config expects " +
                       std::to_string(cfg_.in_channels));
    if (x.dim(2) > cfg_.max_seq_len)
      throw ConfigError("input sequence length " + std::to_string(x.dim(2)) + " exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    const Index r = cfg_.spatial_reduction();
    Tensor<S> out = pad_end(x, 2, cfg_.max_seq_len - x.dim(2));
    out = pad_end(out, 3, (r - x.dim(3) % r) % r);
    out = pad_end(out, 4, (r - x.dim(4) % r) % r);
    return out;
  }

  // Encoder on an already padded input.
  EncoderOutputs<S> encoder_forward(const Tensor<S>& x, const ForwardContext<S>& ctx = {}) const {
    const Index r = cfg_.spatial_reduction();
    if (x.ndim() != 5 || x.dim(3) % r != 0 || x.dim(4) % r != 0)
      throw ConfigError("encoder input " + shape_str(x.shape()) + " must have H and W divisible by " +
                        std::to_string(r));
    EncoderOutputs<S> out;
    Tensor<S> h = x;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      LayerScope scope("encoder.stage" + std::to_string(i + 1));
      {
        LayerScope embed("embed");
        h = gated_conv3d(h, stages_[i].embed);
      }
      Tensor<S> tokens = permute(h, {0, 2, 3, 4, 1});
      for (std::size_t b = 0; b < stages_[i].blocks.size(); ++b) {
        LayerScope block("block" + std::to_string(b));
        tokens = transformer_block(tokens, stages_[i].blocks[b], ctx);
      }
      h = permute(tokens, {0, 4, 1, 2, 3});
      out.stages.push_back(h);
    }
    return out;
  }

  // Logits (B, num_classes, H, W) at the padded input resolution (H, W).
  Tensor<S> decoder_forward(const EncoderOutputs<S>& e, Index H, Index W) const {
    if (e.stages.size() != stages_.size()) throw ShapeError("decoder: expected one feature map per encoder stage");
    LayerScope scope("decoder");
    std::vector<Tensor<S>> reduced;
    for (std::size_t i = 0; i < e.stages.size(); ++i) {
      const Tensor<S>& f = e.stages[i];
      LayerScope stage("stage" + std::to_string(i + 1));
      const Tensor<S> up = trilinear_resize(f, {f.dim(2), H, W});
      if (cfg_.decoder_reduce == DecoderReduce::Conv1d) {
        const auto& tc = temporal_[i];
        if (tc.weight.dim(2) != f.dim(2))
          throw ShapeError("decoder: stage " + std::to_string(i + 1) + " temporal length " + std::to_string(f.dim(2)) +
                           " does not match kernel " + std::to_string(tc.weight.dim(2)));
        reduced.push_back(conv3d(up, tc.weight, tc.bias));
      } else {
        reduced.push_back(max_along(up, 2));
      }
    }
    LayerScope head("head");
    Tensor<S> logits = conv3d(concat(reduced, 1), head_.weight, head_.bias);
    return reshape(logits, {logits.dim(0), logits.dim(1), H, W});
  }

  // Full forward: pad, encode, decode, crop back to the input resolution.
  Tensor<S> forward(const Tensor<S>& x, const ForwardContext<S>& ctx = {}) const {
    const Tensor<S> padded = pad_input(x);
    const auto enc = encoder_forward(padded, ctx);
    Tensor<S> logits = decoder_forward(enc, padded.dim(3), padded.dim(4));
    if (logits.dim(2) != x.dim(3)) logits = narrow(logits, 2, 0, x.dim(3));
    if (logits.dim(3) != x.dim(4)) logits = narrow(logits, 3, 0, x.dim(4));
    return logits;
  }

  ParameterCount count_parameters() {
    ParameterCount pc;
    std::map<std::string, std::size_t> pos;
    visit_parameters([&](const std::string& name, Tensor<S>& t, bool) {
      std::string group = name.substr(0, name.find('.'));
      if (group == "encoder" || group == "decoder") {
        const auto second = name.find('.', group.size() + 1);
        group = name.substr(0, second);
      }
      auto it = pos.find(group);
      if (it == pos.end()) {
        it = pos.emplace(group, pc.groups.size()).first;
        pc.groups.emplace_back(group, 0);
      }
      pc.groups[it->second].second += static_cast<std::uint64_t>(t.numel());
      pc.total += static_cast<std::uint64_t>(t.numel());
    });
    return pc;
  }

  template <class T2>
  VistaFormer<T2> cast() {
    VistaFormer<T2> m = VistaFormer<T2>::build(cfg_, 0);
    auto src = named_parameters();
    auto dst = m.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto d = dst[i].second.mutable_data();
      auto s = src[i].second.data();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<T2>(s[j]);
    }
    return m;
  }

 private:
  ModelConfig cfg_;
  std::vector<StageParams<S>> stages_;
  std::vector<ConvParams<S>> temporal_;
  ConvParams<S> head_;
};

template <class S>
struct McDropoutResult {
  Tensor<S> mean_probs;   // (B, K, H, W)
  Tensor<S> uncertainty;  // (B, H, W) predictive entropy of mean_probs, nats
};

// Softmax over the class axis of (B, K, H, W) logits.
template <class S>
Tensor<S> class_probabilities(const Tensor<S>& logits) {
  return softmax(logits, 1);
}

// Runs n_passes stochastic forwards with the training-time dropout and
// drop-path settings active and averages the class probabilities.
template <class S>
McDropoutResult<S> mc_dropout_predict(const VistaFormer<S>& model, const Tensor<S>& x, int n_passes,
                                      std::uint64_t seed) {
  if (n_passes < 1) throw ContractError("mc_dropout_predict needs n_passes >= 1, got " + std::to_string(n_passes));
  NoGradGuard no_grad;
  Rng rng(seed);
  ForwardContext<S> ctx{true, &rng};
  Buffer<S> acc;
  Shape shape;
  for (int i = 0; i < n_passes; ++i) {
    const Tensor<S> p = class_probabilities(model.forward(x, ctx));
    if (acc.empty()) {
      acc.assign(p.data().begin(), p.data().end());
      shape = p.shape();
    } else {
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += p.data()[j];
    }
  }
  for (auto& v : acc) v /= static_cast<S>(n_passes);
  const Index B = shape[0], K = shape[1], HW = shape[2] * shape[3];
  Buffer<S> ent(static_cast<std::size_t>(B * HW), S(0));
  for (Index b = 0; b < B; ++b)
    for (Index k = 0; k < K; ++k)
      for (Index p = 0; p < HW; ++p) {
        const S v = acc[(b * K + k) * HW + p];
        if (v > S(0)) ent[b * HW + p] -= v * std::log(v);
      }
  return {Tensor<S>::from(shape, std::move(acc)), Tensor<S>::from({B, shape[2], shape[3]}, std::move(ent))};
}

}  // namespace vf
