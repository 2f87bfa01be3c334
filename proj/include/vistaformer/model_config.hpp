#pragma once
// Architecture description. Parameter and operation counts are pure functions
// of a ModelConfig (plus, for operations, the input shape).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "conv.hpp"
#include "errors.hpp"

namespace vf {

enum class AttentionKind { MHSA, Neighbourhood };

// Temporal stride per encoder stage.
enum class TemporalSchedule {
  Default,                 // 1, 2, 2
  FirstStageHalvesT,       // 2, 2, 2
  NoTemporalDownsampling,  // 1, 1, 1
};

enum class DecoderReduce { Conv1d, MaxPool };

struct StageConfig {
  Index embed_dim = 32;
  Dims3 patch{1, 2, 2};
  Dims3 stride{1, 2, 2};
  Index num_blocks = 2;
  Index num_heads = 2;
  Index mlp_mult = 4;
};

struct ModelConfig {
  Index in_channels = 10;
  Index num_classes = 20;
  Index max_seq_len = 60;
  std::vector<StageConfig> stages = default_stages();
  AttentionKind attention = AttentionKind::MHSA;
  Index na_kernel = 13;
  bool na_pad_to_kernel = true;
  Index decoder_channels = 64;
  double dropout_rate = 0.175;
  double drop_path_rate = 0.175;
  bool gated_conv_enabled = true;
  TemporalSchedule temporal_schedule = TemporalSchedule::Default;
  DecoderReduce decoder_reduce = DecoderReduce::Conv1d;

  // Encoder widths 32/64/128, patches (1,2,2)/(2,2,2)/(2,2,2), two blocks per
  // stage, 2/4/8 heads, MLP expansion 4.
  static std::vector<StageConfig> default_stages() {
    return {{32, {1, 2, 2}, {1, 2, 2}, 2, 2, 4}, {64, {2, 2, 2}, {2, 2, 2}, 2, 4, 4}, {128, {2, 2, 2}, {2, 2, 2}, 2, 8, 4}};
  }

  // Stage list after applying the temporal schedule (temporal patch == stride)
  // and the neighbourhood variant's halved head counts.
  std::vector<StageConfig> effective_stages() const {
    std::vector<StageConfig> out = stages;
    for (std::size_t i = 0; i < out.size(); ++i) {
      Index kt = 1;
      switch (temporal_schedule) {
        case TemporalSchedule::Default: kt = i == 0 ? 1 : 2; break;
        case TemporalSchedule::FirstStageHalvesT: kt = 2; break;
        case TemporalSchedule::NoTemporalDownsampling: kt = 1; break;
      }
      out[i].patch[0] = out[i].stride[0] = kt;
      if (attention == AttentionKind::Neighbourhood) out[i].num_heads = std::max<Index>(1, out[i].num_heads / 2);
    }
    return out;
  }

  // Temporal length entering the decoder from each stage, for an input padded
  // to max_seq_len. Strided convolutions floor odd lengths.
  std::vector<Index> stage_temporal_lengths() const {
    std::vector<Index> out;
    Index t = max_seq_len;
    for (const auto& s : effective_stages()) {
      t = conv_out_extent(t, s.patch[0], s.stride[0], 0);
      out.push_back(t);
    }
    return out;
  }

  // Product of spatial strides; input H and W are padded up to a multiple of it.
  Index spatial_reduction() const {
    Index r = 1;
    for (const auto& s : effective_stages()) r *= s.stride[1];
    return r;
  }

  void validate() const {
    if (in_channels <= 0) throw ConfigError("in_channels must be positive");
    if (num_classes <= 0) throw ConfigError("num_classes must be positive, got " + std::to_string(num_classes));
    if (max_seq_len <= 0) throw ConfigError("max_seq_len must be positive");
    if (stages.empty()) throw ConfigError("at least one encoder stage is required");
    if (decoder_channels <= 0) throw ConfigError("decoder_channels must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0,1)");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ConfigError("drop_path_rate must lie in [0,1)");
    if (attention == AttentionKind::Neighbourhood && (na_kernel < 1 || na_kernel % 2 == 0))
      throw ConfigError("na_kernel must be odd and >= 1, got " + std::to_string(na_kernel));
    const auto eff = effective_stages();
    Index t = max_seq_len;
    for (std::size_t i = 0; i < eff.size(); ++i) {
      const auto& s = eff[i];
      const std::string where = "stage " + std::to_string(i + 1) + ": ";
      if (s.embed_dim <= 0 || s.num_blocks < 0 || s.mlp_mult <= 0)
        throw ConfigError(where + "embed_dim and mlp_mult must be positive, num_blocks non-negative");
      if (s.num_heads <= 0 || s.embed_dim % s.num_heads != 0)
        throw ConfigError(where + "embed_dim " + std::to_string(s.embed_dim) + " not divisible by " +
                          std::to_string(s.num_heads) + " heads");
      for (int a = 0; a < 3; ++a)
        if (s.patch[a] <= 0 || s.stride[a] <= 0) throw ConfigError(where + "patch and stride must be positive");
      if (s.patch[1] != s.stride[1] || s.patch[2] != s.stride[2])
        throw ConfigError(where + "spatial patch must equal spatial stride (non-overlapping embedding)");
      if (s.stride[1] != s.stride[2]) throw ConfigError(where + "spatial strides must be equal in H and W");
      if (t < s.patch[0])
        throw ConfigError(where + "temporal length " + std::to_string(t) + " shorter than temporal patch " +
                          std::to_string(s.patch[0]));
      t = conv_out_extent(t, s.patch[0], s.stride[0], 0);
    }
  }
};

inline const char* to_string(AttentionKind k) { return k == AttentionKind::MHSA ? "mhsa" : "na"; }
inline const char* to_string(TemporalSchedule s) {
  switch (s) {
    case TemporalSchedule::Default: return "default";
    case TemporalSchedule::FirstStageHalvesT: return "first_stage_halves_t";
    case TemporalSchedule::NoTemporalDownsampling: return "none";
  }
  return "?";
}
inline const char* to_string(DecoderReduce r) { return r == DecoderReduce::Conv1d ? "conv1d" : "maxpool"; }

inline AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "mhsa") return AttentionKind::MHSA;
  if (s == "na") return AttentionKind::Neighbourhood;
  throw ConfigError("attention must be mhsa or na, got '" + s + "'");
}
inline TemporalSchedule parse_temporal_schedule(const std::string& s) {
  if (s == "default") return TemporalSchedule::Default;
  if (s == "first_stage_halves_t") return TemporalSchedule::FirstStageHalvesT;
  if (s == "none") return TemporalSchedule::NoTemporalDownsampling;
  throw ConfigError("temporal_schedule must be default, first_stage_halves_t or none, got '" + s + "'");
}
inline DecoderReduce parse_decoder_reduce(const std::string& s) {
  if (s == "conv1d") return DecoderReduce::Conv1d;
  if (s == "maxpool") return DecoderReduce::MaxPool;
  throw ConfigError("decoder_reduce must be conv1d or maxpool, got '" + s + "'");
}

}  // namespace vf
