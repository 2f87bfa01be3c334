#pragma once
// Flat `key = value` run configuration: model architecture, training recipe,
// synthetic-data settings and paths. Unknown keys are rejected, and
// serialize() emits every key so parse(serialize(c)) == c.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model_config.hpp"

namespace vf {

struct TrainSettings {
  Index batch_size = 32;
  Index epochs = 30;
  std::uint64_t seed = 0;
  double lr_start = 4e-4;
  double lr_max = 1e-2;
  double lr_final = 1e-3;
  double warm_fraction = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool augment = true;
  bool include_background = true;
  Index background_class = 0;
  Index mc_dropout_passes = 10;
};

struct DataSettings {
  std::string data_dir = "data";
  Index image_height = 32;
  Index image_width = 32;
  Index n_train = 200;
  Index n_val = 50;
  Index n_test = 0;
  double cloud_prob = 0.15;
  double background_fraction = 0.35;
  bool class_skew = true;
};

struct RunConfig {
  ModelConfig model;
  TrainSettings train;
  DataSettings data;

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::string& path);
  std::string serialize() const;
  void save(const std::string& path) const;
  // Applies a single `key=value` override, with the same validation as a file line.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  bool operator==(const RunConfig& o) const { return serialize() == o.serialize(); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Per-stage integer list, e.g. "32,64,128".
template <class F>
ConfigField stage_list(const std::string& key, F member) {
  return {key,
          [member](const RunConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.model.stages.size(); ++i) {
              if (i) s += ',';
              s += std::to_string(member(c.model.stages[i]));
            }
            return s;
          },
          [key, member](RunConfig& c, const std::string& v) {
            const auto parts = split(v, ',');
            if (parts.empty()) throw ConfigError(key + ": empty list");
            // embed_dims sets the stage count; the other lists must agree with it
            if (key == "embed_dims") {
              c.model.stages.resize(parts.size());
            } else if (parts.size() != c.model.stages.size()) {
              throw ConfigError(key + ": " + std::to_string(parts.size()) + " entries, expected " +
                                std::to_string(c.model.stages.size()) + " (one per stage)");
            }
            for (std::size_t i = 0; i < parts.size(); ++i) member(c.model.stages[i]) = parse_int(key, parts[i]);
          }};
}

#define VF_INT_FIELD(key, expr)                                                                                  \
  ConfigField {                                                                                                \
    key, [](const RunConfig& c) { return std::to_string(c.expr); },                                            \
        [](RunConfig& c, const std::string& v) { c.expr = static_cast<decltype(c.expr)>(parse_int(key, v)); } \
  }
#define VF_DOUBLE_FIELD(key, expr)                                                \
  ConfigField {                                                                   \
    key, [](const RunConfig& c) { return fmt_double(c.expr); },                   \
        [](RunConfig& c, const std::string& v) { c.expr = parse_double(key, v); } \
  }
#define VF_BOOL_FIELD(key, expr)                                                \
  ConfigField {                                                                 \
    key, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.expr = parse_bool(key, v); } \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      VF_INT_FIELD("in_channels", model.in_channels),
      VF_INT_FIELD("num_classes", model.num_classes),
      VF_INT_FIELD("max_seq_len", model.max_seq_len),
      stage_list("embed_dims", [](auto& s) -> auto& { return s.embed_dim; }),
      stage_list("num_blocks", [](auto& s) -> auto& { return s.num_blocks; }),
      stage_list("num_heads", [](auto& s) -> auto& { return s.num_heads; }),
      stage_list("mlp_mult", [](auto& s) -> auto& { return s.mlp_mult; }),
      stage_list("spatial_patch", [](auto& s) -> auto& { return s.patch[1]; }),
      {"attention", [](const RunConfig& c) { return std::string(to_string(c.model.attention)); },
       [](RunConfig& c, const std::string& v) { c.model.attention = parse_attention_kind(v); }},
      VF_INT_FIELD("na_kernel", model.na_kernel),
      VF_BOOL_FIELD("na_pad_to_kernel", model.na_pad_to_kernel),
      VF_INT_FIELD("decoder_channels", model.decoder_channels),
      VF_DOUBLE_FIELD("dropout", model.dropout_rate),
      VF_DOUBLE_FIELD("drop_path", model.drop_path_rate),
      VF_BOOL_FIELD("gated_conv", model.gated_conv_enabled),
      {"temporal_schedule", [](const RunConfig& c) { return std::string(to_string(c.model.temporal_schedule)); },
       [](RunConfig& c, const std::string& v) { c.model.temporal_schedule = parse_temporal_schedule(v); }},
      {"decoder_reduce", [](const RunConfig& c) { return std::string(to_string(c.model.decoder_reduce)); },
       [](RunConfig& c, const std::string& v) { c.model.decoder_reduce = parse_decoder_reduce(v); }},

      VF_INT_FIELD("batch_size", train.batch_size),
      VF_INT_FIELD("epochs", train.epochs),
      {"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); }},
      VF_DOUBLE_FIELD("lr_start", train.lr_start),
      VF_DOUBLE_FIELD("lr_max", train.lr_max),
      VF_DOUBLE_FIELD("lr_final", train.lr_final),
      VF_DOUBLE_FIELD("warm_fraction", train.warm_fraction),
      VF_DOUBLE_FIELD("weight_decay", train.weight_decay),
      VF_DOUBLE_FIELD("beta1", train.beta1),
      VF_DOUBLE_FIELD("beta2", train.beta2),
      VF_DOUBLE_FIELD("adam_eps", train.adam_eps),
      VF_BOOL_FIELD("augment", train.augment),
      VF_BOOL_FIELD("include_background", train.include_background),
      VF_INT_FIELD("background_class", train.background_class),
      VF_INT_FIELD("mc_dropout_passes", train.mc_dropout_passes),

      {"data_dir", [](const RunConfig& c) { return c.data.data_dir; },
       [](RunConfig& c, const std::string& v) { c.data.data_dir = v; }},
      VF_INT_FIELD("image_height", data.image_height),
      VF_INT_FIELD("image_width", data.image_width),
      VF_INT_FIELD("n_train", data.n_train),
      VF_INT_FIELD("n_val", data.n_val),
      VF_INT_FIELD("n_test", data.n_test),
      VF_DOUBLE_FIELD("cloud_prob", data.cloud_prob),
      VF_DOUBLE_FIELD("background_fraction", data.background_fraction),
      VF_BOOL_FIELD("class_skew", data.class_skew),
  };
  return fields;
}

#undef VF_INT_FIELD
#undef VF_DOUBLE_FIELD
#undef VF_BOOL_FIELD

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(*this, value);
      if (key == "spatial_patch")
        for (auto& s : model.stages) s.stride[1] = s.stride[2] = s.patch[2] = s.patch[1];
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    for (const auto& k : seen)
      if (k == key) throw ConfigError(where + "duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path);
}

inline std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

inline void RunConfig::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write config file '" + path + "'");
  f << serialize();
  if (!f) throw IoError("failed writing config file '" + path + "'");
}

inline void RunConfig::validate() const {
  model.validate();
  if (train.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (train.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (train.lr_start <= 0 || train.lr_max <= 0 || train.lr_final <= 0) throw ConfigError("learning rates must be positive");
  if (train.warm_fraction < 0 || train.warm_fraction > 1) throw ConfigError("warm_fraction must lie in [0,1]");
  if (train.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (train.beta1 < 0 || train.beta1 >= 1 || train.beta2 < 0 || train.beta2 >= 1)
    throw ConfigError("beta1 and beta2 must lie in [0,1)");
  if (train.mc_dropout_passes < 1) throw ConfigError("mc_dropout_passes must be >= 1");
  if (train.background_class < 0 || train.background_class >= model.num_classes)
    throw ConfigError("background_class must be a valid class index");
  if (data.image_height < 8 || data.image_width < 8) throw ConfigError("image_height and image_width must be >= 8");
  if (data.n_train < 0 || data.n_val < 0 || data.n_test < 0) throw ConfigError("split sizes must be non-negative");
  if (data.cloud_prob < 0 || data.cloud_prob > 1) throw ConfigError("cloud_prob must lie in [0,1]");
  if (data.background_fraction < 0 || data.background_fraction >= 1)
    throw ConfigError("background_fraction must lie in [0,1)");
}

}  // namespace vf
