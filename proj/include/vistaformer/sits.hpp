#pragma once
// Synthetic satellite image time series: generator, chip files, manifest,
// augmentation and per-channel normalisation.
//
// Chip file layout (little-endian):
//   magic "SITS" | u16 version (1) | u8 dtype (0 = f32) | u8 flags (bit 0: cloud mask present)
//   u32 C, T, H, W | u16 id length, id bytes
//   payload: f32 input[C*T*H*W] | u8 labels[H*W] | u8 mask[T*H*W] (if flagged)
//   u32 CRC32(payload)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "binio.hpp"
#include "tensor.hpp"

namespace vf {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct SitsChip {
  Index C = 0, T = 0, H = 0, W = 0;
  std::vector<float> input;                        // (C, T, H, W)
  std::vector<std::uint8_t> labels;                // (H, W)
  std::optional<std::vector<std::uint8_t>> cloud_mask;  // (T, H, W), 0/1
  std::string sample_id;

  float& at(Index c, Index t, Index h, Index w) { return input[((c * T + t) * H + h) * W + w]; }
  float at(Index c, Index t, Index h, Index w) const { return input[((c * T + t) * H + h) * W + w]; }
  bool operator==(const SitsChip&) const = default;
};

// ---------------------------------------------------------------------------
// Generator

struct GeneratorSpec {
  Index n_samples = 250;
  Index num_classes = 5;
  Index channels = 4;
  Index T = 12;
  Index H = 32;
  Index W = 32;
  double cloud_prob = 0.15;
  std::uint64_t seed = 0;
  double background_fraction = 0.35;  // expected share of regions labelled class 0
  bool class_skew = true;             // geometric class frequencies for the foreground classes
  double noise_std = 0.02;

  void validate() const {
    if (num_classes < 2) throw ConfigError("generator: num_classes must be >= 2, got " + std::to_string(num_classes));
    if (num_classes > 255) throw ConfigError("generator: num_classes must be < 255");
    if (n_samples < 1) throw ConfigError("generator: n_samples must be >= 1");
    if (channels < 1) throw ConfigError("generator: channels must be >= 1");
    if (T < 1) throw ConfigError("generator: T must be >= 1");
    if (H < 8 || W < 8) throw ConfigError("generator: H and W must be >= 8");
    if (cloud_prob < 0 || cloud_prob > 1) throw ConfigError("generator: cloud_prob must lie in [0,1]");
    if (background_fraction < 0 || background_fraction >= 1)
      throw ConfigError("generator: background_fraction must lie in [0,1)");
  }
};

namespace detail {

// SplitMix64 finaliser, used to derive independent per-sample seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Cubic through four control values at tau = 0, 1/3, 2/3, 1.
struct CubicProfile {
  double v[4];
  double operator()(double tau) const {
    const double x[4] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    double out = 0;
    for (int i = 0; i < 4; ++i) {
      double l = 1;
      for (int j = 0; j < 4; ++j)
        if (j != i) l *= (tau - x[j]) / (x[i] - x[j]);
      out += v[i] * l;
    }
    return out;
  }
};

}  // namespace detail

// Per-class, per-channel temporal profiles shared by every chip of a dataset.
inline std::vector<detail::CubicProfile> class_profiles(const GeneratorSpec& spec) {
  Rng rng(detail::mix_seed(spec.seed, 0xC1A55));
  std::uniform_real_distribution<double> u(0.1, 0.8);
  std::vector<detail::CubicProfile> out(static_cast<std::size_t>(spec.num_classes * spec.channels));
  for (auto& p : out)
    for (double& v : p.v) v = u(rng);
  return out;
}

// Class sampling weights for foreground regions (classes 1..K-1).
inline std::vector<double> foreground_weights(const GeneratorSpec& spec) {
  std::vector<double> w;
  for (Index k = 1; k < spec.num_classes; ++k) w.push_back(spec.class_skew ? std::pow(0.45, static_cast<double>(k - 1)) : 1.0);
  return w;
}

inline SitsChip generate_chip(const GeneratorSpec& spec, Index index,
                              const std::vector<detail::CubicProfile>& profiles) {
  Rng rng(detail::mix_seed(spec.seed, static_cast<std::uint64_t>(index) + 1));
  const Index H = spec.H, W = spec.W, T = spec.T, C = spec.channels;
  SitsChip chip;
  chip.C = C;
  chip.T = T;
  chip.H = H;
  chip.W = W;
  char id[32];
  std::snprintf(id, sizeof id, "chip_%05lld", static_cast<long long>(index));
  chip.sample_id = id;

  // Seeded-growth tessellation: random seeds, then repeatedly claim a random
  // unassigned neighbour of a random frontier pixel. Regions stay contiguous.
  const Index n_regions = std::max<Index>(2, (H * W) / 128);
  std::vector<int> region(static_cast<std::size_t>(H * W), -1);
  std::vector<Index> frontier;
  std::uniform_int_distribution<Index> pix(0, H * W - 1);
  for (Index r = 0; r < n_regions; ++r) {
    Index p;
    do p = pix(rng);
    while (region[p] != -1);
    region[p] = static_cast<int>(r);
    frontier.push_back(p);
  }
  const int dh[4] = {-1, 1, 0, 0}, dw[4] = {0, 0, -1, 1};
  while (!frontier.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, frontier.size() - 1);
    const std::size_t fi = pick(rng);
    const Index p = frontier[fi];
    const Index ph = p / W, pw = p % W;
    Index free_nb[4];
    int nfree = 0;
    for (int d = 0; d < 4; ++d) {
      const Index h = ph + dh[d], w = pw + dw[d];
      if (h < 0 || h >= H || w < 0 || w >= W || region[h * W + w] != -1) continue;
      free_nb[nfree++] = h * W + w;
    }
    if (nfree == 0) {
      frontier[fi] = frontier.back();
      frontier.pop_back();
      continue;
    }
    const Index q = free_nb[std::uniform_int_distribution<int>(0, nfree - 1)(rng)];
    region[q] = region[p];
    frontier.push_back(q);
  }

  // Region classes: background with probability background_fraction, else a
  // (possibly skewed) draw over the foreground classes.
  std::bernoulli_distribution is_bg(spec.background_fraction);
  const auto fw = foreground_weights(spec);
  std::discrete_distribution<int> fg(fw.begin(), fw.end());
  std::vector<std::uint8_t> region_class(static_cast<std::size_t>(n_regions));
  std::normal_distribution<double> jitter(0.0, 0.03);
  std::vector<double> region_phase(static_cast<std::size_t>(n_regions));
  for (Index r = 0; r < n_regions; ++r) {
    region_class[r] = is_bg(rng) ? 0 : static_cast<std::uint8_t>(1 + fg(rng));
    region_phase[r] = jitter(rng);
  }
  chip.labels.resize(static_cast<std::size_t>(H * W));
  for (Index p = 0; p < H * W; ++p) chip.labels[p] = region_class[region[p]];

  // Reflectance: class profile at jittered time plus pixel noise.
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  chip.input.resize(static_cast<std::size_t>(C * T * H * W));
  for (Index c = 0; c < C; ++c)
    for (Index t = 0; t < T; ++t)
      for (Index p = 0; p < H * W; ++p) {
        const double tau = (T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1)) + region_phase[region[p]];
        const double v = profiles[chip.labels[p] * C + c](tau) + noise(rng);
        chip.input[(c * T + t) * H * W + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }

  // Clouds: per timestep with probability cloud_prob, a bright, low-contrast
  // rectangle overwrites every channel.
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(T * H * W), 0);
  std::bernoulli_distribution cloudy(spec.cloud_prob);
  std::normal_distribution<double> haze(0.0, 0.01);
  for (Index t = 0; t < T; ++t) {
    if (!cloudy(rng)) continue;
    const Index ch = std::uniform_int_distribution<Index>(H / 4, H / 2)(rng);
    const Index cw = std::uniform_int_distribution<Index>(W / 4, W / 2)(rng);
    const Index h0 = std::uniform_int_distribution<Index>(0, H - ch)(rng);
    const Index w0 = std::uniform_int_distribution<Index>(0, W - cw)(rng);
    for (Index h = h0; h < h0 + ch; ++h)
      for (Index w = w0; w < w0 + cw; ++w) {
        mask[(t * H + h) * W + w] = 1;
        for (Index c = 0; c < C; ++c)
          chip.input[((c * T + t) * H + h) * W + w] = static_cast<float>(std::clamp(0.9 + haze(rng), 0.0, 1.0));
      }
  }
  chip.cloud_mask = std::move(mask);
  return chip;
}

inline std::vector<SitsChip> generate_chips(const GeneratorSpec& spec) {
  spec.validate();
  const auto profiles = class_profiles(spec);
  std::vector<SitsChip> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (Index i = 0; i < spec.n_samples; ++i) out.push_back(generate_chip(spec, i, profiles));
  return out;
}

// ---------------------------------------------------------------------------
// Chip files

inline constexpr char kChipMagic[4] = {'S', 'I', 'T', 'S'};
inline constexpr std::uint16_t kChipVersion = 1;

inline std::string encode_chip(const SitsChip& c) {
  if (c.input.size() != static_cast<std::size_t>(c.C * c.T * c.H * c.W) ||
      c.labels.size() != static_cast<std::size_t>(c.H * c.W) ||
      (c.cloud_mask && c.cloud_mask->size() != static_cast<std::size_t>(c.T * c.H * c.W)))
    throw ContractError("encode_chip: buffer sizes do not match dims of chip '" + c.sample_id + "'");
  binio::Writer w;
  w.bytes(kChipMagic, 4);
  w.put<std::uint16_t>(kChipVersion);
  w.put<std::uint8_t>(0);
  w.put<std::uint8_t>(c.cloud_mask ? 1 : 0);
  for (Index d : {c.C, c.T, c.H, c.W}) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.str16(c.sample_id);
  const std::size_t start = w.size();
  w.bytes(c.input.data(), c.input.size() * sizeof(float));
  w.bytes(c.labels.data(), c.labels.size());
  if (c.cloud_mask) w.bytes(c.cloud_mask->data(), c.cloud_mask->size());
  w.put<std::uint32_t>(binio::crc32(w.buffer().data() + start, w.size() - start));
  return w.buffer();
}

inline SitsChip decode_chip(const std::string& buf, const std::string& what = "chip") {
  binio::Reader r(buf, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kChipMagic, 4) != 0) throw BadMagicError(what + ": not a SITS chip (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kChipVersion) throw FormatError(what + ": unsupported chip version " + std::to_string(version));
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != 0) throw FormatError(what + ": unsupported dtype code " + std::to_string(dtype));
  const auto flags = r.get<std::uint8_t>();
  if (flags & ~1u) throw FormatError(what + ": unknown flag bits " + std::to_string(flags));
  SitsChip c;
  std::uint32_t dims[4];
  const char* names[4] = {"C", "T", "H", "W"};
  for (int i = 0; i < 4; ++i) {
    dims[i] = r.get<std::uint32_t>();
    if (dims[i] == 0) throw FormatError(what + ": header has " + names[i] + "=0");
  }
  c.C = dims[0];
  c.T = dims[1];
  c.H = dims[2];
  c.W = dims[3];
  c.sample_id = r.str16();
  const std::size_t n_in = static_cast<std::size_t>(c.C * c.T * c.H * c.W), n_lab = static_cast<std::size_t>(c.H * c.W),
                    n_mask = (flags & 1u) ? static_cast<std::size_t>(c.T * c.H * c.W) : 0;
  const std::size_t payload = n_in * sizeof(float) + n_lab + n_mask;
  r.need(payload + 4);
  const std::size_t start = r.pos();
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + start + payload, 4);
  if (binio::crc32(buf.data() + start, payload) != stored) throw ChecksumError(what + ": CRC mismatch");
  if (r.remaining() != payload + 4) throw FormatError(what + ": trailing bytes after checksum");
  c.input.resize(n_in);
  r.bytes(c.input.data(), n_in * sizeof(float));
  c.labels.resize(n_lab);
  r.bytes(c.labels.data(), n_lab);
  if (flags & 1u) {
    c.cloud_mask.emplace(n_mask);
    r.bytes(c.cloud_mask->data(), n_mask);
  }
  return c;
}

inline void write_chip(const SitsChip& c, const std::string& path) { binio::write_file(path, encode_chip(c)); }
inline SitsChip read_chip(const std::string& path) { return decode_chip(binio::read_file(path), path); }

// ---------------------------------------------------------------------------
// Normalisation

struct ChannelStats {
  std::vector<double> mean, std;
};

inline ChannelStats compute_stats(const std::vector<const SitsChip*>& chips) {
  if (chips.empty()) throw ConfigError("compute_stats: no chips");
  const Index C = chips[0]->C;
  ChannelStats s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  std::vector<double> n(C, 0.0);
  for (const auto* chip : chips) {
    if (chip->C != C) throw ShapeError("compute_stats: chips disagree on channel count");
    const std::size_t per = static_cast<std::size_t>(chip->T * chip->H * chip->W);
    for (Index c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < per; ++i) s.mean[c] += chip->input[c * per + i];
      n[c] += static_cast<double>(per);
    }
  }
  for (Index c = 0; c < C; ++c) s.mean[c] /= n[c];
  for (const auto* chip : chips) {
    const std::size_t per = static_cast<std::size_t>(chip->T * chip->H * chip->W);
    for (Index c = 0; c < C; ++c)
      for (std::size_t i = 0; i < per; ++i) {
        const double d = chip->input[c * per + i] - s.mean[c];
        s.std[c] += d * d;
      }
  }
  for (Index c = 0; c < C; ++c) s.std[c] = std::sqrt(s.std[c] / n[c]);
  return s;
}

// (x - mean_c) / std_c per channel; a zero std leaves the centred value unscaled.
inline SitsChip normalize(const SitsChip& chip, const ChannelStats& stats) {
  if (stats.mean.size() != static_cast<std::size_t>(chip.C) || stats.std.size() != static_cast<std::size_t>(chip.C))
    throw ShapeError("normalize: stats for " + std::to_string(stats.mean.size()) + " channels, chip has " +
                     std::to_string(chip.C));
  SitsChip out = chip;
  const std::size_t per = static_cast<std::size_t>(chip.T * chip.H * chip.W);
  for (Index c = 0; c < chip.C; ++c) {
    const double sd = stats.std[c] > 1e-12 ? stats.std[c] : 1.0;
    for (std::size_t i = 0; i < per; ++i)
      out.input[c * per + i] = static_cast<float>((chip.input[c * per + i] - stats.mean[c]) / sd);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDraws {
  bool hflip = false, vflip = false, rot90 = false;
};

inline AugmentDraws draw_augment(std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  AugmentDraws d;
  d.hflip = coin(rng);
  d.vflip = coin(rng);
  d.rot90 = coin(rng);
  return d;
}

namespace detail {

// Applies a spatial index map (new h, new w) -> (old h, old w) to every plane.
template <class Map>
SitsChip remap(const SitsChip& c, Index newH, Index newW, Map src) {
  SitsChip o = c;
  o.H = newH;
  o.W = newW;
  const Index planes_in = c.C * c.T;
  for (Index p = 0; p < planes_in; ++p)
    for (Index h = 0; h < newH; ++h)
      for (Index w = 0; w < newW; ++w) {
        const auto [sh, sw] = src(h, w);
        o.input[(p * newH + h) * newW + w] = c.input[(p * c.H + sh) * c.W + sw];
      }
  for (Index h = 0; h < newH; ++h)
    for (Index w = 0; w < newW; ++w) {
      const auto [sh, sw] = src(h, w);
      o.labels[h * newW + w] = c.labels[sh * c.W + sw];
    }
  if (c.cloud_mask)
    for (Index t = 0; t < c.T; ++t)
      for (Index h = 0; h < newH; ++h)
        for (Index w = 0; w < newW; ++w) {
          const auto [sh, sw] = src(h, w);
          (*o.cloud_mask)[(t * newH + h) * newW + w] = (*c.cloud_mask)[(t * c.H + sh) * c.W + sw];
        }
  return o;
}

}  // namespace detail

inline SitsChip hflip(const SitsChip& c) {
  return detail::remap(c, c.H, c.W, [&](Index h, Index w) { return std::pair{h, c.W - 1 - w}; });
}
inline SitsChip vflip(const SitsChip& c) {
  return detail::remap(c, c.H, c.W, [&](Index h, Index w) { return std::pair{c.H - 1 - h, w}; });
}
// Counter-clockwise quarter turn: new(h, w) = old(w, W_old - 1 - h).
inline SitsChip rot90(const SitsChip& c) {
  return detail::remap(c, c.W, c.H, [&](Index h, Index w) { return std::pair{w, c.W - 1 - h}; });
}

inline SitsChip augment(const SitsChip& chip, const AugmentDraws& d) {
  SitsChip out = chip;
  if (d.hflip) out = hflip(out);
  if (d.vflip) out = vflip(out);
  if (d.rot90) out = rot90(out);
  return out;
}

inline SitsChip augment(const SitsChip& chip, std::uint64_t seed) { return augment(chip, draw_augment(seed)); }

// ---------------------------------------------------------------------------
// Manifest and on-disk dataset

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split '" + s + "'");
}

struct DatasetManifest {
  int version = 1;
  Index num_classes = 0, channels = 0, T = 0, H = 0, W = 0;
  ChannelStats stats;
  std::vector<std::pair<std::string, Split>> samples;  // in file order

  std::vector<std::string> ids(Split s) const {
    std::vector<std::string> out;
    for (const auto& [id, sp] : samples)
      if (sp == s) out.push_back(id);
    return out;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "version = " << version << "\nnum_classes = " << num_classes << "\nchannels = " << channels
       << "\nT = " << T << "\nH = " << H << "\nW = " << W << '\n';
    auto list = [&](const char* key, const std::vector<double>& v) {
      os << key << " = ";
      for (std::size_t i = 0; i < v.size(); ++i) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        os << (i ? "," : "") << buf;
      }
      os << '\n';
    };
    list("mean", stats.mean);
    list("std", stats.std);
    for (const auto& [id, sp] : samples) os << "sample." << id << " = " << to_string(sp) << '\n';
    return os.str();
  }

  static DatasetManifest parse(const std::string& text, const std::string& what = "manifest") {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    std::map<std::string, bool> seen_ids;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    auto num_list = [](const std::string& v) {
      std::vector<double> out;
      std::istringstream ls(v);
      std::string part;
      while (std::getline(ls, part, ',')) out.push_back(std::stod(part));
      return out;
    };
    while (std::getline(is, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      const std::string where = what + ":" + std::to_string(lineno) + ": ";
      if (eq == std::string::npos) throw FormatError(where + "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      try {
        if (key == "version") {
          m.version = std::stoi(val);
          if (m.version != 1) throw FormatError(where + "unsupported manifest version " + val);
        } else if (key == "num_classes") {
          m.num_classes = std::stoll(val);
        } else if (key == "channels") {
          m.channels = std::stoll(val);
        } else if (key == "T") {
          m.T = std::stoll(val);
        } else if (key == "H") {
          m.H = std::stoll(val);
        } else if (key == "W") {
          m.W = std::stoll(val);
        } else if (key == "mean") {
          m.stats.mean = num_list(val);
        } else if (key == "std") {
          m.stats.std = num_list(val);
        } else if (key.rfind("sample.", 0) == 0) {
          const std::string id = key.substr(7);
          if (seen_ids.count(id)) throw FormatError(where + "sample '" + id + "' listed twice");
          seen_ids[id] = true;
          m.samples.emplace_back(id, parse_split(val));
        } else {
          throw FormatError(where + "unknown key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        throw FormatError(where + "bad value '" + val + "' for " + key);
      }
    }
    if (m.num_classes < 1 || m.channels < 1 || m.T < 1 || m.H < 1 || m.W < 1)
      throw FormatError(what + ": num_classes, channels, T, H and W must all be positive");
    if (m.stats.mean.size() != static_cast<std::size_t>(m.channels) ||
        m.stats.std.size() != static_cast<std::size_t>(m.channels))
      throw FormatError(what + ": mean/std must list one value per channel");
    return m;
  }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SitsChip> chips;  // raw (unnormalised), manifest order

  std::vector<const SitsChip*> split(Split s) const {
    std::vector<const SitsChip*> out;
    for (std::size_t i = 0; i < chips.size(); ++i)
      if (manifest.samples[i].second == s) out.push_back(&chips[i]);
    return out;
  }
};

// Generates chips, assigns the first n_train to train, the next n_val to
// val and the rest to test, and computes normalisation stats on train only.
inline Dataset make_dataset(const GeneratorSpec& spec, Index n_train, Index n_val) {
  if (n_train < 0 || n_val < 0 || n_train + n_val > spec.n_samples)
    throw ConfigError("make_dataset: split sizes exceed n_samples");
  Dataset d;
  d.chips = generate_chips(spec);
  auto& m = d.manifest;
  m.num_classes = spec.num_classes;
  m.channels = spec.channels;
  m.T = spec.T;
  m.H = spec.H;
  m.W = spec.W;
  for (Index i = 0; i < spec.n_samples; ++i)
    m.samples.emplace_back(d.chips[i].sample_id, i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test);
  if (n_train > 0) {
    m.stats = compute_stats(d.split(Split::Train));
  } else {
    m.stats = {std::vector<double>(spec.channels, 0.0), std::vector<double>(spec.channels, 1.0)};
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  for (const auto& c : d.chips) write_chip(c, (std::filesystem::path(dir) / (c.sample_id + ".sits")).string());
  binio::write_file((std::filesystem::path(dir) / "manifest.txt").string(), d.manifest.serialize());
}

inline Dataset load_dataset(const std::string& dir) {
  Dataset d;
  const auto mpath = (std::filesystem::path(dir) / "manifest.txt").string();
  d.manifest = DatasetManifest::parse(binio::read_file(mpath), mpath);
  for (const auto& [id, sp] : d.manifest.samples) {
    SitsChip c = read_chip((std::filesystem::path(dir) / (id + ".sits")).string());
    if (c.sample_id != id) throw FormatError("chip file for '" + id + "' carries id '" + c.sample_id + "'");
    if (c.C != d.manifest.channels || c.T != d.manifest.T || c.H != d.manifest.H || c.W != d.manifest.W)
      throw FormatError("chip '" + id + "' dims disagree with the manifest");
    d.chips.push_back(std::move(c));
  }
  return d;
}

}  // namespace vf
