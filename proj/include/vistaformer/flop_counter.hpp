#pragma once
// Instrumentation hooks for counting operations during a forward pass.
//
// Counting convention: one multiply-accumulate is one operation. Element-wise
// work is charged at fixed per-element rates (see OtherRates) and lands in the
// Other category. Ops report into the counter installed by a FlopScope on the
// current thread; with no scope installed, reporting is a no-op.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace vf {

enum class FlopCategory { Attention = 0, Conv = 1, Linear = 2, Other = 3 };

inline const char* category_name(FlopCategory c) {
  switch (c) {
    case FlopCategory::Attention: return "attention";
    case FlopCategory::Conv: return "conv";
    case FlopCategory::Linear: return "linear";
    case FlopCategory::Other: return "other";
  }
  return "?";
}

// Per-element charges for non-MAC work.
struct OtherRates {
  static constexpr std::uint64_t softmax = 4;     // max, sub+exp, sum, div
  static constexpr std::uint64_t layer_norm = 5;  // mean, var, normalize, scale, shift
  static constexpr std::uint64_t gelu = 1;
  static constexpr std::uint64_t sigmoid = 1;
  static constexpr std::uint64_t elementwise = 1;  // add, mul, gate, residual
  static constexpr std::uint64_t interpolate = 1;  // per output element
  static constexpr std::uint64_t pool = 1;         // per input element
};

struct FlopEntry {
  std::string layer;
  std::uint64_t by_category[4] = {0, 0, 0, 0};
  std::optional<std::uint64_t> analytic;  // closed-form estimate, when one applies
  std::optional<std::uint64_t> memory;    // closed-form memory estimate (elements)

  std::uint64_t measured() const {
    return by_category[0] + by_category[1] + by_category[2] + by_category[3];
  }
};

class FlopCounter {
 public:
  void add(const std::string& layer, FlopCategory cat, std::uint64_t n) {
    entry(layer).by_category[static_cast<int>(cat)] += n;
  }

  void add_analytic(const std::string& layer, std::uint64_t flops, std::uint64_t memory) {
    auto& e = entry(layer);
    e.analytic = e.analytic.value_or(0) + flops;
    e.memory = e.memory.value_or(0) + memory;
  }

  const std::vector<FlopEntry>& entries() const { return entries_; }

 private:
  FlopEntry& entry(const std::string& layer) {
    auto it = index_.find(layer);
    if (it != index_.end()) return entries_[it->second];
    index_.emplace(layer, entries_.size());
    entries_.push_back(FlopEntry{layer});
    return entries_.back();
  }

  std::vector<FlopEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

struct ScopeFrame {
  std::string name;
  std::optional<FlopCategory> category;
};

inline thread_local FlopCounter* active_counter = nullptr;
inline thread_local std::vector<ScopeFrame> scope_stack;

inline std::string current_layer() {
  std::string out;
  for (const auto& f : scope_stack) {
    if (f.name.empty()) continue;
    if (!out.empty()) out += '.';
    out += f.name;
  }
  return out.empty() ? std::string("root") : out;
}

}  // namespace detail

inline bool counting_flops() { return detail::active_counter != nullptr; }

// Charge `n` operations to the innermost named layer. A LayerScope carrying a
// category override reclassifies everything recorded beneath it.
inline void record_flops(FlopCategory cat, std::uint64_t n) {
  if (!detail::active_counter || n == 0) return;
  for (auto it = detail::scope_stack.rbegin(); it != detail::scope_stack.rend(); ++it) {
    if (it->category) {
      cat = *it->category;
      break;
    }
  }
  detail::active_counter->add(detail::current_layer(), cat, n);
}

inline void record_analytic(std::uint64_t flops, std::uint64_t memory) {
  if (!detail::active_counter) return;
  detail::active_counter->add_analytic(detail::current_layer(), flops, memory);
}

// Installs a counter for the lifetime of the scope.
class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter) : previous_(detail::active_counter) {
    detail::active_counter = &counter;
  }
  ~FlopScope() { detail::active_counter = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* previous_;
};

// Names the layer that subsequent op reports are charged to.
class LayerScope {
 public:
  explicit LayerScope(std::string name, std::optional<FlopCategory> category = std::nullopt) {
    detail::scope_stack.push_back({std::move(name), category});
  }
  ~LayerScope() { detail::scope_stack.pop_back(); }
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;
};

}  // namespace vf
