#pragma once
// Closed-form single-head cost expressions for one H x W token grid with C
// channels and kernel/neighbourhood size K. Exact integer arithmetic.

#include <cstdint>
#include <string>

#include "errors.hpp"

namespace vf {

namespace detail {
inline std::uint64_t checked_dim(std::int64_t v, const char* name) {
  if (v <= 0) throw ContractError(std::string("cost model: ") + name + " must be positive, got " + std::to_string(v));
  return static_cast<std::uint64_t>(v);
}
}  // namespace detail

// Self-attention: 3HWC^2 (projections) + 2H^2W^2C (scores and weighted sum).
inline std::uint64_t attn_flops(std::int64_t H, std::int64_t W, std::int64_t C) {
  const auto h = detail::checked_dim(H, "H"), w = detail::checked_dim(W, "W"), c = detail::checked_dim(C, "C");
  return 3 * h * w * c * c + 2 * h * h * w * w * c;
}

inline std::uint64_t attn_memory(std::int64_t H, std::int64_t W, std::int64_t C) {
  const auto h = detail::checked_dim(H, "H"), w = detail::checked_dim(W, "W"), c = detail::checked_dim(C, "C");
  return 3 * c * c + h * h * w * w;
}

// Neighbourhood attention: 3HWC^2 + 2HWCK^2.
inline std::uint64_t na_flops(std::int64_t H, std::int64_t W, std::int64_t C, std::int64_t K) {
  const auto h = detail::checked_dim(H, "H"), w = detail::checked_dim(W, "W"), c = detail::checked_dim(C, "C"),
             k = detail::checked_dim(K, "K");
  return 3 * h * w * c * c + 2 * h * w * c * k * k;
}

inline std::uint64_t na_memory(std::int64_t H, std::int64_t W, std::int64_t C, std::int64_t K) {
  const auto h = detail::checked_dim(H, "H"), w = detail::checked_dim(W, "W"), c = detail::checked_dim(C, "C"),
             k = detail::checked_dim(K, "K");
  return 3 * c * c + h * w * k * k;
}

// 3D convolution with equal in/out channels and unit stride: HWC^2K^3.
inline std::uint64_t conv3d_flops(std::int64_t H, std::int64_t W, std::int64_t C, std::int64_t K) {
  const auto h = detail::checked_dim(H, "H"), w = detail::checked_dim(W, "W"), c = detail::checked_dim(C, "C"),
             k = detail::checked_dim(K, "K");
  return h * w * c * c * k * k * k;
}

inline std::uint64_t conv3d_memory(std::int64_t C, std::int64_t K) {
  const auto c = detail::checked_dim(C, "C"), k = detail::checked_dim(K, "K");
  return c * c * k * k * k;
}

}  // namespace vf
