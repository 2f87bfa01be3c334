#pragma once
// Differentiable neural-network primitives: activations, layer normalisation,
// stochastic regularisers and the two attention kernels (global multi-head
// and 2D neighbourhood).

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace vf {

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(x.numel()) * OtherRates::sigmoid);
  Buffer<S> out;
  if (!x.is_meta()) {
    out.resize(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const S v = x.data()[i];
      // Split on sign so exp never overflows.
      if (v >= 0) {
        out[i] = S(1) / (S(1) + std::exp(-v));
      } else {
        const S e = std::exp(v);
        out[i] = e / (S(1) + e);
      }
    }
  }
  auto r = detail::make_result<S>(x.shape(), std::move(out), x.is_meta(), {&x}, nullptr);
  if (r.requires_grad())
    r.node()->backward_fn = [x](Node<S>& self) {
      auto& g = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i] * (S(1) - self.data[i]);
    };
  return r;
}

// Exact GELU, x * Phi(x).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(x.numel()) * OtherRates::gelu);
  constexpr S inv_sqrt2 = S(0.70710678118654752440);
  Buffer<S> out;
  if (!x.is_meta()) {
    out.resize(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const S v = x.data()[i];
      out[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    }
  }
  return detail::make_result<S>(x.shape(), std::move(out), x.is_meta(), {&x}, [x](Node<S>& self) {
    constexpr S inv_sqrt2pi = S(0.39894228040143267794);
    auto& g = detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = x.data()[i];
      const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
      const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// Normalises over the last axis, then applies per-channel scale and shift.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
  const Index C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("layer_norm: parameters " + shape_str(gamma.shape()) + " for input " + shape_str(x.shape()));
  const Index rows = x.numel() / C;
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(x.numel()) * OtherRates::layer_norm);
  const bool meta = detail::any_meta<S>({&x, &gamma, &beta});
  Buffer<S> out;
  auto xhat = std::make_shared<Buffer<S>>();
  auto rstd = std::make_shared<Buffer<S>>();
  if (!meta) {
    out.resize(x.data().size());
    xhat->resize(x.data().size());
    rstd->resize(static_cast<std::size_t>(rows));
    for (Index r = 0; r < rows; ++r) {
      const S* p = x.data().data() + r * C;
      S m = 0;
      for (Index c = 0; c < C; ++c) m += p[c];
      m /= static_cast<S>(C);
      S v = 0;
      for (Index c = 0; c < C; ++c) v += (p[c] - m) * (p[c] - m);
      v /= static_cast<S>(C);
      const S rs = S(1) / std::sqrt(v + eps);
      (*rstd)[r] = rs;
      for (Index c = 0; c < C; ++c) {
        const S xh = (p[c] - m) * rs;
        (*xhat)[r * C + c] = xh;
        out[r * C + c] = xh * gamma.data()[c] + beta.data()[c];
      }
    }
  }
  return detail::make_result<S>(x.shape(), std::move(out), meta, {&x, &gamma, &beta},
                                [x, gamma, beta, xhat, rstd, rows, C](Node<S>& self) {
                                  const bool gx = detail::wants_grad(x);
                                  S* dx = gx ? detail::grad_of(x).data() : nullptr;
                                  S* dg = detail::wants_grad(gamma) ? detail::grad_of(gamma).data() : nullptr;
                                  S* db = detail::wants_grad(beta) ? detail::grad_of(beta).data() : nullptr;
                                  for (Index r = 0; r < rows; ++r) {
                                    const S* go = self.grad.data() + r * C;
                                    const S* xh = xhat->data() + r * C;
                                    S mean_d = 0, mean_dx = 0;
                                    for (Index c = 0; c < C; ++c) {
                                      const S d = go[c] * gamma.data()[c];
                                      mean_d += d;
                                      mean_dx += d * xh[c];
                                      if (dg) dg[c] += go[c] * xh[c];
                                      if (db) db[c] += go[c];
                                    }
                                    if (!dx) continue;
                                    mean_d /= static_cast<S>(C);
                                    mean_dx /= static_cast<S>(C);
                                    const S rs = (*rstd)[r];
                                    for (Index c = 0; c < C; ++c)
                                      dx[r * C + c] += rs * (go[c] * gamma.data()[c] - mean_d - xh[c] * mean_dx);
                                  }
                                });
}

namespace detail {

// Bernoulli(p) drop decisions for dropout masks. Takes one seed from the
// caller's generator, then runs SplitMix64 and uses each 64-bit output as two
// 32-bit draws.
class MaskSampler {
 public:
  MaskSampler(double p, Rng& rng) : state_(rng()) {
    p = std::clamp(p, 0.0, 1.0);
    always_ = p >= 1.0;
    threshold_ = static_cast<std::uint64_t>(std::llround(p * 4294967296.0));
  }
  bool drop() {
    if (always_) return true;
    if (!have_) {
      state_ += 0x9E3779B97F4A7C15ull;
      std::uint64_t z = state_;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      buf_ = z ^ (z >> 31);
      have_ = true;
      return (buf_ & 0xFFFFFFFFull) < threshold_;
    }
    have_ = false;
    return (buf_ >> 32) < threshold_;
  }

 private:
  std::uint64_t state_, buf_ = 0, threshold_ = 0;
  bool always_ = false, have_ = false;
};

template <class S>
Tensor<S> apply_mask(const Tensor<S>& x, std::shared_ptr<Buffer<S>> mask) {
  Buffer<S> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * (*mask)[i];
  return make_result<S>(x.shape(), std::move(out), false, {&x}, [x, mask](Node<S>& self) {
    auto& g = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}
}  // namespace detail

// Inverted dropout: zero each element with probability p, scale survivors by 1/(1-p).
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng) {
  if (p <= 0.0 || x.is_meta()) return x;
  auto mask = std::make_shared<Buffer<S>>(x.data().size());
  detail::MaskSampler drop(p, rng);
  const S keep_scale = p >= 1.0 ? S(0) : static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = drop.drop() ? S(0) : keep_scale;
  return detail::apply_mask(x, std::move(mask));
}

// Stochastic depth: zero the whole slice x[b, ...] with probability p per
// leading index b, scaling survivors by 1/(1-p).
template <class S>
Tensor<S> drop_path(const Tensor<S>& x, double p, Rng& rng) {
  if (p <= 0.0 || x.is_meta()) return x;
  const Index B = x.dim(0);
  const Index per = x.numel() / B;
  auto mask = std::make_shared<Buffer<S>>(x.data().size());
  std::bernoulli_distribution drop(std::min(p, 1.0));
  const S keep_scale = p >= 1.0 ? S(0) : static_cast<S>(1.0 / (1.0 - p));
  for (Index b = 0; b < B; ++b) {
    const S m = drop(rng) ? S(0) : keep_scale;
    std::fill_n(mask->data() + b * per, per, m);
  }
  return detail::apply_mask(x, std::move(mask));
}

// ---------------------------------------------------------------------------
// Attention kernels. Both consume a fused projection whose last axis holds
// [Q | K | V], each of width C = heads * d_head; head h owns channels
// [h*d_head, (h+1)*d_head) of each part.

struct AttentionDropout {
  double rate = 0.0;
  Rng* rng = nullptr;  // non-null enables dropout on the attention weights
  bool active() const { return rng != nullptr && rate > 0.0; }
};

// Global softmax(Q K^T / sqrt(d_head)) V within each sequence.
// qkv: (S, N, 3C) -> (S, N, C).
template <class S>
Tensor<S> multi_head_attention(const Tensor<S>& qkv, Index heads, AttentionDropout drop = {}) {
  if (qkv.ndim() != 3 || qkv.dim(2) % 3 != 0 || (qkv.dim(2) / 3) % heads != 0)
    throw ShapeError("multi_head_attention: fused projection " + shape_str(qkv.shape()) + " with " +
                     std::to_string(heads) + " heads");
  const Index nseq = qkv.dim(0), N = qkv.dim(1), C = qkv.dim(2) / 3, d = C / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  record_flops(FlopCategory::Attention, static_cast<std::uint64_t>(2 * nseq * N * N * C));
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(nseq * heads * N * N) * OtherRates::softmax);
  if (qkv.is_meta()) return Tensor<S>::meta({nseq, N, C});

  using Strided = Eigen::Map<const detail::MatR<S>, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<detail::MatR<S>, 0, Eigen::OuterStride<>>;
  auto probs = std::make_shared<Buffer<S>>(static_cast<std::size_t>(nseq * heads * N * N));
  std::shared_ptr<Buffer<S>> mask;
  if (drop.active()) mask = std::make_shared<Buffer<S>>(probs->size());
  Buffer<S> out(static_cast<std::size_t>(nseq * N * C));
  detail::MatR<S> weights(N, N);
  std::optional<detail::MaskSampler> bern;
  if (drop.active()) bern.emplace(drop.rate, *drop.rng);
  const S keep_scale = drop.rate >= 1.0 ? S(0) : static_cast<S>(1.0 / (1.0 - drop.rate));

  for (Index s = 0; s < nseq; ++s) {
    const S* base = qkv.data().data() + s * N * 3 * C;
    for (Index h = 0; h < heads; ++h) {
      Strided Q(base + h * d, N, d, Eigen::OuterStride<>(3 * C));
      Strided K(base + C + h * d, N, d, Eigen::OuterStride<>(3 * C));
      Strided V(base + 2 * C + h * d, N, d, Eigen::OuterStride<>(3 * C));
      detail::MapR<S> P(probs->data() + (s * heads + h) * N * N, N, N);
      P.noalias() = (Q * K.transpose()) * scale;
      for (Index i = 0; i < N; ++i) {
        auto row = P.row(i);
        const S mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      StridedOut O(out.data() + s * N * C + h * d, N, d, Eigen::OuterStride<>(C));
      if (mask) {
        S* m = mask->data() + (s * heads + h) * N * N;
        for (Index i = 0; i < N * N; ++i) m[i] = bern->drop() ? S(0) : keep_scale;
        weights = P.cwiseProduct(detail::MapR<S>(m, N, N));
        O.noalias() = weights * V;
      } else {
        O.noalias() = P * V;
      }
    }
  }

  return detail::make_result<S>(
      {nseq, N, C}, std::move(out), false, {&qkv}, [qkv, probs, mask, nseq, N, C, heads, d, scale](Node<S>& self) {
        auto& g = detail::grad_of(qkv);
        detail::MatR<S> dP(N, N), dS(N, N), Pd(N, N);
        for (Index s = 0; s < nseq; ++s) {
          const S* base = qkv.data().data() + s * N * 3 * C;
          S* gbase = g.data() + s * N * 3 * C;
          for (Index h = 0; h < heads; ++h) {
            Strided Q(base + h * d, N, d, Eigen::OuterStride<>(3 * C));
            Strided K(base + C + h * d, N, d, Eigen::OuterStride<>(3 * C));
            Strided V(base + 2 * C + h * d, N, d, Eigen::OuterStride<>(3 * C));
            StridedOut dQ(gbase + h * d, N, d, Eigen::OuterStride<>(3 * C));
            StridedOut dK(gbase + C + h * d, N, d, Eigen::OuterStride<>(3 * C));
            StridedOut dV(gbase + 2 * C + h * d, N, d, Eigen::OuterStride<>(3 * C));
            Strided dO(self.grad.data() + s * N * C + h * d, N, d, Eigen::OuterStride<>(C));
            detail::CMapR<S> P(probs->data() + (s * heads + h) * N * N, N, N);
            dP.noalias() = dO * V.transpose();
            if (mask) {
              detail::CMapR<S> M(mask->data() + (s * heads + h) * N * N, N, N);
              Pd = P.cwiseProduct(M);
              dV.noalias() += Pd.transpose() * dO;
              dP = dP.cwiseProduct(M);
            } else {
              dV.noalias() += P.transpose() * dO;
            }
            for (Index i = 0; i < N; ++i) {
              const S dot = dP.row(i).dot(P.row(i));
              dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
            }
            dQ.noalias() += (dS * K) * scale;
            dK.noalias() += (dS.transpose() * Q) * scale;
          }
        }
      });
}

// Window of extent min(k, grid) centred on `pos` and shifted inward at the borders.
struct NeighbourWindow {
  Index start;
  Index extent;
};

inline NeighbourWindow neighbour_window(Index pos, Index grid, Index k) {
  const Index extent = std::min(k, grid);
  const Index start = std::clamp<Index>(pos - k / 2, 0, grid - extent);
  return {start, extent};
}

// 2D neighbourhood attention over a (S, H, W, 3C) grid -> (S, H, W, C).
// Each query attends to the k x k window around it, clamped inside the grid.
// Keys at rows >= valid_h or columns >= valid_w are masked out; this serves
// grids that were zero-padded up to the kernel size.
template <class S>
Tensor<S> neighbourhood_attention(const Tensor<S>& qkv, Index heads, Index k, Index valid_h = -1, Index valid_w = -1,
                                  AttentionDropout drop = {}) {
  if (qkv.ndim() != 4 || qkv.dim(3) % 3 != 0 || (qkv.dim(3) / 3) % heads != 0)
    throw ShapeError("neighbourhood_attention: fused projection " + shape_str(qkv.shape()) + " with " +
                     std::to_string(heads) + " heads");
  if (k < 1 || k % 2 == 0) throw ConfigError("neighbourhood size must be odd and >= 1, got " + std::to_string(k));
  const Index nseq = qkv.dim(0), H = qkv.dim(1), W = qkv.dim(2), C = qkv.dim(3) / 3, d = C / heads;
  if (valid_h < 0) valid_h = H;
  if (valid_w < 0) valid_w = W;
  const Index eh = std::min(k, H), ew = std::min(k, W), win = eh * ew;
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  record_flops(FlopCategory::Attention, static_cast<std::uint64_t>(2 * nseq * H * W * win * C));
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(nseq * heads * H * W * win) * OtherRates::softmax);
  if (qkv.is_meta()) return Tensor<S>::meta({nseq, H, W, C});

  const Index row3 = 3 * C;
  auto probs = std::make_shared<Buffer<S>>(static_cast<std::size_t>(nseq * H * W * heads * win));
  std::shared_ptr<Buffer<S>> mask;
  if (drop.active()) mask = std::make_shared<Buffer<S>>(probs->size());
  std::optional<detail::MaskSampler> bern;
  if (drop.active()) bern.emplace(drop.rate, *drop.rng);
  const S keep_scale = drop.rate >= 1.0 ? S(0) : static_cast<S>(1.0 / (1.0 - drop.rate));
  Buffer<S> out(static_cast<std::size_t>(nseq * H * W * C), S(0));
  constexpr S neg_inf = -std::numeric_limits<S>::infinity();

  for (Index s = 0; s < nseq; ++s) {
    const S* grid = qkv.data().data() + s * H * W * row3;
    for (Index i = 0; i < H; ++i) {
      const auto wr = neighbour_window(i, H, k);
      for (Index j = 0; j < W; ++j) {
        const auto wc = neighbour_window(j, W, k);
        const S* q = grid + (i * W + j) * row3;
        S* o = out.data() + ((s * H + i) * W + j) * C;
        for (Index h = 0; h < heads; ++h) {
          S* p = probs->data() + (((s * H + i) * W + j) * heads + h) * win;
          S mx = neg_inf;
          for (Index a = 0; a < eh; ++a)
            for (Index b = 0; b < ew; ++b) {
              const Index ki = wr.start + a, kj = wc.start + b;
              const S* kv = grid + (ki * W + kj) * row3 + C + h * d;
              S dot = 0;
              for (Index t = 0; t < d; ++t) dot += q[h * d + t] * kv[t];
              const S v = (ki < valid_h && kj < valid_w) ? dot * scale : neg_inf;
              p[a * ew + b] = v;
              mx = std::max(mx, v);
            }
          S total = 0;
          for (Index t = 0; t < win; ++t) {
            p[t] = std::exp(p[t] - mx);
            total += p[t];
          }
          for (Index t = 0; t < win; ++t) p[t] /= total;
          S* m = mask ? mask->data() + (((s * H + i) * W + j) * heads + h) * win : nullptr;
          for (Index a = 0; a < eh; ++a)
            for (Index b = 0; b < ew; ++b) {
              const Index t = a * ew + b;
              S wgt = p[t];
              if (m) {
                m[t] = bern->drop() ? S(0) : keep_scale;
                wgt *= m[t];
              }
              if (wgt == S(0)) continue;
              const S* vv = grid + ((wr.start + a) * W + wc.start + b) * row3 + 2 * C + h * d;
              for (Index t2 = 0; t2 < d; ++t2) o[h * d + t2] += wgt * vv[t2];
            }
        }
      }
    }
  }

  return detail::make_result<S>(
      {nseq, H, W, C}, std::move(out), false, {&qkv},
      [qkv, probs, mask, nseq, H, W, C, heads, d, k, eh, ew, win, scale, row3](Node<S>& self) {
        auto& g = detail::grad_of(qkv);
        Buffer<S> dp(static_cast<std::size_t>(win));
        for (Index s = 0; s < nseq; ++s) {
          const S* grid = qkv.data().data() + s * H * W * row3;
          S* ggrid = g.data() + s * H * W * row3;
          for (Index i = 0; i < H; ++i) {
            const auto wr = neighbour_window(i, H, k);
            for (Index j = 0; j < W; ++j) {
              const auto wc = neighbour_window(j, W, k);
              const S* q = grid + (i * W + j) * row3;
              S* dq = ggrid + (i * W + j) * row3;
              const S* go = self.grad.data() + ((s * H + i) * W + j) * C;
              for (Index h = 0; h < heads; ++h) {
                const Index pidx = (((s * H + i) * W + j) * heads + h) * win;
                const S* p = probs->data() + pidx;
                const S* m = mask ? mask->data() + pidx : nullptr;
                S dot_sum = 0;
                for (Index a = 0; a < eh; ++a)
                  for (Index b = 0; b < ew; ++b) {
                    const Index t = a * ew + b;
                    const Index koff = ((wr.start + a) * W + wc.start + b) * row3;
                    const S* vv = grid + koff + 2 * C + h * d;
                    S* dv = ggrid + koff + 2 * C + h * d;
                    const S wgt = m ? p[t] * m[t] : p[t];
                    S acc = 0;
                    for (Index t2 = 0; t2 < d; ++t2) {
                      acc += go[h * d + t2] * vv[t2];
                      dv[t2] += wgt * go[h * d + t2];
                    }
                    dp[t] = m ? acc * m[t] : acc;
                    dot_sum += dp[t] * p[t];
                  }
                for (Index a = 0; a < eh; ++a)
                  for (Index b = 0; b < ew; ++b) {
                    const Index t = a * ew + b;
                    const S ds = p[t] * (dp[t] - dot_sum) * scale;
                    if (ds == S(0)) continue;
                    const Index koff = ((wr.start + a) * W + wc.start + b) * row3;
                    const S* kk = grid + koff + C + h * d;
                    S* dk = ggrid + koff + C + h * d;
                    for (Index t2 = 0; t2 < d; ++t2) {
                      dq[h * d + t2] += ds * kk[t2];
                      dk[t2] += ds * q[h * d + t2];
                    }
                  }
              }
            }
          }
        }
      });
}

}  // namespace vf
