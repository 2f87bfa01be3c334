#pragma once
// Central finite-difference gradient checking against the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace vf {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-4;
  // Coordinates sampled per tensor; tensors smaller than this are checked exhaustively.
  std::size_t max_coords_per_tensor = 24;
  // Denominator floor of the relative error, so coordinates whose true
  // derivative is zero are judged by absolute error.
  double denom_floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
  double tol = 0.0;
};

// Compares tape gradients of the scalar `f()` with respect to each tensor in
// `wrt` against (f(x+eps e) - f(x-eps e)) / (2 eps) on a random subset of
// coordinates. The tensors are perturbed in place and restored.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> wrt,
                                  const GradCheckOptions& opt = {}) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tensor<double> loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(t.numel()), 0.0);
  }

  Rng rng(opt.seed);
  GradCheckReport rep;
  rep.tol = opt.tol;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto data = wrt[ti].mutable_data();
    std::vector<std::size_t> coords(data.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_tensor);
    }
    for (std::size_t c : coords) {
      const double saved = data[c];
      data[c] = saved + opt.eps;
      const double fp = f().item();
      data[c] = saved - opt.eps;
      const double fm = f().item();
      data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[ti][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - numeric) / denom);
      ++rep.coords_checked;
    }
  }
  for (auto& t : wrt) t.zero_grad();
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

inline GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                                  const GradCheckOptions& opt = {}) {
  return grad_check([&] { return f(x); }, std::vector<Tensor<double>>{x}, opt);
}

// Scalar probe sum(out * R) for a fixed random R; turns any tensor-valued
// function into a scalar whose gradient exercises every output element.
template <class S>
Tensor<S> random_projection(const Tensor<S>& out, std::uint64_t seed) {
  Rng rng(seed);
  auto r = Tensor<S>::uniform(out.shape(), rng, S(-1), S(1));
  return sum(mul(out, r));
}

}  // namespace vf
