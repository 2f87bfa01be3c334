#pragma once
// Operation counts for a whole model, measured by tracing a forward pass over
// shape-only tensors, plus the sweep behind the spatial/temporal scaling plots.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "complexity.hpp"
#include "flop_counter.hpp"
#include "model.hpp"

namespace vf {

struct FlopReport {
  std::vector<FlopEntry> entries;
  std::uint64_t totals[4] = {0, 0, 0, 0};  // indexed by FlopCategory
  std::uint64_t total = 0;                 // measured
  std::uint64_t analytic_total = 0;        // sum of closed-form attention estimates

  std::uint64_t category(FlopCategory c) const { return totals[static_cast<int>(c)]; }
};

inline FlopReport make_report(const FlopCounter& counter) {
  FlopReport r;
  r.entries = counter.entries();
  for (const auto& e : r.entries) {
    for (int c = 0; c < 4; ++c) r.totals[c] += e.by_category[c];
    r.analytic_total += e.analytic.value_or(0);
  }
  for (auto t : r.totals) r.total += t;
  return r;
}

// Traces an eval-mode forward of a model built from `cfg` on an input of
// shape (B, C, T, H, W). No numeric work is done.
inline FlopReport model_flops(const ModelConfig& cfg, const Shape& input_shape) {
  if (input_shape.size() != 5) throw ShapeError("model_flops: input shape must be (B,C,T,H,W)");
  auto model = VistaFormer<float>::build(cfg, 0);
  FlopCounter counter;
  {
    FlopScope scope(counter);
    NoGradGuard no_grad;
    (void)model.forward(Tensor<float>::meta(input_shape));
  }
  return make_report(counter);
}

// Formats a report as an aligned text table, one line per layer.
inline std::string format_report(const FlopReport& r) {
  std::ostringstream os;
  os << "layer,attention,conv,linear,other,measured,analytic,memory\n";
  for (const auto& e : r.entries) {
    os << e.layer;
    for (auto v : e.by_category) os << ',' << v;
    os << ',' << e.measured() << ',' << (e.analytic ? std::to_string(*e.analytic) : "") << ','
       << (e.memory ? std::to_string(*e.memory) : "") << '\n';
  }
  os << "total," << r.totals[0] << ',' << r.totals[1] << ',' << r.totals[2] << ',' << r.totals[3] << ',' << r.total
     << ',' << r.analytic_total << ",\n";
  return os.str();
}

enum class SweepAxis { Spatial, Temporal };

struct ScalingRow {
  std::string variant;
  Index B, C, T, H, W;
  std::uint64_t total_flops;    // measured
  std::uint64_t attn_flops;     // closed-form attention cost over all layers and (B, T) slices
  std::uint64_t measured_attn;  // attention category of the traced graph
};

struct NamedConfig {
  std::string name;
  ModelConfig cfg;
};

// One row per value per variant. attn_flops is the closed-form attention
// cost: for neighbourhood attention the traced graph also includes the
// kernel padding of grids smaller than the window, which is not a property of
// the attention mechanism itself and would mask its asymptotic behaviour.
// Spatial sweeps set H = W = value; temporal sweeps set T = value (and
// max_seq_len to it, since the model pads shorter sequences up to it).
inline std::vector<ScalingRow> scaling_report(const std::vector<NamedConfig>& variants, SweepAxis axis,
                                              const std::vector<Index>& values, const Shape& base) {
  std::vector<ScalingRow> rows;
  for (const auto& v : variants) {
    for (Index x : values) {
      Shape s = base;
      ModelConfig cfg = v.cfg;
      if (axis == SweepAxis::Spatial) {
        s[3] = s[4] = x;
      } else {
        s[2] = x;
      }
      cfg.max_seq_len = s[2];
      cfg.in_channels = s[1];
      const FlopReport r = model_flops(cfg, s);
      rows.push_back(
          {v.name, s[0], s[1], s[2], s[3], s[4], r.total, r.analytic_total, r.category(FlopCategory::Attention)});
    }
  }
  return rows;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need two or more paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

inline std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::ostringstream os;
  os << "variant,B,C,T,H,W,total_flops,attn_flops\n";
  for (const auto& r : rows)
    os << r.variant << ',' << r.B << ',' << r.C << ',' << r.T << ',' << r.H << ',' << r.W << ',' << r.total_flops
       << ',' << r.attn_flops << '\n';
  return os.str();
}

}  // namespace vf
