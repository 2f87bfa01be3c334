#pragma once
// Optimisation and evaluation: AdamW, one-cycle learning rate, masked
// cross-entropy, confusion-matrix metrics, and the train / evaluate loops.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "model.hpp"
#include "sits.hpp"

namespace vf {

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay

template <class S>
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor<S> param;
    bool decays = true;
    Buffer<S> m, v;
  };

  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void add(const std::string& name, Tensor<S> p, bool decays) {
    p.set_requires_grad(true);
    Slot s{name, p, decays, Buffer<S>(p.data().size(), S(0)), Buffer<S>(p.data().size(), S(0))};
    slots_.push_back(std::move(s));
  }

  // Registers every parameter of a model; decay follows the visitor's flag
  // (weights decay, biases and norm parameters do not).
  void add_model(VistaFormer<S>& model) {
    model.visit_parameters([&](const std::string& n, Tensor<S>& t, bool decays) { add(n, t, decays); });
  }

  // One update from explicit gradients, aligned with the registered slots.
  void step(const std::vector<std::span<const S>>& grads, double lr) {
    if (grads.size() != slots_.size())
      throw ContractError("adamw: " + std::to_string(grads.size()) + " gradients for " + std::to_string(slots_.size()) +
                          " parameters");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      auto& s = slots_[i];
      auto p = s.param.mutable_data();
      const auto& g = grads[i];
      if (g.size() != p.size())
        throw ContractError("adamw: gradient for '" + s.name + "' has " + std::to_string(g.size()) + " elements, parameter has " +
                            std::to_string(p.size()));
      const S decay = static_cast<S>(1.0 - lr * wd_);
      const bool apply_decay = s.decays && wd_ != 0.0;
      const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
      const S step_size = static_cast<S>(lr / bc1);
      const S inv_bc2_sqrt = static_cast<S>(1.0 / std::sqrt(bc2));
      const S eps = static_cast<S>(eps_);
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (apply_decay) p[j] *= decay;
        s.m[j] = b1 * s.m[j] + (S(1) - b1) * g[j];
        s.v[j] = b2 * s.v[j] + (S(1) - b2) * g[j] * g[j];
        p[j] -= step_size * s.m[j] / (std::sqrt(s.v[j]) * inv_bc2_sqrt + eps);
      }
    }
  }

  // One update using the gradients accumulated on the parameters; tensors
  // without a gradient are treated as having zero gradient.
  void step(double lr) {
    std::vector<Buffer<S>> zeros;
    std::vector<std::span<const S>> grads;
    zeros.reserve(slots_.size());
    for (auto& s : slots_) {
      if (s.param.has_grad()) {
        grads.push_back(s.param.grad());
      } else {
        zeros.emplace_back(s.param.data().size(), S(0));
        grads.emplace_back(zeros.back());
      }
    }
    step(grads, lr);
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  std::uint64_t steps() const { return t_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::uint64_t t_ = 0;
  std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// One-cycle schedule: cosine ramp lr_start -> lr_max over the first
// warm_fraction of steps, cosine anneal lr_max -> lr_final ending at the last step.

struct LrSchedule {
  std::int64_t total_steps = 1;
  double warm_fraction = 0.1;
  double lr_start = 4e-4;
  double lr_max = 1e-2;
  double lr_final = 1e-3;
};

inline double one_cycle_lr(std::int64_t step, const LrSchedule& s) {
  if (s.total_steps < 1) throw ContractError("one_cycle_lr: total_steps must be >= 1");
  const double warm = s.warm_fraction * static_cast<double>(s.total_steps);
  const double last = static_cast<double>(s.total_steps - 1);
  const double x = static_cast<double>(std::clamp<std::int64_t>(step, 0, s.total_steps - 1));
  if (x <= warm && warm > 0) {
    const double f = (1.0 - std::cos(std::numbers::pi * x / warm)) / 2.0;
    return s.lr_start + (s.lr_max - s.lr_start) * f;
  }
  if (last <= warm) return s.lr_max;
  const double f = (1.0 + std::cos(std::numbers::pi * (x - warm) / (last - warm))) / 2.0;
  return s.lr_final + (s.lr_max - s.lr_final) * f;
}

// ---------------------------------------------------------------------------
// Masked cross-entropy

template <class S>
struct CrossEntropyResult {
  Tensor<S> loss;
  Index scored = 0;
  bool all_ignored = false;
};

// Mean of -log softmax(logits)[label] over pixels whose label is not
// `ignore`; with class weights the mean is weighted by w[label]. logits are
// (B, K, H, W) and labels hold B*H*W entries.
template <class S>
CrossEntropyResult<S> cross_entropy_masked(const Tensor<S>& logits, const std::vector<std::uint8_t>& labels,
                                           std::uint8_t ignore = kIgnoreLabel,
                                           const std::vector<double>& class_weights = {}) {
  if (logits.ndim() != 4) throw ShapeError("cross_entropy: logits must be (B,K,H,W), got " + shape_str(logits.shape()));
  const Index B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  if (labels.size() != static_cast<std::size_t>(B * HW))
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(K))
    throw ShapeError("cross_entropy: class weight vector must have K entries");
  for (auto l : labels)
    if (l != ignore && l >= K)
      throw ContractError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(K - 1) + "]");

  auto probs = std::make_shared<Buffer<S>>(static_cast<std::size_t>(B * K * HW));
  double total = 0, wsum = 0;
  Index scored = 0;
  const auto& x = logits.data();
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < HW; ++p) {
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < K; ++k) mx = std::max(mx, x[(b * K + k) * HW + p]);
      double z = 0;
      for (Index k = 0; k < K; ++k) z += std::exp(static_cast<double>(x[(b * K + k) * HW + p] - mx));
      for (Index k = 0; k < K; ++k)
        (*probs)[(b * K + k) * HW + p] = static_cast<S>(std::exp(static_cast<double>(x[(b * K + k) * HW + p] - mx)) / z);
      const auto l = labels[b * HW + p];
      if (l == ignore) continue;
      const double w = class_weights.empty() ? 1.0 : class_weights[l];
      total += w * -(static_cast<double>(x[(b * K + l) * HW + p] - mx) - std::log(z));
      wsum += w;
      ++scored;
    }
  CrossEntropyResult<S> r;
  r.scored = scored;
  r.all_ignored = scored == 0 || wsum == 0;
  const double value = r.all_ignored ? 0.0 : total / wsum;
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(B * K * HW) * OtherRates::softmax);
  r.loss = detail::make_result<S>({}, Buffer<S>{static_cast<S>(value)}, false, {&logits},
                                  [logits, probs, labels, ignore, class_weights, wsum, B, K, HW](Node<S>& self) {
                                    if (wsum == 0) return;
                                    auto& g = detail::grad_of(logits);
                                    const S up = self.grad[0];
                                    for (Index b = 0; b < B; ++b)
                                      for (Index p = 0; p < HW; ++p) {
                                        const auto l = labels[b * HW + p];
                                        if (l == ignore) continue;
                                        const double w = class_weights.empty() ? 1.0 : class_weights[l];
                                        const S scale = static_cast<S>(w / wsum) * up;
                                        for (Index k = 0; k < K; ++k) {
                                          const std::size_t i = static_cast<std::size_t>((b * K + k) * HW + p);
                                          g[i] += scale * ((*probs)[i] - (k == l ? S(1) : S(0)));
                                        }
                                      }
                                  });
  return r;
}

// ---------------------------------------------------------------------------
// Confusion matrix and metrics

struct ConfusionMatrix {
  Index K = 0;
  std::vector<std::uint64_t> counts;  // row = true class, col = predicted

  explicit ConfusionMatrix(Index k = 0) : K(k), counts(static_cast<std::size_t>(k * k), 0) {}
  std::uint64_t& at(Index t, Index p) { return counts[t * K + p]; }
  std::uint64_t at(Index t, Index p) const { return counts[t * K + p]; }
  std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

  void update(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
              std::uint8_t ignore = kIgnoreLabel) {
    if (pred.size() != truth.size()) throw ShapeError("confusion: prediction and label counts differ");
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == ignore) continue;
      if (truth[i] >= K || pred[i] >= K) throw ContractError("confusion: class index out of range");
      ++at(truth[i], pred[i]);
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.K != K) throw ShapeError("confusion: merging matrices of different size");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

struct Metrics {
  double oA = 0.0;
  double mIoU = 0.0;
  std::vector<std::optional<double>> iou;  // nullopt for zero-union classes
};

inline Metrics compute_metrics(const ConfusionMatrix& cm) {
  Metrics m;
  std::uint64_t diag = 0, total = 0;
  double iou_sum = 0;
  int iou_n = 0;
  for (Index k = 0; k < cm.K; ++k) {
    std::uint64_t row = 0, col = 0;
    for (Index j = 0; j < cm.K; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::uint64_t tp = cm.at(k, k);
    diag += tp;
    total += row;
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) {
      m.iou.emplace_back();
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(uni);
    m.iou.emplace_back(v);
    iou_sum += v;
    ++iou_n;
  }
  m.oA = total ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
  m.mIoU = iou_n ? iou_sum / iou_n : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Batching

template <class S>
struct Batch {
  Tensor<S> input;                  // (B, C, T, H, W)
  std::vector<std::uint8_t> labels;  // B*H*W
};

template <class S>
Batch<S> make_batch(const std::vector<const SitsChip*>& chips) {
  if (chips.empty()) throw ContractError("make_batch: empty batch");
  const auto& f = *chips[0];
  Buffer<S> in;
  in.reserve(static_cast<std::size_t>(chips.size()) * f.input.size());
  Batch<S> b;
  for (const auto* c : chips) {
    if (c->C != f.C || c->T != f.T || c->H != f.H || c->W != f.W)
      throw ShapeError("make_batch: chip '" + c->sample_id + "' dims differ from '" + f.sample_id + "'");
    for (float v : c->input) in.push_back(static_cast<S>(v));
    b.labels.insert(b.labels.end(), c->labels.begin(), c->labels.end());
  }
  b.input = Tensor<S>::from({static_cast<Index>(chips.size()), f.C, f.T, f.H, f.W}, std::move(in));
  return b;
}

// Labels excluded from loss and metrics: the ignore sentinel always, the
// background class too when it is not scored.
inline std::vector<std::uint8_t> scored_labels(std::vector<std::uint8_t> labels, bool include_background,
                                               Index background_class) {
  if (!include_background)
    for (auto& l : labels)
      if (l == background_class) l = kIgnoreLabel;
  return labels;
}

template <class S>
std::vector<std::uint8_t> argmax_classes(const Tensor<S>& logits) {
  const Index B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(B * HW));
  const auto& x = logits.data();
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < HW; ++p) {
      Index best = 0;
      for (Index k = 1; k < K; ++k)
        if (x[(b * K + k) * HW + p] > x[(b * K + best) * HW + p]) best = k;
      out[b * HW + p] = static_cast<std::uint8_t>(best);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  Index batch_size = 8;
  bool include_background = true;
  Index background_class = 0;
};

struct EvalResult {
  ConfusionMatrix cm;
  Metrics metrics;
  std::vector<std::vector<std::uint8_t>> predictions;  // per chip, when requested
};

// Eval-mode pass over already-normalised chips in fixed-size batches.
template <class S>
EvalResult evaluate(const VistaFormer<S>& model, const std::vector<const SitsChip*>& chips, const EvalOptions& opt,
                    bool keep_predictions = false) {
  if (chips.empty()) throw ConfigError("evaluate: split is empty");
  NoGradGuard no_grad;
  EvalResult r{ConfusionMatrix(model.config().num_classes), {}, {}};
  for (std::size_t i = 0; i < chips.size(); i += static_cast<std::size_t>(opt.batch_size)) {
    const std::size_t e = std::min(chips.size(), i + static_cast<std::size_t>(opt.batch_size));
    const std::vector<const SitsChip*> part(chips.begin() + static_cast<std::ptrdiff_t>(i),
                                            chips.begin() + static_cast<std::ptrdiff_t>(e));
    const Batch<S> b = make_batch<S>(part);
    const auto pred = argmax_classes(model.forward(b.input));
    r.cm.update(pred, scored_labels(b.labels, opt.include_background, opt.background_class));
    if (keep_predictions) {
      const std::size_t hw = part[0]->labels.size();
      for (std::size_t j = 0; j < part.size(); ++j)
        r.predictions.emplace_back(pred.begin() + static_cast<std::ptrdiff_t>(j * hw),
                                   pred.begin() + static_cast<std::ptrdiff_t>((j + 1) * hw));
    }
  }
  r.metrics = compute_metrics(r.cm);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRow {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_oA = 0.0;
  double val_mIoU = 0.0;
  double lr = 0.0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "epoch,train_loss,val_oA,val_mIoU,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.epoch), r.train_loss, r.val_oA,
                  r.val_mIoU, r.lr);
    os << buf;
  }
  return os.str();
}

inline EvalOptions eval_options(const TrainSettings& t) {
  return {t.batch_size, t.include_background, t.background_class};
}

// Generator settings implied by a run config: the model's channels, classes
// and sequence length, the data section's image size and split sizes, and
// the run seed.
inline GeneratorSpec generator_spec(const RunConfig& c) {
  GeneratorSpec g;
  g.num_classes = c.model.num_classes;
  g.channels = c.model.in_channels;
  g.T = c.model.max_seq_len;
  g.H = c.data.image_height;
  g.W = c.data.image_width;
  g.cloud_prob = c.data.cloud_prob;
  g.background_fraction = c.data.background_fraction;
  g.class_skew = c.data.class_skew;
  g.seed = c.train.seed;
  g.n_samples = c.data.n_train + c.data.n_val + c.data.n_test;
  return g;
}

// Chips of one split, normalised with the dataset's train statistics.
inline std::vector<SitsChip> normalized_split(const Dataset& d, Split s) {
  std::vector<SitsChip> out;
  for (const auto* c : d.split(s)) out.push_back(normalize(*c, d.manifest.stats));
  return out;
}

inline std::vector<const SitsChip*> chip_ptrs(const std::vector<SitsChip>& v) {
  std::vector<const SitsChip*> p;
  p.reserve(v.size());
  for (const auto& c : v) p.push_back(&c);
  return p;
}

struct TrainResult {
  std::vector<HistoryRow> history;
};

// Trains on the normalised train chips, evaluating on val after every epoch.
// Deterministic given settings.seed. `on_epoch` is called after each row.
template <class S>
TrainResult train_loop(VistaFormer<S>& model, const std::vector<const SitsChip*>& train,
                       const std::vector<const SitsChip*>& val, const TrainSettings& ts,
                       const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  if (train.empty()) throw ConfigError("train: train split is empty");
  if (ts.epochs > 0 && val.empty()) throw ConfigError("train: val split is empty");
  TrainResult res;
  if (ts.epochs == 0) return res;
  AdamW<S> opt(ts.beta1, ts.beta2, ts.adam_eps, ts.weight_decay);
  opt.add_model(model);
  const std::int64_t per_epoch =
      (static_cast<std::int64_t>(train.size()) + ts.batch_size - 1) / static_cast<std::int64_t>(ts.batch_size);
  const LrSchedule sched{per_epoch * ts.epochs, ts.warm_fraction, ts.lr_start, ts.lr_max, ts.lr_final};
  Rng rng(ts.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  double lr = ts.lr_start;
  for (Index epoch = 1; epoch <= ts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::int64_t nb = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(ts.batch_size)) {
      const std::size_t e = std::min(order.size(), i + static_cast<std::size_t>(ts.batch_size));
      std::vector<SitsChip> aug;
      aug.reserve(e - i);
      for (std::size_t j = i; j < e; ++j)
        aug.push_back(ts.augment ? augment(*train[order[j]], rng()) : *train[order[j]]);
      std::vector<const SitsChip*> ptrs;
      for (const auto& c : aug) ptrs.push_back(&c);
      const Batch<S> b = make_batch<S>(ptrs);
      ForwardContext<S> ctx{true, &rng};
      const Tensor<S> logits = model.forward(b.input, ctx);
      const auto ce = cross_entropy_masked(logits, scored_labels(b.labels, ts.include_background, ts.background_class));
      lr = one_cycle_lr(step, sched);
      if (!ce.all_ignored) {
        backward(ce.loss);
        opt.step(lr);
      }
      opt.zero_grad();
      loss_sum += static_cast<double>(ce.loss.item());
      ++nb;
      ++step;
    }
    const EvalResult ev = evaluate(model, val, eval_options(ts));
    HistoryRow row{epoch, loss_sum / static_cast<double>(nb), ev.metrics.oA, ev.metrics.mIoU, lr};
    res.history.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return res;
}

}  // namespace vf
