#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "vistaformer/train.hpp"

using namespace vf;
using Catch::Approx;

namespace {

ModelConfig micro_config() {
  ModelConfig m;
  m.in_channels = 3;
  m.num_classes = 4;
  m.max_seq_len = 4;
  m.stages = {{8, {1, 2, 2}, {1, 2, 2}, 1, 1, 2}, {16, {2, 2, 2}, {2, 2, 2}, 1, 2, 2}, {32, {2, 2, 2}, {2, 2, 2}, 1, 4, 2}};
  return m;
}

std::vector<SitsChip> micro_chips(Index n, std::uint64_t seed) {
  GeneratorSpec g;
  g.n_samples = n;
  g.num_classes = 4;
  g.channels = 3;
  g.T = 4;
  g.H = 8;
  g.W = 8;
  g.seed = seed;
  return generate_chips(g);
}

std::vector<const SitsChip*> ptrs(const std::vector<SitsChip>& v) {
  std::vector<const SitsChip*> out;
  for (const auto& c : v) out.push_back(&c);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// AdamW

TEST_CASE("adamw: zero grads and zero decay leave params unchanged", "[train][adamw]") {
  auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5});
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.add("p", p, true);
  const std::vector<double> g(3, 0.0);
  for (int i = 0; i < 5; ++i) opt.step({std::span<const double>(g)}, 1e-2);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);
}

TEST_CASE("adamw: zero grads with decay shrink by lr*decay per step", "[train][adamw]") {
  auto p = Tensor<double>::from({2}, {1.0, -4.0});
  auto b = Tensor<double>::from({1}, {3.0});
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
  opt.add("w", p, true);
  opt.add("b", b, false);
  const std::vector<double> g2(2, 0.0), g1(1, 0.0);
  const double lr = 0.05;
  for (int i = 0; i < 3; ++i) opt.step({std::span<const double>(g2), std::span<const double>(g1)}, lr);
  const double f = std::pow(1 - lr * 0.1, 3);
  CHECK(p.data()[0] == Approx(f).epsilon(1e-15));
  CHECK(p.data()[1] == Approx(-4 * f).epsilon(1e-15));
  CHECK(b.data()[0] == 3.0);  // biases do not decay
}

TEST_CASE("adamw: matches a scalar simulation on x^2", "[train][adamw]") {
  auto x = Tensor<double>::from({1}, {3.0});
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.add("x", x, true);
  // independent scalar oracle of the bias-corrected Adam update
  double ox = 3.0, m = 0, v = 0;
  double prev = std::abs(ox);
  for (int t = 1; t <= 100; ++t) {
    const double g = 2 * x.data()[0];
    opt.step({std::span<const double>(&g, 1)}, 0.01);
    const double og = 2 * ox;
    m = 0.9 * m + 0.1 * og;
    v = 0.999 * v + 0.001 * og * og;
    ox -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(x.data()[0] == Approx(ox).epsilon(1e-12));
    if (t > 5) {
      CHECK(std::abs(x.data()[0]) < prev);
    }
    prev = std::abs(x.data()[0]);
  }
}

TEST_CASE("adamw: decay 0 equals plain Adam bit for bit", "[train][adamw]") {
  auto a = Tensor<float>::from({4}, {0.1f, -0.2f, 0.3f, 5.0f});
  auto b = Tensor<float>::from({4}, {0.1f, -0.2f, 0.3f, 5.0f});
  AdamW<float> decayed(0.9, 0.999, 1e-8, 0.0), plain(0.9, 0.999, 1e-8, 0.0);
  decayed.add("a", a, true);
  plain.add("b", b, false);
  std::mt19937 rng(1);
  std::normal_distribution<float> n;
  for (int i = 0; i < 20; ++i) {
    std::vector<float> g(4);
    for (auto& x : g) x = n(rng);
    decayed.step({std::span<const float>(g)}, 1e-3);
    plain.step({std::span<const float>(g)}, 1e-3);
  }
  for (int i = 0; i < 4; ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("adamw: shape mismatch is a contract error", "[train][adamw]") {
  auto p = Tensor<double>::from({2}, {1.0, 2.0});
  AdamW<double> opt;
  opt.add("p", p, true);
  const std::vector<double> g(3, 0.0);
  CHECK_THROWS_AS(opt.step({std::span<const double>(g)}, 1e-3), ContractError);
  CHECK_THROWS_AS(opt.step(std::vector<std::span<const double>>{}, 1e-3), ContractError);
}

// ---------------------------------------------------------------------------
// Schedule

TEST_CASE("one_cycle_lr anchors", "[train][lr]") {
  LrSchedule s;
  s.total_steps = 1000;
  CHECK(one_cycle_lr(0, s) == Approx(0.0004).epsilon(1e-12));
  CHECK(one_cycle_lr(100, s) == Approx(0.01).epsilon(1e-12));
  CHECK(one_cycle_lr(999, s) == Approx(0.001).epsilon(1e-12));
  // continuity across the warm boundary
  s.total_steps = 1000;
  const double warm = 100;
  auto f = [&](double x) {
    // evaluate with a fractional total to probe either side of the boundary
    LrSchedule t = s;
    t.total_steps = 1000000;
    return one_cycle_lr(static_cast<std::int64_t>(x * 1000), t);
  };
  CHECK(std::abs(f(warm) - f(warm + 0.001)) < 1e-6);
  // ramp increasing, anneal decreasing
  for (std::int64_t i = 1; i <= 100; ++i) CHECK(one_cycle_lr(i, s) >= one_cycle_lr(i - 1, s));
  for (std::int64_t i = 101; i < 1000; ++i) CHECK(one_cycle_lr(i, s) <= one_cycle_lr(i - 1, s));
}

TEST_CASE("one_cycle_lr is continuous at the warm boundary", "[train][lr]") {
  LrSchedule s;
  s.total_steps = 1000000000;
  const std::int64_t w = 100000000;
  CHECK(std::abs(one_cycle_lr(w, s) - one_cycle_lr(w + 1, s)) < 1e-9);
  CHECK(std::abs(one_cycle_lr(w - 1, s) - one_cycle_lr(w, s)) < 1e-9);
}

// ---------------------------------------------------------------------------
// Loss

TEST_CASE("cross_entropy: uniform logits give ln K", "[train][loss]") {
  const Index K = 6;
  auto logits = Tensor<double>::zeros({2, K, 3, 3});
  const std::vector<std::uint8_t> labels(18, 2);
  const auto r = cross_entropy_masked(logits, labels);
  CHECK(r.loss.item() == Approx(std::log(6.0)).epsilon(1e-14));
  CHECK(r.scored == 18);
  CHECK_FALSE(r.all_ignored);
}

TEST_CASE("cross_entropy: confident correct logits give ~0", "[train][loss]") {
  auto logits = Tensor<double>::zeros({1, 3, 2, 2});
  const std::vector<std::uint8_t> labels = {0, 1, 2, 1};
  auto d = logits.mutable_data();
  for (Index p = 0; p < 4; ++p) d[labels[p] * 4 + p] = 50.0;
  CHECK(cross_entropy_masked(logits, labels).loss.item() < 1e-20);
}

TEST_CASE("cross_entropy: ignored pixels get exactly zero gradient", "[train][loss]") {
  std::mt19937 rng(3);
  std::normal_distribution<double> n;
  Buffer<double> v(2 * 4 * 3 * 3);
  for (auto& x : v) x = n(rng);
  auto logits = Tensor<double>::from({2, 4, 3, 3}, v);
  logits.set_requires_grad(true);
  std::vector<std::uint8_t> labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(i % 4);
  auto r = cross_entropy_masked(logits, labels);
  backward(r.loss);
  const auto& g = logits.grad();
  for (Index b = 0; b < 2; ++b)
    for (Index p = 0; p < 9; ++p) {
      const bool ignored = labels[b * 9 + p] == kIgnoreLabel;
      for (Index k = 0; k < 4; ++k) {
        const double gi = g[(b * 4 + k) * 9 + p];
        if (ignored) {
          CHECK(gi == 0.0);
        }
        // finite-difference oracle on every coordinate
        const double h = 1e-6;
        auto bump = [&](double delta) {
          Buffer<double> w = v;
          w[(b * 4 + k) * 9 + p] += delta;
          return cross_entropy_masked(Tensor<double>::from({2, 4, 3, 3}, w), labels).loss.item();
        };
        const double fd = (bump(h) - bump(-h)) / (2 * h);
        CHECK(gi == Approx(fd).margin(1e-8));
      }
    }
}

TEST_CASE("cross_entropy: all ignored is flagged with zero loss and gradient", "[train][loss]") {
  auto logits = Tensor<double>::ones({1, 3, 2, 2});
  logits.set_requires_grad(true);
  const std::vector<std::uint8_t> labels(4, kIgnoreLabel);
  auto r = cross_entropy_masked(logits, labels);
  CHECK(r.all_ignored);
  CHECK(r.scored == 0);
  CHECK(r.loss.item() == 0.0);
  backward(r.loss);
  for (double g : logits.grad()) CHECK(g == 0.0);
}

TEST_CASE("cross_entropy: class weights and errors", "[train][loss]") {
  auto logits = Tensor<double>::zeros({1, 2, 1, 2});
  auto d = logits.mutable_data();
  d[0] = 1.0;  // pixel 0 favours class 0
  const std::vector<std::uint8_t> labels = {0, 1};
  const double l0 = std::log(1 + std::exp(-1.0)), l1 = std::log(2.0);
  CHECK(cross_entropy_masked(logits, labels).loss.item() == Approx((l0 + l1) / 2));
  CHECK(cross_entropy_masked(logits, labels, kIgnoreLabel, {3.0, 1.0}).loss.item() == Approx((3 * l0 + l1) / 4));
  CHECK_THROWS_AS(cross_entropy_masked(logits, std::vector<std::uint8_t>{0}), ShapeError);
  CHECK_THROWS_AS(cross_entropy_masked(logits, std::vector<std::uint8_t>{0, 2}), ContractError);
}

// ---------------------------------------------------------------------------
// Metrics

TEST_CASE("confusion: perfect match, all ignored, loop oracle", "[train][metrics]") {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> y = {0, 1, 2, 2, 1};
  cm.update(y, y);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j)
      if (i != j) CHECK(cm.at(i, j) == 0);
  CHECK(cm.total() == 5);

  ConfusionMatrix e(3);
  e.update(y, std::vector<std::uint8_t>(5, kIgnoreLabel));
  CHECK(e.total() == 0);

  std::mt19937 rng(9);
  std::uniform_int_distribution<int> u(0, 3);
  std::vector<std::uint8_t> pred(64), truth(64);
  for (int i = 0; i < 64; ++i) {
    pred[i] = static_cast<std::uint8_t>(u(rng) % 3);
    const int t = u(rng);
    truth[i] = t == 3 ? kIgnoreLabel : static_cast<std::uint8_t>(t);
  }
  ConfusionMatrix r(3);
  r.update(pred, truth);
  std::uint64_t oracle[3][3] = {};
  std::uint64_t scored = 0;
  for (int i = 0; i < 64; ++i)
    if (truth[i] != kIgnoreLabel) {
      ++oracle[truth[i]][pred[i]];
      ++scored;
    }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r.at(i, j) == oracle[i][j]);
  CHECK(r.total() == scored);
}

TEST_CASE("metrics: hand-computed examples", "[train][metrics]") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 1;
  cm.at(1, 1) = 3;
  const auto m = compute_metrics(cm);
  CHECK(m.iou[0].value() == Approx(0.6));
  CHECK(m.iou[1].value() == Approx(0.6));
  CHECK(m.mIoU == Approx(0.6));
  CHECK(m.oA == Approx(0.75));

  ConfusionMatrix p(3);
  p.at(0, 0) = 4;
  p.at(2, 2) = 7;
  const auto pm = compute_metrics(p);
  CHECK(pm.oA == 1.0);
  CHECK(pm.mIoU == 1.0);
  CHECK_FALSE(pm.iou[1].has_value());  // absent class excluded
}

TEST_CASE("metrics stay in [0,1] and IoU is bounded by recall and precision", "[train][metrics]") {
  std::mt19937 rng(4);
  std::uniform_int_distribution<int> u(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix cm(4);
    for (auto& c : cm.counts) c = static_cast<std::uint64_t>(u(rng));
    const auto m = compute_metrics(cm);
    CHECK(m.oA >= 0);
    CHECK(m.oA <= 1);
    CHECK(m.mIoU >= 0);
    CHECK(m.mIoU <= 1);
    for (Index k = 0; k < 4; ++k) {
      if (!m.iou[k]) continue;
      std::uint64_t row = 0, col = 0;
      for (Index j = 0; j < 4; ++j) {
        row += cm.at(k, j);
        col += cm.at(j, k);
      }
      if (row) CHECK(*m.iou[k] <= static_cast<double>(cm.at(k, k)) / row + 1e-15);
      if (col) CHECK(*m.iou[k] <= static_cast<double>(cm.at(k, k)) / col + 1e-15);
    }
  }
}

TEST_CASE("confusion matrices merge by summation", "[train][metrics]") {
  ConfusionMatrix a(2), b(2), all(2);
  const std::vector<std::uint8_t> p1 = {0, 1, 1}, t1 = {0, 0, 1}, p2 = {1, 0}, t2 = {1, 1};
  a.update(p1, t1);
  b.update(p2, t2);
  std::vector<std::uint8_t> p = p1, t = t1;
  p.insert(p.end(), p2.begin(), p2.end());
  t.insert(t.end(), t2.begin(), t2.end());
  all.update(p, t);
  ConfusionMatrix ab = a, ba = b;
  ab += b;
  ba += a;
  CHECK(ab.counts == all.counts);
  CHECK(ba.counts == all.counts);
}

// ---------------------------------------------------------------------------
// Evaluate / train loop

TEST_CASE("evaluate: constant-class model gives that class's pixel frequency", "[train][eval]") {
  auto model = VistaFormer<float>::build(micro_config(), 3);
  // zero the head and put a bias on class 2
  for (auto& [name, t] : model.named_parameters())
    if (name.rfind("head.", 0) == 0) {
      auto d = t.mutable_data();
      std::fill(d.begin(), d.end(), 0.0f);
      if (name == "head.bias") d[2] = 1.0f;
    }
  const auto chips = micro_chips(5, 2);
  const auto r = evaluate(model, ptrs(chips), EvalOptions{2, true, 0}, true);
  double n2 = 0, n = 0;
  for (const auto& c : chips)
    for (auto l : c.labels) {
      n2 += l == 2;
      n += 1;
    }
  CHECK(r.metrics.oA == Approx(n2 / n).epsilon(1e-12));
  REQUIRE(r.predictions.size() == chips.size());
  for (const auto& p : r.predictions)
    for (auto v : p) CHECK(v == 2);

  const auto again = evaluate(model, ptrs(chips), EvalOptions{3, true, 0});
  CHECK(again.cm.counts == r.cm.counts);
  CHECK_THROWS_AS(evaluate(model, {}, EvalOptions{}), ConfigError);
}

TEST_CASE("evaluate: background exclusion drops class-0 pixels", "[train][eval]") {
  auto model = VistaFormer<float>::build(micro_config(), 3);
  const auto chips = micro_chips(3, 5);
  const auto with = evaluate(model, ptrs(chips), EvalOptions{4, true, 0});
  const auto without = evaluate(model, ptrs(chips), EvalOptions{4, false, 0});
  std::uint64_t bg = 0;
  for (const auto& c : chips)
    for (auto l : c.labels) bg += l == 0;
  CHECK(with.cm.total() - without.cm.total() == bg);
  for (Index j = 0; j < 4; ++j) CHECK(without.cm.at(0, j) == 0);
}

TEST_CASE("train_loop: deterministic under seed, empty splits rejected", "[train][loop]") {
  const auto chips = micro_chips(6, 1);
  const auto all = ptrs(chips);
  const std::vector<const SitsChip*> tr(all.begin(), all.begin() + 4), va(all.begin() + 4, all.end());
  TrainSettings ts;
  ts.batch_size = 2;
  ts.epochs = 2;
  ts.seed = 17;
  auto run = [&] {
    auto m = VistaFormer<float>::build(micro_config(), 1);
    auto h = train_loop(m, tr, va, ts).history;
    return std::make_pair(history_csv(h), m.named_parameters()[0].second.data()[0]);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first.rfind("epoch,train_loss,val_oA,val_mIoU,lr\n", 0) == 0);

  auto m = VistaFormer<float>::build(micro_config(), 1);
  CHECK_THROWS_AS(train_loop(m, {}, va, ts), ConfigError);
  CHECK_THROWS_AS(train_loop(m, tr, {}, ts), ConfigError);
}

TEST_CASE("train_loop: zero epochs leaves the initial weights", "[train][loop]") {
  const auto chips = micro_chips(3, 1);
  const auto all = ptrs(chips);
  TrainSettings ts;
  ts.epochs = 0;
  auto m = VistaFormer<float>::build(micro_config(), 4);
  const auto ref = VistaFormer<float>::build(micro_config(), 4);
  CHECK(train_loop(m, all, all, ts).history.empty());
  auto a = m.named_parameters();
  auto b = const_cast<VistaFormer<float>&>(ref).named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.data()[0] == b[i].second.data()[0]);
}

TEST_CASE("train_loop: loss decreases on a tiny set", "[train][loop]") {
  const auto chips = micro_chips(4, 8);
  const auto all = ptrs(chips);
  TrainSettings ts;
  ts.batch_size = 4;
  ts.epochs = 15;
  ts.augment = false;
  ts.seed = 2;
  auto m = VistaFormer<float>::build(micro_config(), 6);
  const auto h = train_loop(m, all, all, ts).history;
  CHECK(h.back().train_loss < h.front().train_loss * 0.8);
  CHECK(h.back().lr == Approx(ts.lr_final));
}
