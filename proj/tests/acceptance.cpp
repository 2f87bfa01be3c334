// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset. Exit status is 0 when every criterion run passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vistaformer/vistaformer.hpp"

#ifndef VF_CONFIG_DIR
#error "VF_CONFIG_DIR must point at the bundled configs"
#endif

using namespace vf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string cfg_path(const char* name) { return std::string(VF_CONFIG_DIR) + "/" + name; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool within(double v, double ref, double rel) { return std::abs(v - ref) <= rel * ref; }

std::uint64_t param_total(const ModelConfig& m) { return VistaFormer<float>::build(m, 0).count_parameters().total; }

ModelConfig as_na(ModelConfig m) {
  m.attention = AttentionKind::Neighbourhood;
  m.na_kernel = 13;
  return m;
}

// ---------------------------------------------------------------------------

Outcome c1() {
  const auto rc = RunConfig::load(cfg_path("paper_pastis.cfg"));
  const double mh = static_cast<double>(param_total(rc.model)), na = static_cast<double>(param_total(as_na(rc.model)));
  return {within(mh, 1.25e6, 0.15) && within(na, 1.13e6, 0.15),
          "MHSA " + fmt("%.0f", mh) + " (ref 1.25M, " + fmt("%+.1f%%", 100 * (mh / 1.25e6 - 1)) + "), NA(13) " +
              fmt("%.0f", na) + " (ref 1.13M, " + fmt("%+.1f%%", 100 * (na / 1.13e6 - 1)) + ")"};
}

Outcome c2() {
  auto rc = RunConfig::load(cfg_path("paper_pastis.cfg"));
  const double t60 = static_cast<double>(param_total(rc.model));
  rc.model.max_seq_len = 46;
  const double t46 = static_cast<double>(param_total(rc.model));
  const double red = 1 - t46 / t60;
  return {red >= 0.08 && red <= 0.18,
          "T 60->46: " + fmt("%.0f", t60) + " -> " + fmt("%.0f", t46) + ", reduction " + fmt("%.1f%%", 100 * red) +
              " (band 8-18%, paper 13%)"};
}

Outcome c3() {
  const auto rc = RunConfig::load(cfg_path("paper_pastis.cfg"));
  const Shape s{4, 10, 60, 32, 32};
  const double mh = static_cast<double>(model_flops(rc.model, s).total);
  const double na = static_cast<double>(model_flops(as_na(rc.model), s).total);
  return {within(mh, 7.7e9, 0.25) && within(na, 9.82e9, 0.25),
          "(4,10,60,32,32): MHSA " + fmt("%.3f", mh / 1e9) + " G (ref 7.7), NA(13) " + fmt("%.3f", na / 1e9) +
              " G (ref 9.82); 1 MAC = 1 op, element-wise at fixed rates"};
}

Outcome c4() {
  const auto rc = RunConfig::load(cfg_path("paper_pastis.cfg"));
  const std::vector<NamedConfig> variants{{"mhsa", rc.model}, {"na", as_na(rc.model)}};
  const auto spatial = scaling_report(variants, SweepAxis::Spatial, {32, 64, 96, 128}, {1, 10, 30, 32, 32});
  const auto temporal = scaling_report(variants, SweepAxis::Temporal, {15, 30, 60, 120}, {1, 10, 30, 64, 64});
  auto slope = [](const std::vector<ScalingRow>& rows, const std::string& v, bool sp, bool measured = false) {
    std::vector<double> x, y;
    for (const auto& r : rows)
      if (r.variant == v) {
        x.push_back(static_cast<double>(sp ? r.H * r.W : r.T));
        y.push_back(static_cast<double>(!sp ? r.total_flops : measured ? r.measured_attn : r.attn_flops));
      }
    return loglog_slope(x, y);
  };
  const double sm = slope(spatial, "mhsa", true), sn = slope(spatial, "na", true);
  const double tm = slope(temporal, "mhsa", false), tn = slope(temporal, "na", false);
  const bool ok = sm >= 1.8 && sm <= 2.1 && sn >= 0.9 && sn <= 1.1 && std::abs(tm - 1) <= 0.1 && std::abs(tn - 1) <= 0.1;
  return {ok, "spatial slope MHSA " + fmt("%.3f", sm) + " [1.8,2.1], NA " + fmt("%.3f", sn) +
                  " [0.9,1.1]; temporal slope MHSA " + fmt("%.3f", tm) + ", NA " + fmt("%.3f", tn) + " (1.0+-0.1); measured NA attention incl. window padding " +
                  fmt("%.3f", slope(spatial, "na", true, true))};
}

Outcome c5() {
  const auto rows = gradient_suite(7, true);
  bool all = true;
  double worst_layer = 0, e2e = 0;
  std::string failed;
  for (const auto& r : rows) {
    all &= r.report.passed;
    if (!r.report.passed) failed += " " + r.name;
    if (r.name == "micro model end-to-end") {
      e2e = r.report.max_rel_error;
    } else {
      worst_layer = std::max(worst_layer, r.report.max_rel_error);
    }
  }
  return {all, std::to_string(rows.size()) + " checks, worst layer rel err " + fmt("%.2e", worst_layer) +
                   " (<1e-4), micro end-to-end " + fmt("%.2e", e2e) + " (<1e-3)" +
                   (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome c6() {
  const double cover_pad = na_covering_window_gap(true), cover = na_covering_window_gap(false);
  const double self = na_self_only_gap();
  return {cover_pad < 1e-5 && cover < 1e-5 && self < 1e-6,
          "NA(k=5 >= grid) vs MHSA logits max|d| " + fmt("%.2e", std::max(cover_pad, cover)) +
              " (<1e-5); NA k=1 vs self-only form " + fmt("%.2e", self) + " (<1e-6)"};
}

Outcome c7() {
  const double gap = attention_permutation_gap();
  return {gap < 1e-6, "norm+MHSA under a token shuffle, max|d| " + fmt("%.2e", gap) + " (<1e-6)"};
}

Outcome c8() {
  auto rc = RunConfig::load(cfg_path("toy_synthetic.cfg"));
  GeneratorSpec g = generator_spec(rc);
  g.seed = 42;
  const Dataset d = make_dataset(g, rc.data.n_train, rc.data.n_val);
  const auto train = normalized_split(d, Split::Train), val = normalized_split(d, Split::Val);

  struct Run {
    double train_oA, val_mIoU;
  };
  auto run = [&](bool gated) {
    RunConfig c = rc;
    c.model.gated_conv_enabled = gated;
    auto model = VistaFormer<float>::build(c.model, c.train.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train_loop(model, chip_ptrs(train), chip_ptrs(val), c.train, [&](const HistoryRow& r) {
      std::printf("    %s epoch %2lld  loss %.4f  val oA %.4f  val mIoU %.4f  (%.0f s)\n", gated ? "gated  " : "no-gate",
                  static_cast<long long>(r.epoch), r.train_loss, r.val_oA, r.val_mIoU,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      std::fflush(stdout);
    });
    const auto tr = evaluate(model, chip_ptrs(train), eval_options(c.train));
    return Run{tr.metrics.oA, res.history.back().val_mIoU};
  };
  const Run gated = run(true), ablation = run(false);
  const bool ok = gated.train_oA >= 0.95 && gated.val_mIoU >= 0.70 && ablation.val_mIoU <= gated.val_mIoU + 0.02;
  return {ok, "gated: train oA " + fmt("%.4f", gated.train_oA) + " (>=0.95), val mIoU " + fmt("%.4f", gated.val_mIoU) +
                  " (>=0.70); no-gate val mIoU " + fmt("%.4f", ablation.val_mIoU) + " (<= gated+0.02)"};
}

// ---------------------------------------------------------------------------

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

bool chip_bit_equal(const SitsChip& a, const SitsChip& b) {
  return a.C == b.C && a.T == b.T && a.H == b.H && a.W == b.W && a.sample_id == b.sample_id && a.labels == b.labels &&
         a.cloud_mask == b.cloud_mask && same_bits(a.input, b.input);
}

template <class F, class E>
bool raises(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome c10() {
  std::mt19937_64 rng(2024);
  const auto dir = fs::temp_directory_path() / "vf_acceptance";
  fs::create_directories(dir);
  auto pick = [&](Index lo, Index hi) { return lo + static_cast<Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };

  int chip_ok = 0, ckpt_ok = 0;
  for (int i = 0; i < 100; ++i) {
    GeneratorSpec g;
    g.n_samples = 1;
    g.num_classes = pick(2, 6);
    g.channels = pick(1, 5);
    g.T = pick(1, 10);
    g.H = pick(8, 20);
    g.W = pick(8, 20);
    g.cloud_prob = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    g.seed = rng();
    const SitsChip c = generate_chips(g)[0];
    const auto path = (dir / ("c" + std::to_string(i) + ".sits")).string();
    write_chip(c, path);
    chip_ok += chip_bit_equal(decode_chip(encode_chip(c)), c) && chip_bit_equal(read_chip(path), c);
  }
  for (int i = 0; i < 100; ++i) {
    RunConfig rc;
    rc.model = micro_model_config(rng() % 2 ? AttentionKind::MHSA : AttentionKind::Neighbourhood);
    rc.model.num_classes = pick(2, 7);
    rc.model.in_channels = pick(1, 4);
    rc.model.gated_conv_enabled = rng() % 2;
    rc.model.decoder_channels = pick(4, 12);
    rc.train.seed = rng();
    rc.train.lr_max = std::uniform_real_distribution<double>(1e-3, 1e-1)(rng);
    auto m = VistaFormer<float>::build(rc.model, rng());
    const auto path = (dir / ("m" + std::to_string(i) + ".vfck")).string();
    save_checkpoint(m, rc, path);
    auto [loaded, lcfg] = load_model(path);
    bool ok = lcfg == rc;
    auto a = m.named_parameters(), b = loaded.named_parameters();
    ok = ok && a.size() == b.size();
    for (std::size_t j = 0; ok && j < a.size(); ++j)
      ok = a[j].first == b[j].first && a[j].second.shape() == b[j].second.shape() &&
           std::memcmp(a[j].second.data().data(), b[j].second.data().data(),
                       static_cast<std::size_t>(a[j].second.numel()) * sizeof(float)) == 0;
    ckpt_ok += ok;
  }

  // corruption
  GeneratorSpec g;
  g.n_samples = 1;
  g.seed = 3;
  const std::string chip = encode_chip(generate_chips(g)[0]);
  RunConfig rc;
  rc.model = micro_model_config();
  auto m = VistaFormer<float>::build(rc.model, 1);
  const std::string ck = encode_checkpoint(make_checkpoint(m, rc));
  auto flip = [](std::string s, std::size_t at) {
    s[at] ^= 0x20;
    return s;
  };
  bool corrupt_ok = true;
  for (std::size_t at : {chip.size() / 2, chip.size() - 1})
    corrupt_ok &= raises<std::function<void()>, ChecksumError>([&] { decode_chip(flip(chip, at)); });
  for (std::size_t at : {ck.size() / 2, ck.size() - 1})
    corrupt_ok &= raises<std::function<void()>, ChecksumError>([&] { decode_checkpoint(flip(ck, at)); });
  bool trunc_ok = true;
  for (std::size_t cut : {std::size_t{5}, chip.size() / 2, chip.size() - 1})
    trunc_ok &= raises<std::function<void()>, TruncatedError>([&] { decode_chip(chip.substr(0, cut)); });
  for (std::size_t cut : {std::size_t{5}, ck.size() / 2, ck.size() - 1})
    trunc_ok &= raises<std::function<void()>, TruncatedError>([&] { decode_checkpoint(ck.substr(0, cut)); });
  fs::remove_all(dir);

  return {chip_ok == 100 && ckpt_ok == 100 && corrupt_ok && trunc_ok,
          "chips " + std::to_string(chip_ok) + "/100, checkpoints " + std::to_string(ckpt_ok) +
              "/100 bit-exact; bad CRC -> ChecksumError " + (corrupt_ok ? "yes" : "NO") +
              ", truncation -> TruncatedError " + (trunc_ok ? "yes" : "NO")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](int n) { return only.empty() || only.count(n); };

  struct Criterion {
    int n;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{{1, 1, c1},   {2, 1, c2},   {3, 10, c3},  {4, 30, c4},  {5, 300, c5},
                                   {6, 0, c6},   {7, 0, c7},  {8, 900, c8}, {10, 60, c10}};
  int failures = 0;
  for (const auto& c : all) {
    if (c.n == 10 && want(9))
      std::printf("criterion 9: NOT REPRODUCIBLE - the benchmark oA/mIoU of Table 3 (e.g. PASTIS 84.0/65.5) and the "
                  "full Table 4 ablation margins need multi-GPU training on the real datasets; replaced by criteria "
                  "5-8\n");
    if (!want(c.n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    const std::string budget = c.budget_s > 0 ? ", budget " + fmt("%.0f", c.budget_s) + " s" : "";
    std::printf("criterion %d: %s - %s [%.2f s%s%s]\n", c.n, pass ? "PASS" : "FAIL", o.detail.c_str(), secs,
                budget.c_str(), in_time ? "" : ", OVER BUDGET");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
