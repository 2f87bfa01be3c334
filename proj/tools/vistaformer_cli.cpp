// vistaformer: data generation, cost audits, self-checks, training,
// evaluation and prediction from one executable.
//
// Exit codes: 0 ok, 1 validation error, 2 I/O error.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vistaformer/vistaformer.hpp"

namespace fs = std::filesystem;
using namespace vf;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::optional<Index> na_k;
  bool include_background = false;
  std::string out;
};

void add_config_opts(CLI::App* c, Common& o) {
  c->add_option("--config", o.config, "run config file (defaults when omitted)");
  c->add_option("--set", o.sets, "override a config key, key=value (repeatable)");
}
void add_model_opts(CLI::App* c, Common& o) {
  c->add_option("--variant", o.variant, "attention variant")->check(CLI::IsMember({"mhsa", "na"}));
  c->add_option("--na-k", o.na_k, "neighbourhood size for the na variant");
}
void add_seed_opt(CLI::App* c, Common& o) { c->add_option("--seed", o.seed, "random seed"); }

RunConfig resolve(const Common& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.train.seed = *o.seed;
  if (!o.variant.empty()) c.model.attention = parse_attention_kind(o.variant);
  if (o.na_k) c.model.na_kernel = *o.na_k;
  if (o.include_background) c.train.include_background = true;
  c.validate();
  return c;
}

Shape parse_shape(const std::string& s) {
  const auto parts = detail::split(s, ',');
  if (parts.size() != 5) throw ConfigError("--shape expects B,C,T,H,W, got '" + s + "'");
  Shape out;
  for (const auto& p : parts) {
    const long long v = detail::parse_int("--shape", detail::trim(p));
    if (v <= 0) throw ConfigError("--shape entries must be positive, got '" + s + "'");
    out.push_back(v);
  }
  return out;
}

// Writes `text` to `path`, or to stdout when path is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void check_compatible(const DatasetManifest& m, const ModelConfig& cfg) {
  if (m.channels != cfg.in_channels)
    throw ConfigError("dataset has " + std::to_string(m.channels) + " channels, in_channels is " +
                      std::to_string(cfg.in_channels));
  if (m.num_classes != cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(m.num_classes) + " classes, num_classes is " +
                      std::to_string(cfg.num_classes));
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& o) {
  const RunConfig c = resolve(o);
  const GeneratorSpec g = generator_spec(c);
  g.validate();
  const Dataset d = make_dataset(g, c.data.n_train, c.data.n_val);
  const std::string dir = o.out.empty() ? c.data.data_dir : o.out;
  save_dataset(d, dir);

  std::vector<double> freq(static_cast<std::size_t>(g.num_classes), 0.0);
  double n = 0;
  for (const auto& chip : d.chips)
    for (auto l : chip.labels)
      if (l != kIgnoreLabel) {
        freq[l] += 1;
        n += 1;
      }
  std::cout << "wrote " << d.chips.size() << " chips (" << c.data.n_train << " train, " << c.data.n_val << " val, "
            << c.data.n_test << " test) to " << dir << "\n";
  std::cout << "class pixel frequencies:";
  for (double f : freq) std::cout << ' ' << fmt("%.4f", n > 0 ? f / n : 0.0);
  std::cout << '\n';
  return 0;
}

int cmd_params(const Common& o) {
  const RunConfig c = resolve(o);
  auto model = VistaFormer<float>::build(c.model, 0);
  const auto pc = model.count_parameters();
  std::ostringstream csv;
  csv << "module,params\n";
  for (const auto& [g, n] : pc.groups) csv << g << ',' << n << '\n';
  csv << "total," << pc.total << '\n';
  emit(o.out, csv.str());
  std::cout << "variant " << to_string(c.model.attention) << ", T " << c.model.max_seq_len << ": " << pc.total
            << " parameters (" << fmt("%.3f", static_cast<double>(pc.total) / 1e6) << "M)\n";
  return 0;
}

int cmd_flops(const Common& o, const std::string& shape_arg) {
  RunConfig c = resolve(o);
  const Shape s = shape_arg.empty()
                      ? Shape{c.train.batch_size, c.model.in_channels, c.model.max_seq_len, c.data.image_height,
                              c.data.image_width}
                      : parse_shape(shape_arg);
  if (s[1] != c.model.in_channels)
    throw ConfigError("--shape has C=" + std::to_string(s[1]) + " but in_channels is " +
                      std::to_string(c.model.in_channels));
  const FlopReport r = model_flops(c.model, s);
  emit(o.out, format_report(r));
  std::cout << "variant " << to_string(c.model.attention) << ", input " << shape_str(s) << ": "
            << fmt("%.3f", static_cast<double>(r.total) / 1e9) << " GFLOPs (attention "
            << fmt("%.3f", static_cast<double>(r.category(FlopCategory::Attention)) / 1e9) << ", conv "
            << fmt("%.3f", static_cast<double>(r.category(FlopCategory::Conv)) / 1e9) << ", linear "
            << fmt("%.3f", static_cast<double>(r.category(FlopCategory::Linear)) / 1e9) << ", other "
            << fmt("%.3f", static_cast<double>(r.category(FlopCategory::Other)) / 1e9) << ")\n"
            << "convention: one multiply-accumulate counts as one operation; element-wise work at fixed per-element "
               "rates\n";
  return 0;
}

int cmd_scaling(const Common& o, const std::string& axis) {
  const RunConfig c = resolve(o);
  ModelConfig mh = c.model, na = c.model;
  mh.attention = AttentionKind::MHSA;
  na.attention = AttentionKind::Neighbourhood;
  const std::vector<NamedConfig> variants{{"mhsa", mh}, {"na", na}};
  const Index C = c.model.in_channels;
  std::vector<ScalingRow> rows;
  std::ostringstream summary;
  auto slopes = [&](const std::vector<ScalingRow>& part, bool spatial) {
    for (const auto& v : variants) {
      std::vector<double> x, y;
      for (const auto& r : part)
        if (r.variant == v.name) {
          x.push_back(static_cast<double>(spatial ? r.H * r.W : r.T));
          y.push_back(static_cast<double>(spatial ? r.attn_flops : r.total_flops));
        }
      summary << (spatial ? "spatial" : "temporal") << ' ' << v.name << ": log-log slope of "
              << (spatial ? "attention FLOPs vs H*W" : "total FLOPs vs T") << " = " << fmt("%.3f", loglog_slope(x, y))
              << '\n';
    }
  };
  if (axis == "spatial" || axis == "both") {
    auto part = scaling_report(variants, SweepAxis::Spatial, {32, 64, 96, 128}, {1, C, 30, 32, 32});
    slopes(part, true);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  if (axis == "temporal" || axis == "both") {
    auto part = scaling_report(variants, SweepAxis::Temporal, {15, 30, 60, 120}, {1, C, 30, 64, 64});
    slopes(part, false);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  emit(o.out, scaling_csv(rows));
  std::cout << summary.str();
  return 0;
}

int cmd_gradcheck(const Common& o, bool micro) {
  const std::uint64_t seed = o.seed.value_or(7);
  const auto rows = gradient_suite(seed, micro);
  std::ostringstream csv;
  csv << "check,max_rel_error,tolerance,coords,result\n";
  bool all = true;
  for (const auto& r : rows) {
    csv << r.name << ',' << fmt("%.3e", r.report.max_rel_error) << ',' << fmt("%.0e", r.report.tol) << ','
        << r.report.coords_checked << ',' << (r.report.passed ? "pass" : "FAIL") << '\n';
    all &= r.report.passed;
  }
  if (!o.out.empty()) emit(o.out, csv.str());
  std::printf("%-36s %12s %8s %7s  %s\n", "check", "max rel err", "tol", "coords", "result");
  for (const auto& r : rows)
    std::printf("%-36s %12.3e %8.0e %7zu  %s\n", r.name.c_str(), r.report.max_rel_error, r.report.tol,
                r.report.coords_checked, r.report.passed ? "pass" : "FAIL");
  std::cout << (all ? "all checks passed\n" : "some checks FAILED\n");
  return all ? 0 : 1;
}

int cmd_train(const Common& o, const std::string& data_arg) {
  const RunConfig c = resolve(o);
  const std::string data = data_arg.empty() ? c.data.data_dir : data_arg;
  const Dataset d = load_dataset(data);
  check_compatible(d.manifest, c.model);
  const auto train = normalized_split(d, Split::Train), val = normalized_split(d, Split::Val);
  const std::string out = o.out.empty() ? "run" : o.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create directory '" + out + "': " + ec.message());

  auto model = VistaFormer<float>::build(c.model, c.train.seed);
  std::cout << "training " << train.size() << " chips, validating on " << val.size() << ", " << c.train.epochs
            << " epochs\n";
  const auto res = train_loop(model, chip_ptrs(train), chip_ptrs(val), c.train, [](const HistoryRow& r) {
    std::printf("epoch %3lld  loss %.4f  val oA %.4f  val mIoU %.4f  lr %.2e\n", static_cast<long long>(r.epoch),
                r.train_loss, r.val_oA, r.val_mIoU, r.lr);
    std::fflush(stdout);
  });
  RunConfig saved = c;
  saved.data.data_dir = data;
  save_checkpoint(model, saved, (fs::path(out) / "checkpoint.vfck").string());
  emit((fs::path(out) / "history.csv").string(), history_csv(res.history));
  saved.save((fs::path(out) / "run.cfg").string());
  std::cout << "wrote " << (fs::path(out) / "checkpoint.vfck").string() << " and history.csv\n";
  return 0;
}

Split split_arg(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const FormatError&) {
    throw ConfigError("--split must be train, val or test, got '" + s + "'");
  }
}

int cmd_eval(const Common& o, const std::string& ckpt, const std::string& data_arg, const std::string& split) {
  auto [model, cfg] = load_model(ckpt);
  if (o.include_background) cfg.train.include_background = true;
  const std::string data = data_arg.empty() ? cfg.data.data_dir : data_arg;
  const Dataset d = load_dataset(data);
  check_compatible(d.manifest, cfg.model);
  const auto chips = normalized_split(d, split_arg(split));
  const EvalResult r = evaluate(model, chip_ptrs(chips), eval_options(cfg.train));
  std::ostringstream csv;
  csv << "split,oA,mIoU\n" << split << ',' << fmt("%.9g", r.metrics.oA) << ',' << fmt("%.9g", r.metrics.mIoU) << '\n';
  std::ostringstream iou;
  iou << "class,iou\n";
  for (std::size_t k = 0; k < r.metrics.iou.size(); ++k)
    iou << k << ',' << (r.metrics.iou[k] ? fmt("%.9g", *r.metrics.iou[k]) : std::string("")) << '\n';
  if (!o.out.empty()) {
    emit(o.out, csv.str());
  } else {
    std::cout << csv.str();
  }
  std::cout << split << ": " << chips.size() << " chips, oA " << fmt("%.4f", r.metrics.oA) << ", mIoU "
            << fmt("%.4f", r.metrics.mIoU) << (cfg.train.include_background ? "" : " (background excluded)") << '\n'
            << iou.str();
  return 0;
}

int cmd_predict(const Common& o, const std::string& ckpt, const std::string& data_arg, const std::string& split,
                int mc_passes) {
  auto [model, cfg] = load_model(ckpt);
  if (mc_passes < 0) throw ConfigError("--mc-dropout must be >= 0");
  const std::uint64_t seed = o.seed.value_or(cfg.train.seed);
  const std::string data = data_arg.empty() ? cfg.data.data_dir : data_arg;
  const Dataset d = load_dataset(data);
  check_compatible(d.manifest, cfg.model);
  const auto chips = normalized_split(d, split_arg(split));
  if (chips.empty()) throw ConfigError("predict: split '" + split + "' is empty");

  std::ostringstream csv;
  csv << "sample_id,row,col,pred,prob,uncertainty\n";
  double mean_unc = 0;
  Index npix = 0;
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (std::size_t i = 0; i < chips.size(); i += bs) {
    std::vector<const SitsChip*> part;
    for (std::size_t j = i; j < std::min(chips.size(), i + bs); ++j) part.push_back(&chips[j]);
    const auto batch = make_batch<float>(part);
    Tensor<float> probs, unc;
    if (mc_passes > 0) {
      auto r = mc_dropout_predict(model, batch.input, mc_passes, seed + i);
      probs = r.mean_probs;
      unc = r.uncertainty;
    } else {
      NoGradGuard ng;
      probs = class_probabilities(model.forward(batch.input));
    }
    const Index K = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    for (std::size_t b = 0; b < part.size(); ++b)
      for (Index h = 0; h < H; ++h)
        for (Index w = 0; w < W; ++w) {
          Index best = 0;
          double ent = 0;
          for (Index k = 0; k < K; ++k) {
            const double p = probs.data()[((static_cast<Index>(b) * K + k) * H + h) * W + w];
            if (p > probs.data()[((static_cast<Index>(b) * K + best) * H + h) * W + w]) best = k;
            if (p > 0) ent -= p * std::log(p);
          }
          if (mc_passes > 0) ent = unc.data()[(static_cast<Index>(b) * H + h) * W + w];
          mean_unc += ent;
          ++npix;
          csv << part[b]->sample_id << ',' << h << ',' << w << ',' << best << ','
              << fmt("%.6g", probs.data()[((static_cast<Index>(b) * K + best) * H + h) * W + w]) << ','
              << fmt("%.6g", ent) << '\n';
        }
  }
  const std::string out = o.out.empty() ? "predictions.csv" : o.out;
  emit(out, csv.str());
  std::cout << "predicted " << chips.size() << " chips (" << (mc_passes > 0 ? std::to_string(mc_passes) + " MC dropout passes" : "deterministic")
            << "), mean per-pixel entropy " << fmt("%.4f", npix ? mean_unc / static_cast<double>(npix) : 0.0)
            << " nats; wrote " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VistaFormer segmentation for satellite image time series"};
  app.require_subcommand(1);
  Common o;
  std::string shape, axis = "both", ckpt, data, split = "val";
  bool micro = false;
  int mc = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_config_opts(gen, o);
  add_seed_opt(gen, o);
  gen->add_option("--out", o.out, "dataset directory (default: data_dir)");

  auto* params = app.add_subcommand("params", "count trainable parameters");
  add_config_opts(params, o);
  add_model_opts(params, o);
  params->add_option("--out", o.out, "CSV output path");

  auto* flops = app.add_subcommand("flops", "count operations of one forward pass");
  add_config_opts(flops, o);
  add_model_opts(flops, o);
  flops->add_option("--shape", shape, "input shape B,C,T,H,W");
  flops->add_option("--out", o.out, "CSV output path");

  auto* scaling = app.add_subcommand("scaling", "attention cost versus spatial and temporal size");
  add_config_opts(scaling, o);
  scaling->add_option("--na-k", o.na_k, "neighbourhood size");
  scaling->add_option("--axis", axis, "spatial, temporal or both")->check(CLI::IsMember({"spatial", "temporal", "both"}));
  scaling->add_option("--out", o.out, "CSV output path");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_seed_opt(grad, o);
  grad->add_flag("--micro", micro, "include the micro model end to end");
  grad->add_option("--out", o.out, "CSV output path");

  auto* train = app.add_subcommand("train", "train a model");
  add_config_opts(train, o);
  add_model_opts(train, o);
  add_seed_opt(train, o);
  train->add_option("--data", data, "dataset directory (default: data_dir)");
  train->add_flag("--include-background", o.include_background, "score the background class");
  train->add_option("--out", o.out, "run directory (default: run)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval->add_option("--data", data, "dataset directory (default: the training data_dir)");
  eval->add_option("--split", split, "train, val or test");
  eval->add_flag("--include-background", o.include_background, "score the background class");
  eval->add_option("--out", o.out, "CSV output path");

  auto* predict = app.add_subcommand("predict", "per-pixel predictions");
  predict->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  predict->add_option("--data", data, "dataset directory (default: the training data_dir)");
  predict->add_option("--split", split, "train, val or test");
  predict->add_option("--mc-dropout", mc, "number of MC dropout passes (0: deterministic)");
  add_seed_opt(predict, o);
  predict->add_option("--out", o.out, "CSV output path (default: predictions.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (params->parsed()) return cmd_params(o);
    if (flops->parsed()) return cmd_flops(o, shape);
    if (scaling->parsed()) return cmd_scaling(o, axis);
    if (grad->parsed()) return cmd_gradcheck(o, micro);
    if (train->parsed()) return cmd_train(o, data);
    if (eval->parsed()) return cmd_eval(o, ckpt, data, split);
    if (predict->parsed()) return cmd_predict(o, ckpt, data, split, mc);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
