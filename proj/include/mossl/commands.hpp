#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mossl/config.hpp"
#include "mossl/data.hpp"
#include "mossl/errors.hpp"
#include "mossl/gradcheck.hpp"
#include "mossl/model.hpp"

namespace mossl::cli {

namespace fs = std::filesystem;

/// Options shared by every command; unset values fall back to the config.
struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string run;
  std::string csv;
  std::string split = "test";
  std::string device = "cpu";
  std::size_t windows = 8;
};

inline constexpr double kGradTolerance = 1e-4;

// ---------------------------------------------------------------------------
// Config and data resolution

struct Loaded {
  RunConfig rc;
  std::uint64_t seed = 0;
};

inline Loaded load(const Options& o) {
  if (o.device != "cpu") throw ConfigError("unsupported device '" + o.device + "' (only cpu)");
  if (o.config.empty()) throw ConfigError("--config is required");
  Loaded l{load_run_config(o.config), 0};
  l.seed = o.seed.value_or(l.rc.seed);
  l.rc.train.seed = l.seed;
  return l;
}

/// Dataset named by the config: a prepared directory, or the synth section
/// generated in memory from the run seed.
inline data::Dataset resolve_dataset(const RunConfig& rc, std::uint64_t seed) {
  data::Dataset ds;
  if (!rc.data.path.empty()) {
    ds = data::load_dataset(rc.data.path);
  } else if (rc.synth) {
    ds.name = rc.data.name.empty() ? "synthetic" : rc.data.name;
    ds.series = data::synth_generate(*rc.synth, seed);
  } else {
    throw ConfigError("config names no dataset: set data.path or a synth section");
  }
  if (rc.data.split_given) ds.split = rc.data.split;
  return ds;
}

/// Makes a relative data.path absolute: taken as given when it exists from the
/// working directory, otherwise relative to the config file's directory.
inline void anchor_data_path(RunConfig& rc, const fs::path& base) {
  if (rc.data.path.empty()) return;
  fs::path p = rc.data.path;
  if (p.is_relative() && !fs::exists(p) && !base.empty()) p = base / p;
  rc.data.path = fs::absolute(p).lexically_normal().string();
}

/// Fills nodes/modalities from the series and checks explicit values.
inline ModelConfig bind_model(ModelConfig m, const data::MoSTSeries& s) {
  if (m.nodes == 0) m.nodes = s.nodes();
  if (m.modalities == 0) m.modalities = s.modalities();
  if (m.nodes != s.nodes() || m.modalities != s.modalities()) {
    throw DimensionError("config expects " + std::to_string(m.nodes) + " nodes x " + std::to_string(m.modalities) +
                         " modalities; dataset has " + std::to_string(s.nodes()) + " x " +
                         std::to_string(s.modalities()));
  }
  m.validate();
  return m;
}

inline data::PreparedData prepare_windows(const RunConfig& rc, const data::Dataset& ds) {
  return data::prepare(ds.series, ds.split, rc.model.input_steps, rc.model.output_steps, rc.data.stride);
}

inline fs::path output_root(const Options& o, const RunConfig& rc) {
  if (!o.out.empty()) return o.out;
  if (!rc.output_dir.empty()) return rc.output_dir;
  if (const char* env = std::getenv("MOSSL_RUN_DIR"); env && *env) return env;
  return "runs";
}

inline std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

inline fs::path fresh_dir(const fs::path& root, const std::string& stem) {
  fs::path dir = root / stem;
  for (int i = 2; fs::exists(dir); ++i) dir = root / (stem + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + p.string() + ": " + e.what());
  }
}

inline void print_metrics(std::ostream& out, const std::string& title, const model::Metrics& r) {
  out << title << " (" << r.windows << " windows)\n";
  out << std::left << std::setw(16) << "modality" << std::setw(9) << "horizon" << std::setw(14) << "mae" << "rmse\n";
  for (std::size_t m = 0; m < r.modalities.size(); ++m)
    for (std::size_t h = 0; h < r.horizons; ++h)
      out << std::left << std::setw(16) << r.modalities[m] << std::setw(9) << h + 1 << std::setw(14) << r.mae[m][h]
          << r.rmse[m][h] << '\n';
  out << "overall mae " << r.overall_mae << " rmse " << r.overall_rmse << '\n';
}

// ---------------------------------------------------------------------------
// synth / prepare

inline int cmd_synth(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  if (!l.rc.synth) throw ConfigError("config has no synth section");
  const fs::path dir = !o.out.empty() ? fs::path(o.out) : fs::path(l.rc.data.path);
  if (dir.empty()) throw ConfigError("synth needs --out or data.path");
  data::Dataset ds{l.rc.data.name.empty() ? "synthetic" : l.rc.data.name, data::synth_generate(*l.rc.synth, l.seed),
                   l.rc.data.split};
  data::save_dataset(dir, ds);
  out << "wrote " << ds.series.steps() << " steps x " << ds.series.nodes() << " nodes x " << ds.series.modalities()
      << " modalities to " << dir.string() << '\n';
  return 0;
}

inline int cmd_prepare(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const std::string csv = !o.csv.empty() ? o.csv : l.rc.data.csv;
  if (csv.empty()) throw ConfigError("prepare needs --csv or data.csv");
  const fs::path dir = !o.out.empty() ? fs::path(o.out) : fs::path(l.rc.data.path);
  if (dir.empty()) throw ConfigError("prepare needs --out or data.path");
  data::Dataset ds{l.rc.data.name.empty() ? fs::path(csv).stem().string() : l.rc.data.name, data::load_csv(csv),
                   l.rc.data.split};
  const auto ranges = data::split_ranges(ds.series.steps(), ds.split);
  if (ranges.train.size() < l.rc.model.input_steps + l.rc.model.output_steps) {
    throw DataError("training split of " + std::to_string(ranges.train.size()) + " steps is shorter than one window");
  }
  data::save_dataset(dir, ds);
  out << "prepared " << ds.name << ": " << ds.series.steps() << " steps x " << ds.series.nodes() << " nodes x "
      << ds.series.modalities() << " modalities -> " << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval

struct RunSummary {
  fs::path dir;
  model::Metrics val;
  model::Metrics test;
  model::Metrics baseline;
  std::vector<model::EpochRecord> history;
  bool has_val = false;
};

/// Trains one variant and writes a self-contained run directory.
inline RunSummary train_run(const RunConfig& rc_in, std::uint64_t seed, const fs::path& dir, const fs::path& base = {}) {
  RunConfig rc = rc_in;
  rc.train.seed = seed;
  anchor_data_path(rc, base);
  const data::Dataset ds = resolve_dataset(rc, seed);
  rc.model = bind_model(rc.model, ds.series);
  const data::PreparedData d = prepare_windows(rc, ds);
  if (d.test.empty()) throw DataError("test split is shorter than one window");
  fs::create_directories(dir);
  write_text(dir / "config.json", rc.source_text);
  nlohmann::json run{{"seed", seed},
                     {"variant", rc.train.ablation.name()},
                     {"dataset", rc.data.path},
                     {"model", model_json(rc.model, rc.train.ablation)}};
  write_text(dir / "run.json", run.dump(2) + "\n");

  std::ofstream progress(dir / "history.csv");
  progress << "epoch,loss,recon,global,modality,val_rmse,seconds\n" << std::setprecision(17);
  auto on_epoch = [&](const model::EpochRecord& e) {
    progress << e.epoch << ',' << e.loss << ',' << e.parts.recon << ',';
    if (e.parts.global) progress << *e.parts.global;
    progress << ',';
    if (e.parts.modality) progress << *e.parts.modality;
    progress << ',';
    if (e.val_rmse) progress << *e.val_rmse;
    progress << ',' << e.seconds << '\n';
    progress.flush();
    std::ostringstream msg;
    msg << "[" << rc.train.ablation.name() << "] epoch " << e.epoch << " loss " << e.loss << " recon " << e.parts.recon;
    if (e.parts.global) msg << " global " << *e.parts.global;
    if (e.parts.modality) msg << " modality " << *e.parts.modality;
    if (e.val_rmse) msg << " val_rmse " << *e.val_rmse;
    logging::info(msg.str());
  };
  const model::TrainResult res = model::train(d, rc.model, rc.train, on_epoch);
  write_text(dir / "history.json", model::history_json(res.history).dump(2) + "\n");
  model::save_checkpoint(dir / "checkpoint",
                         {rc.model, rc.train.ablation, res.params, d.stats, ds.series.modality_names});

  RunSummary s{dir, {}, {}, {}, res.history, !d.val.empty()};
  const auto& names = ds.series.modality_names;
  if (s.has_val) {
    s.val = model::evaluate(res.params, rc.model, d.val, d.stats, names);
    model::write_metrics(dir / "metrics_val", s.val);
  }
  s.test = model::evaluate(res.params, rc.model, d.test, d.stats, names);
  model::write_metrics(dir / "metrics_test", s.test);
  s.baseline = model::persistence_baseline(d.test, d.stats, names);
  model::write_metrics(dir / "baseline_test", s.baseline);
  return s;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const fs::path dir =
      fresh_dir(output_root(o, l.rc), timestamp() + "-" + l.rc.train.ablation.name() + "-seed" + std::to_string(l.seed));
  const RunSummary s = train_run(l.rc, l.seed, dir, fs::path(o.config).parent_path());
  if (s.has_val) print_metrics(out, "validation", s.val);
  print_metrics(out, "test", s.test);
  out << "persistence baseline test rmse " << s.baseline.overall_rmse << '\n';
  out << "run directory " << dir.string() << '\n';
  return 0;
}

inline fs::path run_dir(const Options& o) {
  if (!o.run.empty()) return o.run;
  throw ConfigError("eval needs --run DIR");
}

/// Re-evaluates a run from its checkpoint, config copy and seed.
inline model::Metrics evaluate_run(const fs::path& dir, const std::string& split) {
  if (split != "val" && split != "test" && split != "train") throw ConfigError("unknown split '" + split + "'");
  const nlohmann::json run = read_json(dir / "run.json");
  RunConfig rc = load_run_config(dir / "config.json");
  const auto seed = run.at("seed").get<std::uint64_t>();
  if (const auto p = run.value("dataset", std::string{}); !p.empty()) rc.data.path = p;
  const model::Checkpoint ck = model::load_checkpoint(dir / "checkpoint");
  const data::Dataset ds = resolve_dataset(rc, seed);
  rc.model = bind_model(ck.model, ds.series);
  const data::PreparedData d = prepare_windows(rc, ds);
  if (!(d.stats == ck.stats)) throw DataError("dataset normalization differs from the checkpoint's");
  const auto& windows = split == "val" ? d.val : split == "test" ? d.test : d.train;
  if (windows.empty()) throw DataError(split + " split has no windows");
  return model::evaluate(ck.params, ck.model, windows, ck.stats, ck.modality_names);
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  if (o.device != "cpu") throw ConfigError("unsupported device '" + o.device + "' (only cpu)");
  const fs::path dir = run_dir(o);
  const model::Metrics r = evaluate_run(dir, o.split);
  const fs::path stem = o.out.empty() ? dir / ("eval_" + o.split) : fs::path(o.out) / ("eval_" + o.split);
  model::write_metrics(stem, r);
  print_metrics(out, o.split, r);
  out << "wrote " << stem.string() << ".csv/.json\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

/// Model dimensions for a config that may leave nodes/modalities to the data.
inline ModelConfig gradcheck_model(RunConfig rc, std::uint64_t seed, const fs::path& base = {}) {
  ModelConfig m = rc.model;
  anchor_data_path(rc, base);
  if (m.nodes == 0 || m.modalities == 0) m = bind_model(m, resolve_dataset(rc, seed).series);
  m.validate();
  return m;
}

inline GradCheckReport run_gradcheck(const ModelConfig& m, const TrainConfig& tc, std::uint64_t seed,
                                     std::size_t windows = 2) {
  ParamSet ps = model::init_params(m, tc.ablation, seed);
  model::offset_biases(ps, seed);
  Rng rng(derive_seed(seed, "gradcheck.batch"));
  model::Batch b{Tensor({windows, m.input_steps, m.nodes, m.modalities}),
                 Tensor({windows, m.output_steps, m.nodes, m.modalities}), {}};
  for (double& v : b.x.data()) v = standard_normal(rng);
  for (double& v : b.y.data()) v = standard_normal(rng);
  for (std::size_t i = 0; i < windows; ++i) b.ids.push_back(i);
  Tensor mask;
  {
    Tape tape;
    BoundParams bp(tape, ps, false);
    mask = model::forward(tape, bp, m, tc, b, {derive_seed(seed, "gradcheck.mask"), 0, std::nullopt}).mask;
  }
  model::MaskPolicy fixed{0, 0, std::nullopt};
  if (tc.ablation.uses_augmented_view()) fixed.fixed = mask;
  return grad_check([&](Tape& tape, const BoundParams& p) { return model::forward(tape, p, m, tc, b, fixed).loss; },
                    ps, 1e-6, kGradTolerance);
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const ModelConfig m = gradcheck_model(l.rc, l.seed, fs::path(o.config).parent_path());
  const GradCheckReport r = run_gradcheck(m, l.rc.train, l.seed);
  if (!r.finite) throw NumericalError("gradient check: " + r.failure);
  out << std::setprecision(6);
  out << "coordinates " << r.coordinates << " loss " << r.loss << '\n';
  out << "max relative error " << r.max_relative_error << " at " << r.worst_parameter << "[" << r.worst_index
      << "] analytic " << r.analytic << " numeric " << r.numeric << '\n';
  out << "finite-difference rounding scale " << r.rounding_bound << "; max relative error above it "
      << r.max_relative_error_above_rounding << '\n';
  out << "coordinates at or above " << kGradTolerance << ": " << r.failing << " (" << r.failing_above_rounding
      << " above the rounding scale)\n";
  const bool pass = r.max_relative_error < kGradTolerance;
  out << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? 0 : 3;
}

// ---------------------------------------------------------------------------
// export-repr

inline int cmd_export(const Options& o, std::ostream& out) {
  const fs::path dir = run_dir(o);
  const nlohmann::json run = read_json(dir / "run.json");
  RunConfig rc = load_run_config(dir / "config.json");
  const auto seed = run.at("seed").get<std::uint64_t>();
  if (const auto p = run.value("dataset", std::string{}); !p.empty()) rc.data.path = p;
  const model::Checkpoint ck = model::load_checkpoint(dir / "checkpoint");
  const data::Dataset ds = resolve_dataset(rc, seed);
  rc.model = bind_model(ck.model, ds.series);
  const data::PreparedData d = prepare_windows(rc, ds);
  const auto& windows = o.split == "val" ? d.val : o.split == "train" ? d.train : d.test;
  if (windows.empty()) throw DataError(o.split + " split has no windows");
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < std::min(o.windows, windows.size()); ++i) ids.push_back(i);
  const model::Batch b = model::make_batch(windows, ids);
  TrainConfig tc = rc.train;
  tc.ablation = ck.ablation;
  Tape tape;
  BoundParams bp(tape, ck.params, false);
  const model::Forward f =
      model::forward(tape, bp, ck.model, tc, b, {derive_seed(seed, "export.mask"), 0, std::nullopt});
  const fs::path target = o.out.empty() ? dir / ("repr_" + o.split) : fs::path(o.out);
  fs::create_directories(target);
  nlohmann::json index{{"split", o.split}, {"windows", ids.size()}, {"variant", ck.ablation.name()}, {"tensors", {}}};
  auto dump = [&](const std::string& name, const Tensor& t) {
    save_tensor(target / (name + ".most"), t);
    index["tensors"][name] = t.shape();
  };
  dump("H", f.h.value());
  dump("Y_hat", f.prediction.value());
  if (f.h_aug) {
    dump("H_aug", f.h_aug->value());
    dump("mask", f.mask);
    dump("phi", f.phi->value());
  }
  if (f.mixture) {
    dump("gamma", f.mixture->gamma.value());
    dump("mu", f.mixture->mu.value());
    dump("sigma2", f.mixture->sigma2.value());
  }
  write_text(target / "index.json", index.dump(2) + "\n");
  out << "exported " << index["tensors"].size() << " tensors for " << ids.size() << " windows to " << target.string()
      << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct VariantRow {
  std::string variant;
  std::string label;
  RunSummary run;
};

inline std::string variant_label(const std::string& v) {
  if (v == "full") return "MoSSL";
  if (v == "no_av") return "w/o AV";
  if (v == "no_mg") return "w/o MG";
  if (v == "no_gssl") return "w/o GSSL";
  return "w/o MSSL";
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> v{"full", "no_av", "no_mg", "no_gssl", "no_mssl"};
  return v;
}

/// Independent runs of the five variants from the same seed; nothing is shared
/// between them beyond the dataset.
inline std::vector<VariantRow> run_ablation(const RunConfig& rc, std::uint64_t seed, const fs::path& root,
                                            const fs::path& base = {}) {
  std::vector<VariantRow> rows;
  for (const auto& v : variant_names()) {
    RunConfig vc = rc;
    vc.train.ablation = Ablation::from_name(v);
    rows.push_back({v, variant_label(v), train_run(vc, seed, root / v, base)});
  }
  std::ostringstream csv;
  csv << std::setprecision(17) << "variant,label,epochs,val_rmse,test_mae,test_rmse,logs_global,logs_modality\n";
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto& h = r.run.history;
    const bool g = !h.empty() && h.back().parts.global.has_value();
    const bool c = !h.empty() && h.back().parts.modality.has_value();
    csv << r.variant << ',' << r.label << ',' << h.size() << ',';
    if (r.run.has_val) csv << r.run.val.overall_rmse;
    csv << ',' << r.run.test.overall_mae << ',' << r.run.test.overall_rmse << ',' << g << ',' << c << '\n';
    j.push_back({{"variant", r.variant},
                 {"label", r.label},
                 {"epochs", h.size()},
                 {"val_rmse", r.run.has_val ? nlohmann::json(r.run.val.overall_rmse) : nlohmann::json()},
                 {"test", model::metrics_json(r.run.test)},
                 {"logs_global", g},
                 {"logs_modality", c}});
  }
  write_text(root / "comparison.csv", csv.str());
  write_text(root / "comparison.json", j.dump(2) + "\n");
  return rows;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
  const Loaded l = load(o);
  const fs::path root = fresh_dir(output_root(o, l.rc), timestamp() + "-ablate-seed" + std::to_string(l.seed));
  write_text(root / "config.json", l.rc.source_text);
  const auto rows = run_ablation(l.rc, l.seed, root, fs::path(o.config).parent_path());
  out << std::left << std::setw(10) << "variant" << std::setw(8) << "epochs" << std::setw(14) << "test_mae"
      << "test_rmse\n";
  for (const auto& r : rows)
    out << std::left << std::setw(10) << r.label << std::setw(8) << r.run.history.size() << std::setw(14)
        << r.run.test.overall_mae << r.run.test.overall_rmse << '\n';
  out << "comparison table " << (root / "comparison.csv").string() << '\n';
  return 0;
}

}  // namespace mossl::cli
