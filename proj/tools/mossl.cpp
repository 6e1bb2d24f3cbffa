#include <exception>
#include <functional>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "mossl/commands.hpp"

namespace {

// Exit codes: 0 ok, 1 configuration/usage, 2 data or I/O, 3 numerical.
int run(const std::function<int()>& body) {
  try {
    return body();
  } catch (const mossl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const mossl::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const mossl::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modality spatio-temporal forecasting with self-supervised learning"};
  app.require_subcommand(1);
  app.fallthrough();
  mossl::cli::Options o;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress per-epoch progress");
  app.add_option("--device", o.device, "Compute device (cpu only)");

  auto with_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Run configuration JSON")->required();
    c->add_option("--seed", o.seed, "Override the configured seed");
  };
  auto with_run = [&](CLI::App* c) { c->add_option("--run", o.run, "Run directory written by train")->required(); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  with_config(synth);
  synth->add_option("--out", o.out, "Dataset directory");

  auto* prepare = app.add_subcommand("prepare", "Convert a long-format CSV into a dataset directory");
  with_config(prepare);
  prepare->add_option("--csv", o.csv, "Input CSV with header time,node,modality,value");
  prepare->add_option("--out", o.out, "Dataset directory");

  auto* train = app.add_subcommand("train", "Train one variant and evaluate it");
  with_config(train);
  train->add_option("--out", o.out, "Root directory for run folders");

  auto* eval = app.add_subcommand("eval", "Recompute metrics from a run checkpoint");
  with_run(eval);
  eval->add_option("--split", o.split, "val or test")->check(CLI::IsMember({"val", "test"}));
  eval->add_option("--out", o.out, "Directory for eval_<split>.csv/.json (default: the run)");

  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  with_config(grad);

  auto* exp = app.add_subcommand("export-repr", "Dump representations of a trained run");
  with_run(exp);
  exp->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  exp->add_option("--windows", o.windows, "Number of windows")->check(CLI::PositiveNumber);
  exp->add_option("--out", o.out, "Output directory");

  auto* ablate = app.add_subcommand("ablate", "Train every variant and tabulate them");
  with_config(ablate);
  ablate->add_option("--out", o.out, "Root directory for the ablation folder");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  mossl::logging::quiet() = quiet;

  std::ostream& out = std::cout;
  using namespace mossl::cli;
  if (*synth) return run([&] { return cmd_synth(o, out); });
  if (*prepare) return run([&] { return cmd_prepare(o, out); });
  if (*train) return run([&] { return cmd_train(o, out); });
  if (*eval) return run([&] { return cmd_eval(o, out); });
  if (*grad) return run([&] { return cmd_gradcheck(o, out); });
  if (*exp) return run([&] { return cmd_export(o, out); });
  return run([&] { return cmd_ablate(o, out); });
}
