// bcva command-line tool.
//
//   bcva gen-demos    --count N --out demos.jsonl
//   bcva gen-rollouts --count N --out rollouts.jsonl [--checkpoint ck.bin [--epsilon E --nu N]]
//   bcva label        --in demos.jsonl --in rollouts.jsonl --metric pixel --out labeled.jsonl
//   bcva train        --data labeled.jsonl --mode bcva|classifier|policy --out run/pixel
//   bcva eval         --checkpoint run/pixel/checkpoint.bin --data labeled.jsonl --out run/pixel
//   bcva sweep        --traces run/pixel/traces.csv --signal value|classifier --out run/pixel-resweep
//   bcva loop         --out loop/
//   bcva report       --dir run --out run
//
// Every subcommand also takes --config FILE, --seed N, --set key=value and
// --force. Failures print one line "error[<kind>]: <message>" to stderr.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bcva/config.hpp"
#include "bcva/error.hpp"
#include "bcva/pipeline.hpp"

namespace {

using namespace bcva;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run config file (section.key = value lines)");
  app->add_option("--seed", c.seed, "overrides the config seed");
  app->add_option("--set", c.sets, "config override key=value (repeatable)");
  app->add_flag("--force", c.force, "overwrite existing outputs");
  app->add_flag("-q,--quiet", c.quiet, "suppress progress messages");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    set_key(rc, detail::trim(std::string_view(s).substr(0, eq)), detail::trim(std::string_view(s).substr(eq + 1)));
  }
  if (c.seed) rc.seed = *c.seed;
  validate(rc);
  return rc;
}

pipeline::Log logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

int run(int argc, char** argv) {
  CLI::App app{"Value-guided help requests for a simulated door-opening robot"};
  app.require_subcommand(1);

  Common common;
  std::string out, data, checkpoint, traces, dir, mode = "bcva", signal = "value", method;
  std::vector<std::string> inputs;
  std::optional<int> count, nu;
  std::optional<double> epsilon, gamma;
  std::optional<std::string> metric;
  bool whole = false;

  auto* gen_demos = app.add_subcommand("gen-demos", "noiseless expert demonstrations");
  add_common(gen_demos, common);
  gen_demos->add_option("--count", count, "number of demos (default data.demos)");
  gen_demos->add_option("--out", out, "output dataset")->required();

  auto* gen_rollouts = app.add_subcommand("gen-rollouts", "noisy-expert or checkpoint rollouts");
  add_common(gen_rollouts, common);
  gen_rollouts->add_option("--count", count, "number of rollouts (default data.rollouts)");
  gen_rollouts->add_option("--out", out, "output dataset")->required();
  gen_rollouts->add_option("--checkpoint", checkpoint, "roll out this model instead of the noisy expert");
  auto* eps_opt = gen_rollouts->add_option("--epsilon", epsilon, "gate threshold (enables the help gate)");
  gen_rollouts->add_option("--nu", nu, "gate patience in frames")->needs(eps_opt);

  auto* label = app.add_subcommand("label", "attach discounted returns");
  add_common(label, common);
  label->add_option("--in", inputs, "input datasets, merged in order")->required();
  label->add_option("--metric", metric, "time|pixel|movement (default returns.metric)");
  label->add_option("--gamma", gamma, "discount factor (default returns.gamma)");
  label->add_option("--out", out, "output dataset")->required();

  auto* train = app.add_subcommand("train", "train a model on the training split");
  add_common(train, common);
  train->add_option("--data", data, "labeled dataset")->required();
  train->add_option("--mode", mode, "bcva|classifier|policy")->check(CLI::IsMember({"bcva", "classifier", "policy"}));
  train->add_flag("--all", whole, "train on every episode instead of the training split");
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the validation split");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data, "dataset")->required();
  eval->add_flag("--all", whole, "score every episode instead of the validation split");
  eval->add_option("--out", out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "threshold sweep over a traces file");
  add_common(sweep, common);
  sweep->add_option("--traces", traces, "traces.csv from eval")->required();
  sweep->add_option("--signal", signal, "value|classifier (selects the epsilon grid)")
      ->check(CLI::IsMember({"value", "classifier"}));
  sweep->add_option("--method", method, "method name for the metrics row (default: signal)");
  sweep->add_option("--out", out, "output directory")->required();

  auto* loop = app.add_subcommand("loop", "dataset-aggregation loop");
  add_common(loop, common);
  loop->add_option("--out", out, "loop directory")->required();

  auto* report = app.add_subcommand("report", "collect metrics into one table");
  add_common(report, common);
  report->add_option("--dir", dir, "directory whose subdirectories hold metrics.csv")->required();
  report->add_option("--out", out, "output directory (default: --dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << '\n';
    return 2;
  }

  if (gen_demos->parsed()) {
    const RunConfig rc = resolve(common);
    pipeline::cmd_gen_demos(rc, count.value_or(rc.data.demos), out, common.force);
  } else if (gen_rollouts->parsed()) {
    RunConfig rc = resolve(common);
    std::optional<GateConfig> gate;
    if (epsilon) gate = GateConfig{*epsilon, nu.value_or(GateConfig{}.nu), GateSignal::ValueHead};
    std::optional<fs::path> ck;
    if (!checkpoint.empty()) ck = checkpoint;
    pipeline::cmd_gen_rollouts(rc, count.value_or(rc.data.rollouts), out, common.force, ck, gate);
  } else if (label->parsed()) {
    RunConfig rc = resolve(common);
    if (metric) rc.returns.metric = parse_metric(*metric);
    if (gamma) rc.returns.gamma = *gamma;
    validate(rc);
    std::vector<fs::path> paths(inputs.begin(), inputs.end());
    for (const auto& w : pipeline::cmd_label(rc, paths, out, common.force)) {
      if (!common.quiet) std::cerr << "warning: " << w << '\n';
    }
  } else if (train->parsed()) {
    const RunConfig rc = resolve(common);
    pipeline::cmd_train(rc, data, net::parse_train_mode(mode), whole, out, common.force);
  } else if (eval->parsed()) {
    const RunConfig rc = resolve(common);
    const auto r = pipeline::cmd_eval(rc, checkpoint, data, whole, out, common.force);
    std::cout << pipeline::kMetricsHeader << '\n' << pipeline::metrics_row(r.method, r.sweep) << '\n';
  } else if (sweep->parsed()) {
    const RunConfig rc = resolve(common);
    const auto mode_for = signal == "classifier" ? net::TrainMode::Classifier : net::TrainMode::Bcva;
    const std::string name = method.empty() ? signal : method;
    const auto s = pipeline::cmd_sweep(rc, traces, mode_for, name, out, common.force);
    std::cout << pipeline::kMetricsHeader << '\n' << pipeline::metrics_row(name, s) << '\n';
  } else if (loop->parsed()) {
    const RunConfig rc = resolve(common);
    const fs::path root(out);
    if (common.force && fs::exists(root / "manifest.json")) fs::remove_all(root);
    const auto r = pipeline::run_loop(rc, root, logger(common));
    std::cout << pipeline::loop_summary_csv(r);
  } else if (report->parsed()) {
    std::cout << pipeline::cmd_report(dir, out.empty() ? fs::path(dir) : fs::path(out), common.force);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const bcva::Error& e) {
    std::cerr << "error[" << bcva::to_string(e.kind()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error[io]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 3;
  }
}
