#pragma once

// End-to-end stages shared by the command-line tool and the acceptance
// suite: dataset generation, labeling, training, evaluation, reporting and
// the dataset-aggregation loop.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bcva/bcva_net.hpp"
#include "bcva/config.hpp"
#include "bcva/doorsim.hpp"
#include "bcva/error.hpp"
#include "bcva/helpgate.hpp"
#include "bcva/returns.hpp"
#include "bcva/rng.hpp"
#include "bcva/trajlog.hpp"

namespace bcva::pipeline {

namespace fs = std::filesystem;

/// Progress sink; the default discards messages.
using Log = std::function<void(const std::string&)>;

inline void log_to(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

// ---------------------------------------------------------------------------
// Generation

inline std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index) {
  return CounterRng(seed, 0x5EED).fork(index).next_u64();
}

inline std::string episode_id(const std::string& prefix, std::uint64_t seed, std::size_t index) {
  std::string n = std::to_string(index);
  if (n.size() < 5) n.insert(0, 5 - n.size(), '0');
  return prefix + "-" + std::to_string(seed) + "-" + n;
}

inline Trajectory expert_demo(const RunConfig& rc, std::uint64_t world_seed, std::string id) {
  sim::RolloutOptions options{std::move(id), Provenance::expert(), rc.observation, std::nullopt};
  const sim::Policy policy = [&](const sim::WorldState& s, const Observation&) {
    return sim::scripted_expert(s, rc.world, rc.expert);
  };
  Trajectory t = sim::rollout(policy, rc.world, world_seed, options);
  if (!t.outcome.is_success()) {
    throw DomainError("scripted expert did not succeed on world seed " + std::to_string(world_seed) + " (" +
                      to_string(t.outcome) + ")");
  }
  return t;
}

/// `count` noiseless expert demonstrations.
inline Dataset generate_demos(const RunConfig& rc, int count, std::uint64_t seed, const std::string& prefix = "demo") {
  if (count < 0) throw UsageError("demo count must be >= 0");
  Dataset d;
  d.spec = rc.observation;
  d.trajectories.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    d.trajectories.push_back(expert_demo(rc, episode_seed(seed, i), episode_id(prefix, seed, i)));
  }
  return d;
}

inline constexpr const char* kNoisyExpertId = "noisy-expert";

/// `count` rollouts of the noisy expert, every one run to its outcome.
inline Dataset generate_noisy_rollouts(const RunConfig& rc, int count, std::uint64_t seed,
                                       const std::string& prefix = "rollout") {
  if (count < 0) throw UsageError("rollout count must be >= 0");
  Dataset d;
  d.spec = rc.observation;
  d.trajectories.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t ws = episode_seed(seed, i);
    sim::NoisyExpert expert(rc.world, rc.expert, ws);
    const sim::Policy policy = [&](const sim::WorldState& s, const Observation&) { return expert(s); };
    sim::RolloutOptions options{episode_id(prefix, seed, i), Provenance::rollout(kNoisyExpertId), rc.observation,
                                std::nullopt};
    d.trajectories.push_back(sim::rollout(policy, rc.world, ws, options));
  }
  return d;
}

/// Gate signal of a trained model: the value estimate, or the negated
/// failure probability for a classifier.
inline double gate_signal(const net::Prediction& p, net::TrainMode mode) {
  return mode == net::TrainMode::Classifier ? classifier_gate_signal(p.failure_prob) : p.value;
}

/// `count` rollouts of a trained policy, optionally with the help gate active.
inline Dataset generate_model_rollouts(const RunConfig& rc, const net::ModelParams& model, net::TrainMode mode,
                                       const std::string& policy_id, int count, std::uint64_t seed,
                                       const std::string& prefix, const std::optional<GateConfig>& gate) {
  if (count < 0) throw UsageError("rollout count must be >= 0");
  Dataset d;
  d.spec = rc.observation;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t ws = episode_seed(seed, i);
    // The rollout queries the policy before the gate on every frame, so the
    // gate reuses the prediction made for the action.
    net::Prediction last;
    const sim::Policy policy = [&](const sim::WorldState&, const Observation& obs) {
      last = net::predict(model, obs);
      return last.action;
    };
    sim::RolloutOptions options{episode_id(prefix, seed, i), Provenance::rollout(policy_id), rc.observation,
                                std::nullopt};
    if (gate) options.gate = sim::RolloutGate{*gate, [&](const Observation&) { return gate_signal(last, mode); }};
    d.trajectories.push_back(sim::rollout(policy, rc.world, ws, options));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Labeling

/// Writes per-step returns into `d` and records the config and statistics.
/// Statistics come from `fit_on` unless `frozen` is given.
inline std::vector<std::string> label_in_place(Dataset& d, const ReturnConfig& config, const Dataset& fit_on,
                                               const std::optional<DistanceStats>& frozen = std::nullopt) {
  std::vector<std::string> warnings;
  DistanceStats stats;
  if (frozen) {
    stats = *frozen;
  } else if (config.metric == DistanceMetric::Time && fit_on.frame_count() - fit_on.trajectories.size() < 2) {
    stats = DistanceStats{};
  } else {
    auto fit = fit_distance_stats(fit_on);
    stats = fit.stats;
    warnings = std::move(fit.warnings);
  }
  for (auto& t : d.trajectories) {
    t.returns.clear();
    if (t.outcome.is_labelable()) t.returns = discounted_returns(t, config, stats);
  }
  d.distance_stats = stats;
  d.labels = config;
  return warnings;
}

/// Train / validation partition of a rollout dataset by the configured
/// hash-threshold rule; expert demonstrations always train.
inline Split split(const Dataset& d, const DataConfig& data) {
  return split_dataset(d, data.validation_fraction, data.split_salt, true);
}

// ---------------------------------------------------------------------------
// Training

struct TrainedModel {
  net::ModelParams params;
  net::CheckpointMeta meta;
  std::vector<net::EpochRecord> curve;
};

inline net::ModelConfig model_config_for(const RunConfig& rc, const Dataset& d) {
  std::size_t joints = 0;
  for (const auto& t : d.trajectories) {
    if (!t.steps.empty()) {
      joints = t.steps.front().observation.kinematics.joint_angles.size();
      break;
    }
  }
  net::ModelConfig m = rc.model;
  m.input_dim = net::input_dim_for(d.spec, joints);
  return m;
}

/// Trains a fresh model seeded by `seed` on every trajectory of `datasets`.
inline TrainedModel train_model(const RunConfig& rc, const std::vector<const Dataset*>& datasets, net::TrainMode mode,
                                std::uint64_t seed) {
  if (datasets.empty()) throw UsageError("train: no datasets");
  for (const Dataset* d : datasets) {
    if (!(d->spec == datasets.front()->spec)) throw ShapeError("train: datasets disagree on the observation spec");
  }
  const Dataset& first = *datasets.front();
  TrainedModel out;
  out.params = net::init_params(model_config_for(rc, first), seed);
  if (mode == net::TrainMode::Bcva) {
    for (const Dataset* d : datasets) {
      if (!d->labels) throw UsageError("train: bcva mode needs labeled datasets (run label first)");
      if (!(*d->labels == *first.labels)) throw UsageError("train: datasets were labeled with different configs");
    }
  }
  net::TrainConfig tc = rc.train;
  tc.seed = seed;
  const auto data = net::collect_frames(datasets, mode);
  out.curve = net::train(out.params, data, tc, mode);
  out.meta.mode = net::to_string(mode);
  out.meta.spec = first.spec;
  if (mode == net::TrainMode::Bcva) {
    out.meta.labels = first.labels;
    out.meta.stats = first.distance_stats;
  }
  out.meta.train_steps = static_cast<std::int64_t>(tc.epochs) * tc.steps_per_epoch;
  return out;
}

inline constexpr const char* kLossHeader = "epoch,total,bc,head,kl";

inline std::string loss_csv(const std::vector<net::EpochRecord>& curve) {
  std::ostringstream os;
  os << kLossHeader << '\n';
  for (const auto& r : curve) {
    os << r.epoch << ',' << format_number(r.total) << ',' << format_number(r.bc) << ',' << format_number(r.head)
       << ',' << format_number(r.kl) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation

/// Report name of a trained model: "classifier", "policy", or
/// "bcva-<metric>".
inline std::string method_name(const net::CheckpointMeta& meta) {
  if (meta.mode != "bcva") return meta.mode;
  if (!meta.labels) throw FormatError("checkpoint: bcva model without a label config");
  return "bcva-" + std::string(to_string(meta.labels->metric));
}

struct EvalResult {
  std::string method;
  std::vector<EpisodeTrace> traces;
  SweepResult sweep;
};

inline std::vector<EpisodeTrace> signal_traces(const net::ModelParams& model, net::TrainMode mode,
                                               const Dataset& episodes) {
  std::vector<EpisodeTrace> traces;
  traces.reserve(episodes.trajectories.size());
  std::vector<const Observation*> obs;
  for (const auto& t : episodes.trajectories) {
    obs.clear();
    for (const auto& s : t.steps) obs.push_back(&s.observation);
    EpisodeTrace tr{t.episode_id, t.outcome, {}};
    for (const auto& p : net::predict_batch(model, obs)) tr.values.push_back(gate_signal(p, mode));
    traces.push_back(std::move(tr));
  }
  return traces;
}

inline SweepResult sweep_for(const std::vector<EpisodeTrace>& traces, net::TrainMode mode, const GateGrids& grids) {
  return sweep(traces, mode == net::TrainMode::Classifier ? grids.classifier_epsilons : grids.value_epsilons,
               grids.nus);
}

/// Gate traces and the threshold sweep of a model on held-out episodes.
inline EvalResult evaluate(const net::ModelParams& model, const net::CheckpointMeta& meta, const Dataset& validation,
                           const GateGrids& grids) {
  if (!(validation.spec == meta.spec)) throw ShapeError("eval: validation spec differs from the checkpoint spec");
  const net::TrainMode mode = net::parse_train_mode(meta.mode);
  EvalResult r;
  r.method = method_name(meta);
  r.traces = signal_traces(model, mode, validation);
  r.sweep = sweep_for(r.traces, mode, grids);
  return r;
}

inline constexpr const char* kMetricsHeader = "method,f1,accuracy,precision,recall,epsilon,nu,tp,fp,tn,fn";

/// One metrics row for the best sweep cell; ratio fields are empty when the
/// best cell is undefined.
inline std::string metrics_row(const std::string& method, const SweepResult& s) {
  std::ostringstream os;
  os << method << ',';
  if (!s.best) {
    os << ",,,,,,,,,";
    return os.str();
  }
  const SweepCell& c = s.cells[*s.best];
  os << format_optional(c.f1) << ',' << format_optional(c.accuracy) << ',' << format_optional(c.precision) << ','
     << format_optional(c.recall) << ',' << format_number(c.epsilon) << ',' << c.nu << ',' << c.matrix.tp << ','
     << c.matrix.fp << ',' << c.matrix.tn << ',' << c.matrix.fn;
  return os.str();
}

inline std::string metrics_csv(const std::string& method, const SweepResult& s) {
  return std::string(kMetricsHeader) + "\n" + metrics_row(method, s) + "\n";
}

inline constexpr const char* kTracesHeader = "episode_id,outcome,frame,signal";

inline std::string traces_csv(const std::vector<EpisodeTrace>& traces) {
  std::ostringstream os;
  os << kTracesHeader << '\n';
  for (const auto& t : traces) {
    const std::string outcome = t.outcome.is_failure() ? "failure" : t.outcome.is_success() ? "success" : "asked_for_help";
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      os << t.episode_id << ',' << outcome << ',' << i << ',' << format_number(t.values[i]) << '\n';
    }
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string f;
  std::stringstream ss(line);
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

/// Parses a traces CSV back into per-episode traces, in file order.
inline std::vector<EpisodeTrace> parse_traces_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kTracesHeader) throw FormatError("traces: missing or wrong header");
  std::vector<EpisodeTrace> traces;
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    auto fail = [&](const std::string& what) -> void {
      throw FormatError("traces line " + std::to_string(number) + ": " + what);
    };
    if (f.size() != 4) fail("expected 4 fields");
    Outcome outcome;
    if (f[1] == "success") {
      outcome = Outcome::success();
    } else if (f[1] == "failure") {
      outcome = Outcome::failure(FailureMode::Collision);
    } else if (f[1] == "asked_for_help") {
      outcome = Outcome::asked_for_help();
    } else {
      fail("unknown outcome '" + f[1] + "'");
    }
    std::size_t frame = 0;
    double value = 0.0;
    try {
      frame = std::stoul(f[2]);
      value = std::stod(f[3]);
    } catch (const std::exception&) {
      fail("unparsable frame or signal");
    }
    if (traces.empty() || traces.back().episode_id != f[0]) {
      if (frame != 0) fail("episode '" + f[0] + "' does not start at frame 0");
      traces.push_back(EpisodeTrace{f[0], outcome, {}});
    } else if (frame != traces.back().values.size()) {
      fail("frames of episode '" + f[0] + "' are not consecutive");
    }
    traces.back().values.push_back(value);
  }
  return traces;
}

// ---------------------------------------------------------------------------
// Report

inline const std::vector<std::string>& report_methods() {
  static const std::vector<std::string> methods{"bcva-time", "bcva-movement", "bcva-pixel", "classifier"};
  return methods;
}

struct ReportRow {
  std::string method;
  std::optional<std::vector<std::string>> fields;  // metrics columns after the method, verbatim
};

/// Collects `<dir>/<sub>/metrics.csv` rows. The four standard methods always
/// appear, absent ones without fields; other methods follow by name.
inline std::vector<ReportRow> collect_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("report: " + dir.string() + " is not a directory");
  std::map<std::string, std::vector<std::string>> found;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "metrics.csv")) files.push_back(entry.path() / "metrics.csv");
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    std::istringstream in(detail::read_text(file));
    std::string header, row;
    if (!std::getline(in, header) || header != kMetricsHeader || !std::getline(in, row)) {
      throw FormatError("report: " + file.string() + " is not a metrics file");
    }
    auto f = detail::split_csv(row);
    if (f.size() != 11) throw FormatError("report: " + file.string() + ": expected 11 fields");
    const std::string method = f.front();
    f.erase(f.begin());
    if (!found.emplace(method, std::move(f)).second) {
      throw FormatError("report: method '" + method + "' appears in more than one directory");
    }
  }
  std::vector<ReportRow> rows;
  for (const auto& m : report_methods()) {
    auto it = found.find(m);
    rows.push_back({m, it == found.end() ? std::nullopt : std::optional(it->second)});
    if (it != found.end()) found.erase(it);
  }
  for (auto& [m, f] : found) rows.push_back({m, std::move(f)});
  return rows;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    os << r.method;
    if (r.fields) {
      for (const auto& f : *r.fields) os << ',' << f;
    } else {
      os << ",,,,,,,,,,";
    }
    os << '\n';
  }
  return os.str();
}

/// Fixed-width table of F1, accuracy, precision and recall with the best
/// cell; absent methods and undefined values print as "-".
inline std::string report_table(const std::vector<ReportRow>& rows) {
  const std::vector<std::string> head{"method", "F1", "accuracy", "precision", "recall", "epsilon", "nu"};
  std::vector<std::vector<std::string>> cells{head};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.method};
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string v = r.fields ? (*r.fields)[i] : std::string();
      line.push_back(v.empty() ? "-" : v);
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      os << line[i];
      if (i + 1 < line.size()) os << std::string(width[i] - line[i].size() + 2, ' ');
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment: every method on one shared split

struct MethodResult {
  std::string method;
  SweepResult sweep;
  std::vector<net::EpochRecord> curve;
};

struct ExperimentResult {
  std::size_t demos = 0;
  std::size_t rollouts = 0;
  std::size_t failures = 0;
  std::size_t validation_episodes = 0;
  std::vector<MethodResult> methods;  // bcva-time, bcva-movement, bcva-pixel, classifier

  double failure_rate() const { return rollouts ? static_cast<double>(failures) / rollouts : 0.0; }
  const MethodResult& method(const std::string& name) const {
    for (const auto& m : methods) {
      if (m.method == name) return m;
    }
    throw UsageError("experiment: no method '" + name + "'");
  }
};

inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return CounterRng(seed, stage).next_u64() >> 16; }

/// Generates demos and noisy rollouts from `rc.seed`, holds out the
/// validation split of the rollouts, and trains and scores the three value
/// metrics and the classifier baseline on the same episodes.
inline ExperimentResult run_experiment(const RunConfig& rc, const Log& log = {}) {
  validate(rc);
  ExperimentResult r;
  Dataset train;
  Dataset validation;
  {
    Dataset all = generate_demos(rc, rc.data.demos, stage_seed(rc.seed, 0xDE30), "demo");
    Dataset rollouts = generate_noisy_rollouts(rc, rc.data.rollouts, stage_seed(rc.seed, 0x2011), "rollout");
    r.demos = all.trajectories.size();
    r.rollouts = rollouts.trajectories.size();
    for (const auto& t : rollouts.trajectories) r.failures += t.outcome.is_failure() ? 1 : 0;
    for (auto& t : rollouts.trajectories) all.trajectories.push_back(std::move(t));
    rollouts.trajectories.clear();
    Split s = split(all, rc.data);
    train = std::move(s.train);
    validation = std::move(s.validation);
  }
  r.validation_episodes = validation.trajectories.size();
  log_to(log, "data: " + std::to_string(r.demos) + " demos, " + std::to_string(r.rollouts) + " rollouts, " +
                  std::to_string(r.failures) + " failures, " + std::to_string(r.validation_episodes) + " held out");

  const std::uint64_t train_seed = stage_seed(rc.seed, 0x7EA1);
  for (DistanceMetric metric : {DistanceMetric::Time, DistanceMetric::Kinematic, DistanceMetric::Pixel}) {
    ReturnConfig labels = rc.returns;
    labels.metric = metric;
    label_in_place(train, labels, train);
    TrainedModel m = train_model(rc, {&train}, net::TrainMode::Bcva, train_seed);
    EvalResult e = evaluate(m.params, m.meta, validation, rc.gate);
    log_to(log, e.method + ": " + metrics_row(e.method, e.sweep));
    r.methods.push_back({e.method, std::move(e.sweep), std::move(m.curve)});
  }
  TrainedModel c = train_model(rc, {&train}, net::TrainMode::Classifier, train_seed);
  EvalResult e = evaluate(c.params, c.meta, validation, rc.gate);
  log_to(log, e.method + ": " + metrics_row(e.method, e.sweep));
  r.methods.push_back({e.method, std::move(e.sweep), std::move(c.curve)});
  return r;
}

// ---------------------------------------------------------------------------
// File-level commands used by the command-line tool

/// Refuses to replace an existing output unless `force` is set.
inline void claim_output(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw UsageError(path.string() + " already exists (pass --force to overwrite)");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

inline void cmd_gen_demos(const RunConfig& rc, int count, const fs::path& out, bool force) {
  validate(rc);
  claim_output(out, force);
  write_dataset(generate_demos(rc, count, rc.seed), out);
}

/// Noisy-expert rollouts, or rollouts of a checkpoint when one is given
/// (with the help gate active when `gate` is set).
inline void cmd_gen_rollouts(const RunConfig& rc, int count, const fs::path& out, bool force,
                             const std::optional<fs::path>& checkpoint, const std::optional<GateConfig>& gate) {
  validate(rc);
  claim_output(out, force);
  if (!checkpoint) {
    if (gate) throw UsageError("gen-rollouts: a gate needs a checkpoint");
    write_dataset(generate_noisy_rollouts(rc, count, rc.seed), out);
    return;
  }
  const net::Checkpoint ck = net::load_checkpoint(*checkpoint);
  if (!(ck.meta.spec == rc.observation)) throw ShapeError("gen-rollouts: checkpoint spec differs from the config");
  const net::TrainMode mode = net::parse_train_mode(ck.meta.mode);
  write_dataset(generate_model_rollouts(rc, ck.params, mode, "checkpoint:" + checkpoint->filename().string(), count,
                                        rc.seed, "rollout", gate),
                out);
}

/// Merges the inputs, labels every labelable trajectory, and writes one
/// dataset. Normalization statistics are fit on the training split.
inline std::vector<std::string> cmd_label(const RunConfig& rc, const std::vector<fs::path>& inputs,
                                          const fs::path& out, bool force) {
  validate(rc);
  if (inputs.empty()) throw UsageError("label: no input datasets");
  for (const auto& in : inputs) {
    if (fs::exists(in) && fs::exists(out) && fs::equivalent(in, out)) throw UsageError("label: output equals an input");
  }
  claim_output(out, force);
  Dataset merged;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Dataset d = read_dataset(inputs[i]);
    if (i == 0) {
      merged.spec = d.spec;
    } else if (!(d.spec == merged.spec)) {
      throw ShapeError("label: " + inputs[i].string() + " has a different observation spec");
    }
    for (auto& t : d.trajectories) merged.trajectories.push_back(std::move(t));
  }
  std::set<std::string> ids;
  for (const auto& t : merged.trajectories) {
    if (!ids.insert(t.episode_id).second) throw FormatError("label: duplicate episode id '" + t.episode_id + "'");
  }
  const Split s = split(merged, rc.data);
  auto warnings = label_in_place(merged, rc.returns, s.train);
  write_dataset(merged, out);
  return warnings;
}

/// Trains on the training split (or every episode) of a dataset; writes
/// checkpoint.bin and loss.csv into `out`.
inline void cmd_train(const RunConfig& rc, const fs::path& data, net::TrainMode mode, bool whole, const fs::path& out,
                      bool force) {
  validate(rc);
  claim_output(out / "checkpoint.bin", force);
  Dataset d = read_dataset(data);
  if (!whole) d = split(d, rc.data).train;
  TrainedModel m = train_model(rc, {&d}, mode, rc.seed);
  net::save_checkpoint(out / "checkpoint.bin", m.params, m.meta);
  write_text_atomic(out / "loss.csv", loss_csv(m.curve));
}

/// Scores a checkpoint on the validation split (or every episode) of a
/// dataset; writes traces.csv, heatmap.csv and metrics.csv into `out`.
inline EvalResult cmd_eval(const RunConfig& rc, const fs::path& checkpoint, const fs::path& data, bool whole,
                           const fs::path& out, bool force) {
  validate(rc);
  claim_output(out / "metrics.csv", force);
  const net::Checkpoint ck = net::load_checkpoint(checkpoint);
  Dataset d = read_dataset(data);
  if (!whole) d = split(d, rc.data).validation;
  for (auto& t : d.trajectories) t.returns.clear();
  d.labels.reset();
  d.distance_stats.reset();
  EvalResult r = evaluate(ck.params, ck.meta, d, rc.gate);
  write_text_atomic(out / "traces.csv", traces_csv(r.traces));
  export_heatmap(r.sweep, out / "heatmap.csv");
  write_text_atomic(out / "metrics.csv", metrics_csv(r.method, r.sweep));
  return r;
}

/// Re-runs the threshold sweep on a traces file; writes heatmap.csv and
/// metrics.csv into `out`.
inline SweepResult cmd_sweep(const RunConfig& rc, const fs::path& traces, net::TrainMode signal,
                             const std::string& method, const fs::path& out, bool force) {
  validate(rc);
  claim_output(out / "metrics.csv", force);
  std::ifstream in(traces);
  if (!in) throw IoError("cannot open " + traces.string());
  const auto t = parse_traces_csv(in);
  SweepResult s = sweep_for(t, signal, rc.gate);
  export_heatmap(s, out / "heatmap.csv");
  write_text_atomic(out / "metrics.csv", metrics_csv(method, s));
  return s;
}

/// Collects metrics from the subdirectories of `dir`; writes report.csv
/// and report.txt into `out` and returns the table text.
inline std::string cmd_report(const fs::path& dir, const fs::path& out, bool force) {
  const auto rows = collect_report(dir);
  claim_output(out / "report.csv", force);
  const std::string table = report_table(rows);
  write_text_atomic(out / "report.csv", report_csv(rows));
  write_text_atomic(out / "report.txt", table);
  return table;
}

// ---------------------------------------------------------------------------
// Dataset-aggregation loop
//
// Generation 0 trains the policy alone on the initial demonstrations and
// collects labeled rollouts without a gate. Every later generation labels
// the aggregate, trains policy and value jointly, rolls out with the gate
// active, and appends every rollout plus one expert replay of each
// help-request scenario. Each generation is evaluated on a fixed set of
// noisy-expert validation rollouts that never enters training.
//
// Layout under the output directory:
//   validation.jsonl         held-out episodes
//   gen-NNN/new.jsonl        trajectories appended by generation N
//   gen-NNN/checkpoint.bin, loss.csv, heatmap.csv, metrics.csv
//   manifest.json            config and per-generation records; a generation
//                            counts as complete once it is listed here

struct GenerationRecord {
  int generation = 0;
  std::string mode;
  std::size_t train_episodes = 0;  // aggregate size the model was trained on
  std::size_t dataset_episodes = 0;  // aggregate size after this generation
  std::size_t rollouts = 0;
  std::size_t help_requests = 0;
  std::size_t help_demos = 0;
  std::optional<double> f1, precision, recall, accuracy;
  std::optional<double> epsilon;
  std::optional<int> nu;
  bool superset_ok = false;
  bool isolation_ok = false;
};

struct LoopResult {
  std::vector<GenerationRecord> generations;
};

namespace detail {

using nlohmann::json;

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json record_to_json(const GenerationRecord& r) {
  return json{{"generation", r.generation},
              {"mode", r.mode},
              {"train_episodes", r.train_episodes},
              {"dataset_episodes", r.dataset_episodes},
              {"rollouts", r.rollouts},
              {"help_requests", r.help_requests},
              {"help_demos", r.help_demos},
              {"f1", optional_json(r.f1)},
              {"precision", optional_json(r.precision)},
              {"recall", optional_json(r.recall)},
              {"accuracy", optional_json(r.accuracy)},
              {"epsilon", optional_json(r.epsilon)},
              {"nu", r.nu ? json(*r.nu) : json(nullptr)},
              {"superset_ok", r.superset_ok},
              {"isolation_ok", r.isolation_ok}};
}

inline std::optional<double> optional_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

inline GenerationRecord record_from_json(const json& j) {
  GenerationRecord r;
  r.generation = j.at("generation").get<int>();
  r.mode = j.at("mode").get<std::string>();
  r.train_episodes = j.at("train_episodes").get<std::size_t>();
  r.dataset_episodes = j.at("dataset_episodes").get<std::size_t>();
  r.rollouts = j.at("rollouts").get<std::size_t>();
  r.help_requests = j.at("help_requests").get<std::size_t>();
  r.help_demos = j.at("help_demos").get<std::size_t>();
  r.f1 = optional_from(j.at("f1"));
  r.precision = optional_from(j.at("precision"));
  r.recall = optional_from(j.at("recall"));
  r.accuracy = optional_from(j.at("accuracy"));
  r.epsilon = optional_from(j.at("epsilon"));
  if (!j.at("nu").is_null()) r.nu = j.at("nu").get<int>();
  r.superset_ok = j.at("superset_ok").get<bool>();
  r.isolation_ok = j.at("isolation_ok").get<bool>();
  return r;
}

inline fs::path generation_dir(const fs::path& out, int g) {
  std::string n = std::to_string(g);
  if (n.size() < 3) n.insert(0, 3 - n.size(), '0');
  return out / ("gen-" + n);
}

inline std::set<std::string> episode_ids(const Dataset& d) {
  std::set<std::string> ids;
  for (const auto& t : d.trajectories) ids.insert(t.episode_id);
  return ids;
}

inline void append(Dataset& into, const Dataset& from) {
  into.trajectories.insert(into.trajectories.end(), from.trajectories.begin(), from.trajectories.end());
}

}  // namespace detail

inline constexpr const char* kLoopSummaryHeader =
    "generation,mode,train_episodes,dataset_episodes,rollouts,help_requests,help_demos,f1,precision,recall,accuracy,"
    "epsilon,nu,superset_ok,isolation_ok";

inline std::string loop_summary_csv(const LoopResult& r) {
  std::ostringstream os;
  os << kLoopSummaryHeader << '\n';
  for (const auto& g : r.generations) {
    os << g.generation << ',' << g.mode << ',' << g.train_episodes << ',' << g.dataset_episodes << ',' << g.rollouts
       << ',' << g.help_requests << ',' << g.help_demos << ',' << format_optional(g.f1) << ','
       << format_optional(g.precision) << ',' << format_optional(g.recall) << ',' << format_optional(g.accuracy)
       << ',' << format_optional(g.epsilon) << ',' << (g.nu ? std::to_string(*g.nu) : std::string()) << ','
       << (g.superset_ok ? 1 : 0) << ',' << (g.isolation_ok ? 1 : 0) << '\n';
  }
  return os.str();
}

/// Runs (or resumes) the loop in `out`. Generation 0 is the policy-only
/// bootstrap; generations 1..loop.generations train with the value head.
inline LoopResult run_loop(const RunConfig& rc, const fs::path& out, const Log& log = {}) {
  using detail::json;
  validate(rc);
  fs::create_directories(out);
  const fs::path manifest_path = out / "manifest.json";
  const std::string config = config_text(rc);

  LoopResult result;
  json manifest{{"format", "bcva-loop"}, {"config", config}, {"generations", json::array()}};
  if (fs::exists(manifest_path)) {
    try {
      manifest = json::parse(detail::read_text(manifest_path));
      for (const auto& g : manifest.at("generations")) result.generations.push_back(detail::record_from_json(g));
    } catch (const json::exception& e) {
      throw FormatError("loop manifest " + manifest_path.string() + ": " + e.what());
    }
    if (manifest.at("config").get<std::string>() != config) {
      throw UsageError("loop: " + out.string() + " holds a run with a different config (use --force to restart)");
    }
  }

  // Held-out validation rollouts, fixed for the whole run.
  const std::uint64_t val_seed = CounterRng(rc.seed, 0x7A11).next_u64() >> 16;
  const fs::path val_path = out / "validation.jsonl";
  Dataset validation;
  if (fs::exists(val_path)) {
    validation = read_dataset(val_path);
  } else {
    validation = generate_noisy_rollouts(rc, rc.loop.validation_rollouts, val_seed, "val");
    write_dataset(validation, val_path);
  }
  const auto val_ids = detail::episode_ids(validation);

  // Rebuild the aggregate from completed generations.
  Dataset aggregate;
  aggregate.spec = rc.observation;
  const std::uint64_t demo_seed = CounterRng(rc.seed, 0xDE30).next_u64() >> 16;
  if (result.generations.empty()) {
    aggregate = generate_demos(rc, rc.loop.initial_demos, demo_seed, "demo");
  } else {
    aggregate = read_dataset(out / "initial.jsonl");
    for (const auto& g : result.generations) {
      detail::append(aggregate, read_dataset(detail::generation_dir(out, g.generation) / "new.jsonl"));
    }
  }
  if (!fs::exists(out / "initial.jsonl")) write_dataset(aggregate, out / "initial.jsonl");

  for (int g = static_cast<int>(result.generations.size()); g <= rc.loop.generations; ++g) {
    const fs::path dir = detail::generation_dir(out, g);
    fs::create_directories(dir);
    const net::TrainMode mode = g == 0 ? net::TrainMode::PolicyOnly : net::TrainMode::Bcva;
    GenerationRecord rec;
    rec.generation = g;
    rec.mode = net::to_string(mode);
    rec.train_episodes = aggregate.trajectories.size();

    // Evaluation isolation: no validation episode may reach training.
    rec.isolation_ok = true;
    for (const auto& t : aggregate.trajectories) {
      if (val_ids.count(t.episode_id)) rec.isolation_ok = false;
    }
    if (!rec.isolation_ok) throw DomainError("loop: validation episodes leaked into the training aggregate");

    if (mode == net::TrainMode::Bcva) label_in_place(aggregate, rc.returns, aggregate);
    log_to(log, "generation " + std::to_string(g) + ": training " + rec.mode + " on " +
                    std::to_string(aggregate.trajectories.size()) + " episodes");
    const std::uint64_t train_seed = CounterRng(rc.seed, 0x7EA1).fork(static_cast<std::uint64_t>(g)).next_u64() >> 16;
    TrainedModel model = train_model(rc, {&aggregate}, mode, train_seed);
    net::save_checkpoint(dir / "checkpoint.bin", model.params, model.meta);
    write_text_atomic(dir / "loss.csv", loss_csv(model.curve));

    // The value head is scored even in the bootstrap generation, where it is
    // still untrained.
    const auto traces = signal_traces(model.params, net::TrainMode::Bcva, validation);
    const SweepResult sw = sweep_for(traces, net::TrainMode::Bcva, rc.gate);
    export_heatmap(sw, dir / "heatmap.csv");
    write_text_atomic(dir / "metrics.csv", metrics_csv("bcva-" + std::string(to_string(rc.returns.metric)), sw));
    std::optional<GateConfig> gate;
    if (sw.best) {
      const SweepCell& c = sw.cells[*sw.best];
      rec.f1 = c.f1;
      rec.precision = c.precision;
      rec.recall = c.recall;
      rec.accuracy = c.accuracy;
      rec.epsilon = c.epsilon;
      rec.nu = c.nu;
      if (mode == net::TrainMode::Bcva) gate = GateConfig{c.epsilon, c.nu, GateSignal::ValueHead};
    }

    const std::uint64_t roll_seed = CounterRng(rc.seed, 0x2011).fork(static_cast<std::uint64_t>(g)).next_u64() >> 16;
    const std::string policy_id = "gen-" + std::to_string(g);
    Dataset fresh = generate_model_rollouts(rc, model.params, mode, policy_id, rc.loop.rollouts_per_generation,
                                            roll_seed, "g" + std::to_string(g), gate);
    rec.rollouts = fresh.trajectories.size();
    Dataset help;
    help.spec = rc.observation;
    for (const auto& t : fresh.trajectories) {
      if (t.outcome.is_labelable()) continue;
      ++rec.help_requests;
      for (int k = 0; k < rc.loop.demos_per_help; ++k) {
        help.trajectories.push_back(
            expert_demo(rc, t.seed, "help-" + t.episode_id + (k ? "-" + std::to_string(k) : std::string())));
      }
    }
    rec.help_demos = help.trajectories.size();
    detail::append(fresh, help);
    for (auto& t : fresh.trajectories) t.returns.clear();
    write_dataset(fresh, dir / "new.jsonl");

    const auto before = detail::episode_ids(aggregate);
    for (auto& t : aggregate.trajectories) t.returns.clear();
    aggregate.labels.reset();
    aggregate.distance_stats.reset();
    detail::append(aggregate, fresh);
    const auto after = detail::episode_ids(aggregate);
    rec.superset_ok = after.size() == aggregate.trajectories.size() &&
                      std::includes(after.begin(), after.end(), before.begin(), before.end());
    if (!rec.superset_ok) throw DomainError("loop: aggregate is not a superset of the previous generation");
    rec.dataset_episodes = aggregate.trajectories.size();

    result.generations.push_back(rec);
    manifest["generations"].push_back(detail::record_to_json(rec));
    write_text_atomic(manifest_path, manifest.dump(2) + "\n");
    write_text_atomic(out / "loop_summary.csv", loop_summary_csv(result));
    log_to(log, "generation " + std::to_string(g) + ": f1 " + (rec.f1 ? format_number(*rec.f1) : "-") + ", " +
                    std::to_string(rec.help_requests) + " help requests");
  }
  return result;
}

}  // namespace bcva::pipeline
