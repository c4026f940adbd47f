#pragma once

// Ask-for-help gate: fire once the monitored signal has been at or below
// epsilon for nu consecutive frames. The sweep scores every (epsilon, nu)
// cell with an episode-level confusion matrix where failure episodes are the
// positive class and "gate fired somewhere in the trace" is the prediction.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bcva/error.hpp"
#include "bcva/trajlog.hpp"

namespace bcva {

enum class GateSignal { ValueHead, ClassifierHead };

struct GateConfig {
  double epsilon = -0.15;
  int nu = 20;
  GateSignal signal = GateSignal::ValueHead;
};

struct GateState {
  int consecutive_below = 0;
};

struct GateUpdate {
  GateState state;
  bool fire = false;
};

/// The counter saturates at nu; `fire` holds on every frame the counter
/// sits at nu.
inline GateUpdate gate_update(GateState state, double value, const GateConfig& config) {
  if (config.nu < 1) throw DomainError("gate: nu must be >= 1");
  if (value <= config.epsilon) {
    state.consecutive_below = std::min(state.consecutive_below + 1, config.nu);
  } else {
    state.consecutive_below = 0;
  }
  return {state, state.consecutive_below == config.nu};
}

struct EpisodeGate {
  bool fired = false;
  std::optional<std::size_t> first_fire_index;
};

/// Offline replay over a completed trace: finds the first run of nu values
/// at or below epsilon.
inline EpisodeGate evaluate_episode(const std::vector<double>& values, const GateConfig& config) {
  if (values.empty()) throw DomainError("evaluate_episode: empty value trace");
  if (config.nu < 1) throw DomainError("gate: nu must be >= 1");
  std::size_t run = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    run = values[i] <= config.epsilon ? run + 1 : 0;
    if (run == static_cast<std::size_t>(config.nu)) return {true, i};
  }
  return {};
}

/// Signal used by the gate for a classifier: the negated failure
/// probability, so "p >= threshold" becomes "signal <= -threshold".
inline double classifier_gate_signal(double failure_prob) { return -failure_prob; }

// ---------------------------------------------------------------------------
// Confusion-matrix sweep

struct ConfusionMatrix {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }

  std::optional<double> precision() const {
    if (tp + fp == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  std::optional<double> recall() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  /// Absent when precision or recall is; 0 when both are 0.
  std::optional<double> f1() const {
    const auto p = precision();
    const auto r = recall();
    if (!p || !r) return std::nullopt;
    if (*p + *r == 0.0) return 0.0;
    return 2.0 * *p * *r / (*p + *r);
  }
  std::optional<double> accuracy() const {
    if (total() == 0) return std::nullopt;
    return static_cast<double>(tp + tn) / static_cast<double>(total());
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct EpisodeTrace {
  std::string episode_id;
  Outcome outcome;
  std::vector<double> values;
};

struct SweepCell {
  double epsilon = 0.0;
  int nu = 1;
  ConfusionMatrix matrix;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> accuracy;
};

struct SweepResult {
  std::vector<double> epsilons;
  std::vector<int> nus;
  /// Row-major over (nu, epsilon): cells[i * epsilons.size() + j] holds
  /// (nus[i], epsilons[j]).
  std::vector<SweepCell> cells;
  std::optional<std::size_t> best;

  const SweepCell& cell(std::size_t nu_index, std::size_t eps_index) const {
    return cells.at(nu_index * epsilons.size() + eps_index);
  }
};

/// Decimal grid lo, lo + step, ..., hi computed from integer hundredths so
/// values print exactly as written.
inline std::vector<double> hundredths_grid(int lo, int hi, int step) {
  std::vector<double> g;
  for (int v = lo; v <= hi; v += step) g.push_back(v / 100.0);
  return g;
}

inline std::vector<double> default_value_epsilons() { return hundredths_grid(-40, -5, 5); }
inline std::vector<int> default_nus() { return {5, 10, 15, 20, 25, 30}; }
/// Classifier grid on the negated failure probability (thresholds 0.5..0.95).
inline std::vector<double> default_classifier_epsilons() { return hundredths_grid(-95, -50, 5); }

namespace detail {

/// Smallest window maximum over all length-nu windows (+inf when the trace is
/// shorter than nu). The gate fires at (eps, nu) iff this is <= eps.
inline double min_window_max(const std::vector<double>& v, int nu) {
  const auto w = static_cast<std::size_t>(nu);
  if (v.size() < w) return std::numeric_limits<double>::infinity();
  std::deque<std::size_t> dq;  // indices with decreasing values
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    while (!dq.empty() && v[dq.back()] <= v[i]) dq.pop_back();
    dq.push_back(i);
    if (dq.front() + w <= i) dq.pop_front();
    if (i + 1 >= w) best = std::min(best, v[dq.front()]);
  }
  return best;
}

inline bool better_cell(const SweepCell& a, const SweepCell& b) {
  if (*a.f1 != *b.f1) return *a.f1 > *b.f1;
  if (a.nu != b.nu) return a.nu < b.nu;
  return a.epsilon > b.epsilon;
}

}  // namespace detail

/// Scores every grid cell. Help-truncated episodes are skipped. The best
/// cell maximizes F1, ties going to smaller nu, then larger epsilon.
inline SweepResult sweep(const std::vector<EpisodeTrace>& episodes, const std::vector<double>& epsilons,
                         const std::vector<int>& nus) {
  if (epsilons.empty() || nus.empty()) throw DomainError("sweep: empty epsilon or nu grid");
  for (int nu : nus) {
    if (nu < 1) throw DomainError("sweep: nu must be >= 1");
  }
  SweepResult result;
  result.epsilons = epsilons;
  result.nus = nus;

  std::vector<const EpisodeTrace*> used;
  for (const auto& e : episodes) {
    if (!e.outcome.is_labelable()) continue;
    if (e.values.empty()) throw DomainError("sweep: episode '" + e.episode_id + "' has an empty trace");
    used.push_back(&e);
  }

  for (int nu : nus) {
    std::vector<double> thresholds;
    thresholds.reserve(used.size());
    for (const auto* e : used) thresholds.push_back(detail::min_window_max(e->values, nu));
    for (double eps : epsilons) {
      SweepCell c;
      c.epsilon = eps;
      c.nu = nu;
      for (std::size_t i = 0; i < used.size(); ++i) {
        const bool fired = thresholds[i] <= eps;
        const bool failed = used[i]->outcome.is_failure();
        if (failed && fired) ++c.matrix.tp;
        if (failed && !fired) ++c.matrix.fn;
        if (!failed && fired) ++c.matrix.fp;
        if (!failed && !fired) ++c.matrix.tn;
      }
      c.precision = c.matrix.precision();
      c.recall = c.matrix.recall();
      c.f1 = c.matrix.f1();
      c.accuracy = c.matrix.accuracy();
      result.cells.push_back(c);
    }
  }
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    if (!result.cells[i].f1) continue;
    if (!result.best || detail::better_cell(result.cells[i], result.cells[*result.best])) result.best = i;
  }
  return result;
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw NumericError("format_number: conversion failed");
  return std::string(buf, end);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline constexpr const char* kHeatmapHeader = "epsilon,nu,tp,fp,tn,fn,precision,recall,f1,accuracy,best";

/// CSV with one row per cell; undefined ratios are empty fields and the
/// argmax row has best=1.
inline std::string heatmap_csv(const SweepResult& result) {
  std::ostringstream os;
  os << kHeatmapHeader << '\n';
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const auto& c = result.cells[i];
    os << format_number(c.epsilon) << ',' << c.nu << ',' << c.matrix.tp << ',' << c.matrix.fp << ','
       << c.matrix.tn << ',' << c.matrix.fn << ',' << format_optional(c.precision) << ','
       << format_optional(c.recall) << ',' << format_optional(c.f1) << ',' << format_optional(c.accuracy) << ','
       << (result.best && *result.best == i ? 1 : 0) << '\n';
  }
  return os.str();
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void export_heatmap(const SweepResult& result, const std::filesystem::path& path) {
  write_text_atomic(path, heatmap_csv(result));
}

}  // namespace bcva
