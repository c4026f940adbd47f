#pragma once

// Run configuration: a flat text file of `section.key = value` lines.
// Blank lines and lines starting with '#' are ignored. Lists are comma
// separated. Every key maps onto one field of RunConfig; unknown keys and
// malformed values are usage errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bcva/bcva_net.hpp"
#include "bcva/doorsim.hpp"
#include "bcva/error.hpp"
#include "bcva/helpgate.hpp"
#include "bcva/stats.hpp"
#include "bcva/trajlog.hpp"

namespace bcva {

struct DataConfig {
  int demos = 1000;
  int rollouts = 2000;
  double validation_fraction = 0.25;
  std::uint64_t split_salt = 7;
};

struct GateGrids {
  std::vector<double> value_epsilons = default_value_epsilons();
  std::vector<double> classifier_epsilons = default_classifier_epsilons();
  std::vector<int> nus = default_nus();
};

struct LoopConfig {
  int generations = 3;
  int initial_demos = 200;
  int rollouts_per_generation = 200;
  int demos_per_help = 1;
  int validation_rollouts = 200;
};

struct RunConfig {
  std::uint64_t seed = 1;
  sim::DoorWorldConfig world;
  sim::ExpertConfig expert;
  ObservationSpec observation;
  ReturnConfig returns;
  net::ModelConfig model;
  net::TrainConfig train;
  GateGrids gate;
  DataConfig data;
  LoopConfig loop;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || text.empty()) {
    throw UsageError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

inline void parse_value(const std::string& key, const std::string& text, int& out) {
  out = parse_number<int>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, std::uint64_t& out) {
  out = parse_number<std::uint64_t>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, double& out) {
  out = parse_number<double>(key, text);
}
inline void parse_value(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") {
    out = true;
  } else if (text == "false" || text == "0") {
    out = false;
  } else {
    throw UsageError("config key '" + key + "': expected true or false, got '" + text + "'");
  }
}
inline void parse_value(const std::string&, const std::string& text, DistanceMetric& out) { out = parse_metric(text); }

template <class T>
void parse_value(const std::string& key, const std::string& text, std::vector<T>& out) {
  out.clear();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    T v{};
    parse_value(key, trim(item), v);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("config key '" + key + "': empty list");
}

inline std::string show(int v) { return std::to_string(v); }
inline std::string show(std::uint64_t v) { return std::to_string(v); }
inline std::string show(double v) { return format_number(v); }
inline std::string show(bool v) { return v ? "true" : "false"; }
inline std::string show(DistanceMetric m) { return std::string(to_string(m)); }
template <class T>
std::string show(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + show(v[i]);
  return s;
}

}  // namespace detail

/// Calls f(key, field) for every configurable field, in file order.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  f("seed", c.seed);

  f("scenario.arena_width", c.world.arena_width);
  f("scenario.arena_height", c.world.arena_height);
  f("scenario.wall_y", c.world.wall_y);
  f("scenario.door_hinge_x", c.world.door_hinge_x);
  f("scenario.door_length", c.world.door_length);
  f("scenario.handle_offset", c.world.handle_offset);
  f("scenario.handle_standoff", c.world.handle_standoff);
  f("scenario.reach_radius", c.world.reach_radius);
  f("scenario.latch_release", c.world.latch_release);
  f("scenario.wrist_max", c.world.wrist_max);
  f("scenario.grasp_miss_angle", c.world.grasp_miss_angle);
  f("scenario.robot_radius", c.world.robot_radius);
  f("scenario.gripper_offset", c.world.gripper_offset);
  f("scenario.door_max_angle", c.world.door_max_angle);
  f("scenario.push_threshold", c.world.push_threshold);
  f("scenario.push_ticks", c.world.push_ticks);
  f("scenario.forward_min", c.world.limits.forward_min);
  f("scenario.forward_max", c.world.limits.forward_max);
  f("scenario.turn_limit", c.world.limits.turn);
  f("scenario.wrist_limit", c.world.limits.wrist);
  f("scenario.tick", c.world.tick);
  f("scenario.max_steps", c.world.max_steps);
  f("scenario.door_x_range", c.world.door_x_range);
  f("scenario.handle_offset_range", c.world.handle_offset_range);
  f("scenario.start_x", c.world.start_x);
  f("scenario.start_y", c.world.start_y);
  f("scenario.start_heading", c.world.start_heading);
  f("scenario.start_x_range", c.world.start_x_range);
  f("scenario.start_y_range", c.world.start_y_range);
  f("scenario.start_heading_range", c.world.start_heading_range);

  f("expert.position_tolerance", c.expert.position_tolerance);
  f("expert.heading_tolerance", c.expert.heading_tolerance);
  f("expert.turn_gain", c.expert.turn_gain);
  f("expert.forward_gain", c.expert.forward_gain);
  f("expert.wrist_gain", c.expert.wrist_gain);
  f("expert.turn_first_angle", c.expert.turn_first_angle);
  f("expert.push_lookahead", c.expert.push_lookahead);
  f("expert.noise_std", c.expert.noise_std);
  f("expert.noise_correlation", c.expert.noise_correlation);
  f("expert.noise_forward", c.expert.noise_forward);
  f("expert.noise_turn", c.expert.noise_turn);
  f("expert.noise_wrist", c.expert.noise_wrist);
  f("expert.perturb_prob", c.expert.perturb_prob);

  f("observation.width", c.observation.width);
  f("observation.height", c.observation.height);
  f("observation.channels", c.observation.channels);

  f("returns.metric", c.returns.metric);
  f("returns.gamma", c.returns.gamma);
  f("returns.clamp_delta_at_zero", c.returns.clamp_delta_at_zero);

  f("model.latent_dim", c.model.latent_dim);
  f("model.encoder_hidden", c.model.encoder_hidden);
  f("model.action_hidden", c.model.action_hidden);
  f("model.value_hidden", c.model.value_hidden);
  f("model.prior_components", c.model.prior_components);
  f("model.mc_samples", c.model.mc_samples);
  f("model.lambda", c.model.lambda);
  f("model.beta", c.model.beta);

  f("train.lr", c.train.lr);
  f("train.batch_size", c.train.batch_size);
  f("train.epochs", c.train.epochs);
  f("train.steps_per_epoch", c.train.steps_per_epoch);
  f("train.beta1", c.train.beta1);
  f("train.beta2", c.train.beta2);
  f("train.eps_hat", c.train.eps_hat);

  f("gate.value_epsilons", c.gate.value_epsilons);
  f("gate.classifier_epsilons", c.gate.classifier_epsilons);
  f("gate.nus", c.gate.nus);

  f("data.demos", c.data.demos);
  f("data.rollouts", c.data.rollouts);
  f("data.validation_fraction", c.data.validation_fraction);
  f("data.split_salt", c.data.split_salt);

  f("loop.generations", c.loop.generations);
  f("loop.initial_demos", c.loop.initial_demos);
  f("loop.rollouts_per_generation", c.loop.rollouts_per_generation);
  f("loop.demos_per_help", c.loop.demos_per_help);
  f("loop.validation_rollouts", c.loop.validation_rollouts);
}

inline void validate(const RunConfig& c) {
  sim::validate_config(c.world);
  if (c.expert.noise_std < 0.0) throw UsageError("expert.noise_std must be >= 0");
  if (c.expert.noise_correlation < 0.0 || c.expert.noise_correlation >= 1.0) {
    throw UsageError("expert.noise_correlation must lie in [0, 1)");
  }
  if (c.expert.perturb_prob < 0.0 || c.expert.perturb_prob > 1.0) throw UsageError("expert.perturb_prob must lie in [0, 1]");
  if (c.observation.width < 1 || c.observation.height < 1 || c.observation.channels < 1) {
    throw UsageError("observation sizes must be >= 1");
  }
  if (!(c.returns.gamma > 0.0 && c.returns.gamma < 1.0)) throw UsageError("returns.gamma must lie in (0, 1)");
  if (c.data.demos < 1 || c.data.rollouts < 0) throw UsageError("data.demos must be >= 1 and data.rollouts >= 0");
  if (!(c.data.validation_fraction > 0.0 && c.data.validation_fraction < 1.0)) {
    throw UsageError("data.validation_fraction must lie in (0, 1)");
  }
  if (c.gate.value_epsilons.empty() || c.gate.classifier_epsilons.empty() || c.gate.nus.empty()) {
    throw UsageError("gate grids must be non-empty");
  }
  for (int nu : c.gate.nus) {
    if (nu < 1) throw UsageError("gate.nus entries must be >= 1");
  }
  if (c.loop.generations < 1 || c.loop.initial_demos < 1 || c.loop.rollouts_per_generation < 1 ||
      c.loop.demos_per_help < 0 || c.loop.validation_rollouts < 1) {
    throw UsageError("loop sizes must be positive");
  }
  net::ModelConfig m = c.model;
  m.input_dim = 1;
  try {
    m.validate();
    c.train.validate();
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
}

/// Applies one `key = value` assignment.
inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(c, [&](const char* k, auto& field) {
    if (key == k) {
      detail::parse_value(key, value, field);
      found = true;
    }
  });
  if (!found) throw UsageError("unknown config key '" + key + "'");
}

/// Parses config text over `base`. Errors name the line.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(number) + ": expected key = value");
    try {
      set_key(base, detail::trim(std::string_view(t).substr(0, eq)), detail::trim(std::string_view(t).substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

/// Canonical text form: every key in file order. Parsing it back yields an
/// equal config.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  visit_fields(c, [&](const char* k, const auto& field) {
    out += std::string(k) + " = " + detail::show(field) + "\n";
  });
  return out;
}

}  // namespace bcva
