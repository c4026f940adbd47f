#pragma once

// Reference implementations shared by the unit tests and the acceptance
// binary. They are written directly from the definitions, without reusing
// library helpers, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bcva/grad.hpp"
#include "bcva/helpgate.hpp"
#include "bcva/trajlog.hpp"

namespace oracle {

using bcva::Dataset;
using bcva::DistanceMetric;
using bcva::Outcome;
using bcva::Trajectory;

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// ---------------------------------------------------------------------------
// Synthetic trajectories

/// Random-walk trajectory with `steps` frames. Pixels and kinematics move by
/// random amounts, occasionally not at all.
inline Trajectory random_trajectory(Rng& rng, const bcva::ObservationSpec& spec, std::size_t joints,
                                    std::size_t steps, Outcome outcome, const std::string& id) {
  Trajectory t;
  t.episode_id = id;
  t.seed = rng();
  t.provenance = bcva::Provenance::rollout("synthetic");
  t.outcome = outcome;
  bcva::Observation obs;
  obs.pixels.resize(spec.pixel_count());
  for (auto& p : obs.pixels) p = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
  obs.kinematics.joint_angles.resize(joints);
  for (auto& q : obs.kinematics.joint_angles) q = uniform(rng, -1.0, 1.0);
  obs.kinematics.x = uniform(rng, -1.0, 1.0);
  obs.kinematics.y = uniform(rng, -1.0, 1.0);
  for (std::size_t i = 0; i < steps; ++i) {
    bcva::Step s;
    s.index = static_cast<int>(i);
    s.observation = obs;
    s.action = {uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1), i + 1 == steps ? 1.0 : 0.0};
    t.steps.push_back(s);
    if (uniform(rng, 0, 1) < 0.1) continue;  // a still frame
    const double scale = uniform(rng, 0.0, 1.0);
    for (auto& p : obs.pixels) {
      if (uniform(rng, 0, 1) < scale) p = static_cast<std::uint8_t>(uniform_int(rng, 0, 255));
    }
    for (auto& q : obs.kinematics.joint_angles) q += uniform(rng, -0.2, 0.2) * scale;
    obs.kinematics.x += uniform(rng, -0.1, 0.1) * scale;
    obs.kinematics.y += uniform(rng, -0.1, 0.1) * scale;
  }
  return t;
}

inline Dataset random_dataset(Rng& rng, int count, int min_len, int max_len, const bcva::ObservationSpec& spec = {4, 3, 2},
                              std::size_t joints = 3) {
  Dataset d;
  d.spec = spec;
  for (int i = 0; i < count; ++i) {
    const Outcome o = uniform(rng, 0, 1) < 0.5 ? Outcome::success() : Outcome::failure(bcva::FailureMode::Collision);
    d.trajectories.push_back(random_trajectory(rng, spec, joints, static_cast<std::size_t>(uniform_int(rng, min_len, max_len)),
                                               o, "syn-" + std::to_string(i)));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Discounted returns, written out term by term

struct Moments {
  double mu_pixel, sigma_pixel, mu_joint, sigma_joint, mu_xyz, sigma_xyz;
};

inline double pixel_sum(const bcva::Observation& a, const bcva::Observation& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::fabs(a.pixels[i] / 255.0 - b.pixels[i] / 255.0);
  return s;
}

inline double joint_sum(const bcva::Observation& a, const bcva::Observation& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.kinematics.joint_angles.size(); ++j) {
    s += std::fabs(a.kinematics.joint_angles[j] - b.kinematics.joint_angles[j]);
  }
  return s;
}

inline double base_sum(const bcva::Observation& a, const bcva::Observation& b) {
  return std::fabs(a.kinematics.x - b.kinematics.x) + std::fabs(a.kinematics.y - b.kinematics.y);
}

/// Population mean and deviation via E[x^2] - E[x]^2 over every consecutive
/// pair; a zero deviation becomes 1.
inline Moments fit_moments(const Dataset& d) {
  double n = 0, sp = 0, sp2 = 0, sj = 0, sj2 = 0, sx = 0, sx2 = 0;
  for (const auto& t : d.trajectories) {
    for (std::size_t i = 1; i < t.steps.size(); ++i) {
      const auto& a = t.steps[i - 1].observation;
      const auto& b = t.steps[i].observation;
      const double p = pixel_sum(a, b), j = joint_sum(a, b), x = base_sum(a, b);
      n += 1;
      sp += p;
      sp2 += p * p;
      sj += j;
      sj2 += j * j;
      sx += x;
      sx2 += x * x;
    }
  }
  auto sd = [n](double s, double s2) {
    const double v = s2 / n - (s / n) * (s / n);
    return v > 1e-24 ? std::sqrt(v) : 1.0;
  };
  return {sp / n, sd(sp, sp2), sj / n, sd(sj, sj2), sx / n, sd(sx, sx2)};
}

inline double delta(const bcva::Observation& a, const bcva::Observation& b, DistanceMetric metric, const Moments& m,
                    bool clamp) {
  double v = 1.0;
  if (metric == DistanceMetric::Pixel) v = 0.5 + (pixel_sum(a, b) - m.mu_pixel) / m.sigma_pixel;
  if (metric == DistanceMetric::Kinematic) {
    v = 0.5 + 0.5 * (joint_sum(a, b) - m.mu_joint) / m.sigma_joint + 0.5 * (base_sum(a, b) - m.mu_xyz) / m.sigma_xyz;
  }
  return clamp && v < 0.0 ? 0.0 : v;
}

/// G(s_j) = gamma^(sum of the step distances from j to the end) * r, with
/// the sum taken forward for each j separately.
inline std::vector<double> returns(const Trajectory& t, DistanceMetric metric, double gamma, bool clamp,
                                   const Moments& m) {
  const double r = t.outcome.is_success() ? 1.0 : -1.0;
  std::vector<double> g;
  for (std::size_t j = 0; j < t.steps.size(); ++j) {
    double acc = 0.0;
    for (std::size_t k = j; k + 1 < t.steps.size(); ++k) {
      acc += delta(t.steps[k].observation, t.steps[k + 1].observation, metric, m, clamp);
    }
    g.push_back(r * std::exp(acc * std::log(gamma)));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Gate and sweep

/// The gate by definition: fires iff some window of nu consecutive values
/// lies entirely at or below epsilon.
inline bool gate_fires(const std::vector<double>& v, double epsilon, int nu) {
  const auto w = static_cast<std::size_t>(nu);
  for (std::size_t start = 0; start + w <= v.size(); ++start) {
    bool all = true;
    for (std::size_t i = start; i < start + w; ++i) all = all && v[i] <= epsilon;
    if (all) return true;
  }
  return false;
}

struct Cell {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::optional<double> precision, recall, f1, accuracy;
};

inline Cell score_cell(const std::vector<bcva::EpisodeTrace>& traces, double epsilon, int nu) {
  Cell c;
  for (const auto& e : traces) {
    if (e.outcome.kind == Outcome::Kind::AskedForHelp) continue;
    const bool fired = gate_fires(e.values, epsilon, nu);
    const bool positive = e.outcome.kind == Outcome::Kind::Failure;
    (positive ? (fired ? c.tp : c.fn) : (fired ? c.fp : c.tn)) += 1;
  }
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  if (c.tp + c.fp > 0) c.precision = tp / (tp + fp);
  if (c.tp + c.fn > 0) c.recall = tp / (tp + fn);
  if (c.precision && c.recall) {
    c.f1 = *c.precision + *c.recall > 0 ? 2.0 * *c.precision * *c.recall / (*c.precision + *c.recall) : 0.0;
  }
  if (c.tp + c.fp + c.tn + c.fn > 0) c.accuracy = (tp + tn) / (tp + fp + tn + fn);
  return c;
}

/// Random traces drawn on a hundredths lattice so values often sit exactly
/// on a threshold.
inline std::vector<bcva::EpisodeTrace> random_traces(Rng& rng, int count, int max_len) {
  std::vector<bcva::EpisodeTrace> out;
  for (int i = 0; i < count; ++i) {
    bcva::EpisodeTrace e;
    e.episode_id = "tr-" + std::to_string(i);
    const double u = uniform(rng, 0, 1);
    e.outcome = u < 0.45 ? Outcome::failure(bcva::FailureMode::Timeout)
                : u < 0.9 ? Outcome::success()
                          : Outcome::asked_for_help();
    const int len = uniform_int(rng, 1, max_len);
    const int level = uniform_int(rng, -60, 20);
    for (int k = 0; k < len; ++k) e.values.push_back(std::clamp(level + uniform_int(rng, -25, 25), -100, 100) / 100.0);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;  // "input[i]" of the largest error
  std::size_t checked = 0;
};

/// Relative error with a floor so that gradients near zero are compared
/// absolutely.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences in every coordinate of every input.
inline GradReport check_gradients(
    std::vector<bcva::grad::Tensor> inputs,
    const std::function<bcva::grad::Var(bcva::grad::Tape&, const std::vector<bcva::grad::Var>&)>& f,
    double h = 1e-6) {
  using bcva::grad::Tape;
  using bcva::grad::Var;
  std::vector<bcva::grad::Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var y = f(tape, vars);
    tape.backward(y);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    return f(tape, vars).item();
  };
  GradReport rep;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      const double x0 = inputs[a][i];
      inputs[a][i] = x0 + h;
      const double up = eval();
      inputs[a][i] = x0 - h;
      const double down = eval();
      inputs[a][i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[a][i], numeric);
      ++rep.checked;
      if (e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst = "input" + std::to_string(a) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

/// Same comparison for every scalar of a parameter store.
inline GradReport check_param_gradients(bcva::grad::ParamStore& store,
                                        const std::function<bcva::grad::Var(bcva::grad::Tape&)>& f,
                                        double h = 1e-6) {
  using bcva::grad::Tape;
  {
    Tape tape;
    bcva::grad::backward(tape, f(tape), store);
  }
  std::vector<std::pair<std::string, bcva::grad::Tensor>> analytic;
  for (const auto& [name, p] : store) analytic.emplace_back(name, p.grad);
  auto eval = [&]() {
    Tape tape;
    return f(tape).item();
  };
  GradReport rep;
  for (const auto& [name, g] : analytic) {
    auto& value = store.at(name).value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double x0 = value[i];
      value[i] = x0 + h;
      const double up = eval();
      value[i] = x0 - h;
      const double down = eval();
      value[i] = x0;
      const double e = rel_error(g[i], (up - down) / (2.0 * h));
      ++rep.checked;
      if (e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

inline bcva::grad::Tensor random_tensor(Rng& rng, bcva::grad::Shape shape, double lo = -1.0, double hi = 1.0) {
  bcva::grad::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

}  // namespace oracle
