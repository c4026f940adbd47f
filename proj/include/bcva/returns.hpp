#pragma once

// Offline discounted-return labeling: G(s_j) = gamma^Delta_j * r, where
// Delta_j is the accumulated per-step distance from s_j to the end of the
// trajectory under a time, pixel, or kinematic metric.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bcva/error.hpp"
#include "bcva/stats.hpp"
#include "bcva/trajlog.hpp"

namespace bcva {

/// Sum of absolute pixel differences, un-normalized.
inline double raw_pixel_diff(const Observation& a, const Observation& b) {
  if (a.pixels.size() != b.pixels.size()) {
    throw ShapeError("raw_pixel_diff: observation sizes differ (" + std::to_string(a.pixels.size()) +
                     " vs " + std::to_string(b.pixels.size()) + ")");
  }
  // Integer level differences are exact; divide once.
  std::int64_t total = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    total += std::abs(static_cast<int>(a.pixels[i]) - static_cast<int>(b.pixels[i]));
  }
  return static_cast<double>(total) / 255.0;
}

struct KinematicDiff {
  double joint_part = 0.0;
  double base_part = 0.0;
};

/// Joint term sums |dq| over all joints; base term sums |dx| + |dy| of the
/// base position.
inline KinematicDiff raw_kinematic_diff(const Observation& a, const Observation& b) {
  const auto& ja = a.kinematics.joint_angles;
  const auto& jb = b.kinematics.joint_angles;
  if (ja.size() != jb.size()) {
    throw ShapeError("raw_kinematic_diff: joint counts differ (" + std::to_string(ja.size()) + " vs " +
                     std::to_string(jb.size()) + ")");
  }
  KinematicDiff d;
  for (std::size_t j = 0; j < ja.size(); ++j) d.joint_part += std::abs(jb[j] - ja[j]);
  d.base_part = std::abs(b.kinematics.x - a.kinematics.x) + std::abs(b.kinematics.y - a.kinematics.y);
  return d;
}

struct StatsFit {
  DistanceStats stats;
  std::vector<std::string> warnings;
};

/// Population mean and standard deviation of the raw distances over every
/// consecutive step pair, accumulated in trajectory then step order.
inline StatsFit fit_distance_stats(const Dataset& dataset) {
  std::vector<double> pixel, joint, xyz;
  for (const auto& t : dataset.trajectories) {
    for (std::size_t i = 0; i + 1 < t.steps.size(); ++i) {
      const auto& a = t.steps[i].observation;
      const auto& b = t.steps[i + 1].observation;
      pixel.push_back(raw_pixel_diff(a, b));
      const auto k = raw_kinematic_diff(a, b);
      joint.push_back(k.joint_part);
      xyz.push_back(k.base_part);
    }
  }
  if (pixel.size() < 2) {
    throw DomainError("fit_distance_stats: need at least 2 consecutive-step pairs, dataset has " +
                      std::to_string(pixel.size()));
  }
  StatsFit fit;
  auto moments = [&fit](const std::vector<double>& xs, const char* name) {
    double sum = 0.0;
    for (double x : xs) sum += x;
    const double mu = sum / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mu) * (x - mu);
    double sigma = std::sqrt(ss / static_cast<double>(xs.size()));
    if (!(sigma > 0.0)) {
      fit.warnings.push_back(std::string("sigma_") + name + " is zero; replaced by 1");
      sigma = 1.0;
    }
    return std::pair{mu, sigma};
  };
  std::tie(fit.stats.mu_pixel, fit.stats.sigma_pixel) = moments(pixel, "pixel");
  std::tie(fit.stats.mu_joint, fit.stats.sigma_joint) = moments(joint, "joint");
  std::tie(fit.stats.mu_xyz, fit.stats.sigma_xyz) = moments(xyz, "xyz");
  return fit;
}

/// Normalized distance between consecutive observations. Time is exactly 1;
/// pixel and kinematic distances are shifted so the mean maps to 0.5.
inline double step_distance(const Observation& a, const Observation& b, DistanceMetric metric,
                            const DistanceStats& stats, bool clamp) {
  double d = 1.0;
  switch (metric) {
    case DistanceMetric::Time:
      return 1.0;
    case DistanceMetric::Pixel:
      d = (raw_pixel_diff(a, b) - stats.mu_pixel) / stats.sigma_pixel + 0.5;
      break;
    case DistanceMetric::Kinematic: {
      const auto k = raw_kinematic_diff(a, b);
      d = (k.joint_part - stats.mu_joint) / (2.0 * stats.sigma_joint) +
          (k.base_part - stats.mu_xyz) / (2.0 * stats.sigma_xyz) + 0.5;
      break;
    }
  }
  return clamp ? std::max(d, 0.0) : d;
}

/// Delta_j for every step j; the last entry is 0.
inline std::vector<double> accumulated_distances(const Trajectory& t, DistanceMetric metric,
                                                 const DistanceStats& stats, bool clamp) {
  std::vector<double> delta(t.steps.size(), 0.0);
  for (std::size_t j = t.steps.size() - 1; j-- > 0;) {
    delta[j] = delta[j + 1] +
               step_distance(t.steps[j].observation, t.steps[j + 1].observation, metric, stats, clamp);
  }
  return delta;
}

/// Returns of one trajectory; `trajectory_index` refers to the dataset the
/// labels were computed from.
struct LabeledTrajectory {
  std::size_t trajectory_index = 0;
  std::vector<double> returns;
  DistanceMetric metric = DistanceMetric::Time;
  DistanceStats stats;
};

inline std::vector<double> discounted_returns(const Trajectory& t, const ReturnConfig& config,
                                              const DistanceStats& stats) {
  if (!(config.gamma > 0.0 && config.gamma < 1.0)) throw DomainError("gamma must lie in (0, 1)");
  if (t.steps.empty()) throw DomainError("discounted_returns: empty trajectory");
  const double r = terminal_reward(t.outcome);
  const auto delta = accumulated_distances(t, config.metric, stats, config.clamp_delta_at_zero);
  std::vector<double> g(delta.size());
  for (std::size_t j = 0; j < delta.size(); ++j) g[j] = std::pow(config.gamma, delta[j]) * r;
  return g;
}

struct LabelingResult {
  std::vector<LabeledTrajectory> labeled;
  DistanceStats stats;
  std::vector<std::string> warnings;
};

/// Labels every trajectory with a success or failure outcome. Statistics are
/// fitted on `dataset` unless `frozen` is supplied.
inline LabelingResult label_dataset(const Dataset& dataset, const ReturnConfig& config,
                                    const std::optional<DistanceStats>& frozen = std::nullopt) {
  if (dataset.trajectories.empty()) throw DomainError("label_dataset: empty dataset");
  LabelingResult result;
  if (frozen) {
    result.stats = *frozen;
  } else if (config.metric == DistanceMetric::Time && dataset.frame_count() - dataset.trajectories.size() < 2) {
    result.stats = DistanceStats{};
  } else {
    auto fit = fit_distance_stats(dataset);
    result.stats = fit.stats;
    result.warnings = std::move(fit.warnings);
  }
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
    const auto& t = dataset.trajectories[i];
    if (!t.outcome.is_labelable()) continue;
    result.labeled.push_back({i, discounted_returns(t, config, result.stats), config.metric, result.stats});
  }
  return result;
}

/// Copy of `dataset` carrying the per-step returns, statistics and label
/// config in its header. Unlabelable trajectories are kept without returns.
inline Dataset apply_labels(const Dataset& dataset, const LabelingResult& labels, const ReturnConfig& config) {
  Dataset out = dataset;
  for (auto& t : out.trajectories) t.returns.clear();
  for (const auto& l : labels.labeled) out.trajectories.at(l.trajectory_index).returns = l.returns;
  out.distance_stats = labels.stats;
  out.labels = config;
  return out;
}

}  // namespace bcva
