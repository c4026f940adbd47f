#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "bcva/error.hpp"

namespace bcva {

/// Per-step distance used to exponentiate the discount.
enum class DistanceMetric { Time, Pixel, Kinematic };

inline std::string_view to_string(DistanceMetric m) {
  switch (m) {
    case DistanceMetric::Time: return "time";
    case DistanceMetric::Pixel: return "pixel";
    case DistanceMetric::Kinematic: return "movement";
  }
  return "?";
}

/// Accepts "time", "pixel", and "movement" (alias "kinematic").
inline DistanceMetric parse_metric(std::string_view name) {
  if (name == "time") return DistanceMetric::Time;
  if (name == "pixel") return DistanceMetric::Pixel;
  if (name == "movement" || name == "kinematic") return DistanceMetric::Kinematic;
  throw UsageError("unknown distance metric '" + std::string(name) + "' (expected time|pixel|movement)");
}

/// Normalization statistics of the raw distances over consecutive-step pairs.
struct DistanceStats {
  double mu_pixel = 0.0;
  double sigma_pixel = 1.0;
  double mu_joint = 0.0;
  double sigma_joint = 1.0;
  double mu_xyz = 0.0;
  double sigma_xyz = 1.0;

  friend bool operator==(const DistanceStats&, const DistanceStats&) = default;
};

struct ReturnConfig {
  double gamma = 0.99;
  DistanceMetric metric = DistanceMetric::Time;
  bool clamp_delta_at_zero = true;

  friend bool operator==(const ReturnConfig&, const ReturnConfig&) = default;
};

}  // namespace bcva
