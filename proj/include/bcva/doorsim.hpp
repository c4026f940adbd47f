#pragma once

// Top-down 2D latched-door task. A disk robot with a wrist-mounted gripper
// approaches a door set in a wall, turns the handle past the latch-release
// angle, pushes the door open and drives through the doorway.
//
// Coordinates: meters, x to the right, y up; the wall lies on y = wall_y with
// the doorway gap [hinge_x, hinge_x + door_length]. The door rotates about
// its hinge into the y > wall_y side; angle 0 is closed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bcva/error.hpp"
#include "bcva/helpgate.hpp"
#include "bcva/rng.hpp"
#include "bcva/trajlog.hpp"

namespace bcva::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

inline double point_segment_distance_sq(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 d = p - (a + t * ab);
  return dot(d, d);
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) { return std::sqrt(point_segment_distance_sq(p, a, b)); }

inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0) a += two_pi;
  return a - std::numbers::pi;
}

struct ActuatorLimits {
  double forward_min = -0.3;  // m/s
  double forward_max = 0.5;   // m/s
  double turn = 1.2;          // rad/s
  double wrist = 1.0;         // rad/s
};

struct DoorWorldConfig {
  double arena_width = 4.0;
  double arena_height = 4.0;
  double wall_y = 2.5;
  double door_hinge_x = 1.6;
  double door_length = 0.9;
  double handle_offset = 0.6;     // along the door, from the hinge
  double handle_standoff = 0.03;  // handle sits this far on the robot side
  double reach_radius = 0.08;
  double latch_release = 0.6;     // rad
  double wrist_max = 1.2;         // rad
  double grasp_miss_angle = 0.3;  // wrist closed this far without the handle
  double robot_radius = 0.2;
  double gripper_offset = 0.22;   // gripper point ahead of the robot center
  double door_max_angle = 1.9;
  double push_threshold = 0.05;   // m/s of forward command against a latched door
  int push_ticks = 4;             // consecutive hard pushes a latched door withstands
  ActuatorLimits limits;
  double tick = 0.1;  // s
  int max_steps = 250;

  // Half-widths of the uniform randomization around the nominal values.
  double door_x_range = 0.4;
  double handle_offset_range = 0.06;
  double start_x = 2.0;
  double start_y = 0.85;
  double start_heading = std::numbers::pi / 2;
  double start_x_range = 1.0;
  double start_y_range = 0.35;
  double start_heading_range = 0.6;
};

struct WorldState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double wrist = 0.0;  // wrist and latch angle
  double door_angle = 0.0;
  // Set once the engaged wrist passes the release angle; cleared when the
  // wrist drops back below it while the door is still closed.
  bool latch_open = false;
  int push_count = 0;  // consecutive ticks of hard pushing against the latched door
  int step = 0;
  // Per-episode scenario drawn at reset.
  double hinge_x = 0.0;
  double handle_offset = 0.0;
  CounterRng rng;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

// ---------------------------------------------------------------------------
// Geometry helpers

inline Vec2 robot_center(const WorldState& s) { return {s.x, s.y}; }

inline Vec2 gripper_point(const WorldState& s, const DoorWorldConfig& c) {
  return {s.x + c.gripper_offset * std::cos(s.heading), s.y + c.gripper_offset * std::sin(s.heading)};
}

inline Vec2 hinge_point(const WorldState& s, const DoorWorldConfig& c) { return {s.hinge_x, c.wall_y}; }

inline Vec2 door_tip(const WorldState& s, const DoorWorldConfig& c, double angle) {
  return hinge_point(s, c) + c.door_length * Vec2{std::cos(angle), std::sin(angle)};
}

inline Vec2 handle_point(const WorldState& s, const DoorWorldConfig& c) {
  const Vec2 along{std::cos(s.door_angle), std::sin(s.door_angle)};
  const Vec2 toward_robot{std::sin(s.door_angle), -std::cos(s.door_angle)};
  return hinge_point(s, c) + s.handle_offset * along + c.handle_standoff * toward_robot;
}

inline bool gripper_engaged(const WorldState& s, const DoorWorldConfig& c) {
  return norm(gripper_point(s, c) - handle_point(s, c)) <= c.reach_radius;
}

inline bool latched(const WorldState& s) { return s.door_angle == 0.0 && !s.latch_open; }

/// Wall or arena-boundary overlap of a robot disk centered at p.
inline bool hits_static(Vec2 p, double hinge_x, const DoorWorldConfig& c) {
  const double r = c.robot_radius;
  if (p.x - r < 0.0 || p.x + r > c.arena_width || p.y - r < 0.0 || p.y + r > c.arena_height) return true;
  const Vec2 left_a{0.0, c.wall_y}, left_b{hinge_x, c.wall_y};
  const Vec2 right_a{hinge_x + c.door_length, c.wall_y}, right_b{c.arena_width, c.wall_y};
  return point_segment_distance(p, left_a, left_b) < r || point_segment_distance(p, right_a, right_b) < r;
}

inline bool hits_door(Vec2 p, const WorldState& s, const DoorWorldConfig& c, double angle) {
  return point_segment_distance(p, hinge_point(s, c), door_tip(s, c, angle)) < c.robot_radius;
}

// ---------------------------------------------------------------------------
// Reset and step

inline void validate_config(const DoorWorldConfig& c) {
  if (c.max_steps < 1) throw DomainError("doorsim: max_steps must be >= 1");
  if (c.tick <= 0.0) throw DomainError("doorsim: tick must be positive");
  if (c.push_ticks < 1) throw DomainError("doorsim: push_ticks must be >= 1");
  if (c.door_length <= 2.0 * c.robot_radius) throw DomainError("doorsim: doorway narrower than the robot");
  if (c.door_hinge_x - c.door_x_range < 0.0 ||
      c.door_hinge_x + c.door_x_range + c.door_length > c.arena_width) {
    throw DomainError("doorsim: door randomization leaves the arena");
  }
  if (c.handle_offset - c.handle_offset_range <= 0.0 ||
      c.handle_offset + c.handle_offset_range >= c.door_length) {
    throw DomainError("doorsim: handle randomization leaves the door");
  }
}

/// Seeded initial state. Start poses that would overlap a wall are redrawn.
inline WorldState reset(const DoorWorldConfig& c, std::uint64_t seed) {
  validate_config(c);
  WorldState s;
  s.rng = CounterRng(seed, 0x5EED);
  s.hinge_x = c.door_hinge_x + s.rng.uniform(-c.door_x_range, c.door_x_range);
  s.handle_offset = c.handle_offset + s.rng.uniform(-c.handle_offset_range, c.handle_offset_range);
  for (int attempt = 0; attempt < 64; ++attempt) {
    s.x = c.start_x + s.rng.uniform(-c.start_x_range, c.start_x_range);
    s.y = c.start_y + s.rng.uniform(-c.start_y_range, c.start_y_range);
    s.heading = wrap_angle(c.start_heading + s.rng.uniform(-c.start_heading_range, c.start_heading_range));
    if (!hits_static({s.x, s.y}, s.hinge_x, c) && !hits_door({s.x, s.y}, s, c, 0.0)) return s;
  }
  throw DomainError("doorsim: no collision-free start pose within the randomization ranges");
}

inline Action clamp_action(const Action& a, const ActuatorLimits& l) {
  return {std::clamp(a.base_forward, l.forward_min, l.forward_max), std::clamp(a.base_turn, -l.turn, l.turn),
          std::clamp(a.wrist_rate, -l.wrist, l.wrist), std::clamp(a.terminate, 0.0, 1.0)};
}

struct StepResult {
  WorldState state;
  std::optional<Outcome> outcome;
};

/// Largest fraction of the motion from `from` to `to` that stays clear.
template <class Blocked>
inline Vec2 contact_point(Vec2 from, Vec2 to, Blocked blocked) {
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 40; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (blocked(from + mid * (to - from))) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return from + lo * (to - from);
}

inline StepResult step(const WorldState& s, const Action& raw, const DoorWorldConfig& c) {
  const Action a = clamp_action(raw, c.limits);
  StepResult r{s, std::nullopt};
  WorldState& n = r.state;
  n.step = s.step + 1;
  n.push_count = 0;

  n.heading = wrap_angle(s.heading + a.base_turn * c.tick);
  n.wrist = std::clamp(s.wrist + a.wrist_rate * c.tick, 0.0, c.wrist_max);
  if (n.door_angle == 0.0) {
    if (n.wrist < c.latch_release) {
      n.latch_open = false;
    } else if (gripper_engaged(n, c)) {
      n.latch_open = true;
    }
  }

  const Vec2 from = robot_center(s);
  const Vec2 to{s.x + a.base_forward * c.tick * std::cos(n.heading), s.y + a.base_forward * c.tick * std::sin(n.heading)};

  if (a.base_forward != 0.0) {
    if (hits_static(to, s.hinge_x, c)) {
      const Vec2 p = contact_point(from, to, [&](Vec2 q) { return hits_static(q, s.hinge_x, c); });
      n.x = p.x;
      n.y = p.y;
      r.outcome = Outcome::failure(FailureMode::Collision);
      return r;
    }
    if (hits_door(to, s, c, s.door_angle)) {
      if (latched(n)) {
        // The latched door blocks the base; sustained hard pushing breaks it.
        const Vec2 p = contact_point(from, to, [&](Vec2 q) { return hits_door(q, s, c, s.door_angle); });
        n.x = p.x;
        n.y = p.y;
        n.push_count = a.base_forward > c.push_threshold ? s.push_count + 1 : 0;
        if (n.push_count >= c.push_ticks) {
          r.outcome = Outcome::failure(FailureMode::PushWhileLatched);
          return r;
        }
      } else {
        double angle = s.door_angle;
        constexpr double kIncrement = 0.002;
        while (angle <= c.door_max_angle && hits_door(to, s, c, angle)) angle += kIncrement;
        if (angle > c.door_max_angle) {
          const Vec2 p = contact_point(from, to, [&](Vec2 q) { return hits_door(q, s, c, s.door_angle); });
          n.x = p.x;
          n.y = p.y;
          r.outcome = Outcome::failure(FailureMode::Collision);
          return r;
        }
        n.door_angle = angle;
        n.x = to.x;
        n.y = to.y;
      }
    } else {
      n.x = to.x;
      n.y = to.y;
    }
  }

  if (latched(n) && n.wrist > c.grasp_miss_angle && !gripper_engaged(n, c)) {
    r.outcome = Outcome::failure(FailureMode::GraspMiss);
    return r;
  }
  if (n.y > c.wall_y && n.x > n.hinge_x && n.x < n.hinge_x + c.door_length) {
    r.outcome = Outcome::success();
    return r;
  }
  if (n.step >= c.max_steps) r.outcome = Outcome::failure(FailureMode::Timeout);
  return r;
}

// ---------------------------------------------------------------------------
// Rendering

struct RenderLayers {
  bool walls = true;
  bool door = true;
  bool robot = true;

  static RenderLayers none() { return {false, false, false}; }
};

inline constexpr double kBackground = 0.0;

/// Grayscale top-down raster, 2x2 supersampled and quantized to 8 bits. Row
/// 0 is the top of the arena (largest y).
inline Observation render(const WorldState& s, const ObservationSpec& spec, const DoorWorldConfig& c,
                          RenderLayers layers = {}) {
  Observation obs;
  obs.kinematics.joint_angles = {s.wrist};
  obs.kinematics.x = s.x;
  obs.kinematics.y = s.y;
  obs.kinematics.heading = s.heading;
  obs.pixels.assign(spec.pixel_count(), Observation::quantize(kBackground));

  const Vec2 hinge = hinge_point(s, c);
  const Vec2 tip = door_tip(s, c, s.door_angle);
  const Vec2 handle = handle_point(s, c);
  const Vec2 center = robot_center(s);
  const Vec2 grip = gripper_point(s, c);
  const double cell_w = c.arena_width / spec.width;
  const double cell_h = c.arena_height / spec.height;
  const double wrist_shade = 0.55 + 0.4 * std::clamp(s.wrist / c.wrist_max, 0.0, 1.0);

  const double robot_r2 = c.robot_radius * c.robot_radius;
  auto within = [](Vec2 p, Vec2 q, double r) {
    const Vec2 d = p - q;
    return dot(d, d) <= r * r;
  };
  auto intensity = [&](Vec2 p) {
    double v = kBackground;
    if (layers.walls && std::abs(p.y - c.wall_y) <= 0.07 && (p.x <= s.hinge_x || p.x >= s.hinge_x + c.door_length)) {
      v = std::max(v, 1.0);
    }
    if (layers.door) {
      if (point_segment_distance_sq(p, hinge, tip) <= 0.05 * 0.05) v = std::max(v, 0.7);
      if (within(p, handle, 0.07)) v = std::max(v, 0.85);
    }
    if (layers.robot) {
      const Vec2 d = p - center;
      if (dot(d, d) <= robot_r2) v = std::max(v, 0.4);
      if (within(p, grip, 0.07)) v = std::max(v, wrist_shade);
    }
    return v;
  };

  for (int row = 0; row < spec.height; ++row) {
    for (int col = 0; col < spec.width; ++col) {
      double acc = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const Vec2 p{(col + 0.25 + 0.5 * sx) * cell_w, c.arena_height - (row + 0.25 + 0.5 * sy) * cell_h};
          acc += intensity(p);
        }
      }
      const std::uint8_t q = Observation::quantize(acc / 4.0);
      for (int ch = 0; ch < spec.channels; ++ch) {
        obs.pixels[(static_cast<std::size_t>(row) * spec.width + col) * spec.channels + ch] = q;
      }
    }
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Scripted expert

struct ExpertConfig {
  double position_tolerance = 0.015;
  double heading_tolerance = 0.04;
  double turn_gain = 4.0;
  double forward_gain = 2.0;
  double wrist_gain = 3.0;
  double turn_first_angle = 0.5;  // rad of heading error above which the base only turns
  double push_lookahead = 1.0;    // m beyond the wall for the push-phase aim point
  // Failure injection (noisy expert only).
  double noise_std = 0.0;          // overall action noise scale
  double noise_correlation = 0.8;  // AR(1) coefficient of the action noise
  // Per-channel noise std as a fraction of the actuator limit, per unit of
  // noise_std.
  double noise_forward = 0.33;
  double noise_turn = 0.25;
  double noise_wrist = 0.25;
  double perturb_prob = 0.0;       // per-episode chance of one phase skip
};

enum class ExpertPhase { Approach, Align, Rotate, Push, Through };

inline Vec2 pregrasp_point(const WorldState& s, const DoorWorldConfig& c) {
  return {s.hinge_x + s.handle_offset, c.wall_y - c.handle_standoff - c.gripper_offset};
}

inline ExpertPhase expert_phase(const WorldState& s, const DoorWorldConfig& c, const ExpertConfig& e = {}) {
  if (s.y > c.wall_y) return ExpertPhase::Through;
  if (!latched(s)) return ExpertPhase::Push;
  const double heading_err = wrap_angle(std::numbers::pi / 2 - s.heading);
  if (gripper_engaged(s, c) && std::abs(heading_err) <= e.heading_tolerance) return ExpertPhase::Rotate;
  if (norm(pregrasp_point(s, c) - robot_center(s)) <= e.position_tolerance) return ExpertPhase::Align;
  return ExpertPhase::Approach;
}

namespace detail {

inline Action drive_toward(const WorldState& s, Vec2 target, const ActuatorLimits& l, const ExpertConfig& e) {
  const Vec2 d = target - robot_center(s);
  const double err = wrap_angle(std::atan2(d.y, d.x) - s.heading);
  Action a;
  a.base_turn = std::clamp(e.turn_gain * err, -l.turn, l.turn);
  if (std::abs(err) < e.turn_first_angle) {
    a.base_forward = std::clamp(e.forward_gain * norm(d), 0.0, l.forward_max) * std::cos(err);
  }
  return a;
}

}  // namespace detail

/// Noise-free expert action; a pure function of the state.
inline Action scripted_expert(const WorldState& s, const DoorWorldConfig& c, const ExpertConfig& e = {},
                              std::optional<ExpertPhase> forced = std::nullopt) {
  const ActuatorLimits& l = c.limits;
  const ExpertPhase phase = forced.value_or(expert_phase(s, c, e));
  Action a;
  switch (phase) {
    case ExpertPhase::Through:
      a.terminate = 1.0;
      break;
    case ExpertPhase::Push: {
      const Vec2 aim{pregrasp_point(s, c).x, c.wall_y + e.push_lookahead};
      const double err = wrap_angle(std::atan2(aim.y - s.y, aim.x - s.x) - s.heading);
      a.base_turn = std::clamp(e.turn_gain * err, -l.turn, l.turn);
      a.base_forward = l.forward_max * std::max(0.0, std::cos(err));
      break;
    }
    case ExpertPhase::Rotate:
      a.wrist_rate = l.wrist;
      break;
    case ExpertPhase::Align:
      a.base_turn = std::clamp(e.turn_gain * wrap_angle(std::numbers::pi / 2 - s.heading), -l.turn, l.turn);
      a.wrist_rate = std::clamp(-e.wrist_gain * s.wrist, -l.wrist, l.wrist);
      break;
    case ExpertPhase::Approach:
      a = detail::drive_toward(s, pregrasp_point(s, c), l, e);
      a.wrist_rate = std::clamp(-e.wrist_gain * s.wrist, -l.wrist, l.wrist);
      break;
  }
  return clamp_action(a, l);
}

/// Expert with correlated Gaussian action noise and an optional phase skip
/// (push before unlatching, or turn the wrist before aligning).
class NoisyExpert {
 public:
  NoisyExpert(DoorWorldConfig world, ExpertConfig expert, std::uint64_t seed)
      : world_(std::move(world)), expert_(expert), rng_(seed, 0xE4E) {
    if (expert_.noise_std < 0.0) throw DomainError("expert: noise std must be >= 0");
    if (rng_.uniform() < expert_.perturb_prob) {
      skip_ = rng_.uniform() < 0.5 ? Skip::PushEarly : Skip::RotateEarly;
    }
  }

  Action operator()(const WorldState& s) {
    std::optional<ExpertPhase> forced;
    const ExpertPhase phase = expert_phase(s, world_, expert_);
    if (skip_ == Skip::PushEarly && phase == ExpertPhase::Rotate) forced = ExpertPhase::Push;
    if (skip_ == Skip::RotateEarly && phase == ExpertPhase::Align) forced = ExpertPhase::Rotate;
    Action a = scripted_expert(s, world_, expert_, forced);
    if (expert_.noise_std > 0.0) {
      const double rho = expert_.noise_correlation;
      const double innov = std::sqrt(1.0 - rho * rho);
      for (double& n : noise_) n = rho * n + innov * rng_.normal();
      const auto& l = world_.limits;
      a.base_forward += expert_.noise_std * expert_.noise_forward * l.forward_max * noise_[0];
      a.base_turn += expert_.noise_std * expert_.noise_turn * l.turn * noise_[1];
      a.wrist_rate += expert_.noise_std * expert_.noise_wrist * l.wrist * noise_[2];
    }
    return clamp_action(a, world_.limits);
  }

 private:
  enum class Skip { None, PushEarly, RotateEarly };
  DoorWorldConfig world_;
  ExpertConfig expert_;
  CounterRng rng_;
  Skip skip_ = Skip::None;
  double noise_[3] = {0.0, 0.0, 0.0};
};

// ---------------------------------------------------------------------------
// Rollout

using Policy = std::function<Action(const WorldState&, const Observation&)>;
/// Gate signal of an observation (value estimate or negated failure prob).
using GateSignalFn = std::function<double(const Observation&)>;

struct RolloutGate {
  GateConfig config;
  GateSignalFn signal;
};

struct RolloutOptions {
  std::string episode_id;
  Provenance provenance;
  ObservationSpec spec;
  std::optional<RolloutGate> gate;
};

/// Runs one episode. Every visited state is recorded with the action the
/// policy chose there; the final step is the terminal state (its action is
/// not executed). A gate firing truncates the episode as AskedForHelp.
inline Trajectory rollout(const Policy& policy, const DoorWorldConfig& c, std::uint64_t seed,
                          const RolloutOptions& options) {
  Trajectory t;
  t.episode_id = options.episode_id;
  t.seed = seed;
  t.provenance = options.provenance;
  WorldState s = reset(c, seed);
  GateState gate_state;
  for (;;) {
    Observation obs = render(s, options.spec, c);
    const Action a = clamp_action(policy(s, obs), c.limits);
    bool fire = false;
    if (options.gate) {
      const GateUpdate u = gate_update(gate_state, options.gate->signal(obs), options.gate->config);
      gate_state = u.state;
      fire = u.fire;
    }
    t.steps.push_back(Step{s.step, std::move(obs), a});
    if (fire) {
      t.outcome = Outcome::asked_for_help();
      return t;
    }
    StepResult r = step(s, a, c);
    s = r.state;
    if (r.outcome) {
      Observation last = render(s, options.spec, c);
      const Action la = clamp_action(policy(s, last), c.limits);
      t.steps.push_back(Step{s.step, std::move(last), la});
      t.outcome = *r.outcome;
      return t;
    }
  }
}

}  // namespace bcva::sim
