#pragma once

// Trajectory data model, the line-delimited dataset file format, and the
// hash-based train/validation split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bcva/error.hpp"
#include "bcva/stats.hpp"

namespace bcva {

struct ObservationSpec {
  int width = 32;
  int height = 32;
  int channels = 1;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(channels);
  }

  friend bool operator==(const ObservationSpec&, const ObservationSpec&) = default;
};

struct KinematicState {
  std::vector<double> joint_angles;  // radians
  double x = 0.0;                    // meters
  double y = 0.0;                    // meters
  double heading = 0.0;              // radians

  friend bool operator==(const KinematicState&, const KinematicState&) = default;
};

/// Pixels are held as 8-bit levels; the value of level k is k / 255.
struct Observation {
  std::vector<std::uint8_t> pixels;
  KinematicState kinematics;

  double pixel(std::size_t i) const { return pixels[i] / 255.0; }

  static std::uint8_t quantize(double value) {
    const double v = std::clamp(value, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
  }

  friend bool operator==(const Observation&, const Observation&) = default;
};

struct Action {
  double base_forward = 0.0;  // m/s
  double base_turn = 0.0;     // rad/s
  double wrist_rate = 0.0;    // rad/s
  double terminate = 0.0;     // [0, 1]

  static constexpr std::size_t kDim = 4;

  friend bool operator==(const Action&, const Action&) = default;
};

struct Step {
  int index = 0;
  Observation observation;
  Action action;

  friend bool operator==(const Step&, const Step&) = default;
};

enum class FailureMode { Collision, GraspMiss, Timeout, PushWhileLatched };

struct Outcome {
  enum class Kind { Success, Failure, AskedForHelp };

  Kind kind = Kind::Success;
  FailureMode mode = FailureMode::Collision;  // meaningful for Failure only

  static Outcome success() { return {Kind::Success, FailureMode::Collision}; }
  static Outcome failure(FailureMode m) { return {Kind::Failure, m}; }
  static Outcome asked_for_help() { return {Kind::AskedForHelp, FailureMode::Collision}; }

  bool is_success() const { return kind == Kind::Success; }
  bool is_failure() const { return kind == Kind::Failure; }
  bool is_labelable() const { return kind != Kind::AskedForHelp; }

  friend bool operator==(const Outcome& a, const Outcome& b) {
    if (a.kind != b.kind) return false;
    return a.kind != Kind::Failure || a.mode == b.mode;
  }
};

inline std::string to_string(FailureMode m) {
  switch (m) {
    case FailureMode::Collision: return "collision";
    case FailureMode::GraspMiss: return "grasp_miss";
    case FailureMode::Timeout: return "timeout";
    case FailureMode::PushWhileLatched: return "push_while_latched";
  }
  return "?";
}

inline std::string to_string(const Outcome& o) {
  switch (o.kind) {
    case Outcome::Kind::Success: return "success";
    case Outcome::Kind::AskedForHelp: return "asked_for_help";
    case Outcome::Kind::Failure: return "failure:" + to_string(o.mode);
  }
  return "?";
}

/// Terminal reward: +1 for success, -1 for failure. Help-truncated
/// episodes carry no reward.
inline double terminal_reward(const Outcome& outcome) {
  switch (outcome.kind) {
    case Outcome::Kind::Success: return 1.0;
    case Outcome::Kind::Failure: return -1.0;
    case Outcome::Kind::AskedForHelp: break;
  }
  throw DomainError("unlabeled outcome: asked_for_help has no terminal reward");
}

struct Provenance {
  enum class Kind { ExpertDemo, PolicyRollout };
  Kind kind = Kind::ExpertDemo;
  std::string policy_id;  // PolicyRollout only

  static Provenance expert() { return {Kind::ExpertDemo, {}}; }
  static Provenance rollout(std::string policy) { return {Kind::PolicyRollout, std::move(policy)}; }
  bool is_expert() const { return kind == Kind::ExpertDemo; }

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Trajectory {
  std::string episode_id;
  std::uint64_t seed = 0;
  Provenance provenance;
  std::vector<Step> steps;
  Outcome outcome;
  /// Per-step discounted returns; empty when the trajectory is unlabeled.
  std::vector<double> returns;

  bool labeled() const { return !returns.empty(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Dataset {
  ObservationSpec spec;
  std::vector<Trajectory> trajectories;
  std::optional<DistanceStats> distance_stats;
  /// Present when the per-step returns were computed with this config.
  std::optional<ReturnConfig> labels;

  std::size_t frame_count() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps.size();
    return n;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Validation

namespace detail {

inline void require(bool ok, const std::string& where, const std::string& what) {
  if (!ok) throw FormatError(where + ": " + what);
}

}  // namespace detail

/// Checks one trajectory against the observation spec; `where` prefixes error messages.
inline void validate_trajectory(const Trajectory& t, const ObservationSpec& spec,
                                std::optional<std::size_t> joint_count = std::nullopt,
                                const std::string& where = "trajectory") {
  using detail::require;
  require(!t.episode_id.empty(), where + ": field episode_id", "must be non-empty");
  require(!t.steps.empty(), where + ": field steps", "trajectory must have at least one step");
  require(!t.provenance.is_expert() || t.outcome.is_success(), where + ": field outcome",
          "expert demonstrations must end in success");
  require(t.returns.empty() || t.returns.size() == t.steps.size(), where + ": field ret",
          "returns must be present on every step or on none");
  const std::size_t joints = joint_count.value_or(t.steps.front().observation.kinematics.joint_angles.size());
  int previous = -1;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const Step& s = t.steps[i];
    const std::string at = where + ": field steps[" + std::to_string(i) + "]";
    require(s.index > previous, at + ".index", "indices must be strictly increasing");
    previous = s.index;
    require(s.observation.pixels.size() == spec.pixel_count(), at + ".pixels",
            "expected " + std::to_string(spec.pixel_count()) + " pixels, got " +
                std::to_string(s.observation.pixels.size()));
    const auto& k = s.observation.kinematics;
    require(k.joint_angles.size() == joints, at + ".joints", "joint count differs within dataset");
    for (double q : k.joint_angles) require(std::isfinite(q), at + ".joints", "non-finite joint angle");
    require(std::isfinite(k.x) && std::isfinite(k.y) && std::isfinite(k.heading), at + ".base",
            "non-finite base pose");
    const Action& a = s.action;
    require(std::isfinite(a.base_forward) && std::isfinite(a.base_turn) && std::isfinite(a.wrist_rate),
            at + ".action", "non-finite action");
    require(a.terminate >= 0.0 && a.terminate <= 1.0, at + ".action.terminate", "must lie in [0, 1]");
    if (!t.returns.empty()) {
      require(std::isfinite(t.returns[i]), at + ".ret", "non-finite return");
    }
  }
}

inline void validate_dataset(const Dataset& d) {
  using detail::require;
  require(d.spec.width >= 1 && d.spec.height >= 1 && d.spec.channels >= 1, "dataset: field spec",
          "width, height and channels must be >= 1");
  if (d.distance_stats) {
    const auto& s = *d.distance_stats;
    require(s.sigma_pixel > 0 && s.sigma_joint > 0 && s.sigma_xyz > 0, "dataset: field distance_stats",
            "sigmas must be positive");
  }
  std::set<std::string> ids;
  std::optional<std::size_t> joints;
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
    const auto& t = d.trajectories[i];
    const std::string where = "trajectory " + std::to_string(i);
    if (!t.steps.empty() && !joints) joints = t.steps.front().observation.kinematics.joint_angles.size();
    validate_trajectory(t, d.spec, joints, where);
    require(ids.insert(t.episode_id).second, where + ": field episode_id",
            "duplicate episode_id '" + t.episode_id + "'");
  }
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr const char* kTrajlogFormat = "bcva-trajlog";
inline constexpr int kTrajlogVersion = 1;

namespace detail {

using nlohmann::json;

inline json stats_to_json(const DistanceStats& s) {
  return json{{"mu_pixel", s.mu_pixel}, {"sigma_pixel", s.sigma_pixel}, {"mu_joint", s.mu_joint},
              {"sigma_joint", s.sigma_joint}, {"mu_xyz", s.mu_xyz},       {"sigma_xyz", s.sigma_xyz}};
}

inline std::string outcome_kind_name(Outcome::Kind k) {
  switch (k) {
    case Outcome::Kind::Success: return "success";
    case Outcome::Kind::Failure: return "failure";
    case Outcome::Kind::AskedForHelp: return "asked_for_help";
  }
  return "?";
}

inline json trajectory_to_json(const Trajectory& t) {
  json steps = json::array();
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const Step& s = t.steps[i];
    const auto& k = s.observation.kinematics;
    json step{{"index", s.index},
              {"pixels", s.observation.pixels},
              {"joints", k.joint_angles},
              {"base", {{"x", k.x}, {"y", k.y}, {"heading", k.heading}}},
              {"action",
               {{"base_forward", s.action.base_forward},
                {"base_turn", s.action.base_turn},
                {"wrist_rate", s.action.wrist_rate},
                {"terminate", s.action.terminate}}}};
    if (!t.returns.empty()) step["ret"] = t.returns[i];
    steps.push_back(std::move(step));
  }
  json provenance{{"kind", t.provenance.is_expert() ? "expert_demo" : "policy_rollout"}};
  if (!t.provenance.is_expert()) provenance["policy_id"] = t.provenance.policy_id;
  json outcome{{"kind", outcome_kind_name(t.outcome.kind)}};
  if (t.outcome.is_failure()) outcome["mode"] = to_string(t.outcome.mode);
  return json{{"episode_id", t.episode_id}, {"seed", t.seed},      {"provenance", provenance},
              {"outcome", outcome},         {"steps", std::move(steps)}};
}

/// Field access that reports the JSON path on failure.
class Reader {
 public:
  explicit Reader(std::size_t line) : line_(line) {}

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw FormatError("line " + std::to_string(line_) + ": field " + field + ": " + what);
  }

  const json& at(const json& obj, const std::string& key, const std::string& path) const {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path.empty() ? key : path + "." + key, "missing");
    return *it;
  }

  double number(const json& j, const std::string& path) const {
    if (!j.is_number()) fail(path, "expected a number");
    return j.get<double>();
  }

  std::int64_t integer(const json& j, const std::string& path) const {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    return j.get<std::int64_t>();
  }

  std::string string(const json& j, const std::string& path) const {
    if (!j.is_string()) fail(path, "expected a string");
    return j.get<std::string>();
  }

  const json& array(const json& j, const std::string& path) const {
    if (!j.is_array()) fail(path, "expected an array");
    return j;
  }

 private:
  std::size_t line_;
};

inline DistanceStats stats_from_json(const json& j, const Reader& r, const std::string& path) {
  DistanceStats s;
  s.mu_pixel = r.number(r.at(j, "mu_pixel", path), path + ".mu_pixel");
  s.sigma_pixel = r.number(r.at(j, "sigma_pixel", path), path + ".sigma_pixel");
  s.mu_joint = r.number(r.at(j, "mu_joint", path), path + ".mu_joint");
  s.sigma_joint = r.number(r.at(j, "sigma_joint", path), path + ".sigma_joint");
  s.mu_xyz = r.number(r.at(j, "mu_xyz", path), path + ".mu_xyz");
  s.sigma_xyz = r.number(r.at(j, "sigma_xyz", path), path + ".sigma_xyz");
  return s;
}

inline FailureMode parse_failure_mode(const std::string& s, const Reader& r, const std::string& path) {
  if (s == "collision") return FailureMode::Collision;
  if (s == "grasp_miss") return FailureMode::GraspMiss;
  if (s == "timeout") return FailureMode::Timeout;
  if (s == "push_while_latched") return FailureMode::PushWhileLatched;
  r.fail(path, "unknown failure mode '" + s + "'");
}

inline Trajectory trajectory_from_json(const json& j, const ObservationSpec& spec, const Reader& r) {
  Trajectory t;
  t.episode_id = r.string(r.at(j, "episode_id", ""), "episode_id");
  const json& seed = r.at(j, "seed", "");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
    r.fail("seed", "expected a non-negative integer");
  }
  t.seed = seed.get<std::uint64_t>();

  const json& prov = r.at(j, "provenance", "");
  const std::string kind = r.string(r.at(prov, "kind", "provenance"), "provenance.kind");
  if (kind == "expert_demo") {
    t.provenance = Provenance::expert();
  } else if (kind == "policy_rollout") {
    t.provenance = Provenance::rollout(
        r.string(r.at(prov, "policy_id", "provenance"), "provenance.policy_id"));
  } else {
    r.fail("provenance.kind", "unknown provenance '" + kind + "'");
  }

  const json& out = r.at(j, "outcome", "");
  const std::string okind = r.string(r.at(out, "kind", "outcome"), "outcome.kind");
  if (okind == "success") {
    t.outcome = Outcome::success();
  } else if (okind == "asked_for_help") {
    t.outcome = Outcome::asked_for_help();
  } else if (okind == "failure") {
    t.outcome = Outcome::failure(
        parse_failure_mode(r.string(r.at(out, "mode", "outcome"), "outcome.mode"), r, "outcome.mode"));
  } else {
    r.fail("outcome.kind", "unknown outcome '" + okind + "'");
  }

  const json& steps = r.array(r.at(j, "steps", ""), "steps");
  t.steps.reserve(steps.size());
  std::size_t with_ret = 0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const json& js = steps[i];
    const std::string p = "steps[" + std::to_string(i) + "]";
    Step s;
    s.index = static_cast<int>(r.integer(r.at(js, "index", p), p + ".index"));
    const json& px = r.array(r.at(js, "pixels", p), p + ".pixels");
    if (px.size() != spec.pixel_count()) {
      r.fail(p + ".pixels", "expected " + std::to_string(spec.pixel_count()) + " values, got " +
                                std::to_string(px.size()));
    }
    s.observation.pixels.resize(px.size());
    for (std::size_t k = 0; k < px.size(); ++k) {
      const json& v = px[k];
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0 || v.get<std::int64_t>() > 255) {
        r.fail(p + ".pixels[" + std::to_string(k) + "]",
               "pixel level " + v.dump() + " is not an integer in [0, 255]");
      }
      s.observation.pixels[k] = static_cast<std::uint8_t>(v.get<int>());
    }
    const json& joints = r.array(r.at(js, "joints", p), p + ".joints");
    for (std::size_t k = 0; k < joints.size(); ++k) {
      s.observation.kinematics.joint_angles.push_back(
          r.number(joints[k], p + ".joints[" + std::to_string(k) + "]"));
    }
    const json& base = r.at(js, "base", p);
    s.observation.kinematics.x = r.number(r.at(base, "x", p + ".base"), p + ".base.x");
    s.observation.kinematics.y = r.number(r.at(base, "y", p + ".base"), p + ".base.y");
    s.observation.kinematics.heading = r.number(r.at(base, "heading", p + ".base"), p + ".base.heading");
    const json& a = r.at(js, "action", p);
    const std::string ap = p + ".action";
    s.action.base_forward = r.number(r.at(a, "base_forward", ap), ap + ".base_forward");
    s.action.base_turn = r.number(r.at(a, "base_turn", ap), ap + ".base_turn");
    s.action.wrist_rate = r.number(r.at(a, "wrist_rate", ap), ap + ".wrist_rate");
    s.action.terminate = r.number(r.at(a, "terminate", ap), ap + ".terminate");
    if (auto it = js.find("ret"); it != js.end()) {
      t.returns.push_back(r.number(*it, p + ".ret"));
      ++with_ret;
    }
    t.steps.push_back(std::move(s));
  }
  if (with_ret != 0 && with_ret != t.steps.size()) r.fail("steps[].ret", "present on some steps only");
  return t;
}

}  // namespace detail

inline std::string header_line(const Dataset& d) {
  using nlohmann::json;
  json h{{"format", kTrajlogFormat},
         {"version", kTrajlogVersion},
         {"spec", {{"width", d.spec.width}, {"height", d.spec.height}, {"channels", d.spec.channels}}},
         {"distance_stats", d.distance_stats ? detail::stats_to_json(*d.distance_stats) : json(nullptr)}};
  if (d.labels) {
    h["labels"] = json{{"metric", std::string(to_string(d.labels->metric))},
                       {"gamma", d.labels->gamma},
                       {"clamp_delta_at_zero", d.labels->clamp_delta_at_zero}};
  } else {
    h["labels"] = nullptr;
  }
  return h.dump();
}

inline std::string trajectory_line(const Trajectory& t) { return detail::trajectory_to_json(t).dump(); }

/// Writes the header and one line per trajectory to `out`.
inline void write_dataset(const Dataset& d, std::ostream& out) {
  validate_dataset(d);
  out << header_line(d) << '\n';
  for (const auto& t : d.trajectories) out << trajectory_line(t) << '\n';
}

/// Writes to a temporary sibling and renames it into place.
inline void write_dataset(const Dataset& d, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    write_dataset(d, out);
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Appends trajectories to an existing dataset file (single writer).
inline void append_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& ts,
                                const ObservationSpec& spec) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  for (const auto& t : ts) {
    validate_trajectory(t, spec);
    out << trajectory_line(t) << '\n';
  }
}

inline Dataset read_dataset(std::istream& in) {
  using nlohmann::json;
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::set<std::string> ids;
  std::optional<std::size_t> joints;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    detail::Reader r(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError("line " + std::to_string(lineno) + ": field <record>: malformed JSON (" +
                        e.what() + ")");
    }
    if (!have_header) {
      if (r.string(r.at(j, "format", ""), "format") != kTrajlogFormat) r.fail("format", "not a trajlog file");
      const auto version = r.integer(r.at(j, "version", ""), "version");
      if (version != kTrajlogVersion) r.fail("version", "unsupported version " + std::to_string(version));
      const json& spec = r.at(j, "spec", "");
      d.spec.width = static_cast<int>(r.integer(r.at(spec, "width", "spec"), "spec.width"));
      d.spec.height = static_cast<int>(r.integer(r.at(spec, "height", "spec"), "spec.height"));
      d.spec.channels = static_cast<int>(r.integer(r.at(spec, "channels", "spec"), "spec.channels"));
      if (d.spec.width < 1 || d.spec.height < 1 || d.spec.channels < 1) r.fail("spec", "dimensions must be >= 1");
      if (auto it = j.find("distance_stats"); it != j.end() && !it->is_null()) {
        d.distance_stats = detail::stats_from_json(*it, r, "distance_stats");
        const auto& s = *d.distance_stats;
        if (!(s.sigma_pixel > 0 && s.sigma_joint > 0 && s.sigma_xyz > 0)) r.fail("distance_stats", "sigmas must be positive");
      }
      if (auto it = j.find("labels"); it != j.end() && !it->is_null()) {
        ReturnConfig rc;
        try {
          rc.metric = parse_metric(r.string(r.at(*it, "metric", "labels"), "labels.metric"));
        } catch (const UsageError& e) {
          r.fail("labels.metric", e.what());
        }
        rc.gamma = r.number(r.at(*it, "gamma", "labels"), "labels.gamma");
        const json& clamp = r.at(*it, "clamp_delta_at_zero", "labels");
        if (!clamp.is_boolean()) r.fail("labels.clamp_delta_at_zero", "expected a boolean");
        rc.clamp_delta_at_zero = clamp.get<bool>();
        d.labels = rc;
      }
      have_header = true;
      continue;
    }
    Trajectory t = detail::trajectory_from_json(j, d.spec, r);
    if (!t.steps.empty() && !joints) joints = t.steps.front().observation.kinematics.joint_angles.size();
    validate_trajectory(t, d.spec, joints, "line " + std::to_string(lineno));
    if (!ids.insert(t.episode_id).second) r.fail("episode_id", "duplicate episode_id '" + t.episode_id + "'");
    d.trajectories.push_back(std::move(t));
  }
  if (!have_header) throw FormatError("line 1: field <header>: missing header record");
  return d;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_dataset(in);
}

// ---------------------------------------------------------------------------
// Splitting

/// Position of an episode in [0, 1): a splitmix-finalized FNV-1a hash of the
/// episode id, keyed by the salt. An episode is in validation iff its
/// position is below the validation fraction, so membership never changes as
/// the dataset grows.
inline double split_position(const std::string& episode_id, std::uint64_t salt) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : episode_id) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  auto mix = [](std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  const std::uint64_t u = mix(h ^ mix(salt));
  return static_cast<double>(u >> 11) * 0x1.0p-53;
}

struct Split {
  Dataset train;
  Dataset validation;
};

inline Split split_dataset(const Dataset& d, double validation_fraction, std::uint64_t salt,
                           bool experts_in_train = true) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw DomainError("validation fraction must lie in (0, 1)");
  }
  Split s;
  s.train.spec = s.validation.spec = d.spec;
  s.train.distance_stats = s.validation.distance_stats = d.distance_stats;
  s.train.labels = s.validation.labels = d.labels;
  for (const auto& t : d.trajectories) {
    const bool forced = experts_in_train && t.provenance.is_expert();
    if (!forced && split_position(t.episode_id, salt) < validation_fraction) {
      s.validation.trajectories.push_back(t);
    } else {
      s.train.trajectories.push_back(t);
    }
  }
  return s;
}

}  // namespace bcva
