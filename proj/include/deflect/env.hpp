#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

// Deterministic 2D intercept task: a robot starting at the origin must come
// within the success radius of a target drifting at constant velocity. Also
// the scripted lead-pursuit expert and the demonstration dataset.
namespace deflect::env {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
  double norm() const { return std::hypot(x, y); }
  double chebyshev() const { return std::max(std::abs(x), std::abs(y)); }
};

struct EnvConfig {
  double workspace = 2.0;        // W: positions live in [-W, W]^2
  int horizon = 60;              // T, control steps
  double success_radius = 0.12;  // r
  double step_gain = 0.06;       // robot displacement per unit action
  double speed_min = 0.02;       // target speed range, units per step
  double speed_max = 0.05;
  // Targets spawn uniformly in the square annulus inner <= |p|_inf <= outer
  // and move counter-clockwise, perpendicular to their spawn direction.
  double band_inner = 1.3;
  double band_outer = 1.8;
  // Velocity direction, degrees counter-clockwise from the outward radial
  // direction at spawn (90 = tangent).
  double heading_deg = 90.0;
  double task_tag = 1.0;
  double expert_gain = 1.0;

  void validate() const;
};

struct EnvState {
  std::int64_t t = 0;
  Vec2 robot;
  Vec2 target;
  Vec2 target_velocity;
  int horizon = 60;
  double success_radius = 0.12;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct Observation {
  Vec2 target;
  std::int64_t time_index = 0;

  friend bool operator==(const Observation&, const Observation&) = default;
};

inline Observation observe(const EnvState& s) { return {s.target, s.t}; }

inline double clamp_unit(double a) { return std::clamp(a, -1.0, 1.0); }
inline Vec2 clip_action(Vec2 a) { return {clamp_unit(a.x), clamp_unit(a.y)}; }
inline Vec2 clamp_workspace(Vec2 p, double w) {
  return {std::clamp(p.x, -w, w), std::clamp(p.y, -w, w)};
}

// Robot kinematics shared by the simulator and state roll-forward.
inline Vec2 advance_robot(Vec2 robot, Vec2 action, const EnvConfig& cfg) {
  return clamp_workspace(robot + cfg.step_gain * clip_action(action), cfg.workspace);
}

EnvState env_reset(std::uint64_t seed, const EnvConfig& cfg);

struct StepResult {
  EnvState state;
  bool success = false;
  bool done = false;
};

StepResult env_step(const EnvState& state, Vec2 action, const EnvConfig& cfg);

bool within_success_radius(const EnvState& state);

// Lead pursuit: aim at the predicted interception point and move there with
// proportional gain, clipped to [-1, 1]^2.
Vec2 expert_action(const EnvState& state, const EnvConfig& cfg);

struct Record {
  EnvState state;
  Vec2 action;
};

struct Demonstration {
  std::vector<Record> records;
  std::uint64_t episode_id = 0;
  bool success = false;
};

struct DemoSet {
  std::uint32_t chunk_length = 8;
  std::vector<Demonstration> episodes;
  std::size_t attempted = 0;

  double retained_ratio() const {
    return attempted == 0 ? 0.0 : static_cast<double>(episodes.size()) / attempted;
  }
};

// Rolls the expert from env_reset(seed) until success or the horizon.
Demonstration run_expert_episode(std::uint64_t seed, const EnvConfig& cfg);

// Episodes use seeds base_seed + i; only successful ones are kept. Throws
// ConfigError if the expert solves fewer than 90% of the episodes.
DemoSet generate_demos(std::size_t n_episodes, std::uint64_t base_seed,
                       const EnvConfig& cfg, std::uint32_t chunk_length);

// DSET1 binary format (see README).
void write_dataset(const DemoSet& demos, const std::filesystem::path& path);
DemoSet read_dataset(const std::filesystem::path& path, const EnvConfig& cfg);
void write_dataset_csv(const DemoSet& demos, const std::filesystem::path& path);

}  // namespace deflect::env
