#include "deflect/env.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <fstream>
#include <string>

#include "deflect/binio.hpp"
#include "deflect/errors.hpp"
#include "deflect/rng.hpp"

namespace deflect::env {
namespace {

constexpr char kMagic[9] = "DFLDSET1";
constexpr std::uint32_t kActionDim = 2;
constexpr std::uint32_t kObsDim = 2;
constexpr std::uint32_t kProprioDim = 2;

}  // namespace

void EnvConfig::validate() const {
  if (!(workspace > 0.0)) throw ConfigError("env.workspace must be > 0");
  if (horizon < 1) throw ConfigError("env.horizon must be >= 1");
  if (!(success_radius > 0.0)) throw ConfigError("env.success_radius must be > 0");
  if (!(step_gain > 0.0)) throw ConfigError("env.step_gain must be > 0");
  if (speed_min < 0.0 || speed_max < speed_min) {
    throw ConfigError("env speed range must satisfy 0 <= speed_min <= speed_max");
  }
  if (band_inner < 0.0 || band_outer < band_inner || band_outer > workspace) {
    throw ConfigError("env spawn band must satisfy 0 <= band_inner <= band_outer <= workspace");
  }
  if (!std::isfinite(heading_deg)) throw ConfigError("env.heading_deg must be finite");
  if (!(band_outer > 0.0)) throw ConfigError("env.band_outer must be > 0");
  if (!(expert_gain > 0.0)) throw ConfigError("env.expert_gain must be > 0");
}

EnvState env_reset(std::uint64_t seed, const EnvConfig& cfg) {
  Rng rng(mix_seed(seed, 0x656e76));
  Vec2 target;
  do {
    target = {rng.uniform(-cfg.band_outer, cfg.band_outer),
              rng.uniform(-cfg.band_outer, cfg.band_outer)};
  } while (target.chebyshev() < cfg.band_inner || target.norm() == 0.0);
  const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  const double radius = target.norm();
  const double c = std::cos(cfg.heading_deg * std::numbers::pi / 180.0);
  const double sn = std::sin(cfg.heading_deg * std::numbers::pi / 180.0);
  const Vec2 radial{target.x / radius, target.y / radius};
  const Vec2 direction{c * radial.x - sn * radial.y, sn * radial.x + c * radial.y};
  EnvState s;
  s.t = 0;
  s.robot = {0.0, 0.0};
  s.target = target;
  s.target_velocity = speed * direction;
  s.horizon = cfg.horizon;
  s.success_radius = cfg.success_radius;
  return s;
}

bool within_success_radius(const EnvState& s) {
  return (s.robot - s.target).norm() <= s.success_radius;
}

StepResult env_step(const EnvState& state, Vec2 action, const EnvConfig& cfg) {
  StepResult r;
  r.state = state;
  r.state.robot = advance_robot(state.robot, action, cfg);
  r.state.target = clamp_workspace(state.target + state.target_velocity, cfg.workspace);
  r.state.t = state.t + 1;
  r.success = within_success_radius(r.state);
  r.done = r.success || r.state.t >= state.horizon;
  return r;
}

Vec2 expert_action(const EnvState& s, const EnvConfig& cfg) {
  if (within_success_radius(s)) return {0.0, 0.0};
  // The robot covers step_gain per axis per step, so the time to reach a point
  // is its Chebyshev distance over step_gain. Fixed-point iterate the
  // interception time a few times.
  double time_to_go = (s.target - s.robot).chebyshev() / cfg.step_gain;
  Vec2 aim = s.target;
  for (int i = 0; i < 6; ++i) {
    aim = clamp_workspace(s.target + time_to_go * s.target_velocity, cfg.workspace);
    time_to_go = (aim - s.robot).chebyshev() / cfg.step_gain;
  }
  return clip_action((cfg.expert_gain / cfg.step_gain) * (aim - s.robot));
}

Demonstration run_expert_episode(std::uint64_t seed, const EnvConfig& cfg) {
  Demonstration demo;
  demo.episode_id = seed;
  EnvState s = env_reset(seed, cfg);
  while (true) {
    const Vec2 a = expert_action(s, cfg);
    demo.records.push_back({s, a});
    const StepResult r = env_step(s, a, cfg);
    s = r.state;
    if (r.done) {
      demo.success = r.success;
      break;
    }
  }
  return demo;
}

DemoSet generate_demos(std::size_t n_episodes, std::uint64_t base_seed,
                       const EnvConfig& cfg, std::uint32_t chunk_length) {
  if (n_episodes < 1) throw ConfigError("generate_demos: n_episodes must be >= 1");
  cfg.validate();
  DemoSet set;
  set.chunk_length = chunk_length;
  set.attempted = n_episodes;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    Demonstration d = run_expert_episode(base_seed + i, cfg);
    if (d.success) set.episodes.push_back(std::move(d));
  }
  if (set.retained_ratio() < 0.9) {
    throw ConfigError("expert solved only " + std::to_string(set.episodes.size()) + "/" +
                      std::to_string(n_episodes) +
                      " episodes (< 90%); the environment configuration is too hard");
  }
  return set;
}

void write_dataset(const DemoSet& demos, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open dataset for writing: " + path.string());
  out.write(kMagic, 8);
  binio::write_u32(out, static_cast<std::uint32_t>(demos.episodes.size()));
  binio::write_u32(out, kActionDim);
  binio::write_u32(out, kObsDim);
  binio::write_u32(out, kProprioDim);
  binio::write_u32(out, demos.chunk_length);
  for (const auto& ep : demos.episodes) {
    binio::write_u32(out, static_cast<std::uint32_t>(ep.records.size()));
    for (const auto& rec : ep.records) {
      const auto& s = rec.state;
      for (double v : {static_cast<double>(s.t), s.robot.x, s.robot.y, s.target.x, s.target.y,
                       s.target_velocity.x, s.target_velocity.y, rec.action.x, rec.action.y}) {
        binio::write_f64(out, v);
      }
    }
  }
  if (!out) throw IoError("failed writing dataset: " + path.string());
}

DemoSet read_dataset(const std::filesystem::path& path, const EnvConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path.string());
  binio::expect_magic(in, kMagic, path.string());
  DemoSet set;
  const std::uint32_t count = binio::read_u32(in, "episode count");
  const std::uint32_t action_dim = binio::read_u32(in, "action dim");
  const std::uint32_t obs_dim = binio::read_u32(in, "obs dim");
  const std::uint32_t proprio_dim = binio::read_u32(in, "proprio dim");
  set.chunk_length = binio::read_u32(in, "chunk length");
  if (action_dim != kActionDim || obs_dim != kObsDim || proprio_dim != kProprioDim) {
    throw IoError(path.string() + ": unsupported dimensions in header");
  }
  set.episodes.resize(count);
  set.attempted = count;
  for (std::uint32_t e = 0; e < count; ++e) {
    auto& ep = set.episodes[e];
    ep.episode_id = e;
    ep.success = true;
    const std::uint32_t len = binio::read_u32(in, "episode length");
    if (len == 0 || len > 1'000'000) throw IoError(path.string() + ": implausible episode length");
    ep.records.resize(len);
    for (auto& rec : ep.records) {
      double f[9];
      for (double& v : f) v = binio::read_f64(in, "record");
      rec.state.t = static_cast<std::int64_t>(f[0]);
      rec.state.robot = {f[1], f[2]};
      rec.state.target = {f[3], f[4]};
      rec.state.target_velocity = {f[5], f[6]};
      rec.state.horizon = cfg.horizon;
      rec.state.success_radius = cfg.success_radius;
      rec.action = {f[7], f[8]};
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError(path.string() + ": trailing bytes after last episode");
  }
  return set;
}

void write_dataset_csv(const DemoSet& demos, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open CSV for writing: " + path.string());
  out << "episode,t,robot_x,robot_y,target_x,target_y,target_vx,target_vy,action_x,action_y\n";
  char line[512];
  for (std::size_t e = 0; e < demos.episodes.size(); ++e) {
    for (const auto& rec : demos.episodes[e].records) {
      const auto& s = rec.state;
      std::snprintf(line, sizeof line, "%zu,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    e, static_cast<long long>(s.t), s.robot.x, s.robot.y, s.target.x, s.target.y,
                    s.target_velocity.x, s.target_velocity.y, rec.action.x, rec.action.y);
      out << line;
    }
  }
  if (!out) throw IoError("failed writing CSV: " + path.string());
}

}  // namespace deflect::env
