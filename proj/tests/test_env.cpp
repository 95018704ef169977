#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include "deflect/env.hpp"
#include "deflect/errors.hpp"
#include "doctest.h"

using namespace deflect;
using namespace deflect::env;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

EnvConfig static_config() {
  EnvConfig c;
  c.speed_min = 0.0;
  c.speed_max = 0.0;
  return c;
}

// Aims at the target position observed `lag` steps ago, without leading.
bool run_stale_aim(std::uint64_t seed, int lag, const EnvConfig& cfg) {
  std::vector<EnvState> history{env_reset(seed, cfg)};
  while (true) {
    const EnvState& s = history.back();
    const std::size_t seen = history.size() > static_cast<std::size_t>(lag)
                                 ? history.size() - 1 - static_cast<std::size_t>(lag)
                                 : 0;
    const Vec2 aim = history[seen].target;
    const Vec2 a = clip_action((1.0 / cfg.step_gain) * (aim - s.robot));
    const StepResult r = env_step(s, a, cfg);
    history.push_back(r.state);
    if (r.done) return r.success;
  }
}

}  // namespace

TEST_CASE("reset is deterministic in the seed") {
  const EnvConfig cfg;
  CHECK(env_reset(17, cfg) == env_reset(17, cfg));
  CHECK_FALSE(env_reset(17, cfg) == env_reset(18, cfg));
}

TEST_CASE("reset places the robot at the origin and the target in the band") {
  const EnvConfig cfg;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const EnvState s = env_reset(seed, cfg);
    CHECK(s.robot == Vec2{0.0, 0.0});
    CHECK(s.target.chebyshev() >= cfg.band_inner);
    CHECK(s.target.chebyshev() <= cfg.band_outer);
    CHECK(s.t == 0);
    CHECK(s.horizon == cfg.horizon);
  }
}

TEST_CASE("zero maximum speed gives a stationary target") {
  const EnvState s = env_reset(0, static_config());
  CHECK(s.target_velocity == Vec2{0.0, 0.0});
}

TEST_CASE("reset speeds are uniform on [v_min, v_max] (Kolmogorov-Smirnov at 1%)") {
  const EnvConfig cfg;
  const std::size_t n = 10000;
  std::vector<double> u;
  u.reserve(n);
  for (std::uint64_t seed = 0; seed < n; ++seed) {
    const double v = env_reset(seed, cfg).target_velocity.norm();
    u.push_back((v - cfg.speed_min) / (cfg.speed_max - cfg.speed_min));
  }
  std::sort(u.begin(), u.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = static_cast<double>(i) / n, hi = static_cast<double>(i + 1) / n;
    d = std::max({d, std::abs(u[i] - lo), std::abs(hi - u[i])});
  }
  // Asymptotic 1% critical value of the one-sample KS statistic.
  CHECK(d < 1.6276 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("target velocity is constant through an episode") {
  const EnvConfig cfg;
  EnvState s = env_reset(4, cfg);
  const Vec2 v = s.target_velocity;
  for (int i = 0; i < 30; ++i) {
    s = env_step(s, {0.3, -0.2}, cfg).state;
    CHECK(s.target_velocity == v);
  }
}

TEST_CASE("zero action on a static target only advances time") {
  const EnvConfig cfg = static_config();
  const EnvState s = env_reset(3, cfg);
  const StepResult r = env_step(s, {0.0, 0.0}, cfg);
  CHECK(r.state.t == 1);
  CHECK(r.state.robot == s.robot);
  CHECK(r.state.target == s.target);
  CHECK_FALSE(r.success);
  CHECK_FALSE(r.done);
}

TEST_CASE("a robot on the target succeeds") {
  const EnvConfig cfg;
  EnvState s;
  s.robot = {0.5, 0.5};
  s.target = {0.5, 0.5};
  const StepResult r = env_step(s, {1.0, 0.0}, cfg);  // moves 0.06 < r
  CHECK(r.success);
  CHECK(r.done);
}

TEST_CASE("hand kinematics example") {
  EnvConfig cfg;
  cfg.step_gain = 0.2;
  cfg.success_radius = 0.05;
  EnvState s;
  s.robot = {0.0, 0.0};
  s.target = {1.0, 0.0};
  s.target_velocity = {0.1, 0.0};
  s.success_radius = 0.05;
  const StepResult r = env_step(s, {1.0, 0.0}, cfg);
  CHECK_FALSE(r.success);
  CHECK((r.state.target - r.state.robot).norm() == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("actions are clipped and positions stay inside the workspace") {
  const EnvConfig cfg;
  EnvState s = env_reset(9, cfg);
  for (int i = 0; i < cfg.horizon - 1; ++i) {
    const StepResult r = env_step(s, {7.0, -7.0}, cfg);
    CHECK(std::abs(r.state.robot.x) <= cfg.workspace);
    CHECK(std::abs(r.state.robot.y) <= cfg.workspace);
    CHECK(std::abs(r.state.target.x) <= cfg.workspace);
    CHECK(std::abs(r.state.target.y) <= cfg.workspace);
    if (i == 0) CHECK(r.state.robot.x == doctest::Approx(cfg.step_gain));
    s = r.state;
  }
}

TEST_CASE("done at the horizon") {
  EnvConfig cfg = static_config();
  cfg.horizon = 3;
  EnvState s = env_reset(1, cfg);
  CHECK_FALSE(env_step(s, {0, 0}, cfg).done);
  s = env_step(s, {0, 0}, cfg).state;
  s = env_step(s, {0, 0}, cfg).state;
  const StepResult r = env_step(s, {0, 0}, cfg);
  CHECK(r.state.t == 3);
  CHECK(r.done);
  CHECK_FALSE(r.success);
}

TEST_CASE("expert points straight at a stationary target") {
  const EnvConfig cfg;
  EnvState s;
  s.target = {1.0, 0.0};
  const Vec2 a = expert_action(s, cfg);
  CHECK(a.x == 1.0);
  CHECK(a.y == 0.0);
}

TEST_CASE("expert idles inside the success radius") {
  const EnvConfig cfg;
  EnvState s;
  s.robot = {0.3, 0.3};
  s.target = {0.35, 0.3};
  s.target_velocity = {0.04, 0.0};
  CHECK(expert_action(s, cfg) == Vec2{0.0, 0.0});
}

TEST_CASE("expert leads a moving target") {
  const EnvConfig cfg;
  EnvState s;
  s.target = {1.0, 0.0};
  s.target_velocity = {0.0, 0.5};
  const Vec2 a = expert_action(s, cfg);
  CHECK(a.y > 0.0);
  CHECK(std::abs(a.x) <= 1.0);
  CHECK(std::abs(a.y) <= 1.0);
}

TEST_CASE("single static demo is a successful straight line") {
  const EnvConfig cfg = static_config();
  const DemoSet d = generate_demos(1, 0, cfg, 8);
  REQUIRE(d.episodes.size() == 1);
  const Demonstration& demo = d.episodes[0];
  CHECK(demo.success);
  const Vec2 target = demo.records[0].state.target;
  for (const Record& r : demo.records) {
    // The robot stays on the segment from the origin toward the target
    // while both axes saturate, then closes the remaining axis.
    CHECK(std::abs(r.action.x) <= 1.0);
    CHECK(std::abs(r.action.y) <= 1.0);
    CHECK(r.state.target == target);
  }
}

TEST_CASE("expert solves the default task") {
  const EnvConfig cfg;
  const DemoSet d = generate_demos(2000, 0, cfg, 8);
  CHECK(d.attempted == 2000);
  CHECK(d.episodes.size() >= 1900);
  CHECK(d.retained_ratio() >= 0.95);
  for (const Demonstration& demo : d.episodes) {
    CHECK(demo.records.size() <= static_cast<std::size_t>(cfg.horizon));
    CHECK(demo.success);
  }
}

TEST_CASE("a stale, non-leading controller is clearly worse than the expert") {
  const EnvConfig cfg;
  int expert = 0, stale = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    expert += run_expert_episode(seed, cfg).success ? 1 : 0;
    stale += run_stale_aim(seed, 6, cfg) ? 1 : 0;
  }
  MESSAGE("expert " << expert << "/1000, stale aim " << stale << "/1000");
  CHECK(expert - stale >= 150);
}

TEST_CASE("generate_demos rejects a task the expert cannot solve") {
  EnvConfig cfg;
  cfg.horizon = 5;
  CHECK_THROWS_AS(generate_demos(20, 0, cfg, 8), ConfigError);
  CHECK_THROWS_AS(generate_demos(0, 0, EnvConfig{}, 8), ConfigError);
}

TEST_CASE("dataset files are deterministic and round trip") {
  const EnvConfig cfg;
  const auto dir = std::filesystem::temp_directory_path();
  const DemoSet a = generate_demos(50, 123, cfg, 8);
  const DemoSet b = generate_demos(50, 123, cfg, 8);
  write_dataset(a, dir / "deflect_a.dset");
  write_dataset(b, dir / "deflect_b.dset");
  const std::string bytes = slurp(dir / "deflect_a.dset");
  CHECK(bytes == slurp(dir / "deflect_b.dset"));
  CHECK(bytes.substr(0, 8) == "DFLDSET1");

  const DemoSet c = read_dataset(dir / "deflect_a.dset", cfg);
  REQUIRE(c.episodes.size() == a.episodes.size());
  CHECK(c.chunk_length == 8);
  for (std::size_t e = 0; e < a.episodes.size(); ++e) {
    REQUIRE(c.episodes[e].records.size() == a.episodes[e].records.size());
    for (std::size_t i = 0; i < a.episodes[e].records.size(); ++i) {
      const Record& x = a.episodes[e].records[i];
      const Record& y = c.episodes[e].records[i];
      CHECK(x.state.t == y.state.t);
      CHECK(x.state.robot == y.state.robot);
      CHECK(x.state.target == y.state.target);
      CHECK(x.state.target_velocity == y.state.target_velocity);
      CHECK(x.action == y.action);
    }
  }

  write_dataset_csv(a, dir / "deflect_a.csv");
  std::istringstream csv(slurp(dir / "deflect_a.csv"));
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("robot_x") != std::string::npos);
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  std::size_t records = 0;
  for (const auto& e : a.episodes) records += e.records.size();
  CHECK(lines == records);
}

TEST_CASE("malformed dataset files raise I/O errors") {
  const auto path = std::filesystem::temp_directory_path() / "deflect_bad.dset";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTADSET and some bytes";
  }
  CHECK_THROWS_AS(read_dataset(path, EnvConfig{}), IoError);
  const DemoSet a = generate_demos(3, 1, EnvConfig{}, 8);
  write_dataset(a, path);
  const std::string bytes = slurp(path);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  CHECK_THROWS_AS(read_dataset(path, EnvConfig{}), IoError);
}
