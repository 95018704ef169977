#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "deflect/asyncsim.hpp"
#include "deflect/errors.hpp"
#include "doctest.h"

using namespace deflect;
using namespace deflect::asyncsim;

namespace {

flowpolicy::PolicyConfig small_policy() {
  flowpolicy::PolicyConfig c;
  c.hidden = {16};
  c.flow_steps = 2;
  return c;
}

const diffnet::PolicyParams& net() {
  static const auto p = flowpolicy::make_velocity_net(small_policy(), 42);
  return p;
}

}  // namespace

TEST_CASE("protocol sets K = max(d, 1)") {
  CHECK(AsyncConfig::protocol(0, Strategy::kNaive).horizon_k == 1);
  CHECK(AsyncConfig::protocol(1, Strategy::kNaive).horizon_k == 1);
  CHECK(AsyncConfig::protocol(6, Strategy::kNaive).horizon_k == 6);
  for (int d = 0; d <= 8; ++d) CHECK_NOTHROW(AsyncConfig::protocol(d, Strategy::kOracle).validate());
}

TEST_CASE("async configuration is validated") {
  AsyncConfig c = AsyncConfig::protocol(4, Strategy::kRollforward);
  c.horizon_k = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(AsyncConfig::protocol(9, Strategy::kNaive).validate(), ConfigError);
  c = AsyncConfig::protocol(-1, Strategy::kNaive);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AsyncConfig::protocol(2, Strategy::kOracle);
  c.deployment_realism = true;
  CHECK_THROWS_AS(c.validate(), ContractViolation);
  CHECK(parse_strategy(strategy_name(Strategy::kRollforward)) == Strategy::kRollforward);
  CHECK_THROWS_AS(parse_strategy("future"), ConfigError);
}

TEST_CASE("rollforward applies the simulator kinematics") {
  const env::EnvConfig cfg;
  const std::vector<env::Vec2> acts{{1, 0}, {1, 0.5}, {3, -2}};
  const env::Vec2 s = rollforward_state({0, 0}, acts, cfg);
  CHECK(s.x == doctest::Approx(0.18));
  CHECK(s.y == doctest::Approx(-0.03));
  CHECK(rollforward_state({1.99, 0}, std::vector<env::Vec2>{{1, 0}}, cfg).x == 2.0);
  CHECK(rollforward_state({0.5, 0.25}, {}, cfg) == env::Vec2{0.5, 0.25});
}

TEST_CASE("context construction reads the right timestamps") {
  const env::EnvConfig cfg;
  std::vector<env::EnvState> hist{env::env_reset(3, cfg)};
  std::vector<env::Vec2> acts;
  for (int i = 0; i < 6; ++i) {
    acts.push_back({0.5, -0.25 * i});
    hist.push_back(env::env_step(hist.back(), acts.back(), cfg).state);
  }
  const std::span<const env::Vec2> committed(acts.data() + 2, 3);
  const auto naive = build_context(Strategy::kNaive, hist, 2, 3, committed, cfg);
  CHECK(naive.observation == env::observe(hist[2]));
  CHECK(naive.proprio == hist[2].robot);
  const auto roll = build_context(Strategy::kRollforward, hist, 2, 3, committed, cfg);
  CHECK(roll.observation == env::observe(hist[2]));
  CHECK(roll.proprio == hist[5].robot);
  const auto oracle = build_context(Strategy::kOracle, hist, 2, 3, committed, cfg);
  CHECK(oracle.observation == env::observe(hist[5]));
  CHECK(oracle.proprio == hist[5].robot);
  CHECK_THROWS_AS(build_context(Strategy::kOracle, hist, 2, 3, committed, cfg, true),
                  ContractViolation);
  CHECK_THROWS_AS(build_context(Strategy::kRollforward, hist, 2, 2, committed, cfg),
                  ContractViolation);
  CHECK_THROWS_AS(build_context(Strategy::kOracle, hist, 4, 3, committed, cfg),
                  ContractViolation);
}

TEST_CASE("all strategies coincide at zero delay") {
  const auto pcfg = small_policy();
  const env::EnvConfig ecfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto a = run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(0, Strategy::kNaive), seed);
    const auto b =
        run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(0, Strategy::kRollforward), seed);
    const auto c = run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(0, Strategy::kOracle), seed);
    REQUIRE(a.states.size() == b.states.size());
    REQUIRE(a.states.size() == c.states.size());
    for (std::size_t i = 0; i < a.states.size(); ++i) {
      CHECK(a.states[i] == b.states[i]);
      CHECK(a.states[i] == c.states[i]);
    }
    CHECK(a.success == b.success);
    CHECK(a.success == c.success);
  }
}

TEST_CASE("execution timeline: idle for d steps, then K actions per chunk") {
  const auto pcfg = small_policy();
  const env::EnvConfig ecfg;
  for (int d : {0, 1, 3, 6}) {
    const AsyncConfig acfg = AsyncConfig::protocol(d, Strategy::kNaive);
    const auto r = run_episode(net(), pcfg, ecfg, acfg, 11);
    for (const TraceStep& s : r.trace) {
      if (s.t < d) {
        CHECK(s.chunk_id == -1);
        CHECK(s.action == env::Vec2{0, 0});
      } else {
        const std::int64_t k = (s.t - d) / acfg.horizon_k;
        CHECK(s.chunk_id == k);
        const auto& cyc = r.cycles[static_cast<std::size_t>(k)];
        CHECK(s.action == cyc.chunk.action(static_cast<std::size_t>(s.t - cyc.exec_start)));
      }
    }
    for (std::size_t k = 0; k < r.cycles.size(); ++k) {
      CHECK(r.cycles[k].exec_start == d + static_cast<std::int64_t>(k) * acfg.horizon_k);
      CHECK(r.cycles[k].capture_time == r.cycles[k].exec_start - d);
    }
    CHECK(r.policy_actions == r.steps - std::min<std::int64_t>(d, r.steps));
  }
}

TEST_CASE("rollforward proprio equals the true state at execution start") {
  const auto pcfg = small_policy();
  const env::EnvConfig ecfg;
  for (int d = 1; d <= 7; ++d) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto roll =
          run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(d, Strategy::kRollforward), seed);
      for (const CycleRecord& c : roll.cycles) {
        CHECK(c.context.proprio == roll.states[static_cast<std::size_t>(c.exec_start)].robot);
        CHECK(c.context.observation ==
              env::observe(roll.states[static_cast<std::size_t>(c.capture_time)]));
      }
      const auto naive =
          run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(d, Strategy::kNaive), seed);
      for (const CycleRecord& c : naive.cycles) {
        CHECK(c.context.proprio == naive.states[static_cast<std::size_t>(c.capture_time)].robot);
        CHECK(c.context.observation.time_index == c.capture_time);
      }
      const auto oracle =
          run_episode(net(), pcfg, ecfg, AsyncConfig::protocol(d, Strategy::kOracle), seed);
      for (const CycleRecord& c : oracle.cycles)
        CHECK(c.context.observation.time_index == c.exec_start);
    }
  }
}

TEST_CASE("episodes are deterministic in the seed") {
  const auto pcfg = small_policy();
  const env::EnvConfig ecfg;
  const AsyncConfig acfg = AsyncConfig::protocol(3, Strategy::kRollforward);
  const auto a = run_episode(net(), pcfg, ecfg, acfg, 5);
  const auto b = run_episode(net(), pcfg, ecfg, acfg, 5);
  CHECK(a.states == b.states);
  CHECK(a.steps == b.steps);
}

TEST_CASE("batch statistics match sequential episodes") {
  const auto pcfg = small_policy();
  const env::EnvConfig ecfg;
  const AsyncConfig acfg = AsyncConfig::protocol(2, Strategy::kNaive);
  const BatchStats s = run_batch(net(), pcfg, ecfg, acfg, 40, 1000);
  CHECK(s.n == 40);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < 40; ++i) {
    const bool ok = run_episode(net(), pcfg, ecfg, acfg, 1000 + i).success;
    CHECK(s.flags[i] == (ok ? 1 : 0));
    wins += ok ? 1 : 0;
  }
  CHECK(s.successes == wins);
  CHECK(s.rate == doctest::Approx(wins / 40.0));
  CHECK_THROWS_AS(run_batch(net(), pcfg, ecfg, acfg, 0, 0), ConfigError);
}

TEST_CASE("non-finite policy output aborts the episode as a failure") {
  const auto pcfg = small_policy();
  auto bad = net();
  for (double& b : bad.layers.back().bias) b = std::numeric_limits<double>::infinity();
  const auto r = run_episode(bad, pcfg, env::EnvConfig{},
                             AsyncConfig::protocol(1, Strategy::kNaive), 0);
  CHECK_FALSE(r.success);
  CHECK_FALSE(r.diagnostic.empty());
}

TEST_CASE("chunk length must match the policy horizon") {
  AsyncConfig acfg = AsyncConfig::protocol(2, Strategy::kNaive, 4);
  CHECK_THROWS_AS(run_episode(net(), small_policy(), env::EnvConfig{}, acfg, 0), ConfigError);
}

TEST_CASE("trace CSV has one row per executed step") {
  const auto r = run_episode(net(), small_policy(), env::EnvConfig{},
                             AsyncConfig::protocol(2, Strategy::kNaive), 8);
  const auto path = std::filesystem::temp_directory_path() / "deflect_trace.csv";
  write_trace_csv(r, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,robot_x,robot_y,target_x,target_y,chunk_id,action_x,action_y");
  std::int64_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == r.steps);
}
