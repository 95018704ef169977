#include "deflect/asyncsim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "deflect/errors.hpp"
#include "deflect/parallel.hpp"
#include "deflect/rng.hpp"

namespace deflect::asyncsim {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNaive:
      return "naive";
    case Strategy::kRollforward:
      return "rollforward";
    case Strategy::kOracle:
      return "oracle";
  }
  throw ConfigError("unknown strategy id");
}

Strategy parse_strategy(std::string_view name) {
  if (name == "naive") return Strategy::kNaive;
  if (name == "rollforward") return Strategy::kRollforward;
  if (name == "oracle") return Strategy::kOracle;
  throw ConfigError("unknown context strategy '" + std::string(name) + "'");
}

AsyncConfig AsyncConfig::protocol(int delay, Strategy strategy, std::size_t chunk_length) {
  AsyncConfig c;
  c.delay = delay;
  c.horizon_k = delay > 1 ? delay : 1;
  c.strategy = strategy;
  c.chunk_length = chunk_length;
  return c;
}

void AsyncConfig::validate() const {
  if (delay < 0) throw ConfigError("async.delay must be >= 0");
  if (horizon_k < 1) throw ConfigError("async.horizon_k must be >= 1");
  if (horizon_k < delay) {
    throw ConfigError("async.horizon_k must be >= delay so committed actions are known");
  }
  if (static_cast<std::size_t>(horizon_k) > chunk_length) {
    throw ConfigError("async.horizon_k = " + std::to_string(horizon_k) +
                      " exceeds the chunk length " + std::to_string(chunk_length));
  }
  if (deployment_realism && strategy == Strategy::kOracle) {
    throw ContractViolation("the oracle strategy is evaluation-only");
  }
}

env::Vec2 rollforward_state(env::Vec2 s_capture, std::span<const env::Vec2> committed,
                            const env::EnvConfig& cfg) {
  env::Vec2 s = s_capture;
  for (const env::Vec2& a : committed) s = env::advance_robot(s, a, cfg);
  return s;
}

flowpolicy::DeploymentContext build_context(Strategy strategy,
                                            std::span<const env::EnvState> history,
                                            std::int64_t t_capture, int d,
                                            std::span<const env::Vec2> committed,
                                            const env::EnvConfig& cfg, bool deployment_realism) {
  if (t_capture < 0 || d < 0) throw ContractViolation("build_context: negative time or delay");
  const auto capture = static_cast<std::size_t>(t_capture);
  if (capture >= history.size()) {
    throw ContractViolation("build_context: capture time not in history");
  }
  const env::EnvState& sc = history[capture];
  switch (strategy) {
    case Strategy::kNaive:
      return {env::observe(sc), sc.robot, cfg.task_tag};
    case Strategy::kRollforward:
      if (committed.size() != static_cast<std::size_t>(d)) {
        throw ContractViolation("build_context: rollforward needs exactly d committed actions");
      }
      return {env::observe(sc), rollforward_state(sc.robot, committed, cfg), cfg.task_tag};
    case Strategy::kOracle: {
      if (deployment_realism) {
        throw ContractViolation("oracle context requested in deployment-realism mode");
      }
      const std::size_t exec = capture + static_cast<std::size_t>(d);
      if (exec >= history.size()) {
        throw ContractViolation("build_context: execution-time state not in history");
      }
      return {env::observe(history[exec]), history[exec].robot, cfg.task_tag};
    }
  }
  throw ContractViolation("build_context: unknown strategy");
}

EpisodeResult run_episode(const diffnet::PolicyParams& params,
                          const flowpolicy::PolicyConfig& pcfg, const env::EnvConfig& ecfg,
                          const AsyncConfig& acfg, std::uint64_t seed) {
  acfg.validate();
  if (acfg.chunk_length != pcfg.horizon) {
    throw ConfigError("async chunk length does not match the policy horizon");
  }
  const int d = acfg.delay;
  const int k_exec = acfg.horizon_k;
  const std::int64_t horizon = ecfg.horizon;
  EpisodeResult out;
  out.seed = seed;
  Rng noise_rng(mix_seed(seed, 0x706f6c6963));

  // schedule[t] is the action executed at step t; zero while idling.
  std::vector<env::Vec2> schedule(static_cast<std::size_t>(horizon + d + k_exec), env::Vec2{});
  std::vector<std::int64_t> chunk_of(schedule.size(), -1);
  out.states.push_back(env::env_reset(seed, ecfg));
  out.states.reserve(static_cast<std::size_t>(horizon) + 1);

  std::int64_t next_exec = d;  // execution start of the next chunk
  std::int64_t chunk_id = 0;
  for (std::int64_t t = 0; t < horizon; ++t) {
    if (t == next_exec) {
      // The chunk starting now was captured d steps ago. All strategies are
      // evaluated here, once the simulator holds every state they may read.
      const std::int64_t capture = t - d;
      const std::span<const env::Vec2> committed(schedule.data() + capture,
                                                 static_cast<std::size_t>(d));
      CycleRecord cycle;
      cycle.capture_time = capture;
      cycle.exec_start = t;
      cycle.context = build_context(acfg.strategy, out.states, capture, d, committed, ecfg,
                                    acfg.deployment_realism);
      const flowpolicy::SampleSeed xi = flowpolicy::SampleSeed::draw(noise_rng, pcfg);
      try {
        cycle.chunk = flowpolicy::sample_chunk(params, pcfg, cycle.context, xi);
      } catch (const SamplingError& e) {
        out.success = false;
        out.steps = t;
        out.diagnostic = std::string("policy emitted a non-finite action: ") + e.what();
        return out;
      }
      for (int i = 0; i < k_exec; ++i) {
        schedule[static_cast<std::size_t>(t + i)] = cycle.chunk.action(static_cast<std::size_t>(i));
        chunk_of[static_cast<std::size_t>(t + i)] = chunk_id;
      }
      out.cycles.push_back(std::move(cycle));
      ++chunk_id;
      next_exec = t + k_exec;
    }
    const auto ti = static_cast<std::size_t>(t);
    const env::StepResult r = env::env_step(out.states.back(), schedule[ti], ecfg);
    out.trace.push_back({t, out.states.back().robot, out.states.back().target, chunk_of[ti],
                         schedule[ti]});
    if (chunk_of[ti] >= 0) ++out.policy_actions;
    out.states.push_back(r.state);
    if (r.done) {
      out.success = r.success;
      out.steps = t + 1;
      return out;
    }
  }
  out.steps = horizon;
  return out;
}

BatchStats run_batch(const diffnet::PolicyParams& params, const flowpolicy::PolicyConfig& pcfg,
                     const env::EnvConfig& ecfg, const AsyncConfig& acfg,
                     std::size_t n_episodes, std::uint64_t base_seed) {
  if (n_episodes < 1) throw ConfigError("run_batch: n_episodes must be >= 1");
  acfg.validate();
  BatchStats s;
  s.n = n_episodes;
  s.flags.assign(n_episodes, 0);
  parallel::parallel_for(n_episodes, [&](std::size_t i) {
    s.flags[i] = run_episode(params, pcfg, ecfg, acfg, base_seed + i).success ? 1 : 0;
  });
  for (std::uint8_t f : s.flags) s.successes += f;
  s.rate = static_cast<double>(s.successes) / static_cast<double>(n_episodes);
  return s;
}

void write_trace_csv(const EpisodeResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open trace for writing: " + path.string());
  out << "step,robot_x,robot_y,target_x,target_y,chunk_id,action_x,action_y\n";
  char buf[256];
  for (const TraceStep& s : result.trace) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%lld,%.17g,%.17g\n",
                  static_cast<long long>(s.t), s.robot.x, s.robot.y, s.target.x, s.target.y,
                  static_cast<long long>(s.chunk_id), s.action.x, s.action.y);
    out << buf;
  }
  if (!out) throw IoError("failed writing trace: " + path.string());
}

}  // namespace deflect::asyncsim
