#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/flowpolicy.hpp"

// Asynchronous chunked execution. Inference takes d control steps: the chunk
// computed from the context captured at time c starts executing at c + d,
// and K of its actions run before the next chunk takes over.
namespace deflect::asyncsim {

enum class Strategy {
  kNaive,        // (o, s) at capture time
  kRollforward,  // o at capture, s rolled forward through committed actions
  kOracle,       // (o, s) at execution start; evaluation only
};

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

struct AsyncConfig {
  int delay = 0;      // d
  int horizon_k = 1;  // K
  Strategy strategy = Strategy::kRollforward;
  std::size_t chunk_length = 8;  // H
  // Rejects the oracle strategy, which needs information unavailable at
  // deployment.
  bool deployment_realism = false;

  // K = max(d, 1).
  static AsyncConfig protocol(int delay, Strategy strategy, std::size_t chunk_length = 8);
  void validate() const;
};

// Robot state after applying the committed actions with the simulator's own
// kinematics.
env::Vec2 rollforward_state(env::Vec2 s_capture, std::span<const env::Vec2> committed,
                            const env::EnvConfig& cfg);

// history[i] is the environment state at time i. committed holds the d
// actions that execute during [t_capture, t_capture + d).
flowpolicy::DeploymentContext build_context(Strategy strategy,
                                            std::span<const env::EnvState> history,
                                            std::int64_t t_capture, int d,
                                            std::span<const env::Vec2> committed,
                                            const env::EnvConfig& cfg,
                                            bool deployment_realism = false);

struct CycleRecord {
  std::int64_t capture_time = 0;
  std::int64_t exec_start = 0;
  flowpolicy::DeploymentContext context;
  flowpolicy::ActionChunk chunk;
};

struct TraceStep {
  std::int64_t t = 0;
  env::Vec2 robot;
  env::Vec2 target;
  std::int64_t chunk_id = -1;  // -1 while idling before the first chunk
  env::Vec2 action;
};

struct EpisodeResult {
  bool success = false;
  std::int64_t steps = 0;
  std::uint64_t seed = 0;
  std::vector<CycleRecord> cycles;
  std::vector<TraceStep> trace;
  std::vector<env::EnvState> states;  // states[i] at time i, including the final one
  std::int64_t policy_actions = 0;
  std::string diagnostic;  // set when the episode was aborted
};

// Per-episode sampling noise comes from Rng(mix_seed(seed, ...)) and is
// consumed one SampleSeed per chunk, independent of the strategy.
EpisodeResult run_episode(const diffnet::PolicyParams& params,
                          const flowpolicy::PolicyConfig& pcfg, const env::EnvConfig& ecfg,
                          const AsyncConfig& acfg, std::uint64_t seed);

struct BatchStats {
  std::size_t n = 0;
  std::size_t successes = 0;
  double rate = 0.0;
  std::vector<std::uint8_t> flags;
};

// Episodes use seeds base_seed + i.
BatchStats run_batch(const diffnet::PolicyParams& params, const flowpolicy::PolicyConfig& pcfg,
                     const env::EnvConfig& ecfg, const AsyncConfig& acfg,
                     std::size_t n_episodes, std::uint64_t base_seed);

// step,robot_x,robot_y,target_x,target_y,chunk_id,action_x,action_y
void write_trace_csv(const EpisodeResult& result, const std::filesystem::path& path);

}  // namespace deflect::asyncsim
