#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/flowpolicy.hpp"
#include "deflect/rng.hpp"

// Temporal counterfactual preference pairs. A frozen reference policy is
// queried twice with the same sampling noise: once under the future
// (execution-time) context and once under the stale (capture-time) context.
namespace deflect::pairgen {

using flowpolicy::ActionChunk;
using flowpolicy::DeploymentContext;

// Ranges for the per-example delays. d_ctx is uniform on {0..ctx_max} and
// d_dpo on {dpo_min..dpo_max}.
struct DelayBounds {
  int ctx_max = 4;
  int dpo_min = 1;
  int dpo_max = 4;

  int d_max() const { return ctx_max > dpo_max ? ctx_max : dpo_max; }
  void validate() const;
  friend bool operator==(const DelayBounds&, const DelayBounds&) = default;
};

struct DelaySpec {
  int d_max = 4;
  int d_ctx = 0;
  int d_dpo = 1;

  void validate() const;
  friend bool operator==(const DelaySpec&, const DelaySpec&) = default;
};

DelaySpec sample_delays(Rng& rng, int d_max);
DelaySpec sample_delays(Rng& rng, const DelayBounds& bounds);

// Context with the observation from record obs_index and the robot state
// from record proprio_index of a demonstration.
DeploymentContext demo_context(const env::Demonstration& demo, std::size_t obs_index,
                               std::size_t proprio_index, double task_tag);

// Expert actions [t + d_ctx, t + d_ctx + H), padded with the final action.
ActionChunk expert_slice(const env::Demonstration& demo, std::size_t t, int d_ctx,
                         std::size_t horizon, std::size_t action_dim = 2);

// Euclidean norm of the difference over all H x A entries.
double contrast(const ActionChunk& a, const ActionChunk& b);

struct PreferenceTriple {
  DeploymentContext context;  // c_dep = (o_t, s_{t + d_ctx}, tag)
  ActionChunk chosen;         // A+ : reference under (o, s) at t + d_dpo
  ActionChunk rejected;       // A- : reference under (o, s) at t
  ActionChunk expert;         // A_exp
  DelaySpec delays;
  double contrast = 0.0;
  std::size_t episode = 0;
  std::size_t t = 0;
  std::uint64_t ref_checksum = 0;  // parameters used for both samples
  bool dpo_excluded = false;
};

PreferenceTriple make_pair(const diffnet::PolicyParams& ref,
                           const flowpolicy::PolicyConfig& cfg,
                           const env::Demonstration& demo, std::size_t t,
                           const DelaySpec& spec, const flowpolicy::SampleSeed& xi,
                           double task_tag = 1.0);

// Everything needed to build one triple, drawn from an Rng.
struct PairRequest {
  std::size_t episode = 0;
  std::size_t t = 0;
  DelaySpec delays;
  flowpolicy::SampleSeed xi;
};

// Draws delays, then an episode long enough for them, then t, then xi.
PairRequest sample_request(Rng& rng, const env::DemoSet& demos, const DelayBounds& bounds,
                           const flowpolicy::PolicyConfig& cfg);

// Batched make_pair; identical results to calling make_pair per request.
std::vector<PreferenceTriple> make_pairs(const diffnet::PolicyParams& ref,
                                         const flowpolicy::PolicyConfig& cfg,
                                         const env::DemoSet& demos,
                                         std::span<const PairRequest> requests,
                                         double task_tag = 1.0);

struct ContrastSummary {
  std::size_t total = 0;
  std::size_t dpo_excluded = 0;
  std::size_t sft_retained = 0;
  double mean = 0.0;
  double p10 = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
};

// Nearest-rank percentile, q in [0, 100]. values need not be sorted.
double percentile(std::vector<double> values, double q);

// Flags triples with contrast < threshold as DPO-excluded; all stay in the
// SFT anchor.
ContrastSummary filter_by_contrast(std::vector<PreferenceTriple>& triples, double threshold);

// Contrasts of n freshly generated pairs, for choosing filter thresholds.
std::vector<double> contrast_pool(const diffnet::PolicyParams& ref,
                                  const flowpolicy::PolicyConfig& cfg,
                                  const env::DemoSet& demos, const DelayBounds& bounds,
                                  std::size_t n, std::uint64_t seed, double task_tag = 1.0);

// One triple per line: episode t d_ctx d_dpo contrast excluded | A+ | A- | A_exp
void write_pair_pool(std::span<const PreferenceTriple> triples,
                     const std::filesystem::path& path);

}  // namespace deflect::pairgen
