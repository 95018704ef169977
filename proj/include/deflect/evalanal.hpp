#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deflect/asyncsim.hpp"
#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/flowpolicy.hpp"

// Evaluation sweeps, confidence intervals and mechanism probes.
namespace deflect::evalanal {

struct Interval {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Wilson score interval. Throws DomainError when n = 0 or k > n.
Interval wilson_ci(std::size_t k, std::size_t n, double confidence = 0.95);

// Normal-approximation interval for mean(a_i - b_i) over paired 0/1 outcomes.
Interval paired_diff_ci(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                        double confidence = 0.95);

struct Method {
  std::string name;
  const diffnet::PolicyParams* params = nullptr;
  asyncsim::Strategy strategy = asyncsim::Strategy::kRollforward;
};

struct SweepCell {
  std::size_t n = 0;
  std::size_t successes = 0;
  double rate = 0.0;
  Interval ci;
  std::vector<std::uint8_t> flags;
};

struct SweepReport {
  std::vector<std::string> methods;
  std::vector<int> delays;
  std::vector<SweepCell> cells;  // method-major
  std::uint64_t seed = 0;

  std::size_t method_index(const std::string& name) const;
  const SweepCell& cell(std::size_t method, std::size_t delay_index) const;
  const SweepCell& cell(const std::string& method, int delay) const;
  // Mean rate over the sweep delays inside [lo, hi]. DomainError if none.
  double band_average(const std::string& method, int lo, int hi) const;
  // Paired difference a - b at one delay, or pooled over a delay band.
  Interval delta(const std::string& a, const std::string& b, int delay) const;
  Interval band_delta(const std::string& a, const std::string& b, int lo, int hi) const;

  // method,delay,n,successes,rate,ci_low,ci_high; band rows use delay
  // labels avg0-7 and avg5-7.
  void write_csv(const std::filesystem::path& path) const;
  std::string render_table() const;
};

// Per-cell episode seeds are shared by every method (paired evaluation).
std::uint64_t cell_seed(std::uint64_t seed, int delay);

SweepReport delay_sweep(std::span<const Method> methods, const flowpolicy::PolicyConfig& pcfg,
                        const env::EnvConfig& ecfg, std::span<const int> delays, std::size_t n,
                        std::uint64_t seed);

struct ProbeState {
  flowpolicy::DeploymentContext context;
  std::uint64_t episode_seed = 0;
  std::int64_t t = 0;
  double disagreement = 0.0;
};

// Scans expert rollouts (seeds seed + i) with deployment contexts at delay d
// and keeps the `count` states where the two policies' chunks differ most
// under shared noise, at most one per rollout.
std::vector<ProbeState> select_probe_states(const diffnet::PolicyParams& theta,
                                            const diffnet::PolicyParams& ref,
                                            const flowpolicy::PolicyConfig& pcfg,
                                            const env::EnvConfig& ecfg, std::size_t rollouts,
                                            int d, std::size_t count, std::uint64_t seed);

struct ProbeResult {
  double correction = 0.0;    // |mean(A_theta) - mean(A_ref)| over all H x A entries
  double spread_ratio = 0.0;  // sigma_theta / sigma_ref at chunk position 0
  std::vector<double> position_correction;  // per chunk position
};

struct MechanismReport {
  std::vector<ProbeState> states;
  std::vector<ProbeResult> results;
  double median_spread_ratio = 0.0;
  double median_correction = 0.0;

  void write_csv(const std::filesystem::path& path) const;
  std::string render_table() const;
};

// The i-th of n_noise noise draws is shared by both policies.
MechanismReport mechanism_probe(const diffnet::PolicyParams& theta,
                                const diffnet::PolicyParams& ref,
                                const flowpolicy::PolicyConfig& pcfg,
                                std::span<const ProbeState> states, std::size_t n_noise,
                                std::uint64_t seed);

double median(std::vector<double> values);

struct DecompositionRow {
  int delay = 0;
  double ref_rate = 0.0;
  double sft_rate = 0.0;
  double deflect_rate = 0.0;
  Interval restart;  // sft-continue - ref
  Interval dpo;      // deflect - sft-continue
};

struct DecompositionTable {
  std::vector<DecompositionRow> rows;
  Interval band_restart;
  Interval band_dpo;
  int band_lo = 5;
  int band_hi = 7;
  SweepReport sweep;

  void write_csv(const std::filesystem::path& path) const;
  std::string render_table() const;
};

DecompositionTable decomposition_table(const diffnet::PolicyParams& ref,
                                       const diffnet::PolicyParams& sft_continue,
                                       const diffnet::PolicyParams& deflect,
                                       const flowpolicy::PolicyConfig& pcfg,
                                       const env::EnvConfig& ecfg, std::span<const int> delays,
                                       std::size_t n, std::uint64_t seed, int band_lo = 5,
                                       int band_hi = 7);

DecompositionTable decomposition_from_sweep(const SweepReport& sweep, const std::string& ref,
                                            const std::string& sft, const std::string& deflect,
                                            int band_lo = 5, int band_hi = 7);

}  // namespace deflect::evalanal
