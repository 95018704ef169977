#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/flowpolicy.hpp"
#include "deflect/pairgen.hpp"
#include "deflect/rng.hpp"

// The FM-DPO objective with an expert flow-matching anchor, and the training
// modes built on it.
namespace deflect::trainer {

enum class Mode {
  kReferenceBc,
  kDeflect,
  kSftContinue,
  kNoAnchor,
  kMatchedInput,
  kCleanPreference,
  kNarrowDelay,
};

std::string_view mode_name(Mode m);
// Throws ConfigError on an unknown name.
Mode parse_mode(std::string_view name);
std::span<const Mode> all_modes();

struct LossWeights {
  double beta = 1.0;
  double lambda_sft = 1.0;
  double lambda_dpo = 0.02;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Flow-matching losses of the chosen (+) and rejected (-) chunks under the
// trainable (theta) and reference (ref) velocity nets.
struct MarginTerms {
  double theta_plus = 0.0;
  double theta_minus = 0.0;
  double ref_plus = 0.0;
  double ref_minus = 0.0;
};

struct Margin {
  double margin = 0.0;  // M
  double loss = 0.0;    // softplus(-M)
};

// M = -beta [(L_theta+ - L_ref+) - (L_theta- - L_ref-)], loss = -log sigmoid(M).
Margin dpo_margin(const MarginTerms& m, double beta);

double softplus(double x);
double sigmoid(double x);

struct TrainConfig {
  Mode mode = Mode::kDeflect;
  std::uint64_t steps = 1000;
  std::size_t batch_size = 64;
  LossWeights weights;
  pairgen::DelayBounds delays;
  std::uint64_t seed = 0;
  std::optional<double> contrast_threshold;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 1e-4;
  // Reference training fails with ConvergenceError when the FM loss averaged
  // over the final 5% of steps exceeds this.
  double loss_ceiling = 1e9;
  std::uint64_t init_seed = 0;  // reference-bc only: network initialization
  double task_tag = 1.0;

  void validate() const;
};

// Weights and delay bounds after the mode's overrides (sft-continue zeroes
// lambda_dpo, no-anchor zeroes lambda_sft, narrow-delay caps d_dpo at 2).
LossWeights effective_weights(const TrainConfig& cfg);
pairgen::DelayBounds effective_delays(const TrainConfig& cfg);

// One minibatch of training inputs, fully determined by the rng state.
struct Batch {
  std::vector<pairgen::PreferenceTriple> triples;
  std::vector<flowpolicy::FlowDraw> draws;  // one per triple, shared by all five losses
  // Contexts under which A+ and A- are scored (mode dependent).
  std::vector<flowpolicy::DeploymentContext> plus_context;
  std::vector<flowpolicy::DeploymentContext> minus_context;
};

struct Counters {
  std::uint64_t triples = 0;
  std::uint64_t flow_draws = 0;
};

// Draws B triples plus their flow draws. With ref == nullptr (reference-bc)
// only the expert chunk and context are filled in.
Batch sample_batch(Rng& rng, const diffnet::PolicyParams* ref,
                   const flowpolicy::PolicyConfig& pcfg, const env::DemoSet& demos,
                   const TrainConfig& cfg, Counters* counters = nullptr);

struct StepReport {
  std::uint64_t step = 0;
  double lr = 0.0;
  double total_loss = 0.0;
  double fm_loss = 0.0;      // batch mean FM loss of theta on A_exp
  double dpo_loss = 0.0;     // mean over DPO-included pairs
  double margin_mean = 0.0;  // mean over all pairs
  double contrast_mean = 0.0;
  double excluded_fraction = 0.0;
};

struct Objective {
  double loss = 0.0;
  diffnet::GradAccum grads;
  StepReport report;
};

// Batch-mean objective lambda_sft * FM(theta; A_exp, c_dep) + lambda_dpo *
// DPO and its exact gradient. Reference losses carry no gradient.
Objective deflect_objective(const diffnet::PolicyParams& theta, const diffnet::PolicyParams* ref,
                            const flowpolicy::PolicyConfig& pcfg, const Batch& batch,
                            const LossWeights& weights, std::optional<double> contrast_threshold);

// Samples a batch, evaluates the objective, applies one AdamW step.
StepReport deflect_step(diffnet::PolicyParams& theta, const diffnet::PolicyParams* ref,
                        const flowpolicy::PolicyConfig& pcfg, const env::DemoSet& demos,
                        const TrainConfig& cfg, diffnet::OptimizerState& opt, Rng& rng,
                        Counters* counters = nullptr);

struct TrainResult {
  diffnet::PolicyParams params;
  std::vector<StepReport> log;
  Counters counters;
};

diffnet::AdamwSettings optimizer_settings(const TrainConfig& cfg);

// Behaviour cloning from random initialization on (c_dep, A_exp).
TrainResult train_reference(const env::DemoSet& demos, const flowpolicy::PolicyConfig& pcfg,
                            const TrainConfig& cfg);

// Post-training from ref with a fresh optimizer and a full warmup + cosine
// schedule.
TrainResult train_variant(const env::DemoSet& demos, const diffnet::PolicyParams& ref,
                          const flowpolicy::PolicyConfig& pcfg, const TrainConfig& cfg);

void write_training_log(std::span<const StepReport> log, const std::filesystem::path& path);

}  // namespace deflect::trainer
