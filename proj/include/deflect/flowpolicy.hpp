#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/rng.hpp"

// Flow-matching action-chunk policy. The velocity net maps
// [context features, flattened x_tau, tau] to a flattened H x A velocity.
// Sampling integrates x' = v(x, tau, c) from Gaussian noise at tau = 0 to
// tau = 1 with a fixed-step Euler scheme.
namespace deflect::flowpolicy {

inline constexpr std::size_t kContextWidth = 5;

struct PolicyConfig {
  std::size_t horizon = 8;     // H, actions per chunk
  std::size_t action_dim = 2;  // A
  std::vector<std::size_t> hidden{128, 128};
  std::size_t flow_steps = 5;  // Euler steps when sampling
  double workspace = 2.0;      // context features are scaled by 1 / workspace

  std::size_t chunk_size() const { return horizon * action_dim; }
  std::size_t net_input_width() const { return kContextWidth + chunk_size() + 1; }
  void validate() const;
};

// (o_t, s_hat, task tag): the input available to the policy at deployment.
struct DeploymentContext {
  env::Observation observation;
  env::Vec2 proprio;
  double task_tag = 1.0;

  friend bool operator==(const DeploymentContext&, const DeploymentContext&) = default;
};

using ContextFeatures = std::array<double, kContextWidth>;

// [target x, target y, proprio x, proprio y, tag], each divided by workspace.
ContextFeatures encode_context(const DeploymentContext& ctx, double workspace);

class ActionChunk {
 public:
  ActionChunk() = default;
  ActionChunk(std::size_t horizon, std::size_t action_dim, double fill = 0.0)
      : horizon_(horizon), action_dim_(action_dim), values_(horizon * action_dim, fill) {}
  ActionChunk(std::size_t horizon, std::size_t action_dim, std::vector<double> values);

  std::size_t horizon() const { return horizon_; }
  std::size_t action_dim() const { return action_dim_; }
  double operator()(std::size_t h, std::size_t a) const { return values_[h * action_dim_ + a]; }
  double& operator()(std::size_t h, std::size_t a) { return values_[h * action_dim_ + a]; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  env::Vec2 action(std::size_t h) const { return {(*this)(h, 0), (*this)(h, 1)}; }
  bool all_finite() const;

  friend bool operator==(const ActionChunk&, const ActionChunk&) = default;

 private:
  std::size_t horizon_ = 0;
  std::size_t action_dim_ = 0;
  std::vector<double> values_;
};

// Shared sampling randomness: initial noise and the Euler step count.
struct SampleSeed {
  std::vector<double> noise;  // H x A standard normal
  std::size_t flow_steps = 5;

  static SampleSeed draw(Rng& rng, const PolicyConfig& cfg);
};

// One Monte Carlo point of the flow-matching loss.
struct FlowDraw {
  double tau = 0.0;
  std::vector<double> noise;  // H x A standard normal

  static FlowDraw draw(Rng& rng, const PolicyConfig& cfg);
};

diffnet::PolicyParams make_velocity_net(const PolicyConfig& cfg, std::uint64_t seed);

// Throws ContractViolation if params do not fit cfg.
void check_shapes(const diffnet::PolicyParams& params, const PolicyConfig& cfg);

// tau * chunk + (1 - tau) * noise, elementwise.
std::vector<double> interpolate(std::span<const double> chunk,
                                std::span<const double> noise, double tau);

struct FmLoss {
  double loss = 0.0;
  diffnet::GradAccum grads;
};

// Sum over all H x A entries of (v(x_tau, tau, c) - (A - eps))^2, with its
// exact parameter gradient.
FmLoss fm_loss(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
               const ActionChunk& chunk, const DeploymentContext& ctx,
               const FlowDraw& draw);

ActionChunk sample_chunk(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
                         const DeploymentContext& ctx, const SampleSeed& seed);

// Batched Euler sampling. noise holds rows x chunk_size initial values and is
// overwritten with the sampled chunks.
void sample_chunks(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
                   std::span<const ContextFeatures> contexts, std::size_t flow_steps,
                   std::span<double> noise);

// Batched flow-matching losses. Rows are added with add(), then evaluated
// either with a tape (for gradients) or forward-only.
class FmBatch {
 public:
  explicit FmBatch(const PolicyConfig& cfg) : cfg_(cfg) {}

  void clear();
  // Returns the row index.
  std::size_t add(const ContextFeatures& context, std::span<const double> chunk,
                  const FlowDraw& draw);
  std::size_t rows() const { return rows_; }

  // Computes per-row losses; keeps the tape so backward() can follow.
  void forward(const diffnet::PolicyParams& params);
  // Per-row losses without recording a tape.
  void evaluate(const diffnet::PolicyParams& params);

  double loss(std::size_t row) const { return losses_[row]; }
  std::span<const double> losses() const { return losses_; }

  // grads += sum_r weight[r] * dL_r/dtheta. Requires forward().
  void backward(const diffnet::PolicyParams& params, std::span<const double> row_weights,
                diffnet::GradAccum& grads) const;

 private:
  void compute_losses(std::span<const double> output);

  PolicyConfig cfg_;
  std::size_t rows_ = 0;
  std::vector<double> inputs_;   // rows x net_input_width
  std::vector<double> targets_;  // rows x chunk_size, A - eps
  std::vector<double> residuals_;
  std::vector<double> losses_;
  diffnet::Tape tape_;
  std::vector<double> scratch_out_, scratch_a_, scratch_b_;
};

}  // namespace deflect::flowpolicy
