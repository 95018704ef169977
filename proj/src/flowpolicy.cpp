#include "deflect/flowpolicy.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deflect/errors.hpp"
#include "deflect/kernels.hpp"

namespace deflect::flowpolicy {

void PolicyConfig::validate() const {
  if (horizon < 1) throw ConfigError("policy.horizon must be >= 1");
  if (action_dim != 2) throw ConfigError("policy.action_dim must be 2 for the intercept task");
  if (flow_steps < 1) throw ConfigError("policy.flow_steps must be >= 1");
  if (!(workspace > 0.0)) throw ConfigError("policy.workspace must be > 0");
  for (std::size_t w : hidden) {
    if (w < 1) throw ConfigError("policy.hidden widths must be >= 1");
  }
}

ContextFeatures encode_context(const DeploymentContext& ctx, double workspace) {
  const double s = 1.0 / workspace;
  return {ctx.observation.target.x * s, ctx.observation.target.y * s, ctx.proprio.x * s,
          ctx.proprio.y * s, ctx.task_tag * s};
}

ActionChunk::ActionChunk(std::size_t horizon, std::size_t action_dim, std::vector<double> values)
    : horizon_(horizon), action_dim_(action_dim), values_(std::move(values)) {
  if (values_.size() != horizon * action_dim) {
    throw ContractViolation("ActionChunk: value count does not match horizon x action_dim");
  }
}

bool ActionChunk::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

SampleSeed SampleSeed::draw(Rng& rng, const PolicyConfig& cfg) {
  SampleSeed s;
  s.noise.resize(cfg.chunk_size());
  for (double& v : s.noise) v = rng.normal();
  s.flow_steps = cfg.flow_steps;
  return s;
}

FlowDraw FlowDraw::draw(Rng& rng, const PolicyConfig& cfg) {
  FlowDraw d;
  d.tau = rng.uniform();
  d.noise.resize(cfg.chunk_size());
  for (double& v : d.noise) v = rng.normal();
  return d;
}

diffnet::PolicyParams make_velocity_net(const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return diffnet::make_mlp(cfg.net_input_width(), cfg.hidden, cfg.chunk_size(), seed);
}

void check_shapes(const diffnet::PolicyParams& params, const PolicyConfig& cfg) {
  if (params.input_width() != cfg.net_input_width() ||
      params.output_width() != cfg.chunk_size()) {
    throw ContractViolation("velocity net widths (" + std::to_string(params.input_width()) +
                            " -> " + std::to_string(params.output_width()) +
                            ") do not match the policy configuration (" +
                            std::to_string(cfg.net_input_width()) + " -> " +
                            std::to_string(cfg.chunk_size()) + ")");
  }
}

std::vector<double> interpolate(std::span<const double> chunk, std::span<const double> noise,
                                double tau) {
  if (chunk.size() != noise.size()) throw ContractViolation("interpolate: shape mismatch");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ContractViolation("interpolate: tau outside [0, 1]");
  std::vector<double> out(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) out[i] = tau * chunk[i] + (1.0 - tau) * noise[i];
  return out;
}

FmLoss fm_loss(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
               const ActionChunk& chunk, const DeploymentContext& ctx, const FlowDraw& draw) {
  FmBatch batch(cfg);
  batch.add(encode_context(ctx, cfg.workspace), chunk.values(), draw);
  batch.forward(params);
  FmLoss out{batch.loss(0), diffnet::GradAccum::zeros_like(params)};
  const double weight = 1.0;
  batch.backward(params, std::span<const double>(&weight, 1), out.grads);
  return out;
}

ActionChunk sample_chunk(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
                         const DeploymentContext& ctx, const SampleSeed& seed) {
  if (seed.noise.size() != cfg.chunk_size()) {
    throw ContractViolation("sample_chunk: noise size does not match H x A");
  }
  const ContextFeatures features = encode_context(ctx, cfg.workspace);
  std::vector<double> x = seed.noise;
  sample_chunks(params, cfg, std::span<const ContextFeatures>(&features, 1), seed.flow_steps, x);
  return ActionChunk(cfg.horizon, cfg.action_dim, std::move(x));
}

void sample_chunks(const diffnet::PolicyParams& params, const PolicyConfig& cfg,
                   std::span<const ContextFeatures> contexts, std::size_t flow_steps,
                   std::span<double> noise) {
  if (flow_steps < 1) throw ContractViolation("sample_chunks: flow_steps must be >= 1");
  check_shapes(params, cfg);
  const std::size_t rows = contexts.size();
  const std::size_t n = cfg.chunk_size();
  const std::size_t width = cfg.net_input_width();
  if (noise.size() != rows * n) throw ContractViolation("sample_chunks: noise size mismatch");
  std::vector<double> input(rows * width), velocity, scratch_a, scratch_b;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(contexts[r].begin(), contexts[r].end(), input.begin() + r * width);
  }
  const double dt = 1.0 / static_cast<double>(flow_steps);
  const auto& k = kernels::active();
  for (std::size_t step = 0; step < flow_steps; ++step) {
    const double tau = static_cast<double>(step) / static_cast<double>(flow_steps);
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = input.data() + r * width;
      std::copy_n(noise.data() + r * n, n, row + kContextWidth);
      row[kContextWidth + n] = tau;
    }
    diffnet::evaluate_batch(params, input, rows, velocity, scratch_a, scratch_b);
    k.axpy(dt, velocity.data(), noise.data(), rows * n);
    for (std::size_t i = 0; i < rows * n; ++i) {
      if (!std::isfinite(noise[i])) {
        throw SamplingError("non-finite value in Euler step " + std::to_string(step) +
                            " of chunk sampling");
      }
    }
  }
}

void FmBatch::clear() {
  rows_ = 0;
  inputs_.clear();
  targets_.clear();
}

std::size_t FmBatch::add(const ContextFeatures& context, std::span<const double> chunk,
                         const FlowDraw& draw) {
  const std::size_t n = cfg_.chunk_size();
  if (chunk.size() != n || draw.noise.size() != n) {
    throw ContractViolation("FmBatch::add: chunk or noise size does not match H x A");
  }
  if (!(draw.tau >= 0.0 && draw.tau <= 1.0)) {
    throw ContractViolation("FmBatch::add: tau outside [0, 1]");
  }
  inputs_.insert(inputs_.end(), context.begin(), context.end());
  for (std::size_t i = 0; i < n; ++i) {
    inputs_.push_back(draw.tau * chunk[i] + (1.0 - draw.tau) * draw.noise[i]);
  }
  inputs_.push_back(draw.tau);
  for (std::size_t i = 0; i < n; ++i) targets_.push_back(chunk[i] - draw.noise[i]);
  return rows_++;
}

void FmBatch::compute_losses(std::span<const double> output) {
  const std::size_t n = cfg_.chunk_size();
  residuals_.resize(rows_ * n);
  losses_.assign(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = output[r * n + i] - targets_[r * n + i];
      residuals_[r * n + i] = e;
      sum += e * e;
    }
    if (!std::isfinite(sum)) {
      throw TrainingError("non-finite flow-matching loss in batch row " + std::to_string(r));
    }
    losses_[r] = sum;
  }
}

void FmBatch::forward(const diffnet::PolicyParams& params) {
  check_shapes(params, cfg_);
  diffnet::forward_batch(params, inputs_, rows_, tape_);
  compute_losses(tape_.output());
}

void FmBatch::evaluate(const diffnet::PolicyParams& params) {
  check_shapes(params, cfg_);
  diffnet::evaluate_batch(params, inputs_, rows_, scratch_out_, scratch_a_, scratch_b_);
  compute_losses(scratch_out_);
}

void FmBatch::backward(const diffnet::PolicyParams& params, std::span<const double> row_weights,
                       diffnet::GradAccum& grads) const {
  if (row_weights.size() != rows_) throw ContractViolation("FmBatch::backward: weight count");
  if (tape_.rows() != rows_) throw ContractViolation("FmBatch::backward: forward() not run");
  const std::size_t n = cfg_.chunk_size();
  std::vector<double> upstream(rows_ * n);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      upstream[r * n + i] = 2.0 * row_weights[r] * residuals_[r * n + i];
    }
  }
  diffnet::backward_batch(params, tape_, upstream, grads);
}

}  // namespace deflect::flowpolicy
