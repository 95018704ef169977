#include "deflect/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "deflect/errors.hpp"

namespace deflect::trainer {
namespace {

struct ModeEntry {
  Mode mode;
  std::string_view name;
};

constexpr std::array<ModeEntry, 7> kModes{{
    {Mode::kReferenceBc, "reference-bc"},
    {Mode::kDeflect, "deflect"},
    {Mode::kSftContinue, "sft-continue"},
    {Mode::kNoAnchor, "no-anchor"},
    {Mode::kMatchedInput, "matched-input"},
    {Mode::kCleanPreference, "clean-preference"},
    {Mode::kNarrowDelay, "narrow-delay"},
}};

constexpr std::array<Mode, 7> kModeList{Mode::kReferenceBc,  Mode::kDeflect,
                                        Mode::kSftContinue,  Mode::kNoAnchor,
                                        Mode::kMatchedInput, Mode::kCleanPreference,
                                        Mode::kNarrowDelay};

}  // namespace

std::string_view mode_name(Mode m) {
  for (const auto& e : kModes) {
    if (e.mode == m) return e.name;
  }
  throw ConfigError("unknown training mode id");
}

Mode parse_mode(std::string_view name) {
  for (const auto& e : kModes) {
    if (e.name == name) return e.mode;
  }
  throw ConfigError("unknown training mode '" + std::string(name) + "'");
}

std::span<const Mode> all_modes() { return kModeList; }

void LossWeights::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be > 0");
  if (!(lambda_sft >= 0.0) || !std::isfinite(lambda_sft)) {
    throw ConfigError("lambda_sft must be >= 0");
  }
  if (!(lambda_dpo >= 0.0) || !std::isfinite(lambda_dpo)) {
    throw ConfigError("lambda_dpo must be >= 0");
  }
}

double softplus(double x) {
  // log(1 + e^x) without overflow or loss of precision for large |x|.
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Margin dpo_margin(const MarginTerms& m, double beta) {
  if (!(beta > 0.0)) throw ConfigError("dpo_margin: beta must be > 0");
  const double margin = -beta * ((m.theta_plus - m.ref_plus) - (m.theta_minus - m.ref_minus));
  return {margin, softplus(-margin)};
}

void TrainConfig::validate() const {
  if (steps < 1 && mode == Mode::kReferenceBc) throw ConfigError("train.steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  weights.validate();
  delays.validate();
  if (contrast_threshold && !(*contrast_threshold >= 0.0)) {
    throw ConfigError("train.contrast_threshold must be >= 0");
  }
  if (!(peak_lr > 0.0)) throw ConfigError("train.peak_lr must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw ConfigError("train.warmup_fraction must be in [0, 1]");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
}

LossWeights effective_weights(const TrainConfig& cfg) {
  LossWeights w = cfg.weights;
  switch (cfg.mode) {
    case Mode::kReferenceBc:
    case Mode::kSftContinue:
      w.lambda_dpo = 0.0;
      break;
    case Mode::kNoAnchor:
      w.lambda_sft = 0.0;
      break;
    default:
      break;
  }
  return w;
}

pairgen::DelayBounds effective_delays(const TrainConfig& cfg) {
  pairgen::DelayBounds b = cfg.delays;
  if (cfg.mode == Mode::kReferenceBc) {
    b.dpo_min = 1;
    b.dpo_max = 1;
  } else if (cfg.mode == Mode::kNarrowDelay) {
    b.dpo_min = 1;
    b.dpo_max = std::min(b.dpo_max, 2);
  }
  return b;
}

Batch sample_batch(Rng& rng, const diffnet::PolicyParams* ref,
                   const flowpolicy::PolicyConfig& pcfg, const env::DemoSet& demos,
                   const TrainConfig& cfg, Counters* counters) {
  const pairgen::DelayBounds bounds = effective_delays(cfg);
  std::vector<pairgen::PairRequest> requests;
  Batch batch;
  requests.reserve(cfg.batch_size);
  batch.draws.reserve(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    requests.push_back(pairgen::sample_request(rng, demos, bounds, pcfg));
    batch.draws.push_back(flowpolicy::FlowDraw::draw(rng, pcfg));
  }
  if (ref == nullptr) {
    batch.triples.resize(requests.size());
    for (std::size_t b = 0; b < requests.size(); ++b) {
      const auto& r = requests[b];
      const auto& demo = demos.episodes[r.episode];
      auto& p = batch.triples[b];
      p.context = pairgen::demo_context(demo, r.t, r.t + static_cast<std::size_t>(r.delays.d_ctx),
                                        cfg.task_tag);
      p.expert = pairgen::expert_slice(demo, r.t, r.delays.d_ctx, pcfg.horizon, pcfg.action_dim);
      p.delays = r.delays;
      p.episode = r.episode;
      p.t = r.t;
    }
  } else {
    batch.triples = pairgen::make_pairs(*ref, pcfg, demos, requests, cfg.task_tag);
  }
  batch.plus_context.reserve(batch.triples.size());
  batch.minus_context.reserve(batch.triples.size());
  for (auto& p : batch.triples) {
    const auto& demo = demos.episodes[p.episode];
    const double tag = p.context.task_tag;
    switch (cfg.mode) {
      case Mode::kMatchedInput: {
        const std::size_t future = p.t + static_cast<std::size_t>(p.delays.d_dpo);
        batch.plus_context.push_back(pairgen::demo_context(demo, future, future, tag));
        batch.minus_context.push_back(pairgen::demo_context(demo, p.t, p.t, tag));
        break;
      }
      case Mode::kCleanPreference: {
        p.chosen = pairgen::expert_slice(demo, p.t, 0, pcfg.horizon, pcfg.action_dim);
        p.contrast = pairgen::contrast(p.chosen, p.rejected);
        const auto now = pairgen::demo_context(demo, p.t, p.t, tag);
        batch.plus_context.push_back(now);
        batch.minus_context.push_back(now);
        break;
      }
      default:
        batch.plus_context.push_back(p.context);
        batch.minus_context.push_back(p.context);
        break;
    }
    if (cfg.contrast_threshold) p.dpo_excluded = p.contrast < *cfg.contrast_threshold;
  }
  if (counters != nullptr) {
    counters->triples += batch.triples.size();
    counters->flow_draws += batch.draws.size();
  }
  return batch;
}

Objective deflect_objective(const diffnet::PolicyParams& theta, const diffnet::PolicyParams* ref,
                            const flowpolicy::PolicyConfig& pcfg, const Batch& batch,
                            const LossWeights& weights, std::optional<double> contrast_threshold) {
  weights.validate();
  const std::size_t n = batch.triples.size();
  if (n == 0) throw ContractViolation("deflect_objective: empty batch");
  if (batch.draws.size() != n) {
    throw ContractViolation("deflect_objective: exactly one flow draw per triple is required");
  }
  const double inv_b = 1.0 / static_cast<double>(n);
  const bool with_pairs = ref != nullptr;
  auto features = [&](const flowpolicy::DeploymentContext& c) {
    return flowpolicy::encode_context(c, pcfg.workspace);
  };

  // Rows: [A_exp] or [A+, A-, A_exp], each block n rows.
  flowpolicy::FmBatch theta_rows(pcfg);
  flowpolicy::FmBatch ref_rows(pcfg);
  if (with_pairs) {
    for (std::size_t b = 0; b < n; ++b) {
      theta_rows.add(features(batch.plus_context[b]), batch.triples[b].chosen.values(),
                     batch.draws[b]);
      ref_rows.add(features(batch.plus_context[b]), batch.triples[b].chosen.values(),
                   batch.draws[b]);
    }
    for (std::size_t b = 0; b < n; ++b) {
      theta_rows.add(features(batch.minus_context[b]), batch.triples[b].rejected.values(),
                     batch.draws[b]);
      ref_rows.add(features(batch.minus_context[b]), batch.triples[b].rejected.values(),
                   batch.draws[b]);
    }
  }
  const std::size_t exp_offset = theta_rows.rows();
  for (std::size_t b = 0; b < n; ++b) {
    theta_rows.add(features(batch.triples[b].context), batch.triples[b].expert.values(),
                   batch.draws[b]);
  }
  theta_rows.forward(theta);
  if (with_pairs) ref_rows.evaluate(*ref);

  Objective obj;
  obj.grads = diffnet::GradAccum::zeros_like(theta);
  std::vector<double> row_weights(theta_rows.rows(), 0.0);
  StepReport& r = obj.report;
  double fm_sum = 0.0, dpo_sum = 0.0, margin_sum = 0.0, contrast_sum = 0.0, total = 0.0;
  std::size_t excluded = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const double l_exp = theta_rows.loss(exp_offset + b);
    fm_sum += l_exp;
    double term = weights.lambda_sft * l_exp;
    row_weights[exp_offset + b] = weights.lambda_sft * inv_b;
    if (with_pairs) {
      const MarginTerms m{theta_rows.loss(b), theta_rows.loss(n + b), ref_rows.loss(b),
                          ref_rows.loss(n + b)};
      const Margin dm = dpo_margin(m, weights.beta);
      margin_sum += dm.margin;
      contrast_sum += batch.triples[b].contrast;
      const bool drop = contrast_threshold ? batch.triples[b].contrast < *contrast_threshold
                                           : batch.triples[b].dpo_excluded;
      if (drop) {
        ++excluded;
      } else {
        dpo_sum += dm.loss;
        term += weights.lambda_dpo * dm.loss;
        // d softplus(-M) / dL_theta+ = beta * sigmoid(-M); the minus side flips sign.
        const double g = weights.lambda_dpo * inv_b * weights.beta * sigmoid(-dm.margin);
        row_weights[b] = g;
        row_weights[n + b] = -g;
      }
    }
    total += term;
  }
  obj.loss = total * inv_b;
  if (!std::isfinite(obj.loss)) throw TrainingError("non-finite training objective");
  theta_rows.backward(theta, row_weights, obj.grads);

  r.total_loss = obj.loss;
  r.fm_loss = fm_sum * inv_b;
  if (with_pairs) {
    const std::size_t included = n - excluded;
    r.dpo_loss = included == 0 ? 0.0 : dpo_sum / static_cast<double>(included);
    r.margin_mean = margin_sum * inv_b;
    r.contrast_mean = contrast_sum * inv_b;
    r.excluded_fraction = static_cast<double>(excluded) * inv_b;
  }
  return obj;
}

StepReport deflect_step(diffnet::PolicyParams& theta, const diffnet::PolicyParams* ref,
                        const flowpolicy::PolicyConfig& pcfg, const env::DemoSet& demos,
                        const TrainConfig& cfg, diffnet::OptimizerState& opt, Rng& rng,
                        Counters* counters) {
  if (ref != nullptr && (ref->input_width() != theta.input_width() ||
                         ref->output_width() != theta.output_width())) {
    throw ContractViolation("deflect_step: theta and ref are not shape-compatible");
  }
  const std::uint64_t step = opt.step;
  const Batch batch = sample_batch(rng, ref, pcfg, demos, cfg, counters);
  Objective obj;
  try {
    obj = deflect_objective(theta, ref, pcfg, batch, effective_weights(cfg), std::nullopt);
  } catch (const TrainingError& e) {
    throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), e.parameter(),
                        static_cast<std::int64_t>(step));
  }
  obj.report.step = step;
  obj.report.lr = diffnet::cosine_lr(opt);
  try {
    diffnet::adamw_step(theta, obj.grads, opt);
  } catch (const TrainingError& e) {
    throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), e.parameter(),
                        static_cast<std::int64_t>(step));
  }
  return obj.report;
}

diffnet::AdamwSettings optimizer_settings(const TrainConfig& cfg) {
  diffnet::AdamwSettings s;
  s.peak_lr = cfg.peak_lr;
  s.total_steps = cfg.steps;
  s.warmup_steps = static_cast<std::uint64_t>(
      std::llround(cfg.warmup_fraction * static_cast<double>(cfg.steps)));
  s.weight_decay = cfg.weight_decay;
  return s;
}

namespace {

TrainResult run_training(diffnet::PolicyParams theta, const diffnet::PolicyParams* ref,
                         const env::DemoSet& demos, const flowpolicy::PolicyConfig& pcfg,
                         const TrainConfig& cfg) {
  if (demos.episodes.empty()) throw ContractViolation("training requires demonstrations");
  TrainResult out;
  diffnet::OptimizerState opt = diffnet::make_optimizer(theta, optimizer_settings(cfg));
  Rng rng(mix_seed(cfg.seed, 0x747261696e));
  out.log.reserve(cfg.steps);
  for (std::uint64_t s = 0; s < cfg.steps; ++s) {
    out.log.push_back(deflect_step(theta, ref, pcfg, demos, cfg, opt, rng, &out.counters));
  }
  out.params = std::move(theta);
  return out;
}

}  // namespace

TrainResult train_reference(const env::DemoSet& demos, const flowpolicy::PolicyConfig& pcfg,
                            const TrainConfig& cfg) {
  if (cfg.mode != Mode::kReferenceBc) {
    throw ConfigError("train_reference requires mode reference-bc");
  }
  cfg.validate();
  TrainResult out = run_training(flowpolicy::make_velocity_net(pcfg, cfg.init_seed), nullptr,
                                 demos, pcfg, cfg);
  const std::size_t window = std::max<std::size_t>(1, out.log.size() / 20);
  double tail = 0.0;
  for (std::size_t i = out.log.size() - window; i < out.log.size(); ++i) tail += out.log[i].fm_loss;
  tail /= static_cast<double>(window);
  if (!(tail <= cfg.loss_ceiling)) {
    throw ConvergenceError("reference training did not converge: final FM loss " +
                           std::to_string(tail) + " exceeds ceiling " +
                           std::to_string(cfg.loss_ceiling));
  }
  return out;
}

TrainResult train_variant(const env::DemoSet& demos, const diffnet::PolicyParams& ref,
                          const flowpolicy::PolicyConfig& pcfg, const TrainConfig& cfg) {
  if (cfg.mode == Mode::kReferenceBc) {
    throw ConfigError("train_variant: reference-bc is not a post-training mode");
  }
  mode_name(cfg.mode);
  cfg.validate();
  flowpolicy::check_shapes(ref, pcfg);
  if (cfg.steps == 0) {
    TrainResult out;
    out.params = ref;
    return out;
  }
  return run_training(ref, &ref, demos, pcfg, cfg);
}

void write_training_log(std::span<const StepReport> log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open training log for writing: " + path.string());
  out << "step,lr,fm_loss,dpo_loss,margin_mean,contrast_mean,excluded_fraction\n";
  char buf[256];
  for (const StepReport& r : log) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.lr, r.fm_loss, r.dpo_loss,
                  r.margin_mean, r.contrast_mean, r.excluded_fraction);
    out << buf;
  }
  if (!out) throw IoError("failed writing training log: " + path.string());
}

}  // namespace deflect::trainer
