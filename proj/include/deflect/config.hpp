#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/env.hpp"
#include "deflect/flowpolicy.hpp"
#include "deflect/trainer.hpp"

// Experiment configuration: one JSON document with documented keys and
// defaults. Unknown keys are rejected.
namespace deflect::config {

struct ReferenceSettings {
  std::uint64_t steps = 12000;
  std::size_t batch_size = 64;
  double peak_lr = 1e-3;
  double warmup_fraction = 0.05;
  double weight_decay = 1e-4;
  double loss_ceiling = 5.0;
  int ctx_delay_max = 4;
};

struct PostSettings {
  std::uint64_t steps = 1500;
  std::size_t batch_size = 64;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 1e-4;
  double beta = 1.0;
  double lambda_sft = 1.0;
  double lambda_dpo = 2.0;
  int d_max = 4;
  std::optional<double> contrast_threshold;
};

struct ProbeSettings {
  std::size_t rollouts = 50;
  int delay = 6;
  std::size_t states = 4;
  std::size_t n_noise = 200;
};

struct EvalSettings {
  std::vector<int> delays{0, 1, 2, 3, 4, 5, 6, 7};
  std::size_t episodes = 500;  // per (method, delay) cell
  ProbeSettings probe;
};

struct AblationSettings {
  std::vector<double> lambda_grid{0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
  std::size_t contrast_pool = 4096;
  std::vector<double> filter_percentiles{10.0, 50.0};
};

struct ExperimentConfig {
  std::string experiment_id = "deflect-desk";
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs";
  env::EnvConfig env;
  flowpolicy::PolicyConfig policy;
  std::size_t demo_episodes = 2000;
  ReferenceSettings reference;
  PostSettings post;
  EvalSettings eval;
  AblationSettings ablation;

  // Throws ConfigError on any out-of-range field.
  void validate() const;
};

// Throws ConfigError on malformed input or unknown keys.
ExperimentConfig from_json_text(const std::string& text);
std::string to_json_text(const ExperimentConfig& cfg);

// IoError if unreadable; ConfigError if invalid.
ExperimentConfig load(const std::filesystem::path& path);
void save(const ExperimentConfig& cfg, const std::filesystem::path& path);

std::uint64_t fnv1a(std::string_view bytes);

// FNV-1a over the canonical serialization, without output_dir: where the
// outputs go does not change them.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hex64(std::uint64_t v);

// git-describe-style build version.
std::string version();

// Training configurations for the reference and for a post-training mode.
trainer::TrainConfig reference_train_config(const ExperimentConfig& cfg);
trainer::TrainConfig variant_train_config(const ExperimentConfig& cfg, trainer::Mode mode);

}  // namespace deflect::config
