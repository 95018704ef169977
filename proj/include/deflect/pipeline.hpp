#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/config.hpp"
#include "deflect/diffnet.hpp"
#include "deflect/env.hpp"
#include "deflect/evalanal.hpp"
#include "deflect/trainer.hpp"

// Experiment stages behind the CLI: artifact naming, manifests, cached
// demos/checkpoints, evaluation sweeps, ablation batteries and the report.
namespace deflect::pipeline {

// Artifacts live in output_dir and are named "<experiment_id>-s<seed>-<name>".
class Layout {
 public:
  explicit Layout(const config::ExperimentConfig& cfg);
  const std::filesystem::path& dir() const { return dir_; }
  const std::string& prefix() const { return prefix_; }
  std::filesystem::path file(std::string_view name) const;

 private:
  std::filesystem::path dir_;
  std::string prefix_;
};

using Log = std::function<void(const std::string&)>;

// A post-training run: the mode plus optional overrides of the config.
struct VariantSpec {
  VariantSpec() = default;
  explicit VariantSpec(trainer::Mode m) : mode(m) {}

  trainer::Mode mode = trainer::Mode::kDeflect;
  std::optional<double> lambda_dpo;
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> contrast_threshold;
  std::string tag;  // replaces the generated label when non-empty

  // Checkpoint label: the mode name, or the tag.
  std::string label() const;
};

trainer::TrainConfig variant_config(const config::ExperimentConfig& cfg, const VariantSpec& v);

class Experiment {
 public:
  explicit Experiment(config::ExperimentConfig cfg, Log log = {});

  const config::ExperimentConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }

  // Generates (or regenerates) the demonstration dataset.
  env::DemoSet generate_demos();
  // Cached dataset; generated when missing or stale unless require_existing,
  // which raises ConfigError instead.
  const env::DemoSet& demos(bool require_existing = false);

  // Trains the reference from scratch and writes checkpoint, log and key.
  diffnet::PolicyParams train_reference();
  // Cached reference; see demos() for require_existing.
  const diffnet::PolicyParams& reference(bool require_existing = false);

  diffnet::PolicyParams train_variant(const VariantSpec& v);
  const diffnet::PolicyParams& variant(const VariantSpec& v);

  // Loads a checkpoint by label ("reference" or a variant label). ConfigError
  // if it has not been trained.
  diffnet::PolicyParams load_trained(const std::string& label) const;

  // Every file written so far by this object, in order.
  const std::vector<std::filesystem::path>& outputs() const { return outputs_; }
  void record_output(const std::filesystem::path& p);
  // "<prefix>-<command>-manifest.json" with config hash, seed, versions and
  // the FNV-1a hash of each output.
  std::filesystem::path write_manifest(const std::string& command) const;

  // Writes the config the run used next to its outputs.
  void write_config_snapshot();

  void say(const std::string& msg) const;

 private:
  std::string demos_key() const;
  std::string reference_key() const;
  std::string variant_key(const VariantSpec& v) const;
  bool key_matches(const std::filesystem::path& artifact, const std::string& key) const;
  void write_key(const std::filesystem::path& artifact, const std::string& key);

  config::ExperimentConfig cfg_;
  Layout layout_;
  Log log_;
  std::optional<env::DemoSet> demos_;
  std::optional<diffnet::PolicyParams> reference_;
  std::map<std::string, diffnet::PolicyParams> variants_;
  std::vector<std::filesystem::path> outputs_;
};

// Evaluation method spec "<label>[:<strategy>]". Bare "naive", "rollforward"
// and "oracle" refer to the reference under that strategy; other labels use
// rollforward.
struct MethodSpec {
  std::string name;   // as written
  std::string label;  // checkpoint label
  asyncsim::Strategy strategy = asyncsim::Strategy::kRollforward;
};
MethodSpec parse_method(const std::string& text);

// "0..7", "0,2,5" or a mix ("0..3,6").
std::vector<int> parse_delays(const std::string& text);

evalanal::SweepReport run_sweep(Experiment& ex, const std::vector<MethodSpec>& methods,
                                const std::vector<int>& delays, std::size_t n);

// Writes "<stem>.csv" and "<stem>.txt" and records both.
void write_sweep(Experiment& ex, const evalanal::SweepReport& r, const std::string& stem,
                 const std::string& extra_text = {});

std::vector<std::string> battery_names();

struct BatteryOptions {
  std::vector<int> delays;
  std::size_t n = 0;
  std::vector<double> filter_percentiles;  // contrast-filter only
};

// Trains the battery's variants (cached), evaluates them on shared seeds and
// writes "ablate-<battery>.csv/.txt". Returns the rendered table.
std::string run_battery(Experiment& ex, const std::string& battery, const BatteryOptions& opt);

// Probe of the deflect variant against the reference; writes probe.csv/.txt.
evalanal::MechanismReport run_probe(Experiment& ex);

// Full pipeline: demos, reference, every battery, main sweep, probe, and a
// markdown summary. Returns the summary path.
std::filesystem::path run_report(Experiment& ex);

}  // namespace deflect::pipeline
