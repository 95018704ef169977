// deflect: experiment runner for demos, training, evaluation, ablations,
// mechanism probes and the combined report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deflect/config.hpp"
#include "deflect/errors.hpp"
#include "deflect/pairgen.hpp"
#include "deflect/pipeline.hpp"

namespace {

using namespace deflect;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitValidation = 4;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  bool quiet = false;
};

config::ExperimentConfig load_config(const Common& c) {
  config::ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = config::load(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  cfg.validate();
  return cfg;
}

pipeline::Log make_log(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::fprintf(stderr, "[deflect] %s\n", msg.c_str()); };
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_percentiles(const std::string& text) {
  std::vector<double> out;
  for (const std::string& item : split_list(text)) {
    std::string s = item;
    if (!s.empty() && (s[0] == 'p' || s[0] == 'P')) s = s.substr(1);
    std::size_t used = 0;
    double q = 0.0;
    try {
      q = std::stod(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad threshold '" + item + "'; expected e.g. p10");
    }
    if (used != s.size() || q < 0.0 || q > 100.0) {
      throw ConfigError("bad threshold '" + item + "'; expected e.g. p10");
    }
    out.push_back(q);
  }
  if (out.empty()) throw ConfigError("empty threshold list");
  return out;
}

void finish(pipeline::Experiment& ex, const std::string& command) {
  const auto manifest = ex.write_manifest(command);
  for (const auto& p : ex.outputs()) std::printf("wrote %s\n", p.string().c_str());
  std::printf("wrote %s\n", manifest.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual-preference post-training for delay-robust chunked policies"};
  app.require_subcommand(1);
  app.set_version_flag("--version", config::version());

  Common common;
  app.add_option("--config", common.config_path, "Experiment config (JSON)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Override the master seed");
  app.add_option("--output-dir", common.output_dir, "Override the output directory");
  app.add_flag("-q,--quiet", common.quiet, "No progress messages");

  auto* gen = app.add_subcommand("gen-demos", "Generate the expert demonstration dataset");
  std::optional<std::size_t> episodes;
  gen->add_option("--episodes", episodes, "Episodes to roll out");

  auto* train = app.add_subcommand("train", "Train the reference or a post-training variant");
  std::string mode_text;
  std::optional<std::uint64_t> steps;
  std::optional<double> lambda_dpo, threshold;
  train->add_option("--mode", mode_text, "reference-bc, deflect, sft-continue, no-anchor, "
                                         "matched-input, clean-preference, narrow-delay")
      ->required();
  train->add_option("--steps", steps, "Override the step count");
  train->add_option("--lambda-dpo", lambda_dpo, "Override the DPO weight");
  train->add_option("--contrast-threshold", threshold, "Exclude pairs below this contrast");

  auto* eval = app.add_subcommand("eval", "Delay sweep over methods");
  std::string delays_text, methods_text = "naive,rollforward,oracle";
  std::optional<long long> n_episodes;
  eval->add_option("--delays", delays_text, "e.g. 0..7 (default from config)");
  eval->add_option("--methods", methods_text,
                   "Comma list of checkpoint labels, optionally label:strategy")
      ->capture_default_str();
  eval->add_option("-n,--n", n_episodes, "Episodes per cell");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation battery");
  std::string battery, thresholds_text;
  ablate->add_option("--battery", battery,
                     "anchor, matched-input, lambda-sweep, contrast-filter, zero-shot, "
                     "clean-preference, restart")
      ->required();
  ablate->add_option("--delays", delays_text, "e.g. 0..7 (default from config)");
  ablate->add_option("-n,--n", n_episodes, "Episodes per cell");
  ablate->add_option("--thresholds", thresholds_text, "contrast-filter percentiles, e.g. p10,p50");

  auto* probe = app.add_subcommand("probe", "Mechanism probe of deflect against the reference");
  auto* report = app.add_subcommand("report", "Run the full pipeline and write a summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    config::ExperimentConfig cfg = load_config(common);
    std::optional<trainer::Mode> mode;
    if (*train) mode = trainer::parse_mode(mode_text);
    if (*gen && episodes) {
      if (*episodes < 1) throw ConfigError("--episodes must be >= 1");
      cfg.demo_episodes = *episodes;
    }
    if (mode == trainer::Mode::kReferenceBc) {
      if (lambda_dpo || threshold) {
        throw ConfigError("--lambda-dpo and --contrast-threshold apply to post-training modes");
      }
      if (steps) cfg.reference.steps = *steps;
    }
    cfg.validate();
    pipeline::Experiment ex(cfg, make_log(common));

    if (*gen) {
      const env::DemoSet d = ex.generate_demos();
      std::printf("episodes %zu/%zu retained\n", d.episodes.size(), d.attempted);
      finish(ex, "gen-demos");
    } else if (*train) {
      ex.demos(true);
      if (mode == trainer::Mode::kReferenceBc) {
        ex.train_reference();
        finish(ex, "train-reference-bc");
      } else {
        ex.reference(true);
        pipeline::VariantSpec v{*mode};
        v.lambda_dpo = lambda_dpo;
        v.steps = steps;
        v.contrast_threshold = threshold;
        ex.train_variant(v);
        finish(ex, "train-" + v.label());
      }
    } else if (*eval) {
      if (n_episodes && *n_episodes < 1) throw ConfigError("--n must be >= 1");
      const std::size_t n = n_episodes ? static_cast<std::size_t>(*n_episodes) : cfg.eval.episodes;
      const std::vector<int> delays =
          delays_text.empty() ? cfg.eval.delays : pipeline::parse_delays(delays_text);
      std::vector<pipeline::MethodSpec> methods;
      for (const std::string& m : split_list(methods_text)) methods.push_back(pipeline::parse_method(m));
      const evalanal::SweepReport r = pipeline::run_sweep(ex, methods, delays, n);
      pipeline::write_sweep(ex, r, "eval");
      std::printf("%s", r.render_table().c_str());
      finish(ex, "eval");
    } else if (*ablate) {
      if (n_episodes && *n_episodes < 1) throw ConfigError("--n must be >= 1");
      const auto names = pipeline::battery_names();
      if (std::find(names.begin(), names.end(), battery) == names.end()) {
        throw ConfigError("unknown battery '" + battery + "'");
      }
      ex.reference(true);
      pipeline::BatteryOptions opt;
      if (!delays_text.empty()) opt.delays = pipeline::parse_delays(delays_text);
      if (n_episodes) opt.n = static_cast<std::size_t>(*n_episodes);
      if (!thresholds_text.empty()) opt.filter_percentiles = parse_percentiles(thresholds_text);
      const std::string table = pipeline::run_battery(ex, battery, opt);
      std::printf("%s", table.c_str());
      finish(ex, "ablate-" + battery);
    } else if (*probe) {
      ex.reference(true);
      ex.load_trained("deflect");
      const evalanal::MechanismReport rep = pipeline::run_probe(ex);
      std::printf("%s", rep.render_table().c_str());
      finish(ex, "probe");
    } else if (*report) {
      const auto path = pipeline::run_report(ex);
      std::printf("report: %s\n", path.string().c_str());
      finish(ex, "report");
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kExitIo;
  } catch (const ConvergenceError& e) {
    std::fprintf(stderr, "convergence failure: %s\n", e.what());
    return kExitValidation;
  } catch (const Error& e) {
    std::fprintf(stderr, "validation failure: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
