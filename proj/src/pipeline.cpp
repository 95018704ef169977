#include "deflect/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>

#include "deflect/errors.hpp"
#include "deflect/kernels.hpp"
#include "deflect/pairgen.hpp"
#include "json.hpp"

namespace deflect::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kModuleVersions[][2] = {
    {"diffnet", "1.0"},  {"env", "1.0"},      {"flowpolicy", "1.0"}, {"pairgen", "1.0"},
    {"trainer", "1.0"},  {"asyncsim", "1.0"}, {"evalanal", "1.0"},   {"cli", "1.0"},
};

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

json config_json(const config::ExperimentConfig& cfg) {
  return json::parse(config::to_json_text(cfg));
}

std::string hash_text(const std::string& text) { return config::hex64(config::fnv1a(text)); }

}  // namespace

Layout::Layout(const config::ExperimentConfig& cfg)
    : dir_(cfg.output_dir), prefix_(cfg.experiment_id + "-s" + std::to_string(cfg.seed)) {}

fs::path Layout::file(std::string_view name) const {
  return dir_ / (prefix_ + "-" + std::string(name));
}

std::string VariantSpec::label() const {
  if (!tag.empty()) return tag;
  std::string s(trainer::mode_name(mode));
  if (lambda_dpo) s += "-lambda" + fmt_g(*lambda_dpo);
  if (steps) s += "-steps" + std::to_string(*steps);
  if (seed) s += "-seed" + std::to_string(*seed);
  if (contrast_threshold) s += "-filter" + fmt_g(*contrast_threshold);
  return s;
}

trainer::TrainConfig variant_config(const config::ExperimentConfig& cfg, const VariantSpec& v) {
  config::ExperimentConfig c = cfg;
  if (v.seed) c.seed = *v.seed;
  trainer::TrainConfig t = config::variant_train_config(c, v.mode);
  if (v.lambda_dpo) t.weights.lambda_dpo = *v.lambda_dpo;
  if (v.steps) t.steps = *v.steps;
  if (v.contrast_threshold) t.contrast_threshold = *v.contrast_threshold;
  t.validate();
  return t;
}

Experiment::Experiment(config::ExperimentConfig cfg, Log log)
    : cfg_(std::move(cfg)), layout_(cfg_), log_(std::move(log)) {
  cfg_.validate();
  std::error_code ec;
  fs::create_directories(layout_.dir(), ec);
  if (ec || !fs::is_directory(layout_.dir())) {
    throw IoError("cannot create output directory " + layout_.dir().string());
  }
}

void Experiment::say(const std::string& msg) const {
  if (log_) log_(msg);
}

void Experiment::record_output(const fs::path& p) {
  if (std::find(outputs_.begin(), outputs_.end(), p) == outputs_.end()) outputs_.push_back(p);
}

std::string Experiment::demos_key() const {
  const json j = config_json(cfg_);
  json k = {{"env", j["env"]},
            {"demo_episodes", j["demo_episodes"]},
            {"seed", cfg_.seed},
            {"chunk_length", cfg_.policy.horizon}};
  return hash_text(k.dump());
}

std::string Experiment::reference_key() const {
  const json j = config_json(cfg_);
  json k = {{"demos", demos_key()},
            {"policy", j["policy"]},
            {"reference", j["reference"]},
            {"kernels", std::string(kernels::active().name)}};
  return hash_text(k.dump());
}

std::string Experiment::variant_key(const VariantSpec& v) const {
  const trainer::TrainConfig t = variant_config(cfg_, v);
  std::ostringstream s;
  s << reference_key() << '|' << trainer::mode_name(t.mode) << '|' << t.steps << '|'
    << t.batch_size << '|' << fmt17(t.weights.beta) << '|' << fmt17(t.weights.lambda_sft) << '|'
    << fmt17(t.weights.lambda_dpo) << '|' << t.delays.ctx_max << ',' << t.delays.dpo_min << ','
    << t.delays.dpo_max << '|' << t.seed << '|'
    << (t.contrast_threshold ? fmt17(*t.contrast_threshold) : "none") << '|' << fmt17(t.peak_lr)
    << '|' << fmt17(t.warmup_fraction) << '|' << fmt17(t.weight_decay) << '|'
    << fmt17(t.task_tag);
  return hash_text(s.str());
}

bool Experiment::key_matches(const fs::path& artifact, const std::string& key) const {
  const fs::path k = fs::path(artifact.string() + ".key");
  if (!fs::exists(artifact) || !fs::exists(k)) return false;
  std::string stored = file_bytes(k);
  while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
  return stored == key;
}

void Experiment::write_key(const fs::path& artifact, const std::string& key) {
  const fs::path k = fs::path(artifact.string() + ".key");
  write_text(k, key + "\n");
}

env::DemoSet Experiment::generate_demos() {
  say("generating " + std::to_string(cfg_.demo_episodes) + " expert episodes");
  env::DemoSet d = env::generate_demos(cfg_.demo_episodes, mix_seed(cfg_.seed, 0x64656d6f),
                                       cfg_.env, static_cast<std::uint32_t>(cfg_.policy.horizon));
  const fs::path path = layout_.file("demos.dset");
  env::write_dataset(d, path);
  write_key(path, demos_key());
  record_output(path);

  double mean_len = 0.0;
  for (const auto& e : d.episodes) mean_len += static_cast<double>(e.records.size());
  if (!d.episodes.empty()) mean_len /= static_cast<double>(d.episodes.size());
  json summary = {{"attempted", d.attempted},
                  {"retained", d.episodes.size()},
                  {"expert_success_rate", d.retained_ratio()},
                  {"mean_episode_length", mean_len}};
  const fs::path spath = layout_.file("demos-summary.json");
  write_text(spath, summary.dump(2) + "\n");
  record_output(spath);
  say("kept " + std::to_string(d.episodes.size()) + "/" + std::to_string(d.attempted) +
      " episodes (expert success " + fmt_g(100.0 * d.retained_ratio()) + "%)");
  demos_ = std::move(d);
  return *demos_;
}

const env::DemoSet& Experiment::demos(bool require_existing) {
  if (demos_) return *demos_;
  const fs::path path = layout_.file("demos.dset");
  if (key_matches(path, demos_key())) {
    demos_ = env::read_dataset(path, cfg_.env);
    return *demos_;
  }
  if (require_existing) {
    throw ConfigError("no dataset for this config at " + path.string() + "; run gen-demos first");
  }
  generate_demos();
  return *demos_;
}

diffnet::PolicyParams Experiment::train_reference() {
  const env::DemoSet& d = demos();
  const trainer::TrainConfig t = config::reference_train_config(cfg_);
  say("training reference (" + std::to_string(t.steps) + " steps)");
  trainer::TrainResult r = trainer::train_reference(d, cfg_.policy, t);
  const fs::path ckpt = layout_.file("reference.dflp");
  const fs::path log = layout_.file("reference-log.csv");
  diffnet::save_checkpoint(r.params, ckpt);
  trainer::write_training_log(r.log, log);
  write_key(ckpt, reference_key());
  record_output(ckpt);
  record_output(log);
  say("reference final FM loss " + fmt_g(r.log.back().fm_loss));
  reference_ = std::move(r.params);
  return *reference_;
}

const diffnet::PolicyParams& Experiment::reference(bool require_existing) {
  if (reference_) return *reference_;
  const fs::path ckpt = layout_.file("reference.dflp");
  if (key_matches(ckpt, reference_key())) {
    reference_ = diffnet::load_checkpoint(ckpt);
    flowpolicy::check_shapes(*reference_, cfg_.policy);
    return *reference_;
  }
  if (require_existing) {
    throw ConfigError("no reference checkpoint for this config at " + ckpt.string() +
                      "; run train --mode reference-bc first");
  }
  train_reference();
  return *reference_;
}

diffnet::PolicyParams Experiment::train_variant(const VariantSpec& v) {
  if (v.mode == trainer::Mode::kReferenceBc) return train_reference();
  const trainer::TrainConfig t = variant_config(cfg_, v);
  const diffnet::PolicyParams& ref = reference();
  const std::string label = v.label();
  say("training " + label + " (" + std::to_string(t.steps) + " steps, lambda_dpo " +
      fmt_g(trainer::effective_weights(t).lambda_dpo) + ")");
  trainer::TrainResult r = trainer::train_variant(demos(), ref, cfg_.policy, t);
  const fs::path ckpt = layout_.file(label + ".dflp");
  const fs::path log = layout_.file(label + "-log.csv");
  diffnet::save_checkpoint(r.params, ckpt);
  trainer::write_training_log(r.log, log);
  write_key(ckpt, variant_key(v));
  record_output(ckpt);
  record_output(log);
  variants_[label] = r.params;
  return r.params;
}

const diffnet::PolicyParams& Experiment::variant(const VariantSpec& v) {
  const std::string label = v.label();
  if (auto it = variants_.find(label); it != variants_.end()) return it->second;
  const fs::path ckpt = layout_.file(label + ".dflp");
  if (key_matches(ckpt, variant_key(v))) {
    return variants_.emplace(label, diffnet::load_checkpoint(ckpt)).first->second;
  }
  train_variant(v);
  return variants_.at(label);
}

diffnet::PolicyParams Experiment::load_trained(const std::string& label) const {
  const fs::path ckpt = layout_.file(label + ".dflp");
  if (!fs::exists(ckpt)) {
    throw ConfigError("no checkpoint named '" + label + "' at " + ckpt.string() +
                      "; train it first");
  }
  // Plain labels are checked against the current config so a stale
  // checkpoint is never evaluated silently.
  std::string key;
  if (label == "reference") {
    key = reference_key();
  } else {
    for (trainer::Mode m : trainer::all_modes()) {
      if (m != trainer::Mode::kReferenceBc && trainer::mode_name(m) == label) {
        key = variant_key(VariantSpec{m});
      }
    }
  }
  if (!key.empty() && !key_matches(ckpt, key)) {
    throw ConfigError("checkpoint " + ckpt.string() +
                      " was trained under a different config; retrain it");
  }
  diffnet::PolicyParams p = diffnet::load_checkpoint(ckpt);
  flowpolicy::check_shapes(p, cfg_.policy);
  return p;
}

void Experiment::write_config_snapshot() {
  const fs::path p = layout_.file("config.json");
  config::save(cfg_, p);
  record_output(p);
}

fs::path Experiment::write_manifest(const std::string& command) const {
  json outputs = json::array();
  for (const fs::path& p : outputs_) {
    outputs.push_back({{"file", p.filename().string()},
                       {"fnv1a64", config::hex64(config::fnv1a(file_bytes(p)))}});
  }
  json modules = json::object();
  for (const auto& mv : kModuleVersions) modules[mv[0]] = mv[1];
  json m = {{"experiment_id", cfg_.experiment_id},
            {"seed", cfg_.seed},
            {"command", command},
            {"config_hash", config::hex64(config::config_hash(cfg_))},
            {"version", config::version()},
            {"kernels", std::string(kernels::active().name)},
            {"modules", modules},
            {"outputs", outputs}};
  const fs::path path = layout_.file(command + "-manifest.json");
  write_text(path, m.dump(2) + "\n");
  return path;
}

MethodSpec parse_method(const std::string& text) {
  MethodSpec m;
  m.name = text;
  if (text.empty()) throw ConfigError("empty method name");
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    if (text == "naive" || text == "rollforward" || text == "oracle") {
      m.label = "reference";
      m.strategy = asyncsim::parse_strategy(text);
    } else {
      m.label = text;
    }
  } else {
    m.label = text.substr(0, colon);
    m.strategy = asyncsim::parse_strategy(text.substr(colon + 1));
  }
  if (m.label == "reference-bc") m.label = "reference";
  if (m.label.empty()) throw ConfigError("method '" + text + "' has no checkpoint label");
  return m;
}

std::vector<int> parse_delays(const std::string& text) {
  std::vector<int> out;
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad delay list '" + text + "'");
    }
    if (used != s.size() || v < 0) throw ConfigError("bad delay list '" + text + "'");
    return v;
  };
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_int(item));
    } else {
      const int lo = to_int(item.substr(0, dots)), hi = to_int(item.substr(dots + 2));
      if (hi < lo) throw ConfigError("bad delay range '" + item + "'");
      for (int d = lo; d <= hi; ++d) out.push_back(d);
    }
  }
  if (out.empty()) throw ConfigError("empty delay list");
  return out;
}

namespace {

// Sweep cells already evaluated in this process, keyed by policy checksum,
// strategy, delay and episode count. Cells use fixed per-delay seeds, so a
// cached cell equals a freshly evaluated one.
std::map<std::string, evalanal::SweepCell>& cell_cache() {
  static std::map<std::string, evalanal::SweepCell> cache;
  return cache;
}

}  // namespace

evalanal::SweepReport run_sweep(Experiment& ex, const std::vector<MethodSpec>& methods,
                                const std::vector<int>& delays, std::size_t n) {
  if (n < 1) throw ConfigError("episodes per cell must be >= 1");
  if (methods.empty()) throw ConfigError("no methods to evaluate");
  const auto& cfg = ex.config();
  std::vector<std::unique_ptr<diffnet::PolicyParams>> params;
  std::map<std::string, const diffnet::PolicyParams*> by_label;
  for (const MethodSpec& m : methods) {
    if (by_label.count(m.label) != 0) continue;
    params.push_back(std::make_unique<diffnet::PolicyParams>(ex.load_trained(m.label)));
    by_label[m.label] = params.back().get();
  }
  evalanal::SweepReport report;
  report.delays = delays;
  report.seed = cfg.seed;
  for (const MethodSpec& m : methods) {
    report.methods.push_back(m.name);
    const diffnet::PolicyParams* p = by_label[m.label];
    const std::string base = config::hex64(diffnet::checksum(*p)) + "|" +
                             std::string(asyncsim::strategy_name(m.strategy)) + "|" +
                             std::to_string(n) + "|" + std::to_string(cfg.seed) + "|";
    for (int d : delays) {
      const std::string key = base + std::to_string(d);
      auto it = cell_cache().find(key);
      if (it == cell_cache().end()) {
        const std::vector<evalanal::Method> one{{m.name, p, m.strategy}};
        const std::vector<int> dd{d};
        evalanal::SweepReport r = evalanal::delay_sweep(one, cfg.policy, cfg.env, dd, n, cfg.seed);
        it = cell_cache().emplace(key, std::move(r.cells.front())).first;
      }
      report.cells.push_back(it->second);
    }
  }
  return report;
}

namespace {

// a,b,delay,point,lower,upper for every ordered method pair, per delay and
// for the avg0-7 / avg5-7 bands.
std::string deltas_csv(const evalanal::SweepReport& r) {
  std::ostringstream out;
  out << "method,baseline,delay,delta,ci_low,ci_high\n";
  const int lo = *std::min_element(r.delays.begin(), r.delays.end());
  const int hi = *std::max_element(r.delays.begin(), r.delays.end());
  for (const auto& a : r.methods) {
    for (const auto& b : r.methods) {
      if (a == b) continue;
      auto row = [&](const std::string& label, const evalanal::Interval& iv) {
        out << a << ',' << b << ',' << label << ',' << fmt17(iv.point) << ','
            << fmt17(iv.lower) << ',' << fmt17(iv.upper) << '\n';
      };
      for (int d : r.delays) row(std::to_string(d), r.delta(a, b, d));
      row("avg" + std::to_string(lo) + "-" + std::to_string(hi), r.band_delta(a, b, lo, hi));
      const bool has_band = std::any_of(r.delays.begin(), r.delays.end(),
                                        [](int d) { return d >= 5 && d <= 7; });
      if (has_band) row("avg5-7", r.band_delta(a, b, 5, 7));
    }
  }
  return out.str();
}

std::string delta_table(const evalanal::SweepReport& r, const std::string& baseline) {
  if (std::find(r.methods.begin(), r.methods.end(), baseline) == r.methods.end()) return {};
  std::ostringstream s;
  char buf[128];
  s << "\npaired difference vs " << baseline << " (pp, 95% CI)\n";
  for (const auto& a : r.methods) {
    if (a == baseline) continue;
    std::snprintf(buf, sizeof buf, "%-22s", a.c_str());
    s << buf;
    for (int d : r.delays) {
      const evalanal::Interval iv = r.delta(a, baseline, d);
      std::snprintf(buf, sizeof buf, "  d=%d %+5.1f", d, 100.0 * iv.point);
      s << buf;
    }
    const bool has_band =
        std::any_of(r.delays.begin(), r.delays.end(), [](int d) { return d >= 5 && d <= 7; });
    if (has_band) {
      const evalanal::Interval b = r.band_delta(a, baseline, 5, 7);
      std::snprintf(buf, sizeof buf, "  | d5-7 %+.2f [%+.2f, %+.2f]", 100.0 * b.point,
                    100.0 * b.lower, 100.0 * b.upper);
      s << buf;
    }
    s << '\n';
  }
  return s.str();
}

}  // namespace

void write_sweep(Experiment& ex, const evalanal::SweepReport& r, const std::string& stem,
                 const std::string& extra_text) {
  const fs::path csv = ex.layout().file(stem + ".csv");
  r.write_csv(csv);
  ex.record_output(csv);
  const fs::path dcsv = ex.layout().file(stem + "-deltas.csv");
  write_text(dcsv, deltas_csv(r));
  ex.record_output(dcsv);
  const fs::path txt = ex.layout().file(stem + ".txt");
  write_text(txt, r.render_table() + extra_text);
  ex.record_output(txt);
}

std::vector<std::string> battery_names() {
  return {"anchor",    "matched-input", "lambda-sweep", "contrast-filter",
          "zero-shot", "clean-preference", "restart"};
}

namespace {

std::vector<MethodSpec> as_methods(const std::vector<std::string>& labels) {
  std::vector<MethodSpec> out;
  for (const auto& l : labels) out.push_back(parse_method(l));
  return out;
}

VariantSpec plain(trainer::Mode m) { return VariantSpec{m}; }

}  // namespace

std::string run_battery(Experiment& ex, const std::string& battery, const BatteryOptions& opt) {
  const auto& cfg = ex.config();
  const std::vector<int> delays = opt.delays.empty() ? cfg.eval.delays : opt.delays;
  const std::size_t n = opt.n == 0 ? cfg.eval.episodes : opt.n;
  const std::string stem = "ablate-" + battery;
  using trainer::Mode;

  auto simple = [&](std::vector<Mode> modes, const std::string& baseline) {
    std::vector<std::string> labels;
    for (Mode m : modes) {
      ex.variant(plain(m));
      labels.emplace_back(trainer::mode_name(m));
    }
    const evalanal::SweepReport r = run_sweep(ex, as_methods(labels), delays, n);
    const std::string extra = delta_table(r, baseline);
    write_sweep(ex, r, stem, extra);
    return r.render_table() + extra;
  };

  if (battery == "anchor") {
    return simple({Mode::kSftContinue, Mode::kDeflect, Mode::kNoAnchor}, "deflect");
  }
  if (battery == "matched-input") {
    return simple({Mode::kSftContinue, Mode::kDeflect, Mode::kMatchedInput}, "deflect");
  }
  if (battery == "zero-shot") {
    return simple({Mode::kSftContinue, Mode::kDeflect, Mode::kNarrowDelay}, "sft-continue");
  }
  if (battery == "clean-preference") {
    return simple({Mode::kSftContinue, Mode::kDeflect, Mode::kCleanPreference}, "sft-continue");
  }
  if (battery == "lambda-sweep") {
    std::vector<std::string> labels{"sft-continue"};
    ex.variant(plain(Mode::kSftContinue));
    for (double l : cfg.ablation.lambda_grid) {
      VariantSpec v{Mode::kDeflect};
      v.lambda_dpo = l;
      v.tag = "deflect-lambda" + fmt_g(l);
      ex.variant(v);
      labels.push_back(v.tag);
    }
    const evalanal::SweepReport r = run_sweep(ex, as_methods(labels), delays, n);
    const std::string extra = delta_table(r, "sft-continue");
    write_sweep(ex, r, stem, extra);
    return r.render_table() + extra;
  }
  if (battery == "contrast-filter") {
    const std::vector<double> pcts =
        opt.filter_percentiles.empty() ? cfg.ablation.filter_percentiles : opt.filter_percentiles;
    const diffnet::PolicyParams& ref = ex.reference();
    const trainer::TrainConfig base = config::variant_train_config(cfg, Mode::kDeflect);
    const std::vector<double> pool =
        pairgen::contrast_pool(ref, cfg.policy, ex.demos(), base.delays,
                               cfg.ablation.contrast_pool, mix_seed(cfg.seed, 0x66696c74),
                               cfg.env.task_tag);
    double mean = 0.0;
    for (double c : pool) mean += c;
    mean /= static_cast<double>(pool.size());
    std::ostringstream extra;
    extra << "\ncontrast pool of " << pool.size() << " pairs: mean " << fmt_g(mean) << ", P10 "
          << fmt_g(pairgen::percentile(pool, 10.0)) << ", P50 "
          << fmt_g(pairgen::percentile(pool, 50.0)) << '\n';
    ex.variant(plain(Mode::kDeflect));
    std::vector<std::string> labels{"deflect"};
    for (double q : pcts) {
      VariantSpec v{Mode::kDeflect};
      v.contrast_threshold = pairgen::percentile(pool, q);
      v.tag = "deflect-p" + fmt_g(q);
      extra << v.tag << ": threshold " << fmt_g(*v.contrast_threshold) << " (P" << fmt_g(q)
            << ")\n";
      ex.variant(v);
      labels.push_back(v.tag);
    }
    const evalanal::SweepReport r = run_sweep(ex, as_methods(labels), delays, n);
    std::string text = extra.str() + delta_table(r, "deflect");
    write_sweep(ex, r, stem, text);
    return r.render_table() + text;
  }
  if (battery == "restart") {
    ex.reference();
    ex.variant(plain(Mode::kSftContinue));
    ex.variant(plain(Mode::kDeflect));
    const evalanal::SweepReport r =
        run_sweep(ex, as_methods({"reference", "sft-continue", "deflect"}), delays, n);
    const evalanal::DecompositionTable t =
        evalanal::decomposition_from_sweep(r, "reference", "sft-continue", "deflect");
    write_sweep(ex, r, stem + "-sweep", delta_table(r, "sft-continue"));
    const fs::path csv = ex.layout().file(stem + ".csv");
    t.write_csv(csv);
    ex.record_output(csv);
    const fs::path txt = ex.layout().file(stem + ".txt");
    write_text(txt, t.render_table());
    ex.record_output(txt);
    return t.render_table();
  }
  throw ConfigError("unknown battery '" + battery + "'");
}

evalanal::MechanismReport run_probe(Experiment& ex) {
  const auto& cfg = ex.config();
  const diffnet::PolicyParams& ref = ex.reference();
  const diffnet::PolicyParams& theta = ex.variant(plain(trainer::Mode::kDeflect));
  const auto& pc = cfg.eval.probe;
  ex.say("selecting " + std::to_string(pc.states) + " probe states from " +
         std::to_string(pc.rollouts) + " rollouts at d=" + std::to_string(pc.delay));
  const auto states = evalanal::select_probe_states(theta, ref, cfg.policy, cfg.env, pc.rollouts,
                                                    pc.delay, pc.states,
                                                    mix_seed(cfg.seed, 0x70726f6265));
  const evalanal::MechanismReport rep =
      evalanal::mechanism_probe(theta, ref, cfg.policy, states, pc.n_noise,
                                mix_seed(cfg.seed, 0x6e6f697365));
  const fs::path csv = ex.layout().file("probe.csv");
  rep.write_csv(csv);
  ex.record_output(csv);
  const fs::path txt = ex.layout().file("probe.txt");
  write_text(txt, rep.render_table());
  ex.record_output(txt);
  return rep;
}

fs::path run_report(Experiment& ex) {
  const auto& cfg = ex.config();
  ex.write_config_snapshot();
  ex.demos();
  ex.reference();
  std::ostringstream md;
  md << "# " << cfg.experiment_id << " (seed " << cfg.seed << ")\n\n";
  md << "config hash " << config::hex64(config::config_hash(cfg)) << ", version "
     << config::version() << ", kernels " << kernels::active().name << "\n\n";

  const std::vector<std::string> main_methods{"naive", "rollforward", "oracle", "sft-continue",
                                              "deflect"};
  ex.variant(plain(trainer::Mode::kSftContinue));
  ex.variant(plain(trainer::Mode::kDeflect));
  ex.say("main sweep");
  const evalanal::SweepReport main =
      run_sweep(ex, as_methods(main_methods), cfg.eval.delays, cfg.eval.episodes);
  const std::string main_extra = delta_table(main, "sft-continue");
  write_sweep(ex, main, "eval", main_extra);
  md << "## Delay sweep\n\n```\n" << main.render_table() << main_extra << "```\n\n";

  for (const std::string& b : battery_names()) {
    ex.say("battery " + b);
    const std::string table = run_battery(ex, b, {});
    md << "## Battery: " << b << "\n\n```\n" << table << "```\n\n";
  }
  ex.say("mechanism probe");
  const evalanal::MechanismReport probe = run_probe(ex);
  md << "## Mechanism probe\n\n```\n" << probe.render_table() << "```\n";

  const fs::path path = ex.layout().file("report.md");
  write_text(path, md.str());
  ex.record_output(path);
  return path;
}

}  // namespace deflect::pipeline
