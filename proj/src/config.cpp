#include "deflect/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "deflect/errors.hpp"
#include "json.hpp"

#ifndef DEFLECT_VERSION
#define DEFLECT_VERSION "unknown"
#endif

namespace deflect::config {
namespace {

using nlohmann::json;

// Reads fields from one JSON object and remembers which keys were used, so
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void get_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if (it->is_null()) {
      out.reset();
      return;
    }
    if (!it->is_number()) throw ConfigError(where_ + "." + key + " must be a number or null");
    out = it->get<double>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + where_ + "." + it.key());
    }
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_env(const json& j, env::EnvConfig& e) {
  ObjectReader r(j, "env");
  r.get("workspace", e.workspace);
  r.get("horizon", e.horizon);
  r.get("success_radius", e.success_radius);
  r.get("step_gain", e.step_gain);
  r.get("speed_min", e.speed_min);
  r.get("speed_max", e.speed_max);
  r.get("band_inner", e.band_inner);
  r.get("band_outer", e.band_outer);
  r.get("heading_deg", e.heading_deg);
  r.get("task_tag", e.task_tag);
  r.get("expert_gain", e.expert_gain);
  r.finish();
}

void read_policy(const json& j, flowpolicy::PolicyConfig& p) {
  ObjectReader r(j, "policy");
  r.get("horizon", p.horizon);
  r.get("action_dim", p.action_dim);
  r.get("hidden", p.hidden);
  r.get("flow_steps", p.flow_steps);
  r.finish();
}

void read_reference(const json& j, ReferenceSettings& s) {
  ObjectReader r(j, "reference");
  r.get("steps", s.steps);
  r.get("batch_size", s.batch_size);
  r.get("peak_lr", s.peak_lr);
  r.get("warmup_fraction", s.warmup_fraction);
  r.get("weight_decay", s.weight_decay);
  r.get("loss_ceiling", s.loss_ceiling);
  r.get("ctx_delay_max", s.ctx_delay_max);
  r.finish();
}

void read_post(const json& j, PostSettings& s) {
  ObjectReader r(j, "post");
  r.get("steps", s.steps);
  r.get("batch_size", s.batch_size);
  r.get("peak_lr", s.peak_lr);
  r.get("warmup_fraction", s.warmup_fraction);
  r.get("weight_decay", s.weight_decay);
  r.get("beta", s.beta);
  r.get("lambda_sft", s.lambda_sft);
  r.get("lambda_dpo", s.lambda_dpo);
  r.get("d_max", s.d_max);
  r.get_optional("contrast_threshold", s.contrast_threshold);
  r.finish();
}

void read_eval(const json& j, EvalSettings& s) {
  ObjectReader r(j, "eval");
  r.get("delays", s.delays);
  r.get("episodes", s.episodes);
  if (const json* p = r.child("probe")) {
    ObjectReader pr(*p, "eval.probe");
    pr.get("rollouts", s.probe.rollouts);
    pr.get("delay", s.probe.delay);
    pr.get("states", s.probe.states);
    pr.get("n_noise", s.probe.n_noise);
    pr.finish();
  }
  r.finish();
}

void read_ablation(const json& j, AblationSettings& s) {
  ObjectReader r(j, "ablation");
  r.get("lambda_grid", s.lambda_grid);
  r.get("contrast_pool", s.contrast_pool);
  r.get("filter_percentiles", s.filter_percentiles);
  r.finish();
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["experiment_id"] = c.experiment_id;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["env"] = {{"workspace", c.env.workspace},       {"horizon", c.env.horizon},
              {"success_radius", c.env.success_radius}, {"step_gain", c.env.step_gain},
              {"speed_min", c.env.speed_min},       {"speed_max", c.env.speed_max},
              {"band_inner", c.env.band_inner},     {"band_outer", c.env.band_outer},
              {"heading_deg", c.env.heading_deg},
              {"task_tag", c.env.task_tag},         {"expert_gain", c.env.expert_gain}};
  j["policy"] = {{"horizon", c.policy.horizon},
                 {"action_dim", c.policy.action_dim},
                 {"hidden", c.policy.hidden},
                 {"flow_steps", c.policy.flow_steps}};
  j["demo_episodes"] = c.demo_episodes;
  const auto& r = c.reference;
  j["reference"] = {{"steps", r.steps},
                    {"batch_size", r.batch_size},
                    {"peak_lr", r.peak_lr},
                    {"warmup_fraction", r.warmup_fraction},
                    {"weight_decay", r.weight_decay},
                    {"loss_ceiling", r.loss_ceiling},
                    {"ctx_delay_max", r.ctx_delay_max}};
  const auto& p = c.post;
  j["post"] = {{"steps", p.steps},
               {"batch_size", p.batch_size},
               {"peak_lr", p.peak_lr},
               {"warmup_fraction", p.warmup_fraction},
               {"weight_decay", p.weight_decay},
               {"beta", p.beta},
               {"lambda_sft", p.lambda_sft},
               {"lambda_dpo", p.lambda_dpo},
               {"d_max", p.d_max},
               {"contrast_threshold",
                p.contrast_threshold ? json(*p.contrast_threshold) : json(nullptr)}};
  j["eval"] = {{"delays", c.eval.delays},
               {"episodes", c.eval.episodes},
               {"probe",
                {{"rollouts", c.eval.probe.rollouts},
                 {"delay", c.eval.probe.delay},
                 {"states", c.eval.probe.states},
                 {"n_noise", c.eval.probe.n_noise}}}};
  j["ablation"] = {{"lambda_grid", c.ablation.lambda_grid},
                   {"contrast_pool", c.ablation.contrast_pool},
                   {"filter_percentiles", c.ablation.filter_percentiles}};
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (experiment_id.empty()) throw ConfigError("experiment_id must be non-empty");
  for (char ch : experiment_id) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_')) {
      throw ConfigError("experiment_id may only contain letters, digits, '-' and '_'");
    }
  }
  if (output_dir.empty()) throw ConfigError("output_dir must be non-empty");
  env.validate();
  policy.validate();
  if (policy.workspace != env.workspace) {
    throw ConfigError("policy workspace scale must equal env.workspace");
  }
  if (demo_episodes < 1) throw ConfigError("demo_episodes must be >= 1");
  if (reference.steps < 1) throw ConfigError("reference.steps must be >= 1");
  if (reference.ctx_delay_max < 0) throw ConfigError("reference.ctx_delay_max must be >= 0");
  if (post.d_max < 1) throw ConfigError("post.d_max must be >= 1");
  reference_train_config(*this).validate();
  variant_train_config(*this, trainer::Mode::kDeflect).validate();
  if (eval.delays.empty()) throw ConfigError("eval.delays must be non-empty");
  for (int d : eval.delays) {
    if (d < 0 || static_cast<std::size_t>(d) > policy.horizon) {
      throw ConfigError("eval.delays entries must lie in [0, policy.horizon]");
    }
  }
  if (eval.episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (eval.probe.n_noise < 2) throw ConfigError("eval.probe.n_noise must be >= 2");
  if (eval.probe.states < 1 || eval.probe.rollouts < 1) {
    throw ConfigError("eval.probe.states and eval.probe.rollouts must be >= 1");
  }
  if (eval.probe.delay < 0) throw ConfigError("eval.probe.delay must be >= 0");
  for (double l : ablation.lambda_grid) {
    if (!(l >= 0.0)) throw ConfigError("ablation.lambda_grid entries must be >= 0");
  }
  if (ablation.contrast_pool < 1) throw ConfigError("ablation.contrast_pool must be >= 1");
  for (double q : ablation.filter_percentiles) {
    if (!(q >= 0.0 && q <= 100.0)) throw ConfigError("ablation.filter_percentiles must be in [0, 100]");
  }
}

ExperimentConfig from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader r(j, "config");
  r.get("experiment_id", c.experiment_id);
  r.get("seed", c.seed);
  std::string out_dir = c.output_dir.string();
  r.get("output_dir", out_dir);
  c.output_dir = out_dir;
  if (const json* e = r.child("env")) read_env(*e, c.env);
  if (const json* p = r.child("policy")) read_policy(*p, c.policy);
  r.get("demo_episodes", c.demo_episodes);
  if (const json* s = r.child("reference")) read_reference(*s, c.reference);
  if (const json* s = r.child("post")) read_post(*s, c.post);
  if (const json* s = r.child("eval")) read_eval(*s, c.eval);
  if (const json* s = r.child("ablation")) read_ablation(*s, c.ablation);
  r.finish();
  c.policy.workspace = c.env.workspace;
  c.validate();
  return c;
}

std::string to_json_text(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

ExperimentConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return from_json_text(s.str());
}

void save(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path.string());
  out << to_json_text(cfg);
  if (!out) throw IoError("failed writing config file: " + path.string());
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  return fnv1a(j.dump());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string version() { return DEFLECT_VERSION; }

trainer::TrainConfig reference_train_config(const ExperimentConfig& cfg) {
  trainer::TrainConfig t;
  t.mode = trainer::Mode::kReferenceBc;
  t.steps = cfg.reference.steps;
  t.batch_size = cfg.reference.batch_size;
  t.weights = {1.0, 1.0, 0.0};
  t.delays = {cfg.reference.ctx_delay_max, 1, 1};
  t.seed = mix_seed(cfg.seed, 0x726566);
  t.init_seed = mix_seed(cfg.seed, 0x696e6974);
  t.peak_lr = cfg.reference.peak_lr;
  t.warmup_fraction = cfg.reference.warmup_fraction;
  t.weight_decay = cfg.reference.weight_decay;
  t.loss_ceiling = cfg.reference.loss_ceiling;
  t.task_tag = cfg.env.task_tag;
  return t;
}

trainer::TrainConfig variant_train_config(const ExperimentConfig& cfg, trainer::Mode mode) {
  trainer::TrainConfig t;
  t.mode = mode;
  t.steps = cfg.post.steps;
  t.batch_size = cfg.post.batch_size;
  t.weights = {cfg.post.beta, cfg.post.lambda_sft, cfg.post.lambda_dpo};
  t.delays = {cfg.post.d_max, 1, cfg.post.d_max};
  // Every post-training mode shares one data stream so variants differ only
  // through their objectives.
  t.seed = mix_seed(cfg.seed, 0x706f7374);
  t.contrast_threshold = cfg.post.contrast_threshold;
  t.peak_lr = cfg.post.peak_lr;
  t.warmup_fraction = cfg.post.warmup_fraction;
  t.weight_decay = cfg.post.weight_decay;
  t.task_tag = cfg.env.task_tag;
  return t;
}

}  // namespace deflect::config
