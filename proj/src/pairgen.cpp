#include "deflect/pairgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "deflect/errors.hpp"

namespace deflect::pairgen {

void DelayBounds::validate() const {
  if (ctx_max < 0) throw ConfigError("delays.ctx_max must be >= 0");
  if (dpo_min < 1) throw ConfigError("delays.dpo_min must be >= 1 (d = 0 degenerates the pair)");
  if (dpo_max < dpo_min) throw ConfigError("delays.dpo_max must be >= delays.dpo_min");
}

void DelaySpec::validate() const {
  if (d_max < 1) throw ConfigError("d_max must be >= 1");
  if (d_ctx < 0 || d_ctx > d_max) throw ContractViolation("d_ctx outside {0..d_max}");
  if (d_dpo < 1 || d_dpo > d_max) throw ContractViolation("d_dpo outside {1..d_max}");
}

DelaySpec sample_delays(Rng& rng, int d_max) {
  if (d_max < 1) throw ConfigError("sample_delays: d_max must be >= 1, got " + std::to_string(d_max));
  return sample_delays(rng, DelayBounds{d_max, 1, d_max});
}

DelaySpec sample_delays(Rng& rng, const DelayBounds& bounds) {
  bounds.validate();
  DelaySpec s;
  s.d_max = bounds.d_max();
  s.d_ctx = static_cast<int>(rng.uniform_int(0, bounds.ctx_max));
  s.d_dpo = static_cast<int>(rng.uniform_int(bounds.dpo_min, bounds.dpo_max));
  return s;
}

DeploymentContext demo_context(const env::Demonstration& demo, std::size_t obs_index,
                               std::size_t proprio_index, double task_tag) {
  if (obs_index >= demo.records.size() || proprio_index >= demo.records.size()) {
    throw IndexError("demo_context: index past the end of episode " +
                     std::to_string(demo.episode_id));
  }
  return {env::observe(demo.records[obs_index].state), demo.records[proprio_index].state.robot,
          task_tag};
}

ActionChunk expert_slice(const env::Demonstration& demo, std::size_t t, int d_ctx,
                         std::size_t horizon, std::size_t action_dim) {
  if (d_ctx < 0) throw IndexError("expert_slice: negative d_ctx");
  const std::size_t start = t + static_cast<std::size_t>(d_ctx);
  const std::size_t len = demo.records.size();
  if (start >= len) {
    throw IndexError("expert_slice: t + d_ctx = " + std::to_string(start) +
                     " is past the episode length " + std::to_string(len));
  }
  if (action_dim != 2) throw ContractViolation("expert_slice: action_dim must be 2");
  ActionChunk out(horizon, action_dim);
  for (std::size_t h = 0; h < horizon; ++h) {
    const env::Vec2 a = demo.records[std::min(start + h, len - 1)].action;
    out(h, 0) = a.x;
    out(h, 1) = a.y;
  }
  return out;
}

double contrast(const ActionChunk& a, const ActionChunk& b) {
  if (a.values().size() != b.values().size()) throw ContractViolation("contrast: shape mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

namespace {

void check_request(const env::Demonstration& demo, std::size_t t, const DelaySpec& spec) {
  spec.validate();
  const std::size_t reach = t + static_cast<std::size_t>(std::max(spec.d_ctx, spec.d_dpo));
  if (reach >= demo.records.size()) {
    throw IndexError("make_pair: t + max(d_ctx, d_dpo) = " + std::to_string(reach) +
                     " is past the episode length " + std::to_string(demo.records.size()));
  }
}

}  // namespace

PreferenceTriple make_pair(const diffnet::PolicyParams& ref, const flowpolicy::PolicyConfig& cfg,
                           const env::Demonstration& demo, std::size_t t, const DelaySpec& spec,
                           const flowpolicy::SampleSeed& xi, double task_tag) {
  check_request(demo, t, spec);
  const std::size_t future = t + static_cast<std::size_t>(spec.d_dpo);
  PreferenceTriple p;
  p.context = demo_context(demo, t, t + static_cast<std::size_t>(spec.d_ctx), task_tag);
  p.chosen = flowpolicy::sample_chunk(ref, cfg, demo_context(demo, future, future, task_tag), xi);
  p.rejected = flowpolicy::sample_chunk(ref, cfg, demo_context(demo, t, t, task_tag), xi);
  p.expert = expert_slice(demo, t, spec.d_ctx, cfg.horizon, cfg.action_dim);
  p.delays = spec;
  p.contrast = contrast(p.chosen, p.rejected);
  p.t = t;
  p.ref_checksum = diffnet::checksum(ref);
  return p;
}

PairRequest sample_request(Rng& rng, const env::DemoSet& demos, const DelayBounds& bounds,
                           const flowpolicy::PolicyConfig& cfg) {
  if (demos.episodes.empty()) throw ContractViolation("sample_request: empty demo set");
  PairRequest r;
  r.delays = sample_delays(rng, bounds);
  const std::size_t reach = static_cast<std::size_t>(std::max(r.delays.d_ctx, r.delays.d_dpo));
  const auto n = static_cast<std::int64_t>(demos.episodes.size());
  constexpr int kMaxTries = 1000;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxTries) {
      throw ContractViolation("sample_request: no demonstration longer than " +
                              std::to_string(reach) + " steps");
    }
    r.episode = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
    const std::size_t len = demos.episodes[r.episode].records.size();
    if (len > reach) {
      r.t = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(len - 1 - reach)));
      break;
    }
  }
  r.xi = flowpolicy::SampleSeed::draw(rng, cfg);
  return r;
}

std::vector<PreferenceTriple> make_pairs(const diffnet::PolicyParams& ref,
                                         const flowpolicy::PolicyConfig& cfg,
                                         const env::DemoSet& demos,
                                         std::span<const PairRequest> requests,
                                         double task_tag) {
  const std::size_t rows = requests.size();
  const std::size_t n = cfg.chunk_size();
  const std::uint64_t sum = diffnet::checksum(ref);
  std::vector<PreferenceTriple> out(rows);
  // Rows [0, rows) are the future contexts, [rows, 2 rows) the stale ones.
  std::vector<flowpolicy::ContextFeatures> features(2 * rows);
  std::vector<double> x(2 * rows * n);
  std::size_t flow_steps = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const PairRequest& r = requests[i];
    if (r.episode >= demos.episodes.size()) throw IndexError("make_pairs: episode index");
    const env::Demonstration& demo = demos.episodes[r.episode];
    check_request(demo, r.t, r.delays);
    if (r.xi.noise.size() != n) throw ContractViolation("make_pairs: noise size mismatch");
    if (i == 0) flow_steps = r.xi.flow_steps;
    if (r.xi.flow_steps != flow_steps) {
      throw ContractViolation("make_pairs: all requests must share flow_steps");
    }
    const std::size_t future = r.t + static_cast<std::size_t>(r.delays.d_dpo);
    features[i] = flowpolicy::encode_context(demo_context(demo, future, future, task_tag),
                                             cfg.workspace);
    features[rows + i] =
        flowpolicy::encode_context(demo_context(demo, r.t, r.t, task_tag), cfg.workspace);
    std::copy(r.xi.noise.begin(), r.xi.noise.end(), x.begin() + i * n);
    std::copy(r.xi.noise.begin(), r.xi.noise.end(), x.begin() + (rows + i) * n);

    PreferenceTriple& p = out[i];
    p.context = demo_context(demo, r.t, r.t + static_cast<std::size_t>(r.delays.d_ctx), task_tag);
    p.expert = expert_slice(demo, r.t, r.delays.d_ctx, cfg.horizon, cfg.action_dim);
    p.delays = r.delays;
    p.episode = r.episode;
    p.t = r.t;
    p.ref_checksum = sum;
  }
  if (rows == 0) return out;
  flowpolicy::sample_chunks(ref, cfg, features, flow_steps, x);
  for (std::size_t i = 0; i < rows; ++i) {
    PreferenceTriple& p = out[i];
    p.chosen = ActionChunk(cfg.horizon, cfg.action_dim,
                           std::vector<double>(x.begin() + i * n, x.begin() + (i + 1) * n));
    p.rejected = ActionChunk(
        cfg.horizon, cfg.action_dim,
        std::vector<double>(x.begin() + (rows + i) * n, x.begin() + (rows + i + 1) * n));
    p.contrast = contrast(p.chosen, p.rejected);
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw DomainError("percentile q outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = std::ceil(q / 100.0 * static_cast<double>(values.size()));
  const std::size_t idx = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return values[std::min(idx, values.size() - 1)];
}

ContrastSummary filter_by_contrast(std::vector<PreferenceTriple>& triples, double threshold) {
  if (!(threshold >= 0.0)) throw ContractViolation("filter_by_contrast: threshold must be >= 0");
  ContrastSummary s;
  s.total = triples.size();
  s.sft_retained = triples.size();
  std::vector<double> values;
  values.reserve(triples.size());
  for (PreferenceTriple& p : triples) {
    p.dpo_excluded = p.contrast < threshold;
    if (p.dpo_excluded) ++s.dpo_excluded;
    values.push_back(p.contrast);
    s.mean += p.contrast;
  }
  if (!values.empty()) {
    s.mean /= static_cast<double>(values.size());
    s.p10 = percentile(values, 10.0);
    s.p50 = percentile(values, 50.0);
    s.p90 = percentile(values, 90.0);
  }
  return s;
}

std::vector<double> contrast_pool(const diffnet::PolicyParams& ref,
                                  const flowpolicy::PolicyConfig& cfg, const env::DemoSet& demos,
                                  const DelayBounds& bounds, std::size_t n, std::uint64_t seed,
                                  double task_tag) {
  Rng rng(mix_seed(seed, 0x706f6f6c));
  constexpr std::size_t kChunk = 256;
  std::vector<double> out;
  out.reserve(n);
  std::vector<PairRequest> requests;
  while (out.size() < n) {
    requests.clear();
    const std::size_t m = std::min(kChunk, n - out.size());
    for (std::size_t i = 0; i < m; ++i) requests.push_back(sample_request(rng, demos, bounds, cfg));
    for (const PreferenceTriple& p : make_pairs(ref, cfg, demos, requests, task_tag)) {
      out.push_back(p.contrast);
    }
  }
  return out;
}

void write_pair_pool(std::span<const PreferenceTriple> triples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open pair pool for writing: " + path.string());
  char buf[64];
  auto put_chunk = [&](const ActionChunk& c) {
    for (double v : c.values()) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      out << buf;
    }
  };
  for (const PreferenceTriple& p : triples) {
    std::snprintf(buf, sizeof buf, " %.17g", p.contrast);
    out << p.episode << ' ' << p.t << ' ' << p.delays.d_ctx << ' ' << p.delays.d_dpo << buf << ' '
        << (p.dpo_excluded ? 1 : 0) << " |";
    put_chunk(p.chosen);
    out << " |";
    put_chunk(p.rejected);
    out << " |";
    put_chunk(p.expert);
    out << '\n';
  }
  if (!out) throw IoError("failed writing pair pool: " + path.string());
}

}  // namespace deflect::pairgen
