#include "deflect/evalanal.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "deflect/errors.hpp"
#include "deflect/parallel.hpp"
#include "deflect/rng.hpp"

namespace deflect::evalanal {
namespace {

double z_value(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw DomainError("confidence must lie in (0, 1)");
  }
  const boost::math::normal_distribution<double> normal;
  return boost::math::quantile(normal, 0.5 + 0.5 * confidence);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Right-aligns (width > 0) or left-aligns (width < 0) text in a column.
std::string pad(const std::string& text, int width) {
  const std::size_t w = static_cast<std::size_t>(width < 0 ? -width : width);
  if (text.size() >= w) return text;
  const std::string fill(w - text.size(), ' ');
  return width < 0 ? text + fill : fill + text;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open report for writing: " + path.string());
  return out;
}

}  // namespace

Interval wilson_ci(std::size_t k, std::size_t n, double confidence) {
  if (n == 0) throw DomainError("wilson_ci: n must be >= 1");
  if (k > n) throw DomainError("wilson_ci: successes exceed trials");
  const double z = z_value(confidence);
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double centre = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  Interval ci{p, std::max(0.0, centre - half), std::min(1.0, centre + half)};
  if (k == 0) ci.lower = 0.0;
  if (k == n) ci.upper = 1.0;
  return ci;
}

Interval paired_diff_ci(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                        double confidence) {
  if (a.size() != b.size()) throw DomainError("paired_diff_ci: unequal sample sizes");
  if (a.empty()) throw DomainError("paired_diff_ci: empty samples");
  const double n = static_cast<double>(a.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += static_cast<double>(a[i]) - b[i];
  const double mean = sum / n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = static_cast<double>(a[i]) - b[i] - mean;
    ss += e * e;
  }
  const double var = a.size() > 1 ? ss / (n - 1.0) : 0.0;
  const double half = z_value(confidence) * std::sqrt(var / n);
  return {mean, mean - half, mean + half};
}

std::size_t SweepReport::method_index(const std::string& name) const {
  for (std::size_t i = 0; i < methods.size(); ++i) {
    if (methods[i] == name) return i;
  }
  throw ConfigError("sweep has no method named '" + name + "'");
}

const SweepCell& SweepReport::cell(std::size_t method, std::size_t delay_index) const {
  return cells.at(method * delays.size() + delay_index);
}

const SweepCell& SweepReport::cell(const std::string& method, int delay) const {
  const auto it = std::find(delays.begin(), delays.end(), delay);
  if (it == delays.end()) throw ConfigError("sweep has no delay " + std::to_string(delay));
  return cell(method_index(method), static_cast<std::size_t>(it - delays.begin()));
}

double SweepReport::band_average(const std::string& method, int lo, int hi) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (int d : delays) {
    if (d < lo || d > hi) continue;
    sum += cell(method, d).rate;
    ++count;
  }
  if (count == 0) throw DomainError("no sweep delays inside the requested band");
  return sum / static_cast<double>(count);
}

Interval SweepReport::delta(const std::string& a, const std::string& b, int delay) const {
  return paired_diff_ci(cell(a, delay).flags, cell(b, delay).flags);
}

Interval SweepReport::band_delta(const std::string& a, const std::string& b, int lo,
                                 int hi) const {
  std::vector<std::uint8_t> fa, fb;
  for (int d : delays) {
    if (d < lo || d > hi) continue;
    const auto& ca = cell(a, d).flags;
    const auto& cb = cell(b, d).flags;
    fa.insert(fa.end(), ca.begin(), ca.end());
    fb.insert(fb.end(), cb.begin(), cb.end());
  }
  if (fa.empty()) throw DomainError("no sweep delays inside the requested band");
  return paired_diff_ci(fa, fb);
}

void SweepReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out = open_out(path);
  out << "method,delay,n,successes,rate,ci_low,ci_high\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t di = 0; di < delays.size(); ++di) {
      const SweepCell& c = cell(m, di);
      out << methods[m] << ',' << delays[di] << ',' << c.n << ',' << c.successes << ','
          << fmt("%.17g", c.rate) << ',' << fmt("%.17g", c.ci.lower) << ','
          << fmt("%.17g", c.ci.upper) << '\n';
    }
    for (auto [lo, hi] : {std::pair{0, 7}, std::pair{5, 7}}) {
      if (std::none_of(delays.begin(), delays.end(),
                       [&](int d) { return d >= lo && d <= hi; })) {
        continue;
      }
      out << methods[m] << ",avg" << lo << '-' << hi << ",,," << fmt("%.17g", band_average(methods[m], lo, hi))
          << ",,\n";
    }
  }
  if (!out) throw IoError("failed writing sweep CSV: " + path.string());
}

std::string SweepReport::render_table() const {
  std::ostringstream s;
  std::size_t width = 8;
  for (const auto& m : methods) width = std::max(width, m.size() + 2);
  s << std::string(width, ' ');
  for (int d : delays) s << pad("d=" + std::to_string(d), 7);
  const bool has_all = std::any_of(delays.begin(), delays.end(), [](int d) { return d <= 7; });
  const bool has_top =
      std::any_of(delays.begin(), delays.end(), [](int d) { return d >= 5 && d <= 7; });
  if (has_all) s << "  avg0-7";
  if (has_top) s << "  avg5-7";
  s << '\n';
  for (std::size_t m = 0; m < methods.size(); ++m) {
    s << methods[m] << std::string(width - methods[m].size(), ' ');
    for (std::size_t di = 0; di < delays.size(); ++di) {
      s << fmt("%7.1f", 100.0 * cell(m, di).rate);
    }
    if (has_all) s << fmt("%8.1f", 100.0 * band_average(methods[m], 0, 7));
    if (has_top) s << fmt("%8.1f", 100.0 * band_average(methods[m], 5, 7));
    s << '\n';
  }
  return s.str();
}

std::uint64_t cell_seed(std::uint64_t seed, int delay) {
  return mix_seed(seed, 0x63656c6c00ULL + static_cast<std::uint64_t>(delay));
}

SweepReport delay_sweep(std::span<const Method> methods, const flowpolicy::PolicyConfig& pcfg,
                        const env::EnvConfig& ecfg, std::span<const int> delays, std::size_t n,
                        std::uint64_t seed) {
  if (methods.empty()) throw ConfigError("delay_sweep: at least one method is required");
  if (delays.empty()) throw ConfigError("delay_sweep: at least one delay is required");
  if (n < 1) throw ConfigError("delay_sweep: n must be >= 1");
  SweepReport r;
  r.seed = seed;
  r.delays.assign(delays.begin(), delays.end());
  for (const Method& m : methods) {
    if (m.params == nullptr) throw ConfigError("delay_sweep: method '" + m.name + "' has no policy");
    r.methods.push_back(m.name);
  }
  r.cells.resize(methods.size() * delays.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t di = 0; di < delays.size(); ++di) {
      const auto acfg = asyncsim::AsyncConfig::protocol(delays[di], methods[m].strategy, pcfg.horizon);
      const asyncsim::BatchStats b =
          asyncsim::run_batch(*methods[m].params, pcfg, ecfg, acfg, n, cell_seed(seed, delays[di]));
      SweepCell& c = r.cells[m * delays.size() + di];
      c.n = b.n;
      c.successes = b.successes;
      c.rate = b.rate;
      c.ci = wilson_ci(b.successes, b.n);
      c.flags = b.flags;
    }
  }
  return r;
}

std::vector<ProbeState> select_probe_states(const diffnet::PolicyParams& theta,
                                            const diffnet::PolicyParams& ref,
                                            const flowpolicy::PolicyConfig& pcfg,
                                            const env::EnvConfig& ecfg, std::size_t rollouts,
                                            int d, std::size_t count, std::uint64_t seed) {
  if (d < 0) throw ConfigError("select_probe_states: negative delay");
  std::vector<ProbeState> best(rollouts);
  std::vector<std::uint8_t> found(rollouts, 0);
  parallel::parallel_for(rollouts, [&](std::size_t i) {
    const env::Demonstration demo = env::run_expert_episode(seed + i, ecfg);
    const std::size_t len = demo.records.size();
    Rng rng(mix_seed(seed + i, 0x70726f6265));
    for (std::size_t t = 0; t + static_cast<std::size_t>(d) < len; ++t) {
      const auto& sc = demo.records[t].state;
      flowpolicy::DeploymentContext ctx{env::observe(sc),
                                        demo.records[t + static_cast<std::size_t>(d)].state.robot,
                                        ecfg.task_tag};
      const auto xi = flowpolicy::SampleSeed::draw(rng, pcfg);
      const auto a = flowpolicy::sample_chunk(theta, pcfg, ctx, xi);
      const auto b = flowpolicy::sample_chunk(ref, pcfg, ctx, xi);
      double sum = 0.0;
      for (std::size_t j = 0; j < a.values().size(); ++j) {
        const double e = a.values()[j] - b.values()[j];
        sum += e * e;
      }
      const double dist = std::sqrt(sum);
      if (!found[i] || dist > best[i].disagreement) {
        best[i] = {ctx, seed + i, static_cast<std::int64_t>(t), dist};
        found[i] = 1;
      }
    }
  });
  std::vector<ProbeState> pool;
  for (std::size_t i = 0; i < rollouts; ++i) {
    if (found[i]) pool.push_back(best[i]);
  }
  std::stable_sort(pool.begin(), pool.end(), [](const ProbeState& x, const ProbeState& y) {
    return x.disagreement > y.disagreement;
  });
  if (pool.size() > count) pool.resize(count);
  return pool;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 == 1 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

MechanismReport mechanism_probe(const diffnet::PolicyParams& theta,
                                const diffnet::PolicyParams& ref,
                                const flowpolicy::PolicyConfig& pcfg,
                                std::span<const ProbeState> states, std::size_t n_noise,
                                std::uint64_t seed) {
  if (n_noise < 2) throw ConfigError("mechanism_probe: n_noise must be >= 2");
  if (states.empty()) throw ConfigError("mechanism_probe: no probe states");
  const std::size_t h = pcfg.horizon;
  const std::size_t a = pcfg.action_dim;
  const std::size_t n = pcfg.chunk_size();
  MechanismReport rep;
  rep.states.assign(states.begin(), states.end());
  for (std::size_t si = 0; si < states.size(); ++si) {
    Rng rng(mix_seed(seed, 0x6d656368 + si));
    std::vector<double> xt(n_noise * n);
    for (double& v : xt) v = rng.normal();
    std::vector<double> xr = xt;
    const auto features = flowpolicy::encode_context(states[si].context, pcfg.workspace);
    const std::vector<flowpolicy::ContextFeatures> ctx(n_noise, features);
    flowpolicy::sample_chunks(theta, pcfg, ctx, pcfg.flow_steps, xt);
    flowpolicy::sample_chunks(ref, pcfg, ctx, pcfg.flow_steps, xr);

    std::vector<double> mean_t(n, 0.0), mean_r(n, 0.0);
    for (std::size_t i = 0; i < n_noise; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        mean_t[j] += xt[i * n + j];
        mean_r[j] += xr[i * n + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      mean_t[j] /= static_cast<double>(n_noise);
      mean_r[j] /= static_cast<double>(n_noise);
    }
    ProbeResult res;
    double total = 0.0;
    res.position_correction.assign(h, 0.0);
    for (std::size_t p = 0; p < h; ++p) {
      double pos = 0.0;
      for (std::size_t k = 0; k < a; ++k) {
        const double e = mean_t[p * a + k] - mean_r[p * a + k];
        pos += e * e;
      }
      total += pos;
      res.position_correction[p] = std::sqrt(pos);
    }
    res.correction = std::sqrt(total);
    // Action-dimension-averaged standard deviation at chunk position 0.
    double sd_t = 0.0, sd_r = 0.0;
    for (std::size_t k = 0; k < a; ++k) {
      double vt = 0.0, vr = 0.0;
      for (std::size_t i = 0; i < n_noise; ++i) {
        const double et = xt[i * n + k] - mean_t[k];
        const double er = xr[i * n + k] - mean_r[k];
        vt += et * et;
        vr += er * er;
      }
      sd_t += std::sqrt(vt / static_cast<double>(n_noise - 1));
      sd_r += std::sqrt(vr / static_cast<double>(n_noise - 1));
    }
    if (!(sd_r > 0.0)) throw DomainError("mechanism_probe: reference spread is zero");
    res.spread_ratio = sd_t / sd_r;
    rep.results.push_back(std::move(res));
  }
  std::vector<double> ratios, corrections;
  for (const auto& r : rep.results) {
    ratios.push_back(r.spread_ratio);
    corrections.push_back(r.correction);
  }
  rep.median_spread_ratio = median(ratios);
  rep.median_correction = median(corrections);
  return rep;
}

void MechanismReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out = open_out(path);
  out << "state,episode_seed,t,disagreement,correction,spread_ratio";
  const std::size_t h = results.empty() ? 0 : results.front().position_correction.size();
  for (std::size_t p = 0; p < h; ++p) out << ",pos" << p;
  out << '\n';
  for (std::size_t i = 0; i < results.size(); ++i) {
    out << i << ',' << states[i].episode_seed << ',' << states[i].t << ','
        << fmt("%.17g", states[i].disagreement) << ',' << fmt("%.17g", results[i].correction)
        << ',' << fmt("%.17g", results[i].spread_ratio);
    for (double v : results[i].position_correction) out << ',' << fmt("%.17g", v);
    out << '\n';
  }
  if (!out) throw IoError("failed writing mechanism report: " + path.string());
}

std::string MechanismReport::render_table() const {
  std::ostringstream s;
  s << "state  correction  spread_ratio  per-position correction\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    s << fmt("%5.0f", static_cast<double>(i)) << fmt("%12.4f", results[i].correction)
      << fmt("%14.3f", results[i].spread_ratio) << ' ';
    for (double v : results[i].position_correction) s << fmt(" %.3f", v);
    s << '\n';
  }
  s << "median spread ratio " << fmt("%.3f", median_spread_ratio) << ", median correction "
    << fmt("%.4f", median_correction) << '\n';
  return s.str();
}

DecompositionTable decomposition_from_sweep(const SweepReport& sweep, const std::string& ref,
                                            const std::string& sft, const std::string& deflect,
                                            int band_lo, int band_hi) {
  DecompositionTable t;
  t.band_lo = band_lo;
  t.band_hi = band_hi;
  for (int d : sweep.delays) {
    DecompositionRow row;
    row.delay = d;
    row.ref_rate = sweep.cell(ref, d).rate;
    row.sft_rate = sweep.cell(sft, d).rate;
    row.deflect_rate = sweep.cell(deflect, d).rate;
    row.restart = sweep.delta(sft, ref, d);
    row.dpo = sweep.delta(deflect, sft, d);
    t.rows.push_back(row);
  }
  t.band_restart = sweep.band_delta(sft, ref, band_lo, band_hi);
  t.band_dpo = sweep.band_delta(deflect, sft, band_lo, band_hi);
  t.sweep = sweep;
  return t;
}

DecompositionTable decomposition_table(const diffnet::PolicyParams& ref,
                                       const diffnet::PolicyParams& sft_continue,
                                       const diffnet::PolicyParams& deflect,
                                       const flowpolicy::PolicyConfig& pcfg,
                                       const env::EnvConfig& ecfg, std::span<const int> delays,
                                       std::size_t n, std::uint64_t seed, int band_lo,
                                       int band_hi) {
  const std::vector<Method> methods{{"reference", &ref, asyncsim::Strategy::kRollforward},
                                    {"sft-continue", &sft_continue, asyncsim::Strategy::kRollforward},
                                    {"deflect", &deflect, asyncsim::Strategy::kRollforward}};
  const SweepReport sweep = delay_sweep(methods, pcfg, ecfg, delays, n, seed);
  return decomposition_from_sweep(sweep, "reference", "sft-continue", "deflect", band_lo, band_hi);
}

void DecompositionTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out = open_out(path);
  out << "delay,ref_rate,sft_rate,deflect_rate,restart,restart_low,restart_high,dpo,dpo_low,"
         "dpo_high\n";
  auto put = [&](const std::string& label, double r0, double r1, double r2, const Interval& a,
                 const Interval& b) {
    out << label << ',' << fmt("%.17g", r0) << ',' << fmt("%.17g", r1) << ',' << fmt("%.17g", r2)
        << ',' << fmt("%.17g", a.point) << ',' << fmt("%.17g", a.lower) << ','
        << fmt("%.17g", a.upper) << ',' << fmt("%.17g", b.point) << ',' << fmt("%.17g", b.lower)
        << ',' << fmt("%.17g", b.upper) << '\n';
  };
  for (const auto& r : rows) {
    put(std::to_string(r.delay), r.ref_rate, r.sft_rate, r.deflect_rate, r.restart, r.dpo);
  }
  const std::string band = "avg" + std::to_string(band_lo) + "-" + std::to_string(band_hi);
  put(band, sweep.band_average(sweep.methods[0], band_lo, band_hi),
      sweep.band_average(sweep.methods[1], band_lo, band_hi),
      sweep.band_average(sweep.methods[2], band_lo, band_hi), band_restart, band_dpo);
  if (!out) throw IoError("failed writing decomposition table: " + path.string());
}

std::string DecompositionTable::render_table() const {
  std::ostringstream s;
  s << "delay   ref    sft  deflect   d_restart [95% CI]       d_dpo [95% CI]\n";
  auto row = [&](const std::string& label, double r0, double r1, double r2, const Interval& a,
                 const Interval& b) {
    s << pad(label, -6) << fmt("%5.1f", 100 * r0) << fmt("%7.1f", 100 * r1)
      << fmt("%8.1f", 100 * r2) << fmt("%+9.1f", 100 * a.point) << " ["
      << fmt("%+.1f", 100 * a.lower) << ", " << fmt("%+.1f", 100 * a.upper) << "]"
      << fmt("%+9.1f", 100 * b.point) << " [" << fmt("%+.1f", 100 * b.lower) << ", "
      << fmt("%+.1f", 100 * b.upper) << "]\n";
  };
  for (const auto& r : rows) {
    row(std::to_string(r.delay), r.ref_rate, r.sft_rate, r.deflect_rate, r.restart, r.dpo);
  }
  row("avg" + std::to_string(band_lo) + "-" + std::to_string(band_hi),
      sweep.band_average(sweep.methods[0], band_lo, band_hi),
      sweep.band_average(sweep.methods[1], band_lo, band_hi),
      sweep.band_average(sweep.methods[2], band_lo, band_hi), band_restart, band_dpo);
  return s.str();
}

}  // namespace deflect::evalanal
