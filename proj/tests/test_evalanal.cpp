#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/evalanal.hpp"
#include "deflect/rng.hpp"
#include "doctest.h"

using namespace deflect;
using namespace deflect::evalanal;

namespace {

constexpr double kZ95 = 1.959963984540054;

Interval oracle_wilson(double k, double n) {
  const double p = k / n, z2 = kZ95 * kZ95;
  const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = kZ95 / (1 + z2 / n) * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n));
  return {p, centre - half, centre + half};
}

flowpolicy::PolicyConfig small_policy() {
  flowpolicy::PolicyConfig c;
  c.hidden = {16};
  c.flow_steps = 2;
  return c;
}

int count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("Wilson interval worked examples") {
  const Interval none = wilson_ci(0, 10);
  CHECK(none.point == 0.0);
  CHECK(none.lower == 0.0);
  CHECK(none.upper == doctest::Approx(0.2775).epsilon(1e-3));
  const Interval all = wilson_ci(10, 10);
  CHECK(all.upper == 1.0);
  CHECK(all.lower == doctest::Approx(0.7225).epsilon(1e-3));
  for (auto [k, n] : {std::pair{5, 10}, {37, 200}, {1, 3}, {999, 1000}}) {
    const Interval w = wilson_ci(k, n), o = oracle_wilson(k, n);
    CHECK(w.point == doctest::Approx(o.point).epsilon(1e-14));
    CHECK(w.lower == doctest::Approx(o.lower).epsilon(1e-12));
    CHECK(w.upper == doctest::Approx(o.upper).epsilon(1e-12));
  }
  CHECK_THROWS_AS(wilson_ci(0, 0), DomainError);
  CHECK_THROWS_AS(wilson_ci(11, 10), DomainError);
}

TEST_CASE("Wilson interval covers p = 0.3 about 95% of the time at n = 200") {
  Rng rng(2025);
  const int batches = 10000;
  int covered = 0;
  for (int b = 0; b < batches; ++b) {
    std::size_t k = 0;
    for (int i = 0; i < 200; ++i) k += rng.uniform() < 0.3 ? 1 : 0;
    const Interval w = wilson_ci(k, 200);
    covered += (w.lower <= 0.3 && 0.3 <= w.upper) ? 1 : 0;
  }
  const double rate = static_cast<double>(covered) / batches;
  MESSAGE("coverage " << rate);
  CHECK(rate >= 0.94);
  CHECK(rate <= 0.96);
}

TEST_CASE("paired difference interval") {
  const std::vector<std::uint8_t> a{1, 1, 0, 0, 1}, b{0, 1, 0, 1, 0};
  const Interval d = paired_diff_ci(a, b);
  // Differences 1, 0, 0, -1, 1: mean 0.2, sample variance 0.7.
  CHECK(d.point == doctest::Approx(0.2));
  CHECK(d.upper - d.point == doctest::Approx(kZ95 * std::sqrt(0.7 / 5)).epsilon(1e-9));
  const Interval same = paired_diff_ci(a, a);
  CHECK(same.point == 0.0);
  CHECK(same.lower == 0.0);
  CHECK(same.upper == 0.0);
  CHECK_THROWS_AS(paired_diff_ci(a, std::vector<std::uint8_t>{1}), DomainError);
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK_THROWS_AS(median({}), DomainError);
}

TEST_CASE("cell seeds differ by delay and are fixed by the run seed") {
  CHECK(cell_seed(1, 0) != cell_seed(1, 1));
  CHECK(cell_seed(1, 3) == cell_seed(1, 3));
  CHECK(cell_seed(1, 3) != cell_seed(2, 3));
}

TEST_CASE("sweeps are paired across methods and summarise consistently") {
  const auto pcfg = small_policy();
  const auto p = flowpolicy::make_velocity_net(pcfg, 3);
  const auto q = flowpolicy::make_velocity_net(pcfg, 4);
  const std::vector<Method> methods{{"a", &p, asyncsim::Strategy::kNaive},
                                    {"a-again", &p, asyncsim::Strategy::kNaive},
                                    {"b", &q, asyncsim::Strategy::kOracle}};
  const std::vector<int> delays{0, 2, 5, 6, 7};
  const env::EnvConfig ecfg;
  const SweepReport r = delay_sweep(methods, pcfg, ecfg, delays, 30, 9);
  CHECK(r.cells.size() == 15);
  for (int d : delays) {
    CHECK(r.cell("a", d).flags == r.cell("a-again", d).flags);
    const auto& c = r.cell("b", d);
    CHECK(c.n == 30);
    CHECK(c.rate == doctest::Approx(c.successes / 30.0));
    const Interval w = wilson_ci(c.successes, c.n);
    CHECK(c.ci.lower == w.lower);
    const Interval dd = r.delta("b", "a", d);
    CHECK(dd.point == doctest::Approx(r.cell("b", d).rate - r.cell("a", d).rate));
  }
  CHECK(r.band_average("b", 5, 7) ==
        doctest::Approx((r.cell("b", 5).rate + r.cell("b", 6).rate + r.cell("b", 7).rate) / 3));
  const Interval band = r.band_delta("b", "a", 5, 7);
  CHECK(band.point == doctest::Approx(r.band_average("b", 5, 7) - r.band_average("a", 5, 7)));
  CHECK_THROWS_AS(r.band_average("a", 20, 30), DomainError);
  CHECK_THROWS_AS(r.cell("zzz", 0), ConfigError);

  const SweepReport again = delay_sweep(methods, pcfg, ecfg, delays, 30, 9);
  for (std::size_t i = 0; i < r.cells.size(); ++i) CHECK(r.cells[i].flags == again.cells[i].flags);

  const auto path = std::filesystem::temp_directory_path() / "deflect_sweep.csv";
  r.write_csv(path);
  // Header, one row per cell, two band rows per method.
  CHECK(count_lines(path) == 1 + 15 + 6);
  CHECK(r.render_table().find("a-again") != std::string::npos);
}

TEST_CASE("sweep cells match direct batch evaluation") {
  const auto pcfg = small_policy();
  const auto p = flowpolicy::make_velocity_net(pcfg, 3);
  const std::vector<Method> methods{{"p", &p, asyncsim::Strategy::kRollforward}};
  const std::vector<int> delays{3};
  const SweepReport r = delay_sweep(methods, pcfg, env::EnvConfig{}, delays, 12, 4);
  const auto direct =
      asyncsim::run_batch(p, pcfg, env::EnvConfig{},
                          asyncsim::AsyncConfig::protocol(3, asyncsim::Strategy::kRollforward), 12,
                          cell_seed(4, 3));
  CHECK(r.cell("p", 3).flags == direct.flags);
}

TEST_CASE("probing a policy against itself shows no correction and unit spread") {
  const auto pcfg = small_policy();
  const auto p = flowpolicy::make_velocity_net(pcfg, 3);
  const auto states = select_probe_states(p, p, pcfg, env::EnvConfig{}, 10, 4, 5, 1);
  REQUIRE(states.size() == 5);
  for (const auto& s : states) CHECK(s.disagreement == 0.0);
  const MechanismReport rep = mechanism_probe(p, p, pcfg, states, 50, 2);
  CHECK(rep.results.size() == 5);
  for (const auto& r : rep.results) {
    CHECK(r.correction == 0.0);
    CHECK(r.spread_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.position_correction.size() == pcfg.horizon);
  }
  CHECK(rep.median_spread_ratio == doctest::Approx(1.0));
  CHECK_THROWS_AS(mechanism_probe(p, p, pcfg, states, 1, 2), ConfigError);
}

TEST_CASE("probe states come from distinct rollouts, ranked by disagreement") {
  const auto pcfg = small_policy();
  const auto p = flowpolicy::make_velocity_net(pcfg, 3);
  const auto q = flowpolicy::make_velocity_net(pcfg, 8);
  const auto states = select_probe_states(q, p, pcfg, env::EnvConfig{}, 12, 4, 6, 1);
  REQUIRE(states.size() == 6);
  for (std::size_t i = 0; i < states.size(); ++i) {
    CHECK(states[i].disagreement > 0.0);
    if (i > 0) CHECK(states[i].disagreement <= states[i - 1].disagreement);
    for (std::size_t j = 0; j < i; ++j) CHECK(states[i].episode_seed != states[j].episode_seed);
  }
  const MechanismReport rep = mechanism_probe(q, p, pcfg, states, 40, 2);
  const auto path = std::filesystem::temp_directory_path() / "deflect_probe.csv";
  rep.write_csv(path);
  CHECK(count_lines(path) == 7);
  for (const auto& r : rep.results) CHECK(r.correction > 0.0);
}

TEST_CASE("decomposition rows are paired deltas of the sweep") {
  const auto pcfg = small_policy();
  const auto a = flowpolicy::make_velocity_net(pcfg, 1);
  const auto b = flowpolicy::make_velocity_net(pcfg, 2);
  const auto c = flowpolicy::make_velocity_net(pcfg, 3);
  const std::vector<int> delays{0, 5, 6, 7};
  const DecompositionTable t =
      decomposition_table(a, b, c, pcfg, env::EnvConfig{}, delays, 20, 3);
  REQUIRE(t.rows.size() == 4);
  for (const auto& row : t.rows) {
    CHECK(row.restart.point == doctest::Approx(row.sft_rate - row.ref_rate));
    CHECK(row.dpo.point == doctest::Approx(row.deflect_rate - row.sft_rate));
  }
  const Interval band = t.sweep.band_delta(t.sweep.methods[2], t.sweep.methods[1], 5, 7);
  CHECK(t.band_dpo.point == doctest::Approx(band.point));
  const auto path = std::filesystem::temp_directory_path() / "deflect_decomp.csv";
  t.write_csv(path);
  CHECK(count_lines(path) >= 5);
}
