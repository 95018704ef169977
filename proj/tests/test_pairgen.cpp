#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/pairgen.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace deflect;
using namespace deflect::pairgen;
using flowpolicy::PolicyConfig;
using flowpolicy::SampleSeed;

namespace {

PolicyConfig small_config() {
  PolicyConfig c;
  c.horizon = 4;
  c.hidden = {8};
  c.flow_steps = 3;
  return c;
}

const env::DemoSet& demos() {
  static const env::DemoSet d = env::generate_demos(40, 100, env::EnvConfig{}, 8);
  return d;
}

// |count - n p| within k binomial standard deviations.
bool binomial_ok(std::size_t count, std::size_t n, double p, double k = 4.5) {
  const double sd = std::sqrt(n * p * (1.0 - p));
  return std::abs(static_cast<double>(count) - n * p) <= k * sd;
}

}  // namespace

TEST_CASE("delay draws are uniform on their ranges and independent") {
  Rng rng(1);
  const DelayBounds b;
  const std::size_t n = 50000;
  std::array<std::array<std::size_t, 5>, 5> joint{};
  for (std::size_t i = 0; i < n; ++i) {
    const DelaySpec s = sample_delays(rng, b);
    REQUIRE(s.d_ctx >= 0);
    REQUIRE(s.d_ctx <= 4);
    REQUIRE(s.d_dpo >= 1);
    REQUIRE(s.d_dpo <= 4);
    ++joint[s.d_ctx][s.d_dpo];
  }
  for (int c = 0; c <= 4; ++c) {
    std::size_t marg = 0;
    for (int d = 1; d <= 4; ++d) {
      marg += joint[c][d];
      CHECK(binomial_ok(joint[c][d], n, 1.0 / 20.0));
    }
    CHECK(binomial_ok(marg, n, 1.0 / 5.0));
  }
  for (int d = 1; d <= 4; ++d) {
    std::size_t marg = 0;
    for (int c = 0; c <= 4; ++c) marg += joint[c][d];
    CHECK(binomial_ok(marg, n, 1.0 / 4.0));
  }
  CHECK(joint[0][0] == 0);
}

TEST_CASE("single-bound delay draws stay in range") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const DelaySpec s = sample_delays(rng, 3);
    CHECK(s.d_max == 3);
    CHECK(s.d_ctx >= 0);
    CHECK(s.d_ctx <= 3);
    CHECK(s.d_dpo >= 1);
    CHECK(s.d_dpo <= 3);
  }
  CHECK_THROWS_AS(sample_delays(rng, 0), ConfigError);
  DelayBounds bad;
  bad.dpo_min = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("demo context takes the observation and the robot from different records") {
  const env::Demonstration& demo = demos().episodes[0];
  const DeploymentContext c = demo_context(demo, 2, 5, 1.0);
  CHECK(c.observation.target == demo.records[2].state.target);
  CHECK(c.observation.time_index == 2);
  CHECK(c.proprio == demo.records[5].state.robot);
  CHECK_THROWS_AS(demo_context(demo, demo.records.size(), 0, 1.0), IndexError);
}

TEST_CASE("expert slice starts at t + d_ctx and pads with the last action") {
  const env::Demonstration& demo = demos().episodes[0];
  const std::size_t len = demo.records.size();
  const ActionChunk s = expert_slice(demo, 1, 2, 4);
  for (std::size_t h = 0; h < 4; ++h) CHECK(s.action(h) == demo.records[3 + h].action);
  const ActionChunk tail = expert_slice(demo, len - 2, 0, 4);
  CHECK(tail.action(0) == demo.records[len - 2].action);
  CHECK(tail.action(1) == demo.records[len - 1].action);
  CHECK(tail.action(3) == demo.records[len - 1].action);
  CHECK_THROWS_AS(expert_slice(demo, len - 1, 1, 4), IndexError);
}

TEST_CASE("contrast is the Euclidean distance between chunks") {
  const ActionChunk a(2, 2, std::vector<double>{0, 0, 0, 0});
  const ActionChunk b(2, 2, std::vector<double>{3, 0, 0, 4});
  CHECK(contrast(a, b) == 5.0);
  CHECK(contrast(a, a) == 0.0);
}

TEST_CASE("make_pair queries the reference twice with the same noise") {
  const PolicyConfig cfg = small_config();
  const auto ref = flowpolicy::make_velocity_net(cfg, 5);
  const env::Demonstration& demo = demos().episodes[1];
  Rng rng(4);
  const SampleSeed xi = SampleSeed::draw(rng, cfg);
  const DelaySpec spec{4, 2, 3};
  const PreferenceTriple p = make_pair(ref, cfg, demo, 4, spec, xi);

  const auto future = demo_context(demo, 7, 7, 1.0);
  const auto stale = demo_context(demo, 4, 4, 1.0);
  CHECK(p.chosen == flowpolicy::sample_chunk(ref, cfg, future, xi));
  CHECK(p.rejected == flowpolicy::sample_chunk(ref, cfg, stale, xi));
  CHECK(p.context == demo_context(demo, 4, 6, 1.0));
  CHECK(p.expert == expert_slice(demo, 4, 2, cfg.horizon));
  CHECK(p.contrast == contrast(p.chosen, p.rejected));
  CHECK(p.ref_checksum == diffnet::checksum(ref));
  CHECK(p.delays == spec);
  CHECK(p.contrast > 0.0);
}

TEST_CASE("a reference that ignores its context produces zero contrast") {
  const PolicyConfig cfg = small_config();
  auto ref = flowpolicy::make_velocity_net(cfg, 5);
  auto& first = ref.layers.front();
  for (std::size_t o = 0; o < first.out_width; ++o)
    for (std::size_t i = 0; i < flowpolicy::kContextWidth; ++i)
      first.weights[o * first.in_width + i] = 0.0;
  Rng rng(4);
  const SampleSeed xi = SampleSeed::draw(rng, cfg);
  const PreferenceTriple p = make_pair(ref, cfg, demos().episodes[1], 2, {4, 0, 4}, xi);
  CHECK(p.contrast == 0.0);
}

TEST_CASE("make_pair rejects a delay that runs past the episode") {
  const PolicyConfig cfg = small_config();
  const auto ref = flowpolicy::make_velocity_net(cfg, 5);
  const env::Demonstration& demo = demos().episodes[1];
  Rng rng(4);
  const SampleSeed xi = SampleSeed::draw(rng, cfg);
  const std::size_t last = demo.records.size() - 1;
  CHECK_THROWS_AS(make_pair(ref, cfg, demo, last - 1, {4, 0, 2}, xi), IndexError);
  CHECK_NOTHROW(make_pair(ref, cfg, demo, last - 2, {4, 0, 2}, xi));
  CHECK_THROWS_AS(make_pair(ref, cfg, demo, 0, {4, 0, 0}, xi), ContractViolation);
}

TEST_CASE("batched pairs equal single pairs") {
  const PolicyConfig cfg = small_config();
  const auto ref = flowpolicy::make_velocity_net(cfg, 6);
  Rng rng(8);
  std::vector<PairRequest> reqs;
  for (int i = 0; i < 30; ++i) reqs.push_back(sample_request(rng, demos(), DelayBounds{}, cfg));
  const auto batch = make_pairs(ref, cfg, demos(), reqs);
  REQUIRE(batch.size() == reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const auto& r = reqs[i];
    const PreferenceTriple one =
        make_pair(ref, cfg, demos().episodes[r.episode], r.t, r.delays, r.xi);
    CHECK(batch[i].episode == r.episode);
    CHECK(batch[i].t == r.t);
    CHECK(batch[i].context == one.context);
    CHECK(batch[i].expert == one.expert);
    for (std::size_t k = 0; k < cfg.chunk_size(); ++k) {
      CHECK(batch[i].chosen.values()[k] == doctest::Approx(one.chosen.values()[k]).epsilon(1e-12));
      CHECK(batch[i].rejected.values()[k] ==
            doctest::Approx(one.rejected.values()[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("sampled requests fit inside their episode") {
  const PolicyConfig cfg = small_config();
  Rng rng(10);
  for (int i = 0; i < 3000; ++i) {
    const PairRequest r = sample_request(rng, demos(), DelayBounds{}, cfg);
    const std::size_t len = demos().episodes[r.episode].records.size();
    CHECK(r.t + static_cast<std::size_t>(std::max(r.delays.d_ctx, r.delays.d_dpo)) < len);
    CHECK(r.xi.noise.size() == cfg.chunk_size());
  }
}

TEST_CASE("nearest-rank percentile") {
  const std::vector<double> v{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  CHECK(percentile(v, 0) == 1);
  CHECK(percentile(v, 10) == 1);
  CHECK(percentile(v, 11) == 2);
  CHECK(percentile(v, 50) == 5);
  CHECK(percentile(v, 100) == 10);
  CHECK_THROWS_AS(percentile({}, 50), DomainError);
  CHECK_THROWS_AS(percentile(v, 101), DomainError);
}

TEST_CASE("contrast filter flags low-contrast pairs and keeps every anchor") {
  std::vector<PreferenceTriple> t(10);
  for (int i = 0; i < 10; ++i) t[i].contrast = 0.1 * (i + 1);
  const ContrastSummary s = filter_by_contrast(t, 0.35);
  CHECK(s.total == 10);
  CHECK(s.sft_retained == 10);
  CHECK(s.dpo_excluded == 3);
  CHECK(s.mean == doctest::Approx(0.55));
  CHECK(s.p50 == doctest::Approx(0.5));
  for (int i = 0; i < 10; ++i) CHECK(t[i].dpo_excluded == (i < 3));
  CHECK(filter_by_contrast(t, 0.0).dpo_excluded == 0);
}

TEST_CASE("contrast pool is deterministic and written pools have one line per triple") {
  const PolicyConfig cfg = small_config();
  const auto ref = flowpolicy::make_velocity_net(cfg, 6);
  const auto a = contrast_pool(ref, cfg, demos(), DelayBounds{}, 300, 3);
  const auto b = contrast_pool(ref, cfg, demos(), DelayBounds{}, 300, 3);
  CHECK(a.size() == 300);
  CHECK(a == b);
  CHECK_FALSE(a == contrast_pool(ref, cfg, demos(), DelayBounds{}, 300, 4));

  Rng rng(8);
  std::vector<PairRequest> reqs;
  for (int i = 0; i < 7; ++i) reqs.push_back(sample_request(rng, demos(), DelayBounds{}, cfg));
  const auto triples = make_pairs(ref, cfg, demos(), reqs);
  const auto path = std::filesystem::temp_directory_path() / "deflect_pairs.txt";
  write_pair_pool(triples, path);
  std::ifstream in(path);
  int lines = 0;
  for (std::string line; std::getline(in, line);) {
    ++lines;
    CHECK(std::count(line.begin(), line.end(), '|') == 3);
  }
  CHECK(lines == 7);
}
