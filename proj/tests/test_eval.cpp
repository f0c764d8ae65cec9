#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <random>

#include "genemb/config.hpp"
#include "genemb/eval.hpp"
#include "oracles.hpp"

using namespace genemb;
using namespace genemb::testing;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

RetrievalInstance inst(std::vector<double> disc, std::vector<double> gen, std::set<std::size_t> pos,
                       std::string task = "t") {
  RetrievalInstance r;
  r.query_id = "q";
  r.task = std::move(task);
  r.pool_size = disc.size();
  r.positives = std::move(pos);
  r.scores[Mode::disc] = std::move(disc);
  r.scores[Mode::gen] = std::move(gen);
  return r;
}

}  // namespace

TEST(Metrics, HitAndNdcgExamples) {
  auto r = inst({0.9, 0.5, 0.1}, {0.2, 0.8, 0.1}, {1});
  EXPECT_EQ(hit_at_1(r, Mode::disc), 0);
  EXPECT_EQ(hit_at_1(r, Mode::gen), 1);
  EXPECT_NEAR(ndcg_at_k(r, Mode::disc), 1.0 / std::log2(3.0), 1e-15);
  EXPECT_EQ(ndcg_at_k(r, Mode::gen), 1.0);
}

TEST(Metrics, TiesGoToLowerIndex) {
  auto r = inst({0.5, 0.5, 0.5}, {0.1, 0.7, 0.7}, {2});
  EXPECT_EQ(hit_at_1(r, Mode::disc), 0);
  EXPECT_EQ(hit_at_1(r, Mode::gen), 0);
  EXPECT_NEAR(ndcg_at_k(r, Mode::disc), 0.5, 1e-15);  // rank 3
  r.positives = {0};
  EXPECT_EQ(hit_at_1(r, Mode::disc), 1);
}

TEST(Metrics, MissingEmbeddingNeverRetrieved) {
  auto r = inst({0.3, 0.2}, {kNegInf, kNegInf}, {0});
  EXPECT_EQ(hit_at_1(r, Mode::gen), 0);
  EXPECT_EQ(ndcg_at_k(r, Mode::gen), 0.0);
  EXPECT_EQ(hit_at_1(r, Mode::disc), 1);
}

TEST(Metrics, Rejections) {
  auto r = inst({0.3, 0.2}, {0.1}, {0});
  EXPECT_THROW(hit_at_1(r, Mode::gen), DataError);
  r.scores.erase(Mode::gen);
  EXPECT_THROW(ndcg_at_k(r, Mode::gen), DataError);
  EXPECT_THROW(ndcg_at_k(r, Mode::disc, 0), ConfigError);
  r.positives.clear();
  EXPECT_THROW(ndcg_at_k(r, Mode::disc), DataError);
}

TEST(Metrics, AgreeWithSortOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> coarse(0, 4);  // coarse scores force ties
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng() % 12;
    std::vector<double> s(n);
    for (auto& x : s) x = (rng() % 10 == 0) ? kNegInf : coarse(rng) / 4.0;
    std::set<std::size_t> pos;
    const std::size_t np = 1 + rng() % std::min<std::size_t>(n, 4);
    while (pos.size() < np) pos.insert(rng() % n);
    auto r = inst(s, s, pos);
    std::size_t top = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (rank_of(s, i) == 0) top = i;
    EXPECT_EQ(hit_at_1(r, Mode::disc), (pos.count(top) && s[top] != kNegInf) ? 1 : 0);
    for (std::size_t k : {1u, 3u, 5u, 10u}) EXPECT_NEAR(ndcg_at_k(r, Mode::disc, k), ndcg_oracle(s, pos, k), 1e-12);
    const double v = ndcg_at_k(r, Mode::disc);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Oracle, DominatesBothModes) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<RetrievalInstance> all;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> a(8), b(8);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = n(rng);
    auto r = inst(a, b, {rng() % 8}, i % 3 ? "a" : "b");
    for (Metric m : {Metric::hit1, Metric::ndcg5}) {
      EXPECT_GE(oracle_merge(r, m), metric_value(r, Mode::disc, m));
      EXPECT_GE(oracle_merge(r, m), metric_value(r, Mode::gen, m));
    }
    all.push_back(r);
  }
  auto rep = summarize(all);
  for (auto* t : {&rep.tasks["a"], &rep.tasks["b"], &rep.aggregate}) {
    EXPECT_GE(t->oracle_hit1, t->task_select_hit1);
    EXPECT_GE(t->task_select_hit1, std::max(t->hit1_disc, t->hit1_gen) - 1e-15);
    EXPECT_GE(t->oracle_ndcg5, std::max(t->ndcg5_disc, t->ndcg5_gen) - 1e-15);
  }
}

TEST(Summarize, AggregateIsUnweightedMeanOverTasks) {
  std::vector<RetrievalInstance> v;
  v.push_back(inst({1, 0}, {1, 0}, {0}, "a"));
  v.push_back(inst({1, 0}, {0, 1}, {0}, "b"));
  v.push_back(inst({0, 1}, {0, 1}, {0}, "b"));
  v.push_back(inst({0, 1}, {1, 0}, {0}, "b"));
  auto rep = summarize(v);
  EXPECT_EQ(rep.tasks["a"].hit1_disc, 1.0);
  EXPECT_NEAR(rep.tasks["b"].hit1_disc, 1.0 / 3, 1e-15);
  EXPECT_NEAR(rep.aggregate.hit1_disc, (1.0 + 1.0 / 3) / 2, 1e-15);
  EXPECT_EQ(rep.aggregate.instances, 4u);
  EXPECT_NEAR(rep.tasks["b"].oracle_hit1, 2.0 / 3, 1e-15);
}

TEST(Report, JsonRoundTripAndCsv) {
  std::vector<RetrievalInstance> v{inst({1, 0, 0.5}, {0.2, 0.1, 0.9}, {0, 2}, "kv_lookup")};
  auto rep = summarize(v);
  rep.passk[1] = 0.25;
  rep.passk[8] = 0.75;
  rep.meta["seed"] = 3;
  auto back = report_from_json(nlohmann::json::parse(to_json(rep).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(rep).dump());
  auto csv = report_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "task,instances,hit1_disc,hit1_gen,ndcg5_disc,ndcg5_gen,oracle_hit1,oracle_ndcg5,task_select_hit1");
  EXPECT_NE(csv.find("\nkv_lookup,1,"), std::string::npos);
  EXPECT_NE(csv.find("\naggregate,1,"), std::string::npos);
}

TEST(PassAtK, Examples) {
  EXPECT_EQ(pass_at_k(10, 0, 5), 0.0);
  EXPECT_EQ(pass_at_k(10, 10, 1), 1.0);
  EXPECT_EQ(pass_at_k(10, 6, 5), 1.0);
  EXPECT_NEAR(pass_at_k(4, 1, 1), 0.25, 1e-15);
  EXPECT_NEAR(pass_at_k(4, 1, 2), 0.5, 1e-15);
  EXPECT_THROW(pass_at_k(4, 5, 1), ConfigError);
  EXPECT_THROW(pass_at_k(4, 1, 0), ConfigError);
  EXPECT_THROW(pass_at_k(4, 1, 5), ConfigError);
}

TEST(PassAtK, MatchesEnumerationAndBinomialForm) {
  for (int n = 1; n <= 8; ++n)
    for (int c = 0; c <= n; ++c)
      for (int k = 1; k <= n; ++k) {
        const double p = pass_at_k(n, c, k);
        EXPECT_NEAR(p, passk_enumerate(n, c, k), 1e-12) << n << " " << c << " " << k;
        EXPECT_NEAR(p, 1.0 - binom(n - c, k) / binom(n, k), 1e-12);
      }
}

TEST(PassAtK, MonotoneInKAndC) {
  for (int n = 1; n <= 40; ++n)
    for (int c = 0; c <= n; ++c)
      for (int k = 1; k <= n; ++k) {
        const double p = pass_at_k(n, c, k);
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 1.0);
        if (k > 1) {
          ASSERT_GE(p, pass_at_k(n, c, k - 1) - 1e-15);
        }
        if (c > 0) {
          ASSERT_GE(p, pass_at_k(n, c - 1, k) - 1e-15);
        }
      }
}

TEST(PassAtK, MonteCarloAgreement) {
  std::mt19937_64 rng(13);
  const int n = 20, c = 3, k = 4, trials = 200000;
  std::vector<int> items(n);
  std::iota(items.begin(), items.end(), 0);
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    std::shuffle(items.begin(), items.end(), rng);
    bool any = false;
    for (int j = 0; j < k; ++j) any |= items[j] < c;
    hits += any;
  }
  const double p = pass_at_k(n, c, k);
  const double se = std::sqrt(p * (1 - p) / trials);
  EXPECT_NEAR(static_cast<double>(hits) / trials, p, 5 * se);
}

TEST(Config, DefaultsValidateAndRoundTrip) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  auto j = to_json(c);
  auto back = config_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(back).dump(), j.dump());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"sft": {"lr": 1e-3, "lrr": 2}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"colour": 1})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"rl": {"G": 1}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"x({"rl": {"reward_variant": "threshold(2)"}})x")), ConfigError);
}

TEST(Config, SeedFromEnvironment) {
  const std::string path = ::testing::TempDir() + "/genemb_cfg_test.json";
  std::ofstream(path) << R"({"seed": 5})";
  ::unsetenv("GENEMB_SEED");
  EXPECT_EQ(load_config(path).seed, 5u);
  ::setenv("GENEMB_SEED", "77", 1);
  EXPECT_EQ(load_config(path).seed, 77u);
  ::setenv("GENEMB_SEED", "7x", 1);
  EXPECT_THROW(load_config(path), ConfigError);
  ::unsetenv("GENEMB_SEED");
  EXPECT_THROW(load_config(path + ".missing"), ConfigError);
}
