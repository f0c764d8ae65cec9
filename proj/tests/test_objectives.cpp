#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "genemb/grad_check.hpp"
#include "genemb/objectives.hpp"
#include "test_util.hpp"

using namespace genemb;
using ad::Tensor;
using genemb::testing::random_matrix;
using genemb::testing::unit_rows;

namespace {

ModelConfig micro(std::int64_t seed = 3) {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 4;
  c.heads = 2;
  c.d_ff = 8;
  c.max_seq = 48;
  c.seed = seed;
  return c;
}

std::vector<PairRecord> micro_pairs(std::size_t n, std::uint64_t seed = 0) {
  TaskSpec s;
  s.kind = TaskKind::kv_lookup;
  s.map_size = 2;
  auto ps = synth_generate(s, 40, 8, seed);
  std::vector<PairRecord> out;
  std::set<std::string> targets;
  for (auto& p : ps)
    if (out.size() < n && targets.insert(p.target.text).second) out.push_back(p);
  return out;
}

// Independent CE accumulation: one forward per sequence, manual log-softmax.
double reference_nt(const Transformer& m, const PairBatch& b) {
  ad::NoGradGuard g;
  double total = 0.0;
  auto one = [&](const std::vector<int>& prompt, const std::vector<int>& resp) {
    auto seq = concat(prompt, resp);
    auto lg = m.logits(m.forward_hidden(seq));
    const std::size_t V = lg.cols();
    for (std::size_t j = 0; j < resp.size(); ++j) {
      const std::size_t r = prompt.size() - 1 + j;
      double mx = -1e300;
      for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, lg.at(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < V; ++c) z += std::exp(lg.at(r, c) - mx);
      total += mx + std::log(z) - lg.at(r, static_cast<std::size_t>(resp[j]));
    }
  };
  for (std::size_t i = 0; i < b.size(); ++i) {
    one(b.query_prompts[i], b.query_responses[i]);
    one(b.target_prompts[i], b.target_responses[i]);
  }
  return total / static_cast<double>(b.size());
}

}  // namespace

TEST(InfoNce, SingleElementIsZero) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(info_nce(unit_rows(rng, 1, 5), unit_rows(rng, 1, 5), 0.02).item(), 0.0);
}

TEST(InfoNce, UniformSimilaritiesGiveLogN) {
  for (std::size_t n : {2u, 3u, 7u, 16u}) {
    std::vector<double> v(n * 4, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * 4] = 1.0;
    auto e = Tensor::matrix(n, 4, v);
    for (double tau : {0.02, 0.5, 3.0}) EXPECT_NEAR(info_nce(e, e, tau).item(), std::log(double(n)), 1e-9);
  }
}

TEST(InfoNce, TinyLossRepresentable) {
  auto e = Tensor::matrix({{1, 0}, {0, 1}});
  const double expect = std::log1p(std::exp(-50.0));
  EXPECT_NEAR(info_nce(e, e, 0.02).item() / expect, 1.0, 1e-9);
}

TEST(InfoNce, RejectsNonUnitAndBadTau) {
  auto ok = Tensor::matrix({{1, 0}});
  auto bad = Tensor::matrix({{1.01, 0}});
  EXPECT_THROW(info_nce(bad, ok, 0.02), NumericError);
  EXPECT_THROW(info_nce(ok, ok, 0.0), ConfigError);
  EXPECT_THROW(info_nce(ok, Tensor::matrix({{1, 0}, {0, 1}}), 0.02), ShapeError);
}

TEST(InfoNce, PermutationInvariant) {
  std::mt19937_64 rng(2);
  auto a = unit_rows(rng, 6, 5), c = unit_rows(rng, 6, 5);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  auto pa = ad::gather_rows(a, perm), pc = ad::gather_rows(c, perm);
  EXPECT_NEAR(info_nce(a, c, 0.1).item(), info_nce(pa, pc, 0.1).item(), 1e-12);
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto cands = unit_rows(rng, 4, 8);
    auto x = random_matrix(rng, 4, 8);
    EXPECT_LT(ad::grad_check([&](const Tensor& t) { return info_nce(ad::l2_normalize_rows(t), cands, 0.02); }, x), 1e-4);
    EXPECT_LT(ad::grad_check([&](const Tensor& t) { return info_nce(cands, ad::l2_normalize_rows(t), 0.02); }, x), 1e-4);
  }
}

TEST(NtLoss, UniformLogitsGiveLengthTimesLogV) {
  Transformer m(micro());
  for (double& w : m.param("w_out").mutable_data()) w = 0.0;
  auto b = PairBatch::from(micro_pairs(3), 0.02);
  double expect = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i)
    expect += static_cast<double>(b.query_responses[i].size() + b.target_responses[i].size());
  expect *= std::log(static_cast<double>(m.config().vocab_size)) / static_cast<double>(b.size());
  EXPECT_NEAR(nt_loss(m, b).item(), expect, 1e-9);
}

TEST(NtLoss, MatchesPerTokenAccumulation) {
  Transformer m(micro(4));
  auto b = PairBatch::from(micro_pairs(2), 0.02);
  EXPECT_NEAR(nt_loss(m, b).item(), reference_nt(m, b), 1e-10);
}

TEST(SftLoss, BreakdownSumsAndMatchesSeparateTerms) {
  Transformer m(micro(5));
  auto b = PairBatch::from(micro_pairs(3), 0.02);
  auto l = sft_loss(m, b);
  EXPECT_NEAR(l.parts.total, l.parts.dctr + l.parts.gctr + l.parts.ce, 1e-12);
  EXPECT_NEAR(l.parts.dctr, dctr_loss(m, b).item(), 1e-12);
  EXPECT_NEAR(l.parts.gctr, gctr_loss(m, b).item(), 1e-12);
  EXPECT_NEAR(l.parts.ce, nt_loss(m, b).item(), 1e-12);
}

TEST(SftLoss, GradientMatchesFiniteDifferences) {
  Transformer m(micro(6));
  auto b = PairBatch::from(micro_pairs(2), 0.02);
  for (const auto& p : m.params()) {
    auto t = p.tensor;
    const double err = ad::grad_check_param([&] { return sft_loss(m, b).total; }, t, {.max_coords = 12, .seed = 1});
    EXPECT_LT(err, 1e-3) << p.name;
  }
}

TEST(SftLoss, GradientIsSumOfComponentGradients) {
  Transformer m(micro(7));
  auto b = PairBatch::from(micro_pairs(3), 0.02);
  auto grad_of = [&](SftTerms terms) {
    for (auto& p : m.params()) {
      auto t = p.tensor;
      t.zero_grad();
    }
    ad::backward(sft_loss(m, b, terms).total);
    std::vector<double> g;
    for (auto& p : m.params()) {
      if (p.tensor.has_grad())
        g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
      else
        g.insert(g.end(), p.tensor.numel(), 0.0);
    }
    return g;
  };
  auto all = grad_of({});
  auto d = grad_of({true, false, false});
  auto g = grad_of({false, true, false});
  auto c = grad_of({false, false, true});
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_NEAR(all[i], d[i] + g[i] + c[i], 1e-10 * std::max(1.0, std::abs(all[i])));
}

// The discriminative-only objective never sees response tokens.
TEST(SftLoss, DctrOnlyLeavesResponseParametersUntouched) {
  Transformer m(micro(8));
  auto b = PairBatch::from(micro_pairs(3), 0.02);
  auto l = sft_loss(m, b, SftTerms::dctr_only());
  EXPECT_EQ(l.parts.gctr, 0.0);
  EXPECT_EQ(l.parts.ce, 0.0);
  ad::backward(l.total);
  auto& wout = m.param("w_out");
  if (wout.has_grad()) {
    for (double g : wout.grad()) EXPECT_EQ(g, 0.0);
  }
  auto& emb = m.param("tok_emb");
  ASSERT_TRUE(emb.has_grad());
  const std::size_t d = emb.cols();
  for (int tok : {kThink, kThinkEnd, kAnswer, kGenEmb})
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(emb.grad()[static_cast<std::size_t>(tok) * d + j], 0.0);
}

TEST(PairBatch, RejectsMissingAnnotation) {
  auto ps = micro_pairs(2);
  ps[1].target.cot.reset();
  EXPECT_THROW(PairBatch::from(ps, 0.02), FormatError);
  ps = micro_pairs(2);
  ps[0].query.cot->think += " <answer> v1";
  EXPECT_THROW(PairBatch::from(ps, 0.02), FormatError);
}
