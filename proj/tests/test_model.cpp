#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "genemb/checkpoint.hpp"
#include "genemb/model.hpp"
#include "genemb/template.hpp"

using namespace genemb;

namespace {

ModelConfig tiny(std::int64_t seed = 1) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.max_seq = 64;
  c.seed = seed;
  return c;
}

std::vector<int> prompt(const std::string& text) { return render_prompt(Vocab::standard(), text); }

std::vector<double> row(const ad::Tensor& h, std::size_t r) {
  return {h.data().begin() + static_cast<std::ptrdiff_t>(r * h.cols()),
          h.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * h.cols())};
}

std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::max(std::sqrt(n), ad::kNormFloor);
  return v;
}

double norm(const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  return std::sqrt(n);
}

}  // namespace

TEST(Vocab, RoundTrip) {
  const auto& V = Vocab::standard();
  const std::string text = "k1:v7 k2:v3 ? k2";
  EXPECT_EQ(V.decode(V.encode(text)), "k1 : v7 k2 : v3 ? k2");
  EXPECT_EQ(V.encode(V.decode(V.encode(text))), V.encode(text));
}

TEST(Vocab, UnknownSymbolNamed) {
  try {
    Vocab::standard().encode("k1 zz9");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("zz9"), std::string::npos);
  }
}

TEST(Template, PromptLayout) {
  const auto& V = Vocab::standard();
  auto p = prompt("k3 ?");
  ASSERT_GE(p.size(), 5u);
  EXPECT_EQ(p[0], kBos);
  EXPECT_EQ(p[1], kUser);
  EXPECT_EQ(p[2], V.id("k3"));
  EXPECT_EQ(p[3], V.id("?"));
  EXPECT_EQ(p[4], kDiscEmb);
  EXPECT_EQ(p.back(), kAssistant);
  EXPECT_EQ(p, prompt("k3 ?"));
}

TEST(Template, EmptyTextRejected) { EXPECT_THROW(prompt(""), FormatError); }

TEST(Model, ShapesAndOverflow) {
  Transformer m(tiny());
  auto h = m.forward_hidden({kBos});
  EXPECT_EQ(h.rows(), 1u);
  EXPECT_EQ(h.cols(), 8u);
  EXPECT_THROW(m.forward_hidden(std::vector<int>(65, kBos)), ShapeError);
}

TEST(Model, HeadsMustDivideWidth) {
  auto c = tiny();
  c.heads = 3;
  EXPECT_THROW(Transformer{c}, ConfigError);
}

TEST(Model, PrefixInvarianceBitwise) {
  Transformer m(tiny(2));
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> toks(20);
    for (auto& t : toks) t = static_cast<int>(rng() % static_cast<std::uint64_t>(m.config().vocab_size));
    auto full = m.forward_hidden(toks);
    const std::size_t t = rng() % toks.size();
    auto part = m.forward_hidden(std::vector<int>(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(t + 1)));
    for (std::size_t i = 0; i <= t; ++i) EXPECT_EQ(row(part, i), row(full, i));
  }
}

TEST(Model, LaterEditsDoNotLeakBackwards) {
  Transformer m(tiny(3));
  std::vector<int> a{kBos, 20, 21, 22, 23, 24};
  auto b = a;
  b[4] = 40;
  auto ha = m.forward_hidden(a), hb = m.forward_hidden(b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(row(ha, i), row(hb, i));
  EXPECT_NE(row(ha, 4), row(hb, 4));
}

TEST(Model, PackingMatchesSeparatePasses) {
  Transformer m(tiny(4));
  std::vector<int> a{kBos, 20, 21}, b{kBos, 30, 31, 32, 33};
  auto packed = m.forward_packed({a, b});
  auto hb = m.forward_hidden(b);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(row(packed, a.size() + i), row(hb, i));
}

TEST(Embedding, DiscIsNormalizedHiddenRow) {
  Transformer m(tiny());
  auto p = prompt("k1:v7 k2:v3 ? k2");
  auto e = disc_embedding(m, p);
  EXPECT_NEAR(norm(e), 1.0, 1e-9);
  std::size_t pos = 0;
  while (p[pos] != kDiscEmb) ++pos;
  auto expect = normalized(row(m.forward_hidden(p), pos));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e[i], expect[i], 1e-15);
}

TEST(Embedding, DiscRequiresExactlyOneMarker) {
  Transformer m(tiny());
  auto p = prompt("k1 ?");
  auto twice = p;
  twice.insert(twice.begin() + 2, kDiscEmb);
  EXPECT_THROW(disc_embedding(m, twice), FormatError);
  p.erase(std::find(p.begin(), p.end(), kDiscEmb));
  EXPECT_THROW(disc_embedding(m, p), FormatError);
}

TEST(Embedding, GenAtLastMarker) {
  Transformer m(tiny());
  auto p = prompt("k1 ?");
  auto r = render_response(Vocab::standard(), "k1 : v2", "v2");
  auto e = gen_embedding(m, p, r);
  EXPECT_NEAR(norm(e), 1.0, 1e-9);
  auto expect = normalized(row(m.forward_hidden(concat(p, r)), p.size() + r.size() - 1));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e[i], expect[i], 1e-15);
  EXPECT_THROW(gen_embedding(m, p, {kThink, kThinkEnd}), FormatError);
}

TEST(Embedding, GenAsFirstToken) {
  Transformer m(tiny());
  auto p = prompt("k1 ?");
  auto e = gen_embedding(m, p, {kGenEmb});
  auto expect = normalized(row(m.forward_hidden(concat(p, {kGenEmb})), p.size()));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e[i], expect[i], 1e-15);
}

TEST(Embedding, DualExtractionMatchesPromptAloneBitwise) {
  Transformer m(tiny(6));
  auto p = prompt("c1 s2 ?");
  auto g = generate(m, p, {.temperature = 1.0, .seed = 11, .max_new = 12});
  auto pair = embed_pair(m, p, g);
  EXPECT_EQ(pair.disc, disc_embedding(m, p));
  EXPECT_EQ(pair.gen.has_value(), std::find(g.tokens.begin(), g.tokens.end(), kGenEmb) != g.tokens.end());
}

TEST(Generate, GreedyDeterministicAndSeededSampling) {
  Transformer m(tiny(7));
  auto p = prompt("n1 + n2 ?");
  auto a = generate(m, p, {.temperature = 0.0, .max_new = 10});
  auto b = generate(m, p, {.temperature = 0.0, .max_new = 10});
  EXPECT_EQ(a.tokens, b.tokens);
  auto s1 = generate(m, p, {.temperature = 1.0, .seed = 3, .max_new = 10});
  auto s2 = generate(m, p, {.temperature = 1.0, .seed = 3, .max_new = 10});
  EXPECT_EQ(s1.tokens, s2.tokens);
  EXPECT_EQ(s1.logprobs, s2.logprobs);
  EXPECT_LE(s1.tokens.size(), 10u);
}

TEST(Generate, StopsAtGenEmbOrEos) {
  Transformer m(tiny(8));
  auto p = prompt("k2 ?");
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto g = generate(m, p, {.temperature = 2.0, .seed = seed, .max_new = 40});
    for (std::size_t i = 0; i + 1 < g.tokens.size(); ++i) {
      EXPECT_NE(g.tokens[i], kGenEmb);
      EXPECT_NE(g.tokens[i], kEos);
    }
  }
}

TEST(Generate, BatchMatchesSingle) {
  Transformer m(tiny(9));
  std::vector<std::vector<int>> ps{prompt("k2 ?"), prompt("c1 s1 ?"), prompt("n3 + n4 ?")};
  auto batch = generate_batch(m, ps, {5, 6, 7}, 1.0, 12);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto one = generate(m, ps[i], {.temperature = 1.0, .seed = 5 + i, .max_new = 12});
    EXPECT_EQ(batch[i].tokens, one.tokens);
    EXPECT_EQ(batch[i].logprobs, one.logprobs);
  }
}

// Teacher forcing recomputes the generation-time log-probabilities.
TEST(Generate, TeacherForcedLogprobsMatch) {
  Transformer m(tiny(10));
  for (double temp : {0.0, 1.0}) {
    auto p = prompt("k5:v1 ? k5");
    auto g = generate(m, p, {.temperature = temp, .seed = 4, .max_new = 16});
    ad::NoGradGuard guard;
    auto lp = response_logprobs(m, {p}, {g.tokens});
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < g.tokens.size(); ++i) {
      EXPECT_NEAR(lp.data()[i], g.logprobs[i], 1e-9);
      a += lp.data()[i];
      b += g.logprobs[i];
    }
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(Checkpoint, RoundTripBitwise) {
  Transformer m(tiny(11));
  auto buf = serialize_checkpoint(m);
  auto back = deserialize_checkpoint(buf);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(serialize_checkpoint(back), buf);
  auto p = prompt("k1 ?");
  EXPECT_EQ(disc_embedding(back, p), disc_embedding(m, p));
}

TEST(Checkpoint, RejectsCorruption) {
  Transformer m(tiny(12));
  auto buf = serialize_checkpoint(m);
  auto bad_magic = buf;
  bad_magic[3] = '2';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), DataError);
  EXPECT_THROW(deserialize_checkpoint(buf.substr(0, buf.size() - 3)), DataError);
  EXPECT_THROW(deserialize_checkpoint(buf + "x"), DataError);
  EXPECT_THROW(deserialize_checkpoint(""), DataError);
}

TEST(Checkpoint, FileRoundTrip) {
  Transformer m(tiny(13));
  const std::string path = ::testing::TempDir() + "/genemb_ckpt_test.bin";
  save_checkpoint(m, path);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), serialize_checkpoint(m));
  EXPECT_THROW(load_checkpoint(path + ".missing"), DataError);
}

TEST(Model, CloneIsIndependent) {
  Transformer m(tiny(14));
  auto c = m.clone();
  c.param("w_out").mutable_data()[0] += 1.0;
  EXPECT_NE(c.param("w_out").data()[0], m.param("w_out").data()[0]);
}
