#pragma once

// Decoder-only transformer (pre-norm, learned absolute positions, exact
// GELU) that yields a discriminative embedding at the prompt's <disc_emb>
// token and a generative embedding at the generated <gen_emb> token.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "genemb/error.hpp"
#include "genemb/optim.hpp"
#include "genemb/template.hpp"
#include "genemb/tensor.hpp"
#include "genemb/vocab.hpp"

namespace genemb {

struct ModelConfig {
  int layers = 2;
  int d_model = 64;
  int heads = 4;
  int d_ff = 256;
  int max_seq = 256;
  int vocab_size = Vocab::standard().size();
  std::int64_t seed = 0;

  void validate() const {
    if (layers < 1 || d_model < 1 || heads < 1 || d_ff < 1 || max_seq < 1 || vocab_size < kNumSpecials)
      throw ConfigError("model: all extents must be positive");
    if (d_model % heads != 0)
      throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by heads " +
                        std::to_string(heads));
  }

  bool operator==(const ModelConfig&) const = default;
};

struct EmbeddingPair {
  std::vector<double> disc;
  std::optional<std::vector<double>> gen;
  std::vector<int> response_tokens;
  std::vector<double> response_logprobs;
};

struct Generation {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // log-softmax at temperature 1 of each chosen token
};

// A sequence slot for packed evaluation: `tokens` plus the positions whose
// final hidden states are wanted.
struct PackedBatch {
  std::vector<std::vector<int>> sequences;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (auto& s : sequences) n += s.size();
    return n;
  }
  std::vector<std::size_t> offsets() const {
    std::vector<std::size_t> off;
    std::size_t acc = 0;
    for (auto& s : sequences) {
      off.push_back(acc);
      acc += s.size();
    }
    return off;
  }
};

class Transformer {
 public:
  struct Layer {
    ad::Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2;
  };

  explicit Transformer(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(static_cast<std::uint64_t>(cfg_.seed));
    std::normal_distribution<double> normal(0.0, 0.02);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t ff = static_cast<std::size_t>(cfg_.d_ff);
    auto randn = [&](const std::string& name, std::size_t r, std::size_t c) {
      std::vector<double> v(r * c);
      for (auto& x : v) x = normal(rng);
      auto t = ad::Tensor::matrix(r, c, std::move(v), true);
      params_.push_back({name, t, true});
      return t;
    };
    auto fill = [&](const std::string& name, std::size_t c, double value) {
      auto t = ad::Tensor::matrix(1, c, std::vector<double>(c, value), true);
      params_.push_back({name, t, false});
      return t;
    };
    tok_emb_ = randn("tok_emb", static_cast<std::size_t>(cfg_.vocab_size), d);
    pos_emb_ = randn("pos_emb", static_cast<std::size_t>(cfg_.max_seq), d);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer L;
      L.ln1_g = fill(p + "ln1.g", d, 1.0);
      L.ln1_b = fill(p + "ln1.b", d, 0.0);
      L.wq = randn(p + "wq", d, d);
      L.wk = randn(p + "wk", d, d);
      L.wv = randn(p + "wv", d, d);
      L.wo = randn(p + "wo", d, d);
      L.ln2_g = fill(p + "ln2.g", d, 1.0);
      L.ln2_b = fill(p + "ln2.b", d, 0.0);
      L.w1 = randn(p + "w1", d, ff);
      L.w2 = randn(p + "w2", ff, d);
      layers_.push_back(L);
    }
    lnf_g_ = fill("ln_f.g", d, 1.0);
    lnf_b_ = fill("ln_f.b", d, 0.0);
    w_out_ = randn("w_out", d, static_cast<std::size_t>(cfg_.vocab_size));
  }

  // Deep copy with independent parameter storage.
  Transformer clone() const {
    Transformer t(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto dst = t.params_[i].tensor.mutable_data();
      auto src = params_[i].tensor.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
    return t;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ad::NamedParam>& params() const { return params_; }

  ad::Tensor& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw Error("model: no parameter named '" + name + "'");
  }

  // Final-layer hidden states of several sequences packed row-wise.
  ad::Tensor forward_packed(const std::vector<std::vector<int>>& seqs) const {
    std::vector<int> ids, pos;
    std::vector<std::size_t> segs;
    for (auto& s : seqs) {
      if (s.empty()) throw ShapeError("forward: empty sequence");
      if (s.size() > static_cast<std::size_t>(cfg_.max_seq))
        throw ShapeError("forward: sequence of " + std::to_string(s.size()) + " tokens exceeds max_seq " +
                         std::to_string(cfg_.max_seq));
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] < 0 || s[i] >= cfg_.vocab_size) throw ShapeError("forward: token id out of vocabulary");
        ids.push_back(s[i]);
        pos.push_back(static_cast<int>(i));
      }
      segs.push_back(s.size());
    }
    if (segs.empty()) throw ShapeError("forward: no sequences");
    ad::Tensor x = ad::add(ad::embed_lookup(tok_emb_, ids), ad::embed_lookup(pos_emb_, pos));
    for (const auto& L : layers_) {
      ad::Tensor h = ad::layer_norm(x, L.ln1_g, L.ln1_b);
      ad::Tensor a = ad::causal_attention(ad::matmul(h, L.wq), ad::matmul(h, L.wk), ad::matmul(h, L.wv),
                                          static_cast<std::size_t>(cfg_.heads), segs);
      x = ad::add(x, ad::matmul(a, L.wo));
      ad::Tensor h2 = ad::layer_norm(x, L.ln2_g, L.ln2_b);
      x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(h2, L.w1)), L.w2));
    }
    return ad::layer_norm(x, lnf_g_, lnf_b_);
  }

  ad::Tensor forward_hidden(const std::vector<int>& tokens) const { return forward_packed({tokens}); }

  ad::Tensor logits(const ad::Tensor& hidden) const { return ad::matmul(hidden, w_out_); }

 private:
  ModelConfig cfg_;
  std::vector<ad::NamedParam> params_;
  ad::Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, w_out_;
  std::vector<Layer> layers_;
};

namespace detail {

inline std::vector<double> unit_row(const ad::Tensor& h, std::size_t row) {
  ad::NoGradGuard guard;
  auto t = ad::l2_normalize_rows(ad::slice_rows(h, row, row + 1));
  return {t.data().begin(), t.data().end()};
}

inline std::size_t single_position(const std::vector<int>& toks, int id, const char* what) {
  std::size_t count = 0, pos = 0;
  for (std::size_t i = 0; i < toks.size(); ++i)
    if (toks[i] == id) {
      ++count;
      pos = i;
    }
  if (count != 1)
    throw FormatError(std::string(what) + ": expected exactly one token, found " + std::to_string(count));
  return pos;
}

inline std::optional<std::size_t> last_position(const std::vector<int>& toks, int id) {
  for (std::size_t i = toks.size(); i-- > 0;)
    if (toks[i] == id) return i;
  return std::nullopt;
}

inline std::vector<double> log_softmax_row(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - m);
  const double lz = m + std::log(z);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lz;
  return out;
}

}  // namespace detail

inline std::vector<double> disc_embedding(const Transformer& model, const std::vector<int>& prompt) {
  const std::size_t pos = detail::single_position(prompt, kDiscEmb, "disc_embedding: <disc_emb>");
  ad::NoGradGuard guard;
  return detail::unit_row(model.forward_hidden(prompt), pos);
}

inline std::vector<int> concat(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Embedding at the last <gen_emb> of prompt||response; FormatError when the
// response has none.
inline std::vector<double> gen_embedding(const Transformer& model, const std::vector<int>& prompt,
                                         const std::vector<int>& response) {
  auto last = detail::last_position(response, kGenEmb);
  if (!last) throw FormatError("gen_embedding: response contains no <gen_emb>");
  ad::NoGradGuard guard;
  return detail::unit_row(model.forward_hidden(concat(prompt, response)), prompt.size() + *last);
}

// Both embeddings from a single pass over prompt||response.
inline EmbeddingPair embed_pair(const Transformer& model, const std::vector<int>& prompt, const Generation& gen) {
  const std::size_t dpos = detail::single_position(prompt, kDiscEmb, "embed_pair: <disc_emb>");
  ad::NoGradGuard guard;
  auto seq = concat(prompt, gen.tokens);
  ad::Tensor h = model.forward_hidden(seq);
  EmbeddingPair out;
  out.disc = detail::unit_row(h, dpos);
  if (auto last = detail::last_position(gen.tokens, kGenEmb)) out.gen = detail::unit_row(h, prompt.size() + *last);
  out.response_tokens = gen.tokens;
  out.response_logprobs = gen.logprobs;
  return out;
}

// Packed, gradient-free embedding extraction: rows[i] is the unit hidden state
// of sequences[i] at positions[i].
inline std::vector<std::vector<double>> embed_rows(const Transformer& model, const std::vector<std::vector<int>>& seqs,
                                                   const std::vector<std::size_t>& positions) {
  if (seqs.size() != positions.size()) throw ShapeError("embed_rows: sequence/position count mismatch");
  std::vector<std::vector<double>> out;
  if (seqs.empty()) return out;
  ad::NoGradGuard guard;
  ad::Tensor h = model.forward_packed(seqs);
  std::size_t off = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (positions[i] >= seqs[i].size()) throw ShapeError("embed_rows: position outside sequence");
    out.push_back(detail::unit_row(h, off + positions[i]));
    off += seqs[i].size();
  }
  return out;
}

struct GenerateOptions {
  double temperature = 0.0;  // 0 selects greedy decoding
  std::uint64_t seed = 0;
  int max_new = 64;
};

// Decodes all prompts together, one packed forward per step. Stops a
// sequence at EOS, at <gen_emb>, after max_new tokens or at max_seq. Each
// prompt draws from its own RNG seeded with seeds[i], so results do not
// depend on batch composition.
inline std::vector<Generation> generate_batch(const Transformer& model, const std::vector<std::vector<int>>& prompts,
                                              const std::vector<std::uint64_t>& seeds, double temperature,
                                              int max_new) {
  if (max_new < 1) throw ShapeError("generate: max_new must be at least 1");
  if (seeds.size() != prompts.size()) throw ShapeError("generate: one seed per prompt required");
  if (temperature < 0.0) throw ShapeError("generate: negative temperature");
  ad::NoGradGuard guard;
  const std::size_t n = prompts.size();
  const std::size_t V = static_cast<std::size_t>(model.config().vocab_size);
  const std::size_t cap = static_cast<std::size_t>(model.config().max_seq);
  std::vector<Generation> out(n);
  std::vector<std::vector<int>> seqs(prompts);
  std::vector<std::mt19937_64> rngs;
  for (auto s : seeds) rngs.emplace_back(s);
  std::vector<bool> done(n, false);
  for (std::size_t i = 0; i < n; ++i)
    if (seqs[i].size() >= cap) done[i] = true;

  for (int step = 0; step < max_new; ++step) {
    std::vector<std::size_t> active;
    std::vector<std::vector<int>> batch;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i]) {
        active.push_back(i);
        batch.push_back(seqs[i]);
      }
    if (active.empty()) break;
    ad::Tensor h = model.forward_packed(batch);
    std::vector<std::size_t> last;
    std::size_t off = 0;
    for (auto& s : batch) {
      off += s.size();
      last.push_back(off - 1);
    }
    ad::Tensor lg = model.logits(ad::gather_rows(h, last));
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      const double* row = lg.data().data() + a * V;
      auto lp = detail::log_softmax_row(row, V);
      int tok = 0;
      if (temperature == 0.0) {
        tok = static_cast<int>(std::max_element(row, row + V) - row);
      } else {
        std::vector<double> p(V);
        double m = row[0];
        for (std::size_t j = 1; j < V; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += (p[j] = std::exp((row[j] - m) / temperature));
        std::uniform_real_distribution<double> unif(0.0, z);
        double u = unif(rngs[i]), acc = 0.0;
        tok = static_cast<int>(V - 1);
        for (std::size_t j = 0; j < V; ++j) {
          acc += p[j];
          if (u < acc) {
            tok = static_cast<int>(j);
            break;
          }
        }
      }
      out[i].tokens.push_back(tok);
      out[i].logprobs.push_back(lp[static_cast<std::size_t>(tok)]);
      seqs[i].push_back(tok);
      if (tok == kEos || tok == kGenEmb || seqs[i].size() >= cap) done[i] = true;
    }
  }
  return out;
}

inline Generation generate(const Transformer& model, const std::vector<int>& prompt, const GenerateOptions& opt) {
  return generate_batch(model, {prompt}, {opt.seed}, opt.temperature, opt.max_new).front();
}

// Teacher-forced log-probabilities of each response token given its prompt,
// for several (prompt, response) pairs packed together. Returns a
// [sum(len(response)) x 1] column on the graph.
inline ad::Tensor response_logprobs(const Transformer& model, const std::vector<std::vector<int>>& prompts,
                                    const std::vector<std::vector<int>>& responses) {
  if (prompts.size() != responses.size()) throw ShapeError("response_logprobs: prompt/response count mismatch");
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  std::size_t off = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (responses[i].empty()) throw ShapeError("response_logprobs: empty response");
    auto seq = concat(prompts[i], responses[i]);
    for (std::size_t j = 0; j < responses[i].size(); ++j) {
      rows.push_back(off + prompts[i].size() - 1 + j);
      targets.push_back(responses[i][j]);
    }
    off += seq.size();
    seqs.push_back(std::move(seq));
  }
  ad::Tensor h = model.forward_packed(seqs);
  ad::Tensor lg = model.logits(ad::gather_rows(h, rows));
  return ad::scale(ad::cross_entropy_rows(lg, targets), -1.0);
}

}  // namespace genemb
