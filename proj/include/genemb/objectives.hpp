#pragma once

// Stage-1 losses: discriminative InfoNCE, generative InfoNCE, next-token
// prediction over gold reasoning+summary responses, and their unweighted sum.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "genemb/corpus.hpp"
#include "genemb/error.hpp"
#include "genemb/model.hpp"
#include "genemb/template.hpp"
#include "genemb/tensor.hpp"

namespace genemb {

// In-batch contrastive loss over unit rows: position i pairs anchor_i with
// cand_i, every cand_j (j != i) is a negative.
//   loss = mean_i -log softmax_i(anchor_i . cand_. / tau)[i]
inline ad::Tensor info_nce(const ad::Tensor& anchors, const ad::Tensor& cands, double tau) {
  if (!(tau > 0.0)) throw ConfigError("info_nce: temperature must be positive");
  if (anchors.rows() != cands.rows() || anchors.cols() != cands.cols())
    throw ShapeError("info_nce: anchors " + ad::shape_str(anchors.shape()) + " vs candidates " +
                     ad::shape_str(cands.shape()));
  for (const ad::Tensor* t : {&anchors, &cands})
    for (std::size_t i = 0; i < t->rows(); ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < t->cols(); ++j) n += t->at(i, j) * t->at(i, j);
      if (std::abs(std::sqrt(n) - 1.0) > 1e-6)
        throw NumericError("info_nce: row " + std::to_string(i) + " is not unit-norm (norm " +
                           std::to_string(std::sqrt(n)) + ")");
    }
  const std::size_t n = anchors.rows();
  std::vector<int> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  ad::Tensor logits = ad::scale(ad::dot_rows(anchors, cands), 1.0 / tau);
  return ad::scale(ad::sum(ad::cross_entropy_rows(logits, diag)), 1.0 / static_cast<double>(n));
}

// N query/target pairs rendered into the template with teacher-forced gold
// responses.
struct PairBatch {
  std::vector<std::vector<int>> query_prompts, target_prompts;
  std::vector<std::vector<int>> query_responses, target_responses;
  double tau = 0.02;

  std::size_t size() const { return query_prompts.size(); }

  static PairBatch from(const std::vector<const PairRecord*>& pairs, double tau) {
    const auto& V = Vocab::standard();
    PairBatch b;
    b.tau = tau;
    auto gold = [&](const Sample& s) {
      if (!s.cot) throw FormatError("batch: sample '" + s.id + "' has no annotation");
      auto r = render_response(V, s.cot->think, s.cot->answer);
      auto p = parse_response(r);
      if (!p.ok())
        throw FormatError("batch: gold response of '" + s.id + "' does not parse: " + std::string(rule_name(p.rule)));
      return r;
    };
    for (const PairRecord* p : pairs) {
      b.query_prompts.push_back(render_prompt(V, p->query.text));
      b.target_prompts.push_back(render_prompt(V, p->target.text));
      b.query_responses.push_back(gold(p->query));
      b.target_responses.push_back(gold(p->target));
    }
    if (b.size() == 0) throw ShapeError("batch: no pairs");
    return b;
  }

  static PairBatch from(const std::vector<PairRecord>& pairs, double tau) {
    std::vector<const PairRecord*> ptrs;
    for (auto& p : pairs) ptrs.push_back(&p);
    return from(ptrs, tau);
  }
};

struct SftTerms {
  bool dctr = true;
  bool gctr = true;
  bool ce = true;

  static SftTerms dctr_only() { return {true, false, false}; }
};

struct LossBreakdown {
  double dctr = 0.0, gctr = 0.0, ce = 0.0, total = 0.0;
};

struct SftLoss {
  ad::Tensor total;
  LossBreakdown parts;
};

// Sum of next-token cross-entropies over the response rows of packed
// sequences. Row t predicts token t+1; labels[t] is that token and
// mask[t] says whether it counts. Masked-out labels are never read.
inline ad::Tensor token_loss(const Transformer& model, const ad::Tensor& hidden, const std::vector<int>& labels,
                             const std::vector<bool>& mask) {
  if (labels.size() != hidden.rows() || mask.size() != hidden.rows())
    throw ShapeError("token_loss: labels/mask do not cover the hidden rows");
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) {
      rows.push_back(t);
      targets.push_back(labels[t]);
    }
  if (rows.empty()) throw ShapeError("token_loss: empty loss mask");
  return ad::sum(ad::cross_entropy_rows(model.logits(ad::gather_rows(hidden, rows)), targets));
}

namespace detail {

struct PackedPairs {
  std::vector<std::vector<int>> seqs;  // queries first, then targets
  std::vector<std::size_t> disc_rows, gen_rows;
  std::vector<int> labels;
  std::vector<bool> mask;
};

inline PackedPairs pack(const PairBatch& b, bool with_responses) {
  PackedPairs p;
  std::size_t off = 0;
  auto push = [&](const std::vector<int>& prompt, const std::vector<int>& response) {
    auto seq = with_responses ? concat(prompt, response) : prompt;
    p.disc_rows.push_back(off + single_position(prompt, kDiscEmb, "sft: <disc_emb>"));
    if (with_responses) {
      auto last = last_position(response, kGenEmb);
      if (!last) throw FormatError("sft: gold response lacks <gen_emb>");
      p.gen_rows.push_back(off + prompt.size() + *last);
    }
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const bool next_in_response = with_responses && t + 1 >= prompt.size() && t + 1 < seq.size();
      p.labels.push_back(t + 1 < seq.size() ? seq[t + 1] : -1);
      p.mask.push_back(next_in_response);
    }
    off += seq.size();
    p.seqs.push_back(std::move(seq));
  };
  for (std::size_t i = 0; i < b.size(); ++i) push(b.query_prompts[i], b.query_responses[i]);
  for (std::size_t i = 0; i < b.size(); ++i) push(b.target_prompts[i], b.target_responses[i]);
  return p;
}

inline std::pair<ad::Tensor, ad::Tensor> split_embeddings(const ad::Tensor& hidden, const std::vector<std::size_t>& rows,
                                                          std::size_t n) {
  std::vector<std::size_t> q(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<std::size_t> t(rows.begin() + static_cast<std::ptrdiff_t>(n), rows.end());
  return {ad::l2_normalize_rows(ad::gather_rows(hidden, q)), ad::l2_normalize_rows(ad::gather_rows(hidden, t))};
}

}  // namespace detail

// Discriminative contrastive term alone (prompts only, no responses).
inline ad::Tensor dctr_loss(const Transformer& model, const PairBatch& b) {
  auto p = detail::pack(b, false);
  auto h = model.forward_packed(p.seqs);
  auto [q, t] = detail::split_embeddings(h, p.disc_rows, b.size());
  return info_nce(q, t, b.tau);
}

// Generative contrastive term: embeddings at each gold response's <gen_emb>;
// negatives of query i are the other targets' generative embeddings.
inline ad::Tensor gctr_loss(const Transformer& model, const PairBatch& b) {
  auto p = detail::pack(b, true);
  auto h = model.forward_packed(p.seqs);
  auto [q, t] = detail::split_embeddings(h, p.gen_rows, b.size());
  return info_nce(q, t, b.tau);
}

// Mean over pairs of the summed response-token cross-entropies of the query
// and the target, each conditioned on its own prompt.
inline ad::Tensor nt_loss(const Transformer& model, const PairBatch& b) {
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b.query_responses[i].empty() || b.target_responses[i].empty()) throw ShapeError("nt_loss: empty response");
  auto p = detail::pack(b, true);
  auto h = model.forward_packed(p.seqs);
  return ad::scale(token_loss(model, h, p.labels, p.mask), 1.0 / static_cast<double>(b.size()));
}

// dctr + gctr + ce from one packed forward pass. Disabled terms are
// skipped entirely; with only dctr enabled the responses are not encoded.
inline SftLoss sft_loss(const Transformer& model, const PairBatch& b, SftTerms terms = {}) {
  if (!terms.dctr && !terms.gctr && !terms.ce) throw ConfigError("sft_loss: no terms enabled");
  const bool responses = terms.gctr || terms.ce;
  auto p = detail::pack(b, responses);
  auto h = model.forward_packed(p.seqs);
  std::vector<ad::Tensor> parts;
  SftLoss out;
  if (terms.dctr) {
    auto [q, t] = detail::split_embeddings(h, p.disc_rows, b.size());
    auto l = info_nce(q, t, b.tau);
    out.parts.dctr = l.item();
    parts.push_back(l);
  }
  if (terms.gctr) {
    auto [q, t] = detail::split_embeddings(h, p.gen_rows, b.size());
    auto l = info_nce(q, t, b.tau);
    out.parts.gctr = l.item();
    parts.push_back(l);
  }
  if (terms.ce) {
    auto l = ad::scale(token_loss(model, h, p.labels, p.mask), 1.0 / static_cast<double>(b.size()));
    out.parts.ce = l.item();
    parts.push_back(l);
  }
  out.total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = ad::add(out.total, parts[i]);
  out.parts.total = out.total.item();
  return out;
}

}  // namespace genemb
