#pragma once

// Stage-2 reinforcement learning: format and embedding rewards, group
// advantages, the k3 KL estimator and the clipped GRPO surrogate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genemb/corpus.hpp"
#include "genemb/error.hpp"
#include "genemb/model.hpp"
#include "genemb/seed.hpp"
#include "genemb/template.hpp"
#include "genemb/tensor.hpp"

namespace genemb {

inline int format_reward(const std::vector<int>& response) { return parse_response(response).ok() ? 1 : 0; }

struct EmbeddingReward {
  double ranking = 0.0, gap = 0.0, emb = 0.0;
};

namespace detail {

inline void require_unit(const std::vector<double>& v, const char* what) {
  double n = 0.0;
  for (double x : v) n += x * x;
  if (!std::isfinite(n) || std::abs(std::sqrt(n) - 1.0) > 1e-6)
    throw NumericError(std::string(what) + ": expected a unit vector (norm " + std::to_string(std::sqrt(n)) + ")");
}

inline double dotv(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("reward: embedding width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Ranking and gap terms from raw similarities. top_G picks the G largest
// values of S+ u S-, ties going to S- first.
inline EmbeddingReward reward_from_similarities(const std::vector<double>& pos, const std::vector<double>& neg,
                                                std::size_t G) {
  if (G < 1) throw ConfigError("embedding_reward: G must be at least 1");
  if (pos.empty() || neg.empty()) throw ShapeError("embedding_reward: empty positive or negative set");
  struct Item {
    double s;
    bool positive;
  };
  std::vector<Item> all;
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::stable_sort(all.begin(), all.end(), [](const Item& a, const Item& b) {
    if (a.s != b.s) return a.s > b.s;
    return !a.positive && b.positive;
  });
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(G, all.size()); ++i) hits += all[i].positive;
  EmbeddingReward r;
  r.ranking = static_cast<double>(hits) / static_cast<double>(G);
  // Centered on one value so identical similarities give a gap of exactly 0.
  const double c = pos.front();
  double sp = 0.0, sn = 0.0;
  for (double s : pos) sp += s - c;
  for (double s : neg) sn += s - c;
  r.gap = sp / static_cast<double>(pos.size()) - sn / static_cast<double>(neg.size());
  r.emb = r.ranking * r.gap;
  return r;
}

// G defaults to the number of positives; callers that dropped invalid
// positives pass the nominal group size.
inline EmbeddingReward embedding_reward(const std::vector<double>& query, const std::vector<std::vector<double>>& pos,
                                        const std::vector<std::vector<double>>& neg, std::size_t G = 0) {
  detail::require_unit(query, "embedding_reward: query");
  std::vector<double> sp, sn;
  for (auto& p : pos) {
    detail::require_unit(p, "embedding_reward: positive");
    sp.push_back(detail::dotv(query, p));
  }
  for (auto& n : neg) {
    detail::require_unit(n, "embedding_reward: negative");
    sn.push_back(detail::dotv(query, n));
  }
  return reward_from_similarities(sp, sn, G == 0 ? pos.size() : G);
}

inline int threshold_reward(const std::vector<double>& query, const std::vector<double>& pos, double theta) {
  if (!(theta > -1.0 && theta < 1.0)) throw ConfigError("threshold_reward: theta must lie in (-1, 1)");
  detail::require_unit(query, "threshold_reward: query");
  detail::require_unit(pos, "threshold_reward: positive");
  return detail::dotv(query, pos) > theta ? 1 : 0;
}

inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw ConfigError("group_advantages: group size must be at least 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < 1e-8) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

// k3 estimator exp(ref - new) - (ref - new) - 1, averaged over tokens.
inline double kl_penalty(const std::vector<double>& logp_new, const std::vector<double>& logp_ref) {
  if (logp_new.size() != logp_ref.size()) throw ShapeError("kl_penalty: token count mismatch");
  if (logp_new.empty()) throw ShapeError("kl_penalty: empty response");
  double s = 0.0;
  for (std::size_t t = 0; t < logp_new.size(); ++t) {
    const double d = logp_ref[t] - logp_new[t];
    s += std::expm1(d) - d;
  }
  return s / static_cast<double>(logp_new.size());
}

// ---------------------------------------------------------------------------
// Reward variants

struct RewardVariant {
  enum class Kind { full, ranking_only, gap_only, threshold } kind = Kind::full;
  double theta = 0.5;

  static RewardVariant parse(const std::string& s) {
    RewardVariant v;
    if (s == "full") return v;
    if (s == "ranking_only") {
      v.kind = Kind::ranking_only;
      return v;
    }
    if (s == "gap_only") {
      v.kind = Kind::gap_only;
      return v;
    }
    if (s.rfind("threshold(", 0) == 0 && s.size() > 11 && s.back() == ')') {
      v.kind = Kind::threshold;
      const std::string num = s.substr(10, s.size() - 11);
      std::size_t used = 0;
      try {
        v.theta = std::stod(num, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != num.size() || num.empty()) throw ConfigError("reward_variant: bad threshold in '" + s + "'");
      if (!(v.theta > -1.0 && v.theta < 1.0)) throw ConfigError("reward_variant: threshold must lie in (-1, 1)");
      return v;
    }
    throw ConfigError("reward_variant: unknown variant '" + s + "'");
  }

  std::string str() const {
    switch (kind) {
      case Kind::full: return "full";
      case Kind::ranking_only: return "ranking_only";
      case Kind::gap_only: return "gap_only";
      case Kind::threshold: {
        char buf[64];
        std::snprintf(buf, sizeof buf, "threshold(%g)", theta);
        return buf;
      }
    }
    return "full";
  }
};

struct RewardBreakdown {
  int format = 0;
  double ranking = 0.0, gap = 0.0, emb = 0.0, total = 0.0, advantage = 0.0;
};

// Embedding reward of one valid query response under a variant. pos/neg hold
// only the valid responses of the other side.
inline RewardBreakdown variant_reward(const RewardVariant& v, const std::vector<double>& query,
                                      const std::vector<std::vector<double>>& pos,
                                      const std::vector<std::vector<double>>& neg, std::size_t G) {
  RewardBreakdown b;
  b.format = 1;
  if (v.kind == RewardVariant::Kind::threshold) {
    if (!pos.empty()) {
      std::vector<double> c(query.size(), 0.0);
      for (auto& p : pos)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] += p[i];
      double n = 0.0;
      for (double x : c) n += x * x;
      n = std::sqrt(n);
      if (n > ad::kNormFloor) {
        for (double& x : c) x /= n;
        b.emb = threshold_reward(query, c, v.theta);
      }
    }
  } else if (!pos.empty() && !neg.empty()) {
    auto r = embedding_reward(query, pos, neg, G);
    b.ranking = r.ranking;
    b.gap = r.gap;
    switch (v.kind) {
      case RewardVariant::Kind::ranking_only: b.emb = r.ranking; break;
      case RewardVariant::Kind::gap_only: b.emb = r.gap; break;
      default: b.emb = r.emb; break;
    }
  }
  b.total = b.format + b.emb;
  return b;
}

// ---------------------------------------------------------------------------
// Rollouts

struct RolloutResponse {
  std::vector<int> tokens;
  std::vector<double> logp_old;  // sampling-time log-probs
  std::vector<double> logp_ref;  // reference policy, query side only
  std::optional<std::vector<double>> gen;
  RewardBreakdown reward;
};

struct GroupRollout {
  std::string pair_id;
  std::size_t G = 0;
  std::vector<int> query_prompt;
  std::vector<RolloutResponse> query, positive;
  std::vector<std::vector<RolloutResponse>> negatives;
};

struct RolloutOptions {
  std::size_t G = 8;
  std::size_t negatives = 3;
  double temperature = 1.0;
  int max_new = 64;
  RewardVariant variant;
};

// K negatives for a pair: pool entries other than the target, chosen by a
// seeded shuffle.
inline std::vector<std::string> pick_negatives(const PairRecord& pair, std::size_t K, std::uint64_t seed) {
  std::vector<std::string> cands;
  for (auto& c : pair.pool)
    if (c != pair.target.text && std::find(cands.begin(), cands.end(), c) == cands.end()) cands.push_back(c);
  if (cands.size() < K)
    throw DataError("rl: pair " + pair.query.pair_id + " has " + std::to_string(cands.size()) + " negatives, need " +
                    std::to_string(K));
  std::mt19937_64 rng(hash_seed(seed, pair.query.pair_id + "/neg"));
  std::shuffle(cands.begin(), cands.end(), rng);
  cands.resize(K);
  return cands;
}

// Query-response rewards against the current embeddings of the group.
inline void score_group(GroupRollout& g, const RewardVariant& variant) {
  auto valid = [](const std::vector<RolloutResponse>& rs) {
    std::vector<std::vector<double>> out;
    for (auto& r : rs)
      if (r.reward.format == 1 && r.gen) out.push_back(*r.gen);
    return out;
  };
  const auto pos = valid(g.positive);
  std::vector<std::vector<double>> neg;
  for (auto& grp : g.negatives) {
    auto v = valid(grp);
    neg.insert(neg.end(), v.begin(), v.end());
  }
  std::vector<double> totals;
  for (auto& r : g.query) {
    if (r.reward.format == 1 && r.gen) {
      r.reward = variant_reward(variant, *r.gen, pos, neg, g.G);
    } else {
      r.reward = RewardBreakdown{};
    }
    totals.push_back(r.reward.total);
  }
  auto adv = group_advantages(totals);
  for (std::size_t i = 0; i < g.query.size(); ++i) g.query[i].reward.advantage = adv[i];
}

// Samples G responses for the query, the positive and each negative, embeds
// the well-formed ones and scores the query responses.
inline GroupRollout rollout_and_reward(const Transformer& policy, const Transformer& ref, const PairRecord& pair,
                                       const std::vector<std::string>& negatives, const RolloutOptions& opt,
                                       std::uint64_t seed) {
  if (opt.G < 2) throw ConfigError("rollout: G must be at least 2");
  if (negatives.empty()) throw ConfigError("rollout: at least one negative is required");
  const auto& V = Vocab::standard();
  GroupRollout g;
  g.pair_id = pair.query.pair_id;
  g.G = opt.G;
  g.query_prompt = render_prompt(V, pair.query.text);

  std::vector<std::string> sides{pair.query.text, pair.target.text};
  sides.insert(sides.end(), negatives.begin(), negatives.end());
  std::vector<std::vector<int>> prompts, side_prompts;
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < sides.size(); ++s) {
    side_prompts.push_back(render_prompt(V, sides[s]));
    for (std::size_t j = 0; j < opt.G; ++j) {
      prompts.push_back(side_prompts.back());
      seeds.push_back(hash_seed(seed, g.pair_id + "/" + std::to_string(s) + "/" + std::to_string(j)));
    }
  }
  auto gens = generate_batch(policy, prompts, seeds, opt.temperature, opt.max_new);

  std::vector<std::vector<RolloutResponse>> groups(sides.size());
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> pos;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t s = 0; s < sides.size(); ++s)
    for (std::size_t j = 0; j < opt.G; ++j) {
      auto& gen = gens[s * opt.G + j];
      RolloutResponse r;
      r.tokens = gen.tokens;
      r.logp_old = gen.logprobs;
      r.reward.format = format_reward(r.tokens);
      if (r.reward.format) {
        seqs.push_back(concat(side_prompts[s], r.tokens));
        pos.push_back(side_prompts[s].size() + r.tokens.size() - 1);
        where.emplace_back(s, j);
      }
      groups[s].push_back(std::move(r));
    }
  auto rows = embed_rows(policy, seqs, pos);
  for (std::size_t i = 0; i < rows.size(); ++i) groups[where[i].first][where[i].second].gen = std::move(rows[i]);

  {
    ad::NoGradGuard guard;
    std::vector<std::vector<int>> qp(opt.G, g.query_prompt), qr;
    for (auto& r : groups[0]) qr.push_back(r.tokens);
    auto lp = response_logprobs(ref, qp, qr);
    std::size_t off = 0;
    for (auto& r : groups[0]) {
      r.logp_ref.assign(lp.data().begin() + static_cast<std::ptrdiff_t>(off),
                        lp.data().begin() + static_cast<std::ptrdiff_t>(off + r.tokens.size()));
      off += r.tokens.size();
    }
  }

  g.query = std::move(groups[0]);
  g.positive = std::move(groups[1]);
  for (std::size_t s = 2; s < groups.size(); ++s) g.negatives.push_back(std::move(groups[s]));
  score_group(g, opt.variant);
  return g;
}

// ---------------------------------------------------------------------------
// GRPO surrogate

struct GrpoOutput {
  ad::Tensor objective;  // to be maximised
  double value = 0.0;
  double kl = 0.0;  // mean per-response KL estimate
  double clip_fraction = 0.0;
};

// Per-token ratio r_t = exp(logp_theta - logp_old); per-response surrogate
// mean_t min(r_t A, clip(r_t, 1-eps, 1+eps) A) - beta * mean_t k3_t, then the
// mean over every query response of every group.
inline GrpoOutput grpo_objective(const Transformer& policy, const std::vector<GroupRollout>& batch, double eps,
                                 double beta) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("grpo: clip epsilon must lie in [0, 1)");
  if (beta < 0.0) throw ConfigError("grpo: beta must be nonnegative");
  std::vector<std::vector<int>> prompts, responses;
  std::vector<double> old, ref, adv, weight;
  std::size_t n_resp = 0;
  for (auto& g : batch) n_resp += g.query.size();
  if (n_resp == 0) throw ShapeError("grpo: empty batch");
  for (auto& g : batch)
    for (auto& r : g.query) {
      if (r.tokens.empty()) throw ShapeError("grpo: empty response in " + g.pair_id);
      if (r.logp_old.size() != r.tokens.size() || r.logp_ref.size() != r.tokens.size())
        throw ShapeError("grpo: log-prob records do not match tokens in " + g.pair_id);
      prompts.push_back(g.query_prompt);
      responses.push_back(r.tokens);
      old.insert(old.end(), r.logp_old.begin(), r.logp_old.end());
      ref.insert(ref.end(), r.logp_ref.begin(), r.logp_ref.end());
      for (std::size_t t = 0; t < r.tokens.size(); ++t) {
        adv.push_back(r.reward.advantage);
        weight.push_back(1.0 / (static_cast<double>(r.tokens.size()) * static_cast<double>(n_resp)));
      }
    }
  const std::size_t T = old.size();
  auto col = [T](std::vector<double> v) { return ad::Tensor::matrix(T, 1, std::move(v)); };
  ad::Tensor lp = response_logprobs(policy, prompts, responses);
  ad::Tensor old_t = col(old), ref_t = col(ref), adv_t = col(adv), w_t = col(weight);

  ad::Tensor ratio;
  {
    // Check before exp() so a blow-up is reported with its location.
    std::size_t t = 0;
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t i = 0; i < batch[b].query.size(); ++i)
        for (std::size_t k = 0; k < batch[b].query[i].tokens.size(); ++k, ++t) {
          const double r = std::exp(lp.data()[t] - old[t]);
          if (!std::isfinite(r))
            throw NumericError("grpo: non-finite ratio for " + batch[b].pair_id + " response " + std::to_string(i) +
                               " token " + std::to_string(k) + " (logp " + std::to_string(lp.data()[t]) + ", old " +
                               std::to_string(old[t]) + ")");
        }
    ratio = ad::exp(ad::sub(lp, old_t));
  }
  ad::Tensor surr = ad::minimum(ad::mul(ratio, adv_t), ad::mul(ad::clamp(ratio, 1.0 - eps, 1.0 + eps), adv_t));
  ad::Tensor d = ad::sub(ref_t, lp);
  ad::Tensor k3 = ad::add_scalar(ad::sub(ad::exp(d), d), -1.0);
  ad::Tensor per_token = beta == 0.0 ? surr : ad::sub(surr, ad::scale(k3, beta));

  GrpoOutput out;
  out.objective = ad::sum(ad::mul(per_token, w_t));
  out.value = out.objective.item();
  std::size_t clipped = 0;
  for (std::size_t t = 0; t < T; ++t) {
    out.kl += k3.data()[t] * weight[t];
    const double r = ratio.data()[t];
    if (r < 1.0 - eps || r > 1.0 + eps) ++clipped;
  }
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(T);
  return out;
}

// Rollout dump, one JSON object per response.
inline std::string rollout_jsonl(const GroupRollout& g) {
  std::string out;
  auto emit = [&](const char* side, std::size_t idx, const RolloutResponse& r) {
    nlohmann::ordered_json j;
    j["pair_id"] = g.pair_id;
    j["side"] = side;
    j["idx"] = idx;
    j["tokens"] = r.tokens;
    double s = 0.0;
    for (double x : r.logp_old) s += x;
    j["logp_sum"] = s;
    j["format"] = r.reward.format;
    j["ranking"] = r.reward.ranking;
    j["gap"] = r.reward.gap;
    j["emb"] = r.reward.emb;
    j["advantage"] = r.reward.advantage;
    out += j.dump() + "\n";
  };
  for (std::size_t i = 0; i < g.query.size(); ++i) emit("query", i, g.query[i]);
  for (std::size_t i = 0; i < g.positive.size(); ++i) emit("positive", i, g.positive[i]);
  for (std::size_t k = 0; k < g.negatives.size(); ++k)
    for (std::size_t i = 0; i < g.negatives[k].size(); ++i)
      emit(("negative" + std::to_string(k)).c_str(), i, g.negatives[k][i]);
  return out;
}

}  // namespace genemb
