#pragma once

// Stage drivers: corpus construction, SFT and RL training loops, evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "genemb/checkpoint.hpp"
#include "genemb/config.hpp"
#include "genemb/corpus.hpp"
#include "genemb/digest.hpp"
#include "genemb/eval.hpp"
#include "genemb/model.hpp"
#include "genemb/objectives.hpp"
#include "genemb/optim.hpp"
#include "genemb/rl.hpp"
#include "genemb/seed.hpp"

namespace genemb {

// ---------------------------------------------------------------------------
// Corpus

struct Corpus {
  std::vector<PairRecord> pairs;  // filtered; seen_in_sft marks the SFT share
  std::vector<PairRecord> test;
  FilterCounts counts;

  std::vector<PairRecord> sft() const {
    std::vector<PairRecord> out;
    for (auto& p : pairs)
      if (p.seen_in_sft) out.push_back(p);
    return out;
  }
};

inline Corpus build_corpus(const RunConfig& cfg) {
  Corpus c;
  for (std::size_t i = 0; i < cfg.data.size(); ++i) {
    const auto& d = cfg.data[i];
    const std::string tag = to_string(d.spec.kind) + "/" + std::to_string(i);
    auto train = synth_generate(d.spec, d.pairs, d.pool, hash_seed(cfg.seed, "train/" + tag),
                                cfg.data.size() > 1 ? std::to_string(i) + "-" : "");
    auto kept = filter_pairs(train, c.counts, cfg.filter);

    // Seeded SFT share per task; the rest is only reachable through RL.
    std::vector<std::size_t> idx(kept.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    std::mt19937_64 rng(hash_seed(cfg.seed, "split/" + tag));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_seen = static_cast<std::size_t>(std::llround(cfg.sft_fraction * static_cast<double>(kept.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) kept[idx[k]].seen_in_sft = k < n_seen;
    c.pairs.insert(c.pairs.end(), kept.begin(), kept.end());

    if (d.test_pairs > 0) {
      std::set<std::string> train_queries;
      for (auto& p : train) train_queries.insert(p.query.text);
      auto test = synth_generate(d.spec, d.test_pairs, d.pool, hash_seed(cfg.seed, "test/" + tag),
                                 "test-" + (cfg.data.size() > 1 ? std::to_string(i) + "-" : std::string()));
      FilterCounts ignored;
      for (auto& p : filter_pairs(test, ignored, cfg.filter))
        if (!train_queries.count(p.query.text)) c.test.push_back(p);
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// SFT

inline double sft_lr(const SftConfig& s, int step) {
  if (s.warmup > 0 && step < s.warmup) return s.lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
  const int span = std::max(1, s.steps - s.warmup);
  const double t = std::min(1.0, static_cast<double>(step - s.warmup) / static_cast<double>(span));
  const double floor = s.min_lr_ratio * s.lr;
  return floor + (s.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// Single-task batches without repeated target texts (a repeated target would
// be its own in-batch negative). Tasks are drawn in proportion to size.
class BatchSampler {
 public:
  BatchSampler(const std::vector<PairRecord>& pairs, std::size_t batch, std::uint64_t seed)
      : pairs_(pairs), batch_(batch), rng_(seed) {
    if (pairs.empty()) throw DataError("sft: no training pairs");
    for (std::size_t i = 0; i < pairs.size(); ++i) by_task_[pairs[i].query.task].push_back(i);
    for (auto& [t, v] : by_task_) {
      tasks_.push_back(t);
      weights_.push_back(static_cast<double>(v.size()));
    }
  }

  std::vector<const PairRecord*> next() {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    const std::string& task = tasks_[pick(rng_)];
    auto& queue = queues_[task];
    std::vector<const PairRecord*> out;
    std::set<std::string> targets;
    std::deque<std::size_t> deferred;
    bool refilled = false;
    while (out.size() < batch_) {
      if (queue.empty()) {
        if (refilled) break;  // every pair of the task has been offered once
        auto fresh = by_task_[task];
        std::shuffle(fresh.begin(), fresh.end(), rng_);
        queue.insert(queue.end(), fresh.begin(), fresh.end());
        refilled = true;
      }
      const std::size_t i = queue.front();
      queue.pop_front();
      if (targets.insert(pairs_[i].target.text).second)
        out.push_back(&pairs_[i]);
      else
        deferred.push_back(i);
    }
    queue.insert(queue.begin(), deferred.begin(), deferred.end());
    if (out.size() < 2) throw DataError("sft: task " + task + " has fewer than two distinct targets");
    return out;
  }

 private:
  const std::vector<PairRecord>& pairs_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::map<std::string, std::vector<std::size_t>> by_task_;
  std::map<std::string, std::deque<std::size_t>> queues_;
  std::vector<std::string> tasks_;
  std::vector<double> weights_;
};

struct SftLogRow {
  int step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

inline std::string sft_log_header() { return "step,dctr,gctr,ce,total,lr,seed\n"; }

inline std::string sft_log_line(const SftLogRow& r, std::uint64_t seed) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%llu\n", r.step, r.loss.dctr, r.loss.gctr, r.loss.ce,
                r.loss.total, r.lr, static_cast<unsigned long long>(seed));
  return buf;
}

// Trains in place. A non-finite loss aborts before the update, so the model
// still holds the last good parameters.
inline std::vector<SftLogRow> train_sft(Transformer& model, const std::vector<PairRecord>& pairs, const SftConfig& cfg,
                                        std::uint64_t seed, const std::function<void(const SftLogRow&)>& on_step = {}) {
  BatchSampler sampler(pairs, static_cast<std::size_t>(cfg.batch), hash_seed(seed, "sft/batches"));
  std::vector<ad::NamedParam> params = model.params();
  ad::AdamW opt(params, {.weight_decay = cfg.weight_decay});
  const SftTerms terms = cfg.dctr_only ? SftTerms::dctr_only() : SftTerms{};
  std::vector<SftLogRow> log;
  for (int step = 0; step < cfg.steps; ++step) {
    SftLogRow row;
    row.step = step;
    row.lr = sft_lr(cfg, step);
    for (int a = 0; a < cfg.accum; ++a) {
      auto batch = PairBatch::from(sampler.next(), cfg.tau);
      auto l = sft_loss(model, batch, terms);
      if (!std::isfinite(l.parts.total))
        throw NumericError("sft: non-finite loss at step " + std::to_string(step) + " (dctr " +
                           std::to_string(l.parts.dctr) + ", gctr " + std::to_string(l.parts.gctr) + ", ce " +
                           std::to_string(l.parts.ce) + ")");
      ad::backward(cfg.accum == 1 ? l.total : ad::scale(l.total, 1.0 / cfg.accum));
      row.loss.dctr += l.parts.dctr / cfg.accum;
      row.loss.gctr += l.parts.gctr / cfg.accum;
      row.loss.ce += l.parts.ce / cfg.accum;
      row.loss.total += l.parts.total / cfg.accum;
    }
    opt.fill_missing_grads();
    opt.step(row.lr);
    log.push_back(row);
    if (on_step) on_step(row);
  }
  return log;
}

// ---------------------------------------------------------------------------
// RL

struct RlLogRow {
  int update = 0;
  double reward = 0.0, format = 0.0, emb = 0.0, objective = 0.0, kl = 0.0, clip_fraction = 0.0;
};

inline std::string rl_log_header() { return "update,reward,format,emb,objective,kl,clip_fraction\n"; }

inline std::string rl_log_line(const RlLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.update, r.reward, r.format, r.emb,
                r.objective, r.kl, r.clip_fraction);
  return buf;
}

struct RlSummary {
  std::vector<RlLogRow> log;
  double final_format = 0.0;  // mean format reward over the last quarter of updates
};

// One or more epochs over `pairs`: rollouts from the current policy, then a
// single clipped-surrogate update per batch. ref stays frozen.
inline RlSummary train_rl(Transformer& policy, const Transformer& ref, const std::vector<PairRecord>& pairs,
                          const RlConfig& cfg, std::uint64_t seed, std::ostream* dump = nullptr,
                          const std::function<void(const RlLogRow&)>& on_update = {}) {
  if (pairs.empty()) throw DataError("rl: no pairs");
  RolloutOptions ro;
  ro.G = static_cast<std::size_t>(cfg.G);
  ro.negatives = static_cast<std::size_t>(cfg.negatives);
  ro.temperature = cfg.temperature;
  ro.max_new = cfg.max_new;
  ro.variant = cfg.reward_variant;
  ad::AdamW opt(policy.params(), {.weight_decay = 0.0});
  RlSummary out;
  int update = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(hash_seed(seed, "rl/order/" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch)) {
      std::vector<GroupRollout> batch;
      const std::uint64_t step_seed = hash_seed(seed, "rl/" + std::to_string(epoch));
      for (std::size_t k = b; k < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch)); ++k) {
        const auto& p = pairs[order[k]];
        batch.push_back(rollout_and_reward(policy, ref, p, pick_negatives(p, ro.negatives, seed), ro, step_seed));
      }
      auto g = grpo_objective(policy, batch, cfg.eps, cfg.beta);
      if (!std::isfinite(g.value)) throw NumericError("rl: non-finite objective at update " + std::to_string(update));
      ad::backward(ad::scale(g.objective, -1.0));
      opt.fill_missing_grads();
      opt.step(cfg.lr);

      RlLogRow row;
      row.update = update++;
      row.objective = g.value;
      row.kl = g.kl;
      row.clip_fraction = g.clip_fraction;
      double n = 0.0;
      for (auto& gr : batch) {
        for (auto& r : gr.query) {
          row.reward += r.reward.total;
          row.format += r.reward.format;
          row.emb += r.reward.emb;
          n += 1.0;
        }
        if (dump) *dump << rollout_jsonl(gr);
      }
      row.reward /= n;
      row.format /= n;
      row.emb /= n;
      out.log.push_back(row);
      if (on_update) on_update(row);
    }
  }
  const std::size_t tail = std::max<std::size_t>(1, out.log.size() / 4);
  for (std::size_t i = out.log.size() - tail; i < out.log.size(); ++i) out.final_format += out.log[i].format;
  out.final_format /= static_cast<double>(tail);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline EvalReport evaluate(const Transformer& model, const std::vector<PairRecord>& pairs) {
  if (pairs.empty()) throw DataError("eval: no instances");
  auto rep = summarize(score_instances(model, pairs));
  rep.meta["checkpoint_sha256"] = sha256_hex(serialize_checkpoint(model));
  return rep;
}

}  // namespace genemb
