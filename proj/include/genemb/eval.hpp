#pragma once

// Retrieval metrics (Hit@1, NDCG@k), per-instance oracle merging of the
// discriminative and generative modes, the unbiased pass@k estimator and the
// model-driven evaluation loops that produce an EvalReport.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genemb/corpus.hpp"
#include "genemb/error.hpp"
#include "genemb/model.hpp"
#include "genemb/seed.hpp"

namespace genemb {

enum class Mode { disc, gen };

inline std::string to_string(Mode m) { return m == Mode::disc ? "disc" : "gen"; }

// Candidates are identified by their index in the pool; ties in score are
// broken towards the lower index everywhere. A score of -inf marks a missing
// embedding: such a candidate is never counted as retrieved.
struct RetrievalInstance {
  std::string query_id;
  std::string task;
  std::size_t pool_size = 0;
  std::set<std::size_t> positives;
  std::map<Mode, std::vector<double>> scores;

  const std::vector<double>& scores_for(Mode m) const {
    auto it = scores.find(m);
    if (it == scores.end()) throw DataError("instance " + query_id + ": no " + to_string(m) + " scores");
    if (it->second.size() != pool_size) throw DataError("instance " + query_id + ": scores do not cover the pool");
    return it->second;
  }
};

// Pool indices ordered by descending score, ties by ascending index.
inline std::vector<std::size_t> ranking(const std::vector<double>& s) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return idx;
}

inline int hit_at_1(const RetrievalInstance& inst, Mode m) {
  if (inst.pool_size == 0) throw DataError("hit_at_1: empty pool");
  const auto& s = inst.scores_for(m);
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] > s[best]) best = i;
  if (s[best] == -std::numeric_limits<double>::infinity()) return 0;
  return inst.positives.count(best) ? 1 : 0;
}

inline double ndcg_at_k(const RetrievalInstance& inst, Mode m, std::size_t k = 5) {
  if (k < 1) throw ConfigError("ndcg_at_k: k must be at least 1");
  if (inst.positives.empty()) throw DataError("ndcg_at_k: instance " + inst.query_id + " has no positives");
  const auto& s = inst.scores_for(m);
  const auto order = ranking(s);
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r)
    if (inst.positives.count(order[r]) && s[order[r]] != -std::numeric_limits<double>::infinity()) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  for (std::size_t r = 0; r < std::min(k, inst.positives.size()); ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / ideal;
}

enum class Metric { hit1, ndcg5 };

inline double metric_value(const RetrievalInstance& inst, Mode m, Metric metric) {
  return metric == Metric::hit1 ? static_cast<double>(hit_at_1(inst, m)) : ndcg_at_k(inst, m, 5);
}

// Per-instance best of the two modes.
inline double oracle_merge(const RetrievalInstance& inst, Metric metric) {
  return std::max(metric_value(inst, Mode::disc, metric), metric_value(inst, Mode::gen, metric));
}

// Unbiased pass@k from n samples with c correct:
//   1 - C(n-c, k) / C(n, k) = 1 - prod_{i=n-c+1}^{n} (1 - k/i)
inline double pass_at_k(std::int64_t n, std::int64_t c, std::int64_t k) {
  if (n < 1 || c < 0 || c > n) throw ConfigError("pass_at_k: need 0 <= c <= n and n >= 1");
  if (k < 1 || k > n) throw ConfigError("pass_at_k: need 1 <= k <= n");
  if (c == 0) return 0.0;
  if (n - c < k) return 1.0;
  double prod = 1.0;
  for (std::int64_t i = n - c + 1; i <= n; ++i) prod *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - prod;
}

// ---------------------------------------------------------------------------
// Reports

struct TaskMetrics {
  std::size_t instances = 0;
  double hit1_disc = 0, hit1_gen = 0, ndcg5_disc = 0, ndcg5_gen = 0;
  double oracle_hit1 = 0, oracle_ndcg5 = 0;
  // Best single mode chosen once for the whole task.
  double task_select_hit1 = 0;
};

struct EvalReport {
  std::map<std::string, TaskMetrics> tasks;
  TaskMetrics aggregate;
  std::map<int, double> passk;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

inline EvalReport summarize(const std::vector<RetrievalInstance>& instances) {
  EvalReport rep;
  auto accumulate = [](TaskMetrics& t, const RetrievalInstance& in) {
    ++t.instances;
    t.hit1_disc += hit_at_1(in, Mode::disc);
    t.hit1_gen += hit_at_1(in, Mode::gen);
    t.ndcg5_disc += ndcg_at_k(in, Mode::disc);
    t.ndcg5_gen += ndcg_at_k(in, Mode::gen);
    t.oracle_hit1 += oracle_merge(in, Metric::hit1);
    t.oracle_ndcg5 += oracle_merge(in, Metric::ndcg5);
  };
  auto finish = [](TaskMetrics& t) {
    if (t.instances == 0) return;
    const double n = static_cast<double>(t.instances);
    for (double* v : {&t.hit1_disc, &t.hit1_gen, &t.ndcg5_disc, &t.ndcg5_gen, &t.oracle_hit1, &t.oracle_ndcg5}) *v /= n;
    t.task_select_hit1 = std::max(t.hit1_disc, t.hit1_gen);
  };
  for (auto& in : instances) accumulate(rep.tasks[in.task], in);
  for (auto& [_, t] : rep.tasks) finish(t);
  // Aggregate: unweighted mean over tasks.
  for (auto& [_, t] : rep.tasks) {
    rep.aggregate.instances += t.instances;
    rep.aggregate.hit1_disc += t.hit1_disc;
    rep.aggregate.hit1_gen += t.hit1_gen;
    rep.aggregate.ndcg5_disc += t.ndcg5_disc;
    rep.aggregate.ndcg5_gen += t.ndcg5_gen;
    rep.aggregate.oracle_hit1 += t.oracle_hit1;
    rep.aggregate.oracle_ndcg5 += t.oracle_ndcg5;
    rep.aggregate.task_select_hit1 += t.task_select_hit1;
  }
  if (!rep.tasks.empty()) {
    const double n = static_cast<double>(rep.tasks.size());
    auto& a = rep.aggregate;
    for (double* v : {&a.hit1_disc, &a.hit1_gen, &a.ndcg5_disc, &a.ndcg5_gen, &a.oracle_hit1, &a.oracle_ndcg5,
                      &a.task_select_hit1})
      *v /= n;
  }
  return rep;
}

inline nlohmann::ordered_json to_json(const TaskMetrics& t) {
  nlohmann::ordered_json j;
  j["instances"] = t.instances;
  j["hit1_disc"] = t.hit1_disc;
  j["hit1_gen"] = t.hit1_gen;
  j["ndcg5_disc"] = t.ndcg5_disc;
  j["ndcg5_gen"] = t.ndcg5_gen;
  j["oracle_hit1"] = t.oracle_hit1;
  j["oracle_ndcg5"] = t.oracle_ndcg5;
  j["task_select_hit1"] = t.task_select_hit1;
  return j;
}

inline TaskMetrics task_metrics_from_json(const nlohmann::json& j) {
  TaskMetrics t;
  t.instances = j.at("instances").get<std::size_t>();
  t.hit1_disc = j.at("hit1_disc").get<double>();
  t.hit1_gen = j.at("hit1_gen").get<double>();
  t.ndcg5_disc = j.at("ndcg5_disc").get<double>();
  t.ndcg5_gen = j.at("ndcg5_gen").get<double>();
  t.oracle_hit1 = j.at("oracle_hit1").get<double>();
  t.oracle_ndcg5 = j.at("oracle_ndcg5").get<double>();
  t.task_select_hit1 = j.value("task_select_hit1", std::max(t.hit1_disc, t.hit1_gen));
  return t;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["meta"] = r.meta;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::object();
  for (auto& [name, t] : r.tasks) tasks[name] = to_json(t);
  j["tasks"] = tasks;
  j["aggregate"] = to_json(r.aggregate);
  nlohmann::ordered_json pk = nlohmann::ordered_json::object();
  for (auto& [k, v] : r.passk) pk[std::to_string(k)] = v;
  j["passk"] = pk;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  if (j.contains("meta")) r.meta = j["meta"];
  for (auto it = j.at("tasks").begin(); it != j.at("tasks").end(); ++it) r.tasks[it.key()] = task_metrics_from_json(*it);
  r.aggregate = task_metrics_from_json(j.at("aggregate"));
  if (j.contains("passk"))
    for (auto it = j["passk"].begin(); it != j["passk"].end(); ++it) r.passk[std::stoi(it.key())] = it->get<double>();
  return r;
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "task,instances,hit1_disc,hit1_gen,ndcg5_disc,ndcg5_gen,oracle_hit1,oracle_ndcg5,task_select_hit1\n";
  auto row = [&](const std::string& name, const TaskMetrics& t) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(), t.instances, t.hit1_disc,
                  t.hit1_gen, t.ndcg5_disc, t.ndcg5_gen, t.oracle_hit1, t.oracle_ndcg5, t.task_select_hit1);
    out += buf;
  };
  for (auto& [name, t] : r.tasks) row(name, t);
  row("aggregate", r.aggregate);
  return out;
}

// ---------------------------------------------------------------------------
// Model-driven evaluation

struct EvalOptions {
  int max_new = 64;
  std::size_t chunk = 64;  // sequences per packed forward
};

// Discriminative and greedy generative embeddings of a text, as it would be
// embedded either as a query or as a candidate.
struct TextEmbedding {
  std::vector<double> disc;
  std::optional<std::vector<double>> gen;
  std::vector<int> response;
};

// Embeds each distinct text once: greedy generation, then one pass over
// prompt||response giving both embeddings.
inline std::map<std::string, TextEmbedding> embed_texts(const Transformer& model, const std::set<std::string>& texts,
                                                        const EvalOptions& opt = {}) {
  const auto& V = Vocab::standard();
  std::vector<std::string> list(texts.begin(), texts.end());
  std::map<std::string, TextEmbedding> out;
  for (std::size_t b = 0; b < list.size(); b += opt.chunk) {
    const std::size_t e = std::min(list.size(), b + opt.chunk);
    std::vector<std::vector<int>> prompts;
    for (std::size_t i = b; i < e; ++i) prompts.push_back(render_prompt(V, list[i]));
    auto gens = generate_batch(model, prompts, std::vector<std::uint64_t>(prompts.size(), 0), 0.0, opt.max_new);
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> pos;
    std::vector<std::size_t> gen_slot(prompts.size(), SIZE_MAX);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      auto seq = concat(prompts[i], gens[i].tokens);
      seqs.push_back(seq);
      pos.push_back(detail::single_position(prompts[i], kDiscEmb, "eval"));
      if (auto last = detail::last_position(gens[i].tokens, kGenEmb)) {
        gen_slot[i] = pos.size();
        seqs.push_back(seq);
        pos.push_back(prompts[i].size() + *last);
      }
    }
    // Duplicate sequences let one packed pass return both rows; rows are
    // computed independently of batch composition.
    auto rows = embed_rows(model, seqs, pos);
    std::size_t r = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      TextEmbedding te;
      te.disc = rows[r++];
      if (gen_slot[i] != SIZE_MAX) te.gen = rows[r++];
      te.response = gens[i].tokens;
      out[list[b + i]] = std::move(te);
    }
  }
  return out;
}

inline double cosine_or_floor(const std::vector<double>& a, const std::optional<std::vector<double>>& b) {
  if (!b) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * (*b)[i];
  return s;
}

// Scores every query against its pool in both modes. A query without a
// generated <gen_emb> gets all gen scores equal to -inf and counts as a miss
// in that mode; a candidate without one scores -inf.
inline std::vector<RetrievalInstance> score_instances(const Transformer& model, const std::vector<PairRecord>& pairs,
                                                      const EvalOptions& opt = {}) {
  std::set<std::string> texts;
  for (auto& p : pairs) {
    if (p.pool.empty()) throw DataError("eval: pair " + p.query.pair_id + " has no candidate pool");
    texts.insert(p.query.text);
    texts.insert(p.pool.begin(), p.pool.end());
  }
  auto emb = embed_texts(model, texts, opt);
  std::vector<RetrievalInstance> out;
  for (auto& p : pairs) {
    RetrievalInstance in;
    in.query_id = p.query.id;
    in.task = p.query.task;
    in.pool_size = p.pool.size();
    for (std::size_t c = 0; c < p.pool.size(); ++c)
      if (p.pool[c] == p.target.text) in.positives.insert(c);
    const auto& q = emb.at(p.query.text);
    auto& sd = in.scores[Mode::disc];
    auto& sg = in.scores[Mode::gen];
    for (auto& cand : p.pool) {
      const auto& c = emb.at(cand);
      sd.push_back(cosine_or_floor(q.disc, c.disc));
      sg.push_back(q.gen ? cosine_or_floor(*q.gen, c.gen) : -std::numeric_limits<double>::infinity());
    }
    if (!q.gen) {
      // No generative embedding: force a miss regardless of tie-breaking.
      in.scores[Mode::gen].assign(p.pool.size(), -std::numeric_limits<double>::infinity());
    }
    out.push_back(std::move(in));
  }
  return out;
}

// pass@k curve: n sampled responses per query, each scored by Hit@1 of its
// generative embedding against the greedy candidate embeddings. With
// temperature 0 every sample is the greedy response.
inline std::map<int, double> coverage_eval(const Transformer& model, const std::vector<PairRecord>& pairs, int n,
                                           const std::vector<int>& ks, double temperature, std::uint64_t seed,
                                           const EvalOptions& opt = {}) {
  if (ks.empty()) throw ConfigError("passk: no k values");
  for (int k : ks)
    if (k < 1 || k > n) throw ConfigError("passk: every k must satisfy 1 <= k <= n (n = " + std::to_string(n) + ")");
  if (pairs.empty()) throw DataError("passk: no instances");
  const auto& V = Vocab::standard();
  std::set<std::string> cand_texts;
  for (auto& p : pairs) cand_texts.insert(p.pool.begin(), p.pool.end());
  auto cand = embed_texts(model, cand_texts, opt);

  std::map<int, double> curve;
  for (int k : ks) curve[k] = 0.0;
  for (auto& p : pairs) {
    const auto prompt = render_prompt(V, p.query.text);
    std::vector<std::vector<int>> prompts(static_cast<std::size_t>(n), prompt);
    std::vector<std::uint64_t> seeds;
    for (int j = 0; j < n; ++j) seeds.push_back(hash_seed(seed, p.query.id + "/" + std::to_string(j)));
    auto gens = generate_batch(model, prompts, seeds, temperature, opt.max_new);
    std::vector<std::vector<int>> seqs;
    std::vector<std::size_t> pos;
    for (auto& g : gens)
      if (auto last = detail::last_position(g.tokens, kGenEmb)) {
        seqs.push_back(concat(prompt, g.tokens));
        pos.push_back(prompt.size() + *last);
      }
    auto rows = embed_rows(model, seqs, pos);
    RetrievalInstance in;
    in.query_id = p.query.id;
    in.task = p.query.task;
    in.pool_size = p.pool.size();
    for (std::size_t c = 0; c < p.pool.size(); ++c)
      if (p.pool[c] == p.target.text) in.positives.insert(c);
    int correct = 0;
    for (auto& q : rows) {
      auto& sg = in.scores[Mode::gen];
      sg.clear();
      for (auto& c : p.pool) sg.push_back(cosine_or_floor(q, cand.at(c).gen));
      correct += hit_at_1(in, Mode::gen);
    }
    for (int k : ks) curve[k] += pass_at_k(n, correct, k);
  }
  for (auto& [k, v] : curve) v /= static_cast<double>(pairs.size());
  return curve;
}

}  // namespace genemb
