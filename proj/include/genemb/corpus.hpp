#pragma once

// Synthetic retrieval tasks with programmatic chain-of-thought annotations,
// annotation filtering, and balanced RL subset sampling.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genemb/error.hpp"
#include "genemb/template.hpp"
#include "genemb/vocab.hpp"

namespace genemb {

enum class Role { query, target };

struct Cot {
  std::string think;
  std::string answer;
  bool operator==(const Cot&) const = default;
};

struct Sample {
  std::string id;
  Role role = Role::query;
  std::string task;
  std::string text;
  std::optional<Cot> cot;
  std::string pair_id;
  bool operator==(const Sample&) const = default;
};

// One query with its positive target and retrieval pool (candidate target
// texts, the positive included exactly once).
struct PairRecord {
  Sample query;
  Sample target;
  std::vector<std::string> pool;
  bool seen_in_sft = false;
};

enum class TaskKind { kv_lookup, attribute_match, arithmetic_chain };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kv_lookup: return "kv_lookup";
    case TaskKind::attribute_match: return "attribute_match";
    case TaskKind::arithmetic_chain: return "arithmetic_chain";
  }
  return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
  if (s == "kv_lookup") return TaskKind::kv_lookup;
  if (s == "attribute_match") return TaskKind::attribute_match;
  if (s == "arithmetic_chain") return TaskKind::arithmetic_chain;
  throw ConfigError("task: unknown kind '" + s + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::kv_lookup;
  // Size of the answer space: values for kv_lookup, colours (= shapes) for
  // attribute_match, the modulus for arithmetic_chain.
  int alphabet = 0;  // 0 = task default, see symbols()
  int map_size = 2;      // kv_lookup entries per query
  int chain_length = 3;  // arithmetic_chain terms
  int near_misses = -1;  // pool slots reserved for near misses; -1 = as many as exist
  std::uint64_t seed = 0;

  int symbols() const {
    if (alphabet != 0) return alphabet;
    return kind == TaskKind::attribute_match ? AlphabetLimits::colors : 32;
  }

  int answer_space() const {
    const int a = symbols();
    return kind == TaskKind::attribute_match ? a * a : a;
  }

  void validate(int pool_size) const {
    auto bad = [&](const std::string& why) { throw ConfigError("task " + to_string(kind) + ": " + why); };
    const int a = symbols();
    if (a < 2) bad("alphabet must be at least 2");
    switch (kind) {
      case TaskKind::kv_lookup:
        if (a > AlphabetLimits::values) bad("alphabet exceeds the value vocabulary");
        if (map_size < 1 || map_size > AlphabetLimits::keys || map_size > a) bad("map_size out of range");
        break;
      case TaskKind::attribute_match:
        if (a > AlphabetLimits::colors) bad("alphabet exceeds the colour/shape vocabulary");
        break;
      case TaskKind::arithmetic_chain:
        if (a > AlphabetLimits::numbers) bad("alphabet exceeds the number vocabulary");
        if (chain_length < 2) bad("chain_length must be at least 2");
        break;
    }
    if (pool_size < 2) bad("pool size must be at least 2");
    if (pool_size > answer_space())
      bad("pool of " + std::to_string(pool_size) + " exceeds the answer space of " + std::to_string(answer_space()));
  }
};

namespace detail {

inline std::string join(const std::vector<std::string>& parts, const char* sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) s += sep;
    s += parts[i];
  }
  return s;
}

inline std::string tok(char prefix, int i) { return std::string(1, prefix) + std::to_string(i); }

inline int pick(std::mt19937_64& rng, int n) {
  return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng));
}

inline std::vector<int> distinct(std::mt19937_64& rng, int n, int k) {
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(k));
  return all;
}

}  // namespace detail

// Reference rule for each task: maps a query text to its correct target text.
inline std::string solve_query(TaskKind kind, const std::string& text, int alphabet) {
  const auto toks = Vocab::standard().encode(text);
  std::vector<std::string> s;
  for (int t : toks) s.push_back(Vocab::standard().token(t));
  switch (kind) {
    case TaskKind::kv_lookup: {
      const std::string& probe = s.back();
      for (std::size_t i = 0; i + 2 < s.size(); ++i)
        if (s[i] == probe && s[i + 1] == ":") return s[i + 2];
      throw DataError("solve_query: probe key not in map");
    }
    case TaskKind::attribute_match: {
      const int c = std::stoi(s.at(0).substr(1));
      const int sh = std::stoi(s.at(1).substr(1));
      return detail::tok('o', c * alphabet + sh);
    }
    case TaskKind::arithmetic_chain: {
      int acc = 0;
      for (auto& x : s)
        if (x[0] == 'n') acc = (acc + std::stoi(x.substr(1))) % alphabet;
      return detail::tok('n', acc);
    }
  }
  return {};
}

inline Cot target_cot(TaskKind kind, const std::string& text, int alphabet) {
  if (kind == TaskKind::attribute_match) {
    const int o = std::stoi(text.substr(1));
    return {text + " = " + detail::tok('c', o / alphabet) + " " + detail::tok('s', o % alphabet), text};
  }
  return {text, text};
}

inline Sample make_target(const TaskSpec& spec, const std::string& text, const std::string& id,
                          const std::string& pair_id) {
  return {id, Role::target, to_string(spec.kind), text, target_cot(spec.kind, text, spec.symbols()), pair_id};
}

// Generates n_pairs (query, positive, pool) triples. Distractors are near
// misses first (other map values; objects sharing one attribute; sums off by
// a small amount), then uniform fill. Deterministic in (spec, seed).
inline std::vector<PairRecord> synth_generate(const TaskSpec& spec, int n_pairs, int pool_size, std::uint64_t seed,
                                              const std::string& id_prefix = "") {
  spec.validate(pool_size);
  if (n_pairs < 1) throw ConfigError("synth_generate: n_pairs must be at least 1");
  std::seed_seq sseq{seed, spec.seed, static_cast<std::uint64_t>(spec.kind)};
  std::mt19937_64 rng(sseq);
  const std::string task = to_string(spec.kind);
  const int A = spec.symbols();
  std::vector<PairRecord> out;
  out.reserve(static_cast<std::size_t>(n_pairs));

  for (int i = 0; i < n_pairs; ++i) {
    char idx[16];
    std::snprintf(idx, sizeof idx, "%05d", i);
    const std::string pair_id = id_prefix + task + "-" + idx;
    std::string qtext, answer, think;
    std::vector<std::string> near;
    char answer_prefix = 'v';
    switch (spec.kind) {
      case TaskKind::kv_lookup: {
        auto keys = detail::distinct(rng, AlphabetLimits::keys, spec.map_size);
        auto vals = detail::distinct(rng, A, spec.map_size);
        const int probe = detail::pick(rng, spec.map_size);
        std::vector<std::string> entries;
        for (int e = 0; e < spec.map_size; ++e)
          entries.push_back(detail::tok('k', keys[e]) + ":" + detail::tok('v', vals[e]));
        qtext = detail::join(entries) + " ? " + detail::tok('k', keys[probe]);
        answer = detail::tok('v', vals[probe]);
        think = detail::tok('k', keys[probe]) + " : " + answer;
        for (int e = 0; e < spec.map_size; ++e)
          if (e != probe) near.push_back(detail::tok('v', vals[e]));
        break;
      }
      case TaskKind::attribute_match: {
        answer_prefix = 'o';
        const int c = detail::pick(rng, A), s = detail::pick(rng, A);
        qtext = detail::tok('c', c) + " " + detail::tok('s', s) + " ?";
        answer = detail::tok('o', c * A + s);
        think = detail::tok('c', c) + " " + detail::tok('s', s) + " = " + answer;
        for (int x = 0; x < A; ++x) {
          if (x != s) near.push_back(detail::tok('o', c * A + x));
          if (x != c) near.push_back(detail::tok('o', x * A + s));
        }
        std::shuffle(near.begin(), near.end(), rng);
        break;
      }
      case TaskKind::arithmetic_chain: {
        answer_prefix = 'n';
        std::vector<std::string> terms, steps;
        int acc = 0;
        for (int t = 0; t < spec.chain_length; ++t) {
          const int x = detail::pick(rng, A);
          terms.push_back(detail::tok('n', x));
          if (t == 0) {
            acc = x;
          } else {
            const int next = (acc + x) % A;
            steps.push_back(detail::tok('n', acc) + " + " + detail::tok('n', x) + " = " + detail::tok('n', next));
            acc = next;
          }
        }
        qtext = detail::join(terms, " + ") + " ?";
        answer = detail::tok('n', acc);
        think = detail::join(steps);
        for (int off = 1; off <= A / 2; ++off) {
          near.push_back(detail::tok('n', (acc + off) % A));
          if ((acc - off + A) % A != (acc + off) % A) near.push_back(detail::tok('n', (acc - off + A) % A));
        }
        break;
      }
    }

    std::vector<std::string> pool{answer};
    std::set<std::string> used{answer};
    const int reserve = spec.near_misses < 0 ? pool_size - 1 : std::min(spec.near_misses, pool_size - 1);
    for (auto& n : near) {
      if (static_cast<int>(pool.size()) > reserve) break;
      if (used.insert(n).second) pool.push_back(n);
    }
    while (static_cast<int>(pool.size()) < pool_size) {
      const std::string cand = detail::tok(answer_prefix, detail::pick(rng, spec.answer_space()));
      if (used.insert(cand).second) pool.push_back(cand);
    }
    std::shuffle(pool.begin(), pool.end(), rng);

    PairRecord rec;
    rec.query = {pair_id + "-q", Role::query, task, qtext, Cot{think, answer}, pair_id};
    rec.target = make_target(spec, answer, pair_id + "-t", pair_id);
    rec.pool = std::move(pool);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

// True iff some block of exactly `run_len` tokens occurs `repeats` or more
// times back to back. Linear: a block starting at i repeats r times iff
// tokens[j] == tokens[j + m] for every j in [i, i + (r-1)m).
inline bool has_repetition(const std::vector<int>& tokens, std::size_t run_len, std::size_t repeats) {
  if (run_len < 1 || repeats < 2) throw ConfigError("has_repetition: need run_len >= 1 and repeats >= 2");
  const std::size_t need = (repeats - 1) * run_len;
  if (tokens.size() < run_len * repeats) return false;
  std::size_t streak = 0;
  for (std::size_t j = 0; j + run_len < tokens.size(); ++j) {
    streak = tokens[j] == tokens[j + run_len] ? streak + 1 : 0;
    if (streak >= need) return true;
  }
  return false;
}

enum class FilterReason { none, repetition, too_long, bad_format };

inline std::string to_string(FilterReason r) {
  switch (r) {
    case FilterReason::none: return "none";
    case FilterReason::repetition: return "repetition";
    case FilterReason::too_long: return "too_long";
    case FilterReason::bad_format: return "bad_format";
  }
  return "?";
}

struct FilterVerdict {
  bool keep = true;
  FilterReason reason = FilterReason::none;
};

struct FilterOptions {
  std::size_t max_len = 192;
  std::size_t run_len = 4;
  std::size_t repeats = 4;
};

// Precedence: repetition, then too_long, then bad_format.
inline FilterVerdict filter_record(const Sample& s, const FilterOptions& opt = {}) {
  if (!s.cot) return {false, FilterReason::bad_format};
  std::vector<int> toks;
  try {
    toks = render_response(Vocab::standard(), s.cot->think, s.cot->answer);
  } catch (const FormatError&) {
    return {false, FilterReason::bad_format};
  }
  if (has_repetition(toks, opt.run_len, opt.repeats)) return {false, FilterReason::repetition};
  if (toks.size() > opt.max_len) return {false, FilterReason::too_long};
  if (!parse_response(toks).ok()) return {false, FilterReason::bad_format};
  return {};
}

inline FilterVerdict filter_pair(const PairRecord& p, const FilterOptions& opt = {}) {
  auto q = filter_record(p.query, opt);
  if (!q.keep) return q;
  return filter_record(p.target, opt);
}

struct FilterCounts {
  std::size_t kept = 0, repetition = 0, too_long = 0, bad_format = 0;
  bool operator==(const FilterCounts&) const = default;
};

inline std::vector<PairRecord> filter_pairs(const std::vector<PairRecord>& pairs, FilterCounts& counts,
                                            const FilterOptions& opt = {}) {
  std::vector<PairRecord> out;
  for (auto& p : pairs) {
    switch (filter_pair(p, opt).reason) {
      case FilterReason::none:
        ++counts.kept;
        out.push_back(p);
        break;
      case FilterReason::repetition: ++counts.repetition; break;
      case FilterReason::too_long: ++counts.too_long; break;
      case FilterReason::bad_format: ++counts.bad_format; break;
    }
  }
  return out;
}

// Corrupts the query annotation of `count` distinct pairs with the given
// defect, for exercising the filter.
inline void inject_violations(std::vector<PairRecord>& pairs, FilterReason kind, std::size_t count,
                              std::uint64_t seed, const FilterOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> clean;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (filter_pair(pairs[i], opt).keep) clean.push_back(i);
  if (clean.size() < count) throw ConfigError("inject_violations: not enough clean pairs");
  std::shuffle(clean.begin(), clean.end(), rng);
  const auto& V = Vocab::standard();
  for (std::size_t k = 0; k < count; ++k) {
    Cot& c = *pairs[clean[k]].query.cot;
    switch (kind) {
      case FilterReason::repetition: {
        const std::string block = "k1 : v2 +";
        c.think = detail::join({c.think, block, block, block, block});
        break;
      }
      case FilterReason::too_long: {
        // Random value tokens have no 4x4 back-to-back repeats in practice;
        // regenerate until the padding is clean so precedence stays exact.
        std::string pad;
        do {
          std::vector<std::string> t;
          while (t.size() + 4 < opt.max_len) t.push_back(V.token(V.id("v0") + detail::pick(rng, AlphabetLimits::values)));
          pad = detail::join(t);
        } while (has_repetition(V.encode(pad), opt.run_len, opt.repeats));
        c.think = pad;
        break;
      }
      case FilterReason::bad_format:
        // The annotator dropped </think>, so the summary tag lands inside the reasoning.
        c.think = c.think + " <answer> " + c.answer;
        break;
      case FilterReason::none: break;
    }
  }
}

// ---------------------------------------------------------------------------
// RL subset

// Balanced subset of n pairs: per-task counts differ by at most one (the
// remainder goes to tasks in seeded order), unseen-in-SFT pairs first.
inline std::vector<PairRecord> rl_subset(const std::vector<PairRecord>& pairs, std::size_t n, std::uint64_t seed) {
  if (n > pairs.size())
    throw DataError("rl_subset: requested " + std::to_string(n) + " pairs from a pool of " +
                    std::to_string(pairs.size()));
  std::map<std::string, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < pairs.size(); ++i) by_task[pairs[i].query.task].push_back(i);
  std::vector<std::string> tasks;
  for (auto& [t, _] : by_task) tasks.push_back(t);
  std::mt19937_64 rng(seed);
  std::vector<std::string> order = tasks;
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t base = n / tasks.size(), extra = n % tasks.size();
  std::map<std::string, std::size_t> quota;
  for (std::size_t i = 0; i < order.size(); ++i) quota[order[i]] = base + (i < extra ? 1 : 0);

  std::vector<PairRecord> out;
  for (auto& t : tasks) {
    std::vector<std::size_t> unseen, seen;
    for (auto i : by_task[t]) (pairs[i].seen_in_sft ? seen : unseen).push_back(i);
    std::shuffle(unseen.begin(), unseen.end(), rng);
    std::shuffle(seen.begin(), seen.end(), rng);
    unseen.insert(unseen.end(), seen.begin(), seen.end());
    if (unseen.size() < quota[t])
      throw DataError("rl_subset: task " + t + " has " + std::to_string(unseen.size()) + " pairs, quota " +
                      std::to_string(quota[t]));
    for (std::size_t k = 0; k < quota[t]; ++k) out.push_back(pairs[unseen[k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::ordered_json to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["role"] = s.role == Role::query ? "query" : "target";
  j["task"] = s.task;
  j["text"] = s.text;
  if (s.cot) {
    nlohmann::ordered_json c;
    c["think"] = s.cot->think;
    c["answer"] = s.cot->answer;
    j["cot"] = c;
  } else {
    j["cot"] = nullptr;
  }
  j["pair_id"] = s.pair_id;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"id", "role", "task", "text", "cot", "pair_id"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!keys.count(it.key())) throw DataError("sample: unknown key '" + it.key() + "'");
  Sample s;
  s.id = j.at("id").get<std::string>();
  const auto role = j.at("role").get<std::string>();
  if (role != "query" && role != "target") throw DataError("sample " + s.id + ": bad role '" + role + "'");
  s.role = role == "query" ? Role::query : Role::target;
  s.task = j.at("task").get<std::string>();
  s.text = j.at("text").get<std::string>();
  if (!j.at("cot").is_null()) s.cot = Cot{j["cot"].at("think").get<std::string>(), j["cot"].at("answer").get<std::string>()};
  s.pair_id = j.at("pair_id").get<std::string>();
  return s;
}

inline std::string to_jsonl(const std::vector<PairRecord>& pairs) {
  std::string out;
  for (auto& p : pairs) {
    out += to_json(p.query).dump() + "\n";
    out += to_json(p.target).dump() + "\n";
  }
  return out;
}

inline std::string pools_to_jsonl(const std::vector<PairRecord>& pairs) {
  std::string out;
  for (auto& p : pairs) {
    nlohmann::ordered_json j;
    j["query_id"] = p.query.id;
    j["candidates"] = p.pool;
    j["seen_in_sft"] = p.seen_in_sft;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

// Reads a samples file (query/target lines sharing pair_id) and, when given,
// its pools file.
inline std::vector<PairRecord> read_pairs(const std::string& samples_path, const std::string& pools_path = "") {
  std::map<std::string, PairRecord> by_pair;
  std::vector<std::string> order;
  std::size_t lineno = 0;
  for (auto& line : read_lines(samples_path)) {
    ++lineno;
    Sample s;
    try {
      s = sample_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(samples_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto [it, fresh] = by_pair.try_emplace(s.pair_id);
    if (fresh) order.push_back(s.pair_id);
    (s.role == Role::query ? it->second.query : it->second.target) = s;
  }
  std::map<std::string, std::string> qid_to_pair;
  for (auto& id : order) {
    auto& p = by_pair[id];
    if (p.query.id.empty() || p.target.id.empty())
      throw DataError(samples_path + ": pair '" + id + "' lacks a query or a target");
    qid_to_pair[p.query.id] = id;
  }
  if (!pools_path.empty()) {
    for (auto& line : read_lines(pools_path)) {
      auto j = nlohmann::json::parse(line);
      auto it = qid_to_pair.find(j.at("query_id").get<std::string>());
      if (it == qid_to_pair.end()) continue;
      auto& p = by_pair[it->second];
      p.pool = j.at("candidates").get<std::vector<std::string>>();
      p.seen_in_sft = j.value("seen_in_sft", false);
      if (std::count(p.pool.begin(), p.pool.end(), p.target.text) != 1)
        throw DataError(pools_path + ": pool of '" + p.query.id + "' must contain the positive exactly once");
    }
  }
  std::vector<PairRecord> out;
  for (auto& id : order) out.push_back(by_pair[id]);
  return out;
}

}  // namespace genemb
