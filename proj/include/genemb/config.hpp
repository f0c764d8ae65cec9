#pragma once

// Run configuration: strict JSON (unknown keys rejected), every field
// optional with the defaults below. GENEMB_SEED overrides the run seed.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "genemb/corpus.hpp"
#include "genemb/error.hpp"
#include "genemb/model.hpp"
#include "genemb/rl.hpp"

namespace genemb {

struct SftConfig {
  int batch = 16;
  int accum = 1;
  int steps = 2000;
  double lr = 3e-3;
  double tau = 0.02;
  int warmup = 100;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  double weight_decay = 0.01;
  bool dctr_only = false;
};

struct RlConfig {
  int G = 8;
  double eps = 0.2;
  double beta = 0.04;
  int negatives = 3;
  double lr = 6e-5;
  int epochs = 1;
  int batch = 4;  // pairs per update
  int subset = 128;
  double temperature = 1.0;
  int max_new = 64;
  RewardVariant reward_variant;
};

struct DataConfig {
  TaskSpec spec;
  int pairs = 500;
  int pool = 32;
  int test_pairs = 100;
};

struct RunConfig {
  ModelConfig model;
  SftConfig sft;
  RlConfig rl;
  std::vector<DataConfig> data{DataConfig{}};
  double sft_fraction = 0.8;  // share of filtered pairs used for SFT; the rest are RL-only
  FilterOptions filter;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  void validate() const {
    model.validate();
    if (!(sft.tau > 0.0)) throw ConfigError("config: sft.tau must be positive");
    if (sft.batch < 2) throw ConfigError("config: sft.batch must be at least 2");
    if (sft.accum < 1 || sft.steps < 0 || !(sft.lr > 0.0) || sft.warmup < 0)
      throw ConfigError("config: sft.accum/steps/lr/warmup out of range");
    if (!(sft.min_lr_ratio >= 0.0 && sft.min_lr_ratio <= 1.0)) throw ConfigError("config: sft.min_lr_ratio must lie in [0, 1]");
    if (rl.G < 2) throw ConfigError("config: rl.G must be at least 2");
    if (!(rl.eps >= 0.0 && rl.eps < 1.0)) throw ConfigError("config: rl.eps must lie in [0, 1)");
    if (rl.beta < 0.0) throw ConfigError("config: rl.beta must be nonnegative");
    if (rl.negatives < 1 || rl.batch < 1 || rl.subset < 1 || rl.epochs < 1 || !(rl.lr > 0.0))
      throw ConfigError("config: rl.negatives/batch/subset/epochs/lr out of range");
    if (!(rl.temperature > 0.0)) throw ConfigError("config: rl.temperature must be positive");
    if (data.empty()) throw ConfigError("config: data must list at least one task");
    for (auto& d : data) {
      d.spec.validate(d.pool);
      if (d.pairs < 1 || d.test_pairs < 0) throw ConfigError("config: data pairs out of range");
    }
    if (!(sft_fraction > 0.0 && sft_fraction <= 1.0)) throw ConfigError("config: sft_fraction must lie in (0, 1]");
  }
};

namespace detail {

// Reads keys from a JSON object and, on finish(), rejects any it never asked
// for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: " + where_ + "." + key + " has the wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::StrictObject top(j, "root");
  if (auto* m = top.child("model")) {
    detail::StrictObject o(*m, "model");
    o.get("layers", c.model.layers);
    o.get("d_model", c.model.d_model);
    o.get("heads", c.model.heads);
    o.get("d_ff", c.model.d_ff);
    o.get("max_seq", c.model.max_seq);
    o.get("vocab_size", c.model.vocab_size);
    o.get("seed", c.model.seed);
    o.finish();
  }
  if (auto* s = top.child("sft")) {
    detail::StrictObject o(*s, "sft");
    o.get("batch", c.sft.batch);
    o.get("accum", c.sft.accum);
    o.get("steps", c.sft.steps);
    o.get("lr", c.sft.lr);
    o.get("tau", c.sft.tau);
    o.get("warmup", c.sft.warmup);
    o.get("min_lr_ratio", c.sft.min_lr_ratio);
    o.get("weight_decay", c.sft.weight_decay);
    o.get("dctr_only", c.sft.dctr_only);
    o.finish();
  }
  if (auto* r = top.child("rl")) {
    detail::StrictObject o(*r, "rl");
    o.get("G", c.rl.G);
    o.get("eps", c.rl.eps);
    o.get("beta", c.rl.beta);
    o.get("negatives", c.rl.negatives);
    o.get("lr", c.rl.lr);
    o.get("epochs", c.rl.epochs);
    o.get("batch", c.rl.batch);
    o.get("subset", c.rl.subset);
    o.get("temperature", c.rl.temperature);
    o.get("max_new", c.rl.max_new);
    std::string variant = c.rl.reward_variant.str();
    o.get("reward_variant", variant);
    c.rl.reward_variant = RewardVariant::parse(variant);
    o.finish();
  }
  if (auto* d = top.child("data")) {
    if (!d->is_array()) throw ConfigError("config: data must be an array of tasks");
    c.data.clear();
    for (std::size_t i = 0; i < d->size(); ++i) {
      detail::StrictObject o((*d)[i], "data[" + std::to_string(i) + "]");
      DataConfig dc;
      std::string task = to_string(dc.spec.kind);
      o.get("task", task);
      dc.spec.kind = task_kind_from(task);
      o.get("alphabet", dc.spec.alphabet);
      o.get("map_size", dc.spec.map_size);
      o.get("chain_length", dc.spec.chain_length);
      o.get("near_misses", dc.spec.near_misses);
      o.get("seed", dc.spec.seed);
      o.get("pairs", dc.pairs);
      o.get("pool", dc.pool);
      o.get("test_pairs", dc.test_pairs);
      o.finish();
      c.data.push_back(dc);
    }
  }
  if (auto* f = top.child("filter")) {
    detail::StrictObject o(*f, "filter");
    o.get("max_len", c.filter.max_len);
    o.get("run_len", c.filter.run_len);
    o.get("repeats", c.filter.repeats);
    o.finish();
  }
  top.get("sft_fraction", c.sft_fraction);
  top.get("seed", c.seed);
  top.get("out", c.out);
  top.finish();
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"layers", c.model.layers},     {"d_model", c.model.d_model}, {"heads", c.model.heads},
                {"d_ff", c.model.d_ff},         {"max_seq", c.model.max_seq}, {"vocab_size", c.model.vocab_size},
                {"seed", c.model.seed}};
  j["sft"] = {{"batch", c.sft.batch},   {"accum", c.sft.accum},     {"steps", c.sft.steps},
              {"lr", c.sft.lr},         {"tau", c.sft.tau},         {"warmup", c.sft.warmup},
              {"min_lr_ratio", c.sft.min_lr_ratio}, {"weight_decay", c.sft.weight_decay},
              {"dctr_only", c.sft.dctr_only}};
  j["rl"] = {{"G", c.rl.G},
             {"eps", c.rl.eps},
             {"beta", c.rl.beta},
             {"negatives", c.rl.negatives},
             {"lr", c.rl.lr},
             {"epochs", c.rl.epochs},
             {"batch", c.rl.batch},
             {"subset", c.rl.subset},
             {"temperature", c.rl.temperature},
             {"max_new", c.rl.max_new},
             {"reward_variant", c.rl.reward_variant.str()}};
  nlohmann::ordered_json data = nlohmann::ordered_json::array();
  for (auto& d : c.data)
    data.push_back({{"task", to_string(d.spec.kind)},
                    {"alphabet", d.spec.alphabet},
                    {"map_size", d.spec.map_size},
                    {"chain_length", d.spec.chain_length},
                    {"near_misses", d.spec.near_misses},
                    {"seed", d.spec.seed},
                    {"pairs", d.pairs},
                    {"pool", d.pool},
                    {"test_pairs", d.test_pairs}});
  j["data"] = data;
  j["filter"] = {{"max_len", c.filter.max_len}, {"run_len", c.filter.run_len}, {"repeats", c.filter.repeats}};
  j["sft_fraction"] = c.sft_fraction;
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

// Applies GENEMB_SEED if set.
inline void apply_env(RunConfig& c) {
  if (const char* s = std::getenv("GENEMB_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (!*s || *end) throw ConfigError("GENEMB_SEED: not an unsigned integer: '" + std::string(s) + "'");
    c.seed = v;
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  RunConfig c;
  try {
    c = config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  apply_env(c);
  c.validate();
  return c;
}

}  // namespace genemb
