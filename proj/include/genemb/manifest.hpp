#pragma once

// Stage artifacts on disk: corpus files, content digests and run manifests.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "genemb/config.hpp"
#include "genemb/corpus.hpp"
#include "genemb/digest.hpp"
#include "genemb/pipeline.hpp"
#include <nlohmann/json.hpp>

namespace genemb {

inline constexpr const char* kToolVersion = "genemb 0.1.0";

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write to '" + path + "' failed");
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

inline nlohmann::ordered_json read_json(const std::string& path) {
  try {
    return nlohmann::ordered_json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// The output directory names where artifacts go, not what they contain.
inline std::string config_digest(const RunConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("out");
  return sha256_hex(j.dump());
}

inline nlohmann::ordered_json to_json(const FilterCounts& c) {
  nlohmann::ordered_json j;
  j["kept"] = c.kept;
  j["repetition"] = c.repetition;
  j["too_long"] = c.too_long;
  j["bad_format"] = c.bad_format;
  return j;
}

// Digest over the per-file digests, in file-name order.
inline std::string corpus_digest(const std::map<std::string, std::string>& files) {
  std::string s;
  for (auto& [name, sha] : files) s += name + ":" + sha + "\n";
  return sha256_hex(s);
}

// Serialized corpus: samples per split plus one pools file keyed by query id.
struct CorpusFiles {
  std::map<std::string, std::string> contents;  // file name -> bytes
  std::vector<PairRecord> rl;
};

inline CorpusFiles corpus_files(const Corpus& c, const RunConfig& cfg) {
  CorpusFiles out;
  const auto sft = c.sft();
  const std::size_t n_rl = std::min<std::size_t>(static_cast<std::size_t>(cfg.rl.subset), c.pairs.size());
  out.rl = rl_subset(c.pairs, n_rl, hash_seed(cfg.seed, "rl_subset"));
  std::vector<PairRecord> all = c.pairs;
  all.insert(all.end(), c.test.begin(), c.test.end());
  out.contents["sft.jsonl"] = to_jsonl(sft);
  out.contents["rl.jsonl"] = to_jsonl(out.rl);
  out.contents["test.jsonl"] = to_jsonl(c.test);
  out.contents["pools.jsonl"] = pools_to_jsonl(all);
  return out;
}

inline nlohmann::ordered_json write_corpus(const std::string& dir, const Corpus& c, const RunConfig& cfg) {
  ensure_dir(dir);
  auto files = corpus_files(c, cfg);
  std::map<std::string, std::string> digests;
  for (auto& [name, bytes] : files.contents) {
    write_file(dir + "/" + name, bytes);
    digests[name] = sha256_hex(bytes);
  }
  nlohmann::ordered_json m;
  m["stage"] = "gen-data";
  m["tool_version"] = kToolVersion;
  m["config_sha256"] = config_digest(cfg);
  m["corpus_sha256"] = corpus_digest(digests);
  m["files"] = digests;
  m["filter_counts"] = to_json(c.counts);
  m["counts"] = {{"sft", c.sft().size()}, {"rl", files.rl.size()}, {"test", c.test.size()}};
  m["config"] = to_json(cfg);
  return m;
}

// Recomputes every file digest listed in dir/manifest.json.
inline nlohmann::ordered_json verify_corpus(const std::string& dir) {
  auto m = read_json(dir + "/manifest.json");
  if (!m.contains("files")) throw DataError(dir + "/manifest.json: no file digests");
  std::map<std::string, std::string> digests;
  for (auto it = m["files"].begin(); it != m["files"].end(); ++it) {
    const std::string path = dir + "/" + it.key();
    const std::string sha = sha256_hex(read_file(path));
    if (sha != it->get<std::string>()) throw DataError(path + ": digest does not match manifest");
    digests[it.key()] = sha;
  }
  if (corpus_digest(digests) != m.value("corpus_sha256", std::string()))
    throw DataError(dir + "/manifest.json: corpus digest mismatch");
  return m;
}

inline std::vector<PairRecord> read_split(const std::string& dir, const std::string& split) {
  auto pairs = read_pairs(dir + "/" + split + ".jsonl", dir + "/pools.jsonl");
  for (auto& p : pairs)
    if (p.pool.empty()) throw DataError(dir + "/pools.jsonl: no pool for query '" + p.query.id + "'");
  return pairs;
}

}  // namespace genemb
