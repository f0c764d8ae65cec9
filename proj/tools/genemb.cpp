// genemb: data generation, two-stage training, evaluation and reporting.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "genemb/manifest.hpp"
#include "genemb/pipeline.hpp"
#include "genemb/report.hpp"

using namespace genemb;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Config precedence: explicit file, else the config recorded upstream, else
// defaults. GENEMB_SEED then applies; command-line flags last.
RunConfig resolve_config(const std::string& path, const std::optional<nlohmann::ordered_json>& upstream) {
  if (!path.empty()) return load_config(path);
  RunConfig c;
  if (upstream) {
    try {
      c = config_from_json(nlohmann::json::parse(upstream->dump()));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("recorded config: ") + e.what());
    }
  }
  apply_env(c);
  return c;
}

std::optional<nlohmann::ordered_json> sibling_manifest(const std::string& ckpt) {
  const auto p = fs::path(ckpt).parent_path() / "manifest.json";
  if (!fs::exists(p)) return std::nullopt;
  return read_json(p.string());
}

std::optional<nlohmann::ordered_json> recorded_config(const std::optional<nlohmann::ordered_json>& m) {
  if (m && m->contains("config")) return std::optional<nlohmann::ordered_json>((*m)["config"]);
  return std::nullopt;
}

void finish_manifest(nlohmann::ordered_json& m, const std::string& dir) {
  write_file(dir + "/manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, task, out = "runs/data";
  std::optional<int> pairs, pool;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
  const auto t0 = Clock::now();
  RunConfig cfg = resolve_config(a.config, std::nullopt);
  if (!a.task.empty()) {
    DataConfig d = cfg.data.front();
    d.spec.kind = task_kind_from(a.task);
    cfg.data = {d};
  }
  for (auto& d : cfg.data) {
    if (a.pairs) d.pairs = *a.pairs;
    if (a.pool) d.pool = *a.pool;
  }
  if (a.seed) cfg.seed = *a.seed;
  cfg.out = a.out;
  cfg.validate();

  auto corpus = build_corpus(cfg);
  auto m = write_corpus(a.out, corpus, cfg);
  m["wall_clock_s"] = {{"gen-data", seconds_since(t0)}};
  finish_manifest(m, a.out);
  std::printf("filter: kept %zu, repetition %zu, too_long %zu, bad_format %zu\n", corpus.counts.kept,
              corpus.counts.repetition, corpus.counts.too_long, corpus.counts.bad_format);
  std::printf("corpus %s -> %s\n", m["corpus_sha256"].get<std::string>().c_str(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SftArgs {
  std::string config, data, out = "runs/sft";
  std::optional<int> steps, batch, accum;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool dctr_only = false;
};

int cmd_sft(const SftArgs& a) {
  const auto t0 = Clock::now();
  auto corpus_m = verify_corpus(a.data);
  RunConfig cfg = resolve_config(a.config, recorded_config(corpus_m));
  if (a.steps) cfg.sft.steps = *a.steps;
  if (a.batch) cfg.sft.batch = *a.batch;
  if (a.accum) cfg.sft.accum = *a.accum;
  if (a.lr) cfg.sft.lr = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.dctr_only) cfg.sft.dctr_only = true;
  cfg.out = a.out;
  cfg.validate();

  auto pairs = read_split(a.data, "sft");
  ensure_dir(a.out);
  Transformer model(cfg.model);
  std::ofstream log(a.out + "/sft_log.csv");
  if (!log) throw DataError("cannot open '" + a.out + "/sft_log.csv' for writing");
  log << sft_log_header();

  nlohmann::ordered_json m;
  m["stage"] = "sft";
  m["tool_version"] = kToolVersion;
  m["config_sha256"] = config_digest(cfg);
  m["corpus_sha256"] = corpus_m["corpus_sha256"];
  m["dctr_only"] = cfg.sft.dctr_only;
  try {
    train_sft(model, pairs, cfg.sft, cfg.seed, [&](const SftLogRow& r) {
      log << sft_log_line(r, cfg.seed);
      if (r.step % 100 == 0 || r.step + 1 == cfg.sft.steps)
        std::printf("step %d total %.4f (dctr %.4f gctr %.4f ce %.4f) lr %.3g\n", r.step, r.loss.total, r.loss.dctr,
                    r.loss.gctr, r.loss.ce, r.lr);
    });
  } catch (const NumericError& e) {
    // Keep the last good parameters for inspection.
    save_checkpoint(model, a.out + "/model.bin");
    m["aborted"] = e.what();
    m["checkpoint_sha256"] = sha256_hex(serialize_checkpoint(model));
    m["config"] = to_json(cfg);
    finish_manifest(m, a.out);
    throw;
  }
  save_checkpoint(model, a.out + "/model.bin");
  const auto sha = sha256_hex(serialize_checkpoint(model));
  m["checkpoint_sha256"] = sha;
  m["lineage"] = nlohmann::ordered_json::array({{{"stage", "sft"}, {"checkpoint_sha256", sha}}});
  m["wall_clock_s"] = {{"sft", seconds_since(t0)}};
  m["config"] = to_json(cfg);
  finish_manifest(m, a.out);
  std::printf("checkpoint %s -> %s/model.bin\n", sha.c_str(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct RlArgs {
  std::string config, ckpt, data, out = "runs/rl", variant;
  std::optional<int> G, neg, epochs;
  std::optional<double> eps, beta, lr;
  std::optional<std::uint64_t> seed;
};

int cmd_rl(const RlArgs& a) {
  const auto t0 = Clock::now();
  auto corpus_m = verify_corpus(a.data);
  auto parent_m = sibling_manifest(a.ckpt);
  auto upstream = recorded_config(parent_m);
  RunConfig cfg = resolve_config(a.config, upstream ? upstream : recorded_config(corpus_m));
  if (a.G) cfg.rl.G = *a.G;
  if (a.neg) cfg.rl.negatives = *a.neg;
  if (a.epochs) cfg.rl.epochs = *a.epochs;
  if (a.eps) cfg.rl.eps = *a.eps;
  if (a.beta) cfg.rl.beta = *a.beta;
  if (a.lr) cfg.rl.lr = *a.lr;
  if (!a.variant.empty()) cfg.rl.reward_variant = RewardVariant::parse(a.variant);
  if (a.seed) cfg.seed = *a.seed;
  cfg.out = a.out;
  cfg.validate();

  const Transformer ref = load_checkpoint(a.ckpt);
  Transformer policy = ref.clone();
  auto pairs = read_split(a.data, "rl");
  if (pairs.empty()) throw DataError(a.data + "/rl.jsonl: no pairs");
  ensure_dir(a.out);
  std::ofstream log(a.out + "/rl_log.csv"), dump(a.out + "/rollouts.jsonl");
  if (!log || !dump) throw DataError("cannot open log files in '" + a.out + "'");
  log << rl_log_header();

  auto summary = train_rl(policy, ref, pairs, cfg.rl, cfg.seed, &dump, [&](const RlLogRow& r) {
    log << rl_log_line(r);
    std::printf("update %d reward %.4f format %.3f emb %.4f kl %.5f clip %.3f\n", r.update, r.reward, r.format, r.emb,
                r.kl, r.clip_fraction);
  });
  save_checkpoint(policy, a.out + "/model.bin");
  const auto sha = sha256_hex(serialize_checkpoint(policy));

  nlohmann::ordered_json m;
  m["stage"] = "rl";
  m["tool_version"] = kToolVersion;
  m["config_sha256"] = config_digest(cfg);
  m["corpus_sha256"] = corpus_m["corpus_sha256"];
  m["reward_variant"] = cfg.rl.reward_variant.str();
  m["parent_checkpoint_sha256"] = sha256_hex(serialize_checkpoint(ref));
  m["checkpoint_sha256"] = sha;
  auto lineage = parent_m && parent_m->contains("lineage") ? (*parent_m)["lineage"] : nlohmann::ordered_json::array();
  lineage.push_back({{"stage", "rl"}, {"checkpoint_sha256", sha}});
  m["lineage"] = lineage;
  m["final_format"] = summary.final_format;
  m["wall_clock_s"] = {{"rl", seconds_since(t0)}};
  m["config"] = to_json(cfg);
  finish_manifest(m, a.out);
  std::printf("checkpoint %s -> %s/model.bin (final format %.3f)\n", sha.c_str(), a.out.c_str(), summary.final_format);
  return 0;
}

// ---------------------------------------------------------------------------

// Lineage fields copied from the checkpoint's manifest into report meta.
void annotate(EvalReport& rep, const std::string& ckpt, const nlohmann::ordered_json& corpus_m, const std::string& split) {
  rep.meta["split"] = split;
  rep.meta["corpus_sha256"] = corpus_m["corpus_sha256"];
  if (auto m = sibling_manifest(ckpt))
    for (const char* key : {"stage", "dctr_only", "reward_variant", "lineage"})
      if (m->contains(key)) rep.meta[key] = (*m)[key];
}

std::string csv_for_mode(const EvalReport& rep, const std::string& mode) {
  if (mode == "all") return report_csv(rep);
  std::string out = "task,instances,hit1_" + mode + ",ndcg5_" + mode + "\n";
  auto row = [&](const std::string& name, const TaskMetrics& t) {
    const double h = mode == "disc" ? t.hit1_disc : mode == "gen" ? t.hit1_gen : t.oracle_hit1;
    const double n = mode == "disc" ? t.ndcg5_disc : mode == "gen" ? t.ndcg5_gen : t.oracle_ndcg5;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f\n", name.c_str(), t.instances, h, n);
    out += buf;
  };
  for (auto& [name, t] : rep.tasks) row(name, t);
  row("aggregate", rep.aggregate);
  return out;
}

struct EvalArgs {
  std::string ckpt, data, out, mode = "all", split = "test";
};

int cmd_eval(const EvalArgs& a) {
  auto corpus_m = verify_corpus(a.data);
  const auto model = load_checkpoint(a.ckpt);
  auto pairs = read_split(a.data, a.split);
  auto rep = evaluate(model, pairs);
  annotate(rep, a.ckpt, corpus_m, a.split);
  const std::string out = a.out.empty() ? fs::path(a.ckpt).parent_path().string() : a.out;
  ensure_dir(out);
  // Keep a previously computed pass@k curve for the same checkpoint.
  const std::string path = out + "/report.json";
  if (fs::exists(path)) {
    auto old = report_from_json(read_json(path));
    if (old.meta.value("checkpoint_sha256", std::string()) == rep.meta["checkpoint_sha256"]) rep.passk = old.passk;
  }
  write_file(path, to_json(rep).dump(2) + "\n");
  const auto csv = csv_for_mode(rep, a.mode);
  write_file(out + "/report.csv", csv);
  std::cout << csv;
  return 0;
}

struct PasskArgs {
  std::string ckpt, data, out, ks = "1,2,4,8,16", split = "test";
  int n = 16;
  double temp = 1.0;
  std::optional<std::uint64_t> seed;
};

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      ks.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--ks: not an integer: '" + item + "'");
    }
  }
  return ks;
}

int cmd_passk(const PasskArgs& a) {
  auto corpus_m = verify_corpus(a.data);
  RunConfig seed_src;
  apply_env(seed_src);
  const std::uint64_t seed = a.seed ? *a.seed : seed_src.seed;
  if (!(a.temp >= 0.0)) throw ConfigError("--temp must be nonnegative");
  if (a.n < 1) throw ConfigError("--n must be at least 1");
  const auto model = load_checkpoint(a.ckpt);
  auto curve = coverage_eval(model, read_split(a.data, a.split), a.n, parse_ks(a.ks), a.temp, seed);
  const std::string out = a.out.empty() ? fs::path(a.ckpt).parent_path().string() : a.out;
  ensure_dir(out);
  nlohmann::ordered_json j;
  j["checkpoint_sha256"] = sha256_hex(serialize_checkpoint(model));
  j["n"] = a.n;
  j["temperature"] = a.temp;
  j["seed"] = seed;
  nlohmann::ordered_json c = nlohmann::ordered_json::object();
  for (auto& [k, v] : curve) c[std::to_string(k)] = v;
  j["curve"] = c;
  write_file(out + "/passk.json", j.dump(2) + "\n");
  const std::string path = out + "/report.json";
  if (fs::exists(path)) {
    auto rep = report_from_json(read_json(path));
    if (rep.meta.value("checkpoint_sha256", std::string()) == j["checkpoint_sha256"]) {
      rep.passk = curve;
      write_file(path, to_json(rep).dump(2) + "\n");
    }
  }
  for (auto& [k, v] : curve) std::printf("pass@%d %.4f\n", k, v);
  return 0;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out = "runs/report";
};

int cmd_report(const ReportArgs& a) {
  std::vector<std::pair<std::string, EvalReport>> runs;
  for (auto& dir : a.runs) {
    const std::string path = dir + "/report.json";
    if (!fs::exists(path)) throw DataError(path + ": missing (run `genemb eval` first)");
    runs.emplace_back(fs::path(dir).filename().string(), report_from_json(read_json(path)));
  }
  auto rows = comparison_rows(runs);
  ensure_dir(a.out);
  const auto md = comparison_markdown(rows);
  write_file(a.out + "/comparison.md", md);
  write_file(a.out + "/comparison.csv", comparison_csv(rows));
  std::cout << md;
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e))
    return 3;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint discriminative and generative embeddings with reasoning-driven training"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* c_gd = app.add_subcommand("gen-data", "Generate and filter a synthetic corpus");
  c_gd->add_option("--config", gd.config, "JSON run config")->check(CLI::ExistingFile);
  c_gd->add_option("--task", gd.task, "kv_lookup | attribute_match | arithmetic_chain");
  c_gd->add_option("--pairs", gd.pairs, "Training pairs per task");
  c_gd->add_option("--pool", gd.pool, "Candidates per query");
  c_gd->add_option("--seed", gd.seed, "Run seed");
  c_gd->add_option("--out", gd.out, "Output directory")->capture_default_str();

  SftArgs sa;
  auto* c_sft = app.add_subcommand("sft", "Stage 1: joint contrastive and next-token training");
  c_sft->add_option("--config", sa.config, "JSON run config")->check(CLI::ExistingFile);
  c_sft->add_option("--data", sa.data, "Corpus directory from gen-data")->required();
  c_sft->add_option("--out", sa.out, "Output directory")->capture_default_str();
  c_sft->add_option("--steps", sa.steps);
  c_sft->add_option("--batch", sa.batch);
  c_sft->add_option("--accum", sa.accum);
  c_sft->add_option("--lr", sa.lr);
  c_sft->add_option("--seed", sa.seed);
  c_sft->add_flag("--dctr-only", sa.dctr_only, "Discriminative contrastive loss only (baseline)");

  RlArgs ra;
  auto* c_rl = app.add_subcommand("rl", "Stage 2: group-relative policy optimisation");
  c_rl->add_option("--config", ra.config, "JSON run config")->check(CLI::ExistingFile);
  c_rl->add_option("--ckpt", ra.ckpt, "SFT checkpoint")->required();
  c_rl->add_option("--data", ra.data, "Corpus directory from gen-data")->required();
  c_rl->add_option("--out", ra.out, "Output directory")->capture_default_str();
  c_rl->add_option("--G", ra.G, "Responses per group");
  c_rl->add_option("--eps", ra.eps, "Clip range");
  c_rl->add_option("--beta", ra.beta, "KL weight");
  c_rl->add_option("--neg", ra.neg, "Negative targets per pair");
  c_rl->add_option("--lr", ra.lr);
  c_rl->add_option("--epochs", ra.epochs);
  c_rl->add_option("--variant", ra.variant, "full | ranking_only | gap_only | threshold(θ)");
  c_rl->add_option("--seed", ra.seed);

  EvalArgs ea;
  auto* c_eval = app.add_subcommand("eval", "Retrieval metrics on a corpus split");
  c_eval->add_option("--ckpt", ea.ckpt)->required();
  c_eval->add_option("--data", ea.data, "Corpus directory")->required();
  c_eval->add_option("--mode", ea.mode)->check(CLI::IsMember({"disc", "gen", "oracle", "all"}))->capture_default_str();
  c_eval->add_option("--split", ea.split)->check(CLI::IsMember({"test", "sft", "rl"}))->capture_default_str();
  c_eval->add_option("--out", ea.out, "Output directory (default: the checkpoint's)");

  PasskArgs pa;
  auto* c_pk = app.add_subcommand("passk", "pass@k coverage of sampled generative embeddings");
  c_pk->add_option("--ckpt", pa.ckpt)->required();
  c_pk->add_option("--data", pa.data, "Corpus directory")->required();
  c_pk->add_option("--n", pa.n)->capture_default_str();
  c_pk->add_option("--ks", pa.ks)->capture_default_str();
  c_pk->add_option("--temp", pa.temp)->capture_default_str();
  c_pk->add_option("--seed", pa.seed);
  c_pk->add_option("--split", pa.split)->check(CLI::IsMember({"test", "sft", "rl"}))->capture_default_str();
  c_pk->add_option("--out", pa.out, "Output directory (default: the checkpoint's)");

  ReportArgs rpa;
  auto* c_rep = app.add_subcommand("report", "Comparison table over evaluated runs");
  c_rep->add_option("runs", rpa.runs, "Run directories holding report.json")->required();
  c_rep->add_option("--out", rpa.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_gd) return cmd_gen_data(gd);
    if (*c_sft) return cmd_sft(sa);
    if (*c_rl) return cmd_rl(ra);
    if (*c_eval) return cmd_eval(ea);
    if (*c_pk) return cmd_passk(pa);
    if (*c_rep) return cmd_report(rpa);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "genemb: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
