#pragma once

// Comparison tables across evaluated runs, one row per training recipe.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "genemb/error.hpp"
#include "genemb/eval.hpp"
#include "genemb/rl.hpp"
#include <nlohmann/json.hpp>

namespace genemb {

// Row label from the lineage recorded in a report's meta block.
inline std::string ablation_label(const nlohmann::json& meta) {
  const std::string stage = meta.value("stage", std::string());
  if (stage == "sft") return meta.value("dctr_only", false) ? "DUME" : "w/o RL";
  if (stage != "rl") throw DataError("report: run has no training stage in its metadata");
  const auto v = RewardVariant::parse(meta.value("reward_variant", std::string("full")));
  switch (v.kind) {
    case RewardVariant::Kind::full:
      return "UME-R1";
    case RewardVariant::Kind::ranking_only:
      return "w/o similarity gap";
    case RewardVariant::Kind::gap_only:
      return "w/o ranking";
    case RewardVariant::Kind::threshold: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "threshold reward (%g)", v.theta);
      return buf;
    }
  }
  return {};
}

inline int ablation_order(const std::string& label) {
  static const std::vector<std::string> order{"UME-R1", "w/o RL", "w/o similarity gap", "w/o ranking", "DUME"};
  auto it = std::find(order.begin(), order.end(), label);
  if (it != order.end()) return static_cast<int>(it - order.begin());
  return label.rfind("threshold", 0) == 0 ? 4 : 99;  // threshold rows sit before DUME
}

struct ComparisonRow {
  std::string label;
  std::string run;
  TaskMetrics metrics;
};

inline std::vector<ComparisonRow> comparison_rows(const std::vector<std::pair<std::string, EvalReport>>& runs) {
  std::vector<ComparisonRow> rows;
  for (auto& [run, rep] : runs) rows.push_back({ablation_label(rep.meta), run, rep.aggregate});
  std::stable_sort(rows.begin(), rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    return ablation_order(a.label) < ablation_order(b.label);
  });
  return rows;
}

inline std::string comparison_markdown(const std::vector<ComparisonRow>& rows) {
  std::string out = "| Model | Run | Hit@1 disc | Hit@1 gen | Hit@1 oracle | NDCG@5 disc | NDCG@5 gen | NDCG@5 oracle |\n";
  out += "|---|---|---|---|---|---|---|---|\n";
  char buf[512];
  for (auto& r : rows) {
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof buf, "| %s | %s | %.3f | %.3f | %.3f | %.3f | %.3f | %.3f |\n", r.label.c_str(),
                  r.run.c_str(), m.hit1_disc, m.hit1_gen, m.oracle_hit1, m.ndcg5_disc, m.ndcg5_gen, m.oracle_ndcg5);
    out += buf;
  }
  return out;
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "model,run,hit1_disc,hit1_gen,oracle_hit1,ndcg5_disc,ndcg5_gen,oracle_ndcg5\n";
  char buf[512];
  for (auto& r : rows) {
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.label.c_str(), r.run.c_str(), m.hit1_disc,
                  m.hit1_gen, m.oracle_hit1, m.ndcg5_disc, m.ndcg5_gen, m.oracle_ndcg5);
    out += buf;
  }
  return out;
}

}  // namespace genemb
