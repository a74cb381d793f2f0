#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sedkit/encoder/model.hpp"
#include "sedkit/evalsts/correlation.hpp"
#include "sedkit/evalsts/sts_data.hpp"
#include "sedkit/flow/coupling_flow.hpp"

namespace sedkit {

/// Any sentence-to-embedding function: a single encoder, an ensemble mean, ...
using Embedder = std::function<Embedding(const std::string&)>;

inline Embedder model_embedder(const EncoderModel& model, PoolingSpec pool) {
  return [&model, pool](const std::string& s) { return model.encode(s, pool); };
}

struct FlowScoringOptions {
  const CouplingFlow* flow = nullptr;
  FlowScoring scoring = FlowScoring::Cosine;
};

/// Raw correlations in [-1, 1]; scaled by 100 on access.
struct TaskResult {
  std::string task;
  double pearson = 0.0;
  double spearman = 0.0;

  double pearson_x100() const { return 100.0 * pearson; }
  double spearman_x100() const { return 100.0 * spearman; }
  bool operator==(const TaskResult&) const = default;
};

/// Predicted similarity for every pair: cosine of embeddings, or the flow
/// score when a flow is supplied.
inline std::vector<double> predict_scores(const Embedder& embed, const StsTask& task, FlowScoringOptions flow = {}) {
  std::vector<double> out;
  out.reserve(task.pairs.size());
  for (const auto& p : task.pairs) {
    const auto e1 = embed(p.sentence_1);
    const auto e2 = embed(p.sentence_2);
    out.push_back(flow.flow ? flow_score(*flow.flow, e1, e2, flow.scoring) : cosine(e1.values(), e2.values()));
  }
  return out;
}

inline TaskResult evaluate_task(const Embedder& embed, const StsTask& task, FlowScoringOptions flow = {}) {
  if (task.pairs.empty()) throw DataError("STS task '" + task.name + "' is empty");
  const auto predicted = predict_scores(embed, task, flow);
  std::vector<double> gold;
  gold.reserve(task.pairs.size());
  for (const auto& p : task.pairs) gold.push_back(p.gold);
  try {
    return {task.name, pearson(predicted, gold), spearman(predicted, gold)};
  } catch (const CorrelationError& e) {
    throw CorrelationError("task '" + task.name + "': " + e.what());
  }
}

inline TaskResult evaluate_task(const EncoderModel& model, const StsTask& task, PoolingSpec pool,
                                FlowScoringOptions flow = {}) {
  return evaluate_task(model_embedder(model, pool), task, flow);
}

struct ReportMetadata {
  std::string model_id;
  std::size_t pooling_k = 1;
  bool flow = false;
  std::uint64_t seed = 0;
  bool operator==(const ReportMetadata&) const = default;
};

struct FailedTask {
  std::string task;
  std::string reason;
  bool operator==(const FailedTask&) const = default;
};

/// Per-task correlations plus their unweighted mean. Raw values are kept;
/// rounding to two decimals happens only when writing.
struct CorrelationReport {
  std::vector<TaskResult> tasks;
  std::vector<FailedTask> failed;
  ReportMetadata metadata;

  bool partial() const noexcept { return !failed.empty(); }

  double average_pearson_x100() const { return average(&TaskResult::pearson_x100); }
  double average_spearman_x100() const { return average(&TaskResult::spearman_x100); }

  const TaskResult* find(std::string_view name) const {
    for (const auto& t : tasks)
      if (t.task == name) return &t;
    return nullptr;
  }

  bool operator==(const CorrelationReport&) const = default;

  static std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }

  void write_csv(std::ostream& out) const {
    out << "task,pearson_x100,spearman_x100\n";
    for (const auto& t : tasks) out << t.task << ',' << fixed2(t.pearson_x100()) << ',' << fixed2(t.spearman_x100()) << '\n';
    if (!tasks.empty()) out << "Avg.," << fixed2(average_pearson_x100()) << ',' << fixed2(average_spearman_x100()) << '\n';
  }

  nlohmann::json metadata_json() const {
    nlohmann::json j;
    j["model_id"] = metadata.model_id;
    j["pooling_k"] = metadata.pooling_k;
    j["flow"] = metadata.flow;
    j["seed"] = metadata.seed;
    j["partial"] = partial();
    j["failed_tasks"] = nlohmann::json::array();
    for (const auto& f : failed) j["failed_tasks"].push_back({{"task", f.task}, {"reason", f.reason}});
    j["raw"] = nlohmann::json::array();
    for (const auto& t : tasks) j["raw"].push_back({{"task", t.task}, {"pearson", t.pearson}, {"spearman", t.spearman}});
    return j;
  }

  /// Writes `path` (CSV) and `path` + ".meta.json".
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream csv(path);
    if (!csv) throw std::runtime_error("cannot write report " + path.string());
    write_csv(csv);
    std::ofstream meta(path.string() + ".meta.json");
    meta << metadata_json().dump(2) << '\n';
  }

 private:
  double average(double (TaskResult::*get)() const) const {
    if (tasks.empty()) return std::nan("");
    double acc = 0.0;
    for (const auto& t : tasks) acc += (t.*get)();
    return acc / static_cast<double>(tasks.size());
  }
};

/// Evaluates every task; a failing task is recorded and the report marked
/// partial instead of aborting the suite.
inline CorrelationReport evaluate_suite(const Embedder& embed, const std::vector<StsTask>& tasks,
                                        FlowScoringOptions flow = {}, ReportMetadata metadata = {}) {
  if (tasks.empty()) throw std::invalid_argument("evaluate_suite: no tasks");
  CorrelationReport report;
  metadata.flow = flow.flow != nullptr;
  report.metadata = std::move(metadata);
  for (const auto& task : tasks) {
    try {
      report.tasks.push_back(evaluate_task(embed, task, flow));
    } catch (const std::exception& e) {
      report.failed.push_back({task.name, e.what()});
    }
  }
  return report;
}

inline CorrelationReport evaluate_suite(const EncoderModel& model, const std::vector<StsTask>& tasks, PoolingSpec pool,
                                        FlowScoringOptions flow = {}, ReportMetadata metadata = {}) {
  metadata.pooling_k = pool.k();
  return evaluate_suite(model_embedder(model, pool), tasks, flow, std::move(metadata));
}

}  // namespace sedkit
