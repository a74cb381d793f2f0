#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sedkit/diagnostics.hpp"
#include "sedkit/evalsts/evaluate.hpp"
#include "sedkit/experiments/sed.hpp"
#include "sedkit/objectives/trainers.hpp"

namespace sedkit {

// ---------------------------------------------------------------------------
// Full-ensemble prediction

inline Embedder ensemble_embedder(const EnsembleSpec& ensemble, PoolingSpec pool) {
  return [&ensemble, pool](const std::string& s) { return ensemble_mean_embedding(ensemble, s, pool); };
}

/// Scores every pair with the ensemble mean embedding instead of one model.
inline CorrelationReport full_ensemble_predict(const EnsembleSpec& ensemble, const std::vector<StsTask>& tasks,
                                               PoolingSpec pool, ReportMetadata metadata = {}) {
  metadata.pooling_k = pool.k();
  return evaluate_suite(ensemble_embedder(ensemble, pool), tasks, {}, std::move(metadata));
}

// ---------------------------------------------------------------------------
// Stability statistics

/// Max, mean and population standard deviation (divide by n) of per-run
/// average Spearman x100 values.
struct StabilityReport {
  std::string group;
  std::vector<double> values;
  std::size_t failed = 0;
  double max = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

inline StabilityReport stability_stats(std::string group, std::vector<double> values, std::size_t failed = 0) {
  if (values.empty()) throw std::invalid_argument("stability: group '" + group + "' has no completed runs");
  StabilityReport r{std::move(group), std::move(values), failed, 0.0, 0.0, 0.0};
  const double n = static_cast<double>(r.values.size());
  r.max = *std::max_element(r.values.begin(), r.values.end());
  double sum = 0.0;
  for (double v : r.values) sum += v;
  r.mean = sum / n;
  double ss = 0.0;
  for (double v : r.values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / n);
  return r;
}

inline void write_stability_csv(std::ostream& out, const std::vector<StabilityReport>& groups) {
  out << "group,runs,failed,max,mean,std_population\n";
  for (const auto& g : groups) {
    out << g.group << ',' << g.values.size() << ',' << g.failed << ',' << CorrelationReport::fixed2(g.max) << ','
        << CorrelationReport::fixed2(g.mean) << ',' << CorrelationReport::fixed2(g.std) << '\n';
  }
}

struct StabilityStudy {
  StabilityReport members;
  StabilityReport full_ensemble;
  StabilityReport students;
  std::vector<CorrelationReport> member_reports;
  CorrelationReport ensemble_report;
  std::vector<CorrelationReport> student_reports;

  std::vector<StabilityReport> groups() const { return {members, full_ensemble, students}; }
};

/// Evaluates the ensemble members, the full ensemble and `seeds.size()`
/// distillation learners trained from `student_init` with the given seeds.
/// A failed student run is recorded, warned about and excluded.
inline StabilityStudy stability_study(const EnsembleSpec& ensemble, const EncoderModel& student_init,
                                      const std::vector<std::string>& corpus, SedConfig config,
                                      const std::vector<std::uint64_t>& seeds, const std::vector<StsTask>& tasks,
                                      PoolingSpec eval_pool) {
  if (seeds.size() < 2) throw std::invalid_argument("stability: at least two runs are required");
  StabilityStudy study;
  std::vector<double> member_scores;
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    auto report = evaluate_suite(ensemble.member(i), tasks, eval_pool, {}, {"member-" + std::to_string(i)});
    member_scores.push_back(report.average_spearman_x100());
    study.member_reports.push_back(std::move(report));
  }
  study.members = stability_stats("ensemble_members", member_scores);
  study.ensemble_report = full_ensemble_predict(ensemble, tasks, eval_pool, {"full-ensemble"});
  study.full_ensemble = stability_stats("full_ensemble", {study.ensemble_report.average_spearman_x100()});

  std::vector<double> student_scores;
  std::size_t failed = 0;
  for (std::size_t r = 0; r < seeds.size(); ++r) {
    try {
      config.seed = seeds[r];
      auto student = train_sed(ensemble, student_init, corpus, config);
      auto report = evaluate_suite(student, tasks, eval_pool, {}, {"student-" + std::to_string(r), 1, false, seeds[r]});
      if (report.partial()) throw CorrelationError("student run produced a partial report");
      student_scores.push_back(report.average_spearman_x100());
      study.student_reports.push_back(std::move(report));
    } catch (const std::exception& e) {
      ++failed;
      Diagnostics::instance().warn(warning::kFailedRun, "stability run " + std::to_string(r) + " failed: " + e.what());
    }
  }
  study.students = stability_stats("distillation_learners", student_scores, failed);
  return study;
}

// ---------------------------------------------------------------------------
// Early stopping

template <class Snapshot>
struct EarlyStoppingResult {
  Snapshot best;
  std::size_t best_epoch = 0;  // 1-based
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<double> trajectory;
};

/// Runs up to `max_epochs` epochs, scoring on dev after each; stops once the
/// score fails to improve for `patience` consecutive epochs and returns the
/// snapshot taken at the best epoch.
template <class Snapshot>
EarlyStoppingResult<Snapshot> train_with_early_stopping(std::size_t max_epochs, std::size_t patience,
                                                        const std::function<void()>& run_epoch,
                                                        const std::function<double()>& dev_score,
                                                        const std::function<Snapshot()>& snapshot) {
  if (max_epochs == 0) throw std::invalid_argument("early stopping: zero epochs configured");
  if (patience == 0) throw std::invalid_argument("early stopping: patience must be at least 1");
  std::optional<Snapshot> best;
  EarlyStoppingResult<Snapshot> result{Snapshot{}, 0, -std::numeric_limits<double>::infinity(), {}};
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    run_epoch();
    const double score = dev_score();
    result.trajectory.push_back(score);
    if (!best || score > result.best_score) {
      best.emplace(snapshot());
      result.best_score = score;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= patience) {
      break;
    }
  }
  result.best = std::move(*best);
  return result;
}

struct SupervisedConfig {
  RegressionConfig regression;  // regression.epochs is the epoch cap
  std::size_t patience = 2;
  std::size_t eval_pool = 2;
};

/// Optional model holder so EncoderModel (no default constructor) can be a
/// snapshot type.
struct ModelSnapshot {
  std::shared_ptr<EncoderModel> model;
};

inline void check_disjoint(const std::vector<ScoredPair>& train, const StsTask& dev) {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& p : train) seen.emplace(p.sentence_1, p.sentence_2);
  for (const auto& p : dev.pairs) {
    if (seen.count({p.sentence_1, p.sentence_2}) || seen.count({p.sentence_2, p.sentence_1})) {
      throw std::invalid_argument("supervised: dev task '" + dev.name + "' shares pairs with the training data");
    }
  }
}

inline EarlyStoppingResult<ModelSnapshot> train_supervised_with_early_stopping(const EncoderModel& init,
                                                                               const std::vector<ScoredPair>& train,
                                                                               const StsTask& dev,
                                                                               const RegressionTargetMap& map,
                                                                               const SupervisedConfig& config) {
  check_disjoint(train, dev);
  if (config.regression.epochs == 0) throw std::invalid_argument("supervised: zero epochs configured");
  RegressionTrainer trainer(init, train, map, config.regression);
  const PoolingSpec pool(config.eval_pool);
  return train_with_early_stopping<ModelSnapshot>(
      config.regression.epochs, config.patience, [&] { trainer.run_epoch(); },
      [&] { return evaluate_task(trainer.model(), dev, pool).spearman_x100(); },
      [&] { return ModelSnapshot{std::make_shared<EncoderModel>(trainer.model())}; });
}

// ---------------------------------------------------------------------------
// Lower-bound grid search

struct GridFailure {
  double bound = 0.0;
  std::uint64_t seed = 0;
  std::string reason;
};

struct GridSearchResult {
  static constexpr const char* kRule = "max-mean-dev-spearman;ties-to-smaller-bound";

  std::vector<double> bounds;
  std::vector<std::vector<double>> scores;  // per bound, one per completed seed
  std::vector<double> means;                // NaN when every cell of a bound failed
  std::vector<GridFailure> failures;
  double selected = 0.0;
  std::string rule = kRule;

  void write_csv(std::ostream& out) const {
    out << "lower_bound,completed_runs,mean_dev_spearman_x100,selected\n";
    for (std::size_t i = 0; i < bounds.size(); ++i) {
      out << format_double(bounds[i]) << ',' << scores[i].size() << ','
          << (std::isnan(means[i]) ? std::string("nan") : CorrelationReport::fixed2(means[i])) << ','
          << (bounds[i] == selected ? "yes" : "no") << '\n';
    }
  }
};

/// Trains one cell per (bound, seed) and returns its dev Spearman x100.
using GridCell = std::function<double(double bound, std::uint64_t seed)>;

inline std::vector<double> default_lower_bounds() {
  std::vector<double> b;
  for (int i = 0; i < 20; ++i) b.push_back(i / 20.0);
  return b;
}

/// Seeds are shared across bounds, so every bound sees the same data orders.
inline GridSearchResult grid_search_lower_bound(const std::vector<double>& bounds, std::size_t seeds_per_bound,
                                                const GridCell& cell, std::uint64_t base_seed = 1) {
  if (bounds.empty()) throw std::invalid_argument("grid search: no candidate bounds");
  if (seeds_per_bound == 0) throw std::invalid_argument("grid search: seeds_per_bound must be positive");
  for (double b : bounds)
    if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("grid search: bounds must lie in [0, 1)");
  GridSearchResult result;
  result.bounds = bounds;
  std::sort(result.bounds.begin(), result.bounds.end());
  result.bounds.erase(std::unique(result.bounds.begin(), result.bounds.end()), result.bounds.end());
  bool any = false;
  double best = -std::numeric_limits<double>::infinity();
  for (double b : result.bounds) {
    std::vector<double> cells;
    for (std::size_t r = 0; r < seeds_per_bound; ++r) {
      const auto seed = derive_seed(base_seed, r);
      try {
        cells.push_back(cell(b, seed));
      } catch (const std::exception& e) {
        result.failures.push_back({b, seed, e.what()});
        Diagnostics::instance().warn(warning::kFailedRun, "grid cell at bound " + format_double(b) + " failed: " + e.what());
      }
    }
    double m = std::nan("");
    if (!cells.empty()) {
      m = 0.0;
      for (double v : cells) m += v;
      m /= static_cast<double>(cells.size());
      // Bounds are visited in ascending order, so strict improvement keeps
      // the smaller bound on ties.
      if (!any || m > best) {
        best = m;
        result.selected = b;
        any = true;
      }
    }
    result.scores.push_back(std::move(cells));
    result.means.push_back(m);
  }
  if (!any) throw std::runtime_error("grid search: every cell failed");
  return result;
}

/// Encoder-backed grid search: each cell fine-tunes `base` on `train` with
/// the bound's target map and scores Spearman on `dev`.
inline GridSearchResult grid_search_lower_bound(const EncoderModel& base, const std::vector<ScoredPair>& train,
                                                const StsTask& dev, const std::vector<double>& bounds,
                                                std::size_t seeds_per_bound, RegressionConfig config,
                                                PoolingSpec eval_pool) {
  check_disjoint(train, dev);
  const auto base_seed = config.seed;
  return grid_search_lower_bound(
      bounds, seeds_per_bound,
      [&](double bound, std::uint64_t seed) {
        RegressionConfig c = config;
        c.seed = seed;
        auto model = train_sts_regression(base, train, RegressionTargetMap(bound), c);
        return evaluate_task(model, dev, eval_pool).spearman_x100();
      },
      base_seed);
}

// ---------------------------------------------------------------------------
// Pooling ablation

struct PoolingAblationRow {
  std::string model;
  std::array<double, 3> avg_spearman_x100{};
};

struct PoolingAblation {
  std::vector<PoolingAblationRow> rows;

  void write_csv(std::ostream& out) const {
    out << "model,k1,k2,k3\n";
    for (const auto& r : rows) {
      out << r.model;
      for (double v : r.avg_spearman_x100) out << ',' << CorrelationReport::fixed2(v);
      out << '\n';
    }
  }
};

/// Average Spearman x100 of each model under final-k-layer pooling, k = 1..3.
inline PoolingAblation pooling_ablation(const std::vector<std::pair<std::string, const EncoderModel*>>& models,
                                        const std::vector<StsTask>& tasks) {
  PoolingAblation table;
  for (const auto& [name, model] : models) {
    if (model->arch().layers + 1 < 3) {
      throw std::invalid_argument("pooling ablation: model '" + name + "' is too shallow for k = 3");
    }
    PoolingAblationRow row{name, {}};
    for (std::size_t k = 1; k <= 3; ++k) {
      auto report = evaluate_suite(*model, tasks, PoolingSpec(k), {}, {name});
      if (report.tasks.empty()) throw CorrelationError("pooling ablation: every task failed for '" + name + "'");
      row.avg_spearman_x100[k - 1] = report.average_spearman_x100();
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace sedkit
