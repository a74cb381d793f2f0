#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "sedkit/experiments/pipeline.hpp"
#include "sedkit/experiments/sed.hpp"
#include "sedkit/experiments/studies.hpp"
#include "sedkit/io/synthetic.hpp"
#include "../support/fixtures.hpp"

namespace sedkit {
namespace {

namespace fs = std::filesystem;

const Architecture kSmall{2, 8, 2, 12, 16};

std::shared_ptr<const Vocabulary> toy_vocab() {
  return std::make_shared<const Vocabulary>(Vocabulary::build(testing::toy_corpus(200)));
}

std::vector<EncoderModel> members(std::size_t n, std::uint64_t first_seed = 10) {
  auto vocab = toy_vocab();
  std::vector<EncoderModel> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(kSmall, vocab, first_seed + i);
  return out;
}

StsTask toy_task(const std::string& name, std::size_t n, std::uint64_t seed) {
  const auto sentences = testing::toy_corpus(2 * n, seed);
  StsTask t{name, {}, Split::Test};
  for (std::size_t i = 0; i < n; ++i) t.pairs.push_back({sentences[2 * i], sentences[2 * i + 1], 0.1 * ((i * 7) % 51)});
  return t;
}

// ---------------------------------------------------------------------------
// SED trainer

TEST(Sed, ZeroEpochsReturnsInitialization) {
  const EnsembleSpec ens(members(2));
  const EncoderModel init(kSmall, toy_vocab(), 99);
  const auto student = train_sed(ens, init, testing::toy_corpus(20), {.epochs = 0});
  EXPECT_TRUE(student.same_weights(init));
}

TEST(Sed, ConvergesTowardRepeatedTeacher) {
  auto teacher = members(1, 5).front();
  const EnsembleSpec ens({teacher, teacher, teacher});
  const EncoderModel init(kSmall, toy_vocab(), 77);
  const auto corpus = testing::toy_corpus(1600, 8);
  SedConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.lr = 3e-2;
  const auto held_out = testing::toy_corpus(30, 1234);
  auto held_out_mse = [&](const EncoderModel& student) {
    double total = 0.0;
    for (const auto& s : held_out) total += sed_loss(teacher.encode(s, PoolingSpec(1)), student.encode(s, PoolingSpec(1)));
    return total / static_cast<double>(held_out.size());
  };
  SedTrainer trainer(ens, init, corpus, cfg);
  const double initial = trainer.corpus_loss();
  const double initial_held_out = held_out_mse(init);
  for (std::size_t e = 0; e < cfg.epochs; ++e) trainer.run_epoch();
  EXPECT_LT(trainer.corpus_loss(), 0.1 * initial);
  EXPECT_LT(held_out_mse(trainer.student()), 0.1 * initial_held_out)
      << initial_held_out << " " << held_out_mse(trainer.student()) << " " << initial << " " << trainer.corpus_loss();
  EXPECT_EQ(trainer.epochs_done(), cfg.epochs);
  EXPECT_EQ(trainer.steps(), cfg.epochs * 100);
}

TEST(Sed, TrajectoryIsInvariantToMemberOrder) {
  auto m = members(3);
  const EnsembleSpec ab(m);
  const EnsembleSpec ba({m[2], m[0], m[1]});
  const EncoderModel init(kSmall, toy_vocab(), 1);
  const auto corpus = testing::toy_corpus(16, 4);
  SedConfig cfg;
  cfg.batch_size = 4;
  SedTrainer t1(ab, init, corpus, cfg), t2(ba, init, corpus, cfg);
  for (int e = 0; e < 3; ++e) {
    t1.run_epoch();
    t2.run_epoch();
    EXPECT_NEAR(t1.corpus_loss(), t2.corpus_loss(), 1e-9);
  }
}

TEST(Sed, PrecomputedAndOnTheFlyTargetsAgree) {
  const EnsembleSpec ens(members(2));
  const EncoderModel init(kSmall, toy_vocab(), 3);
  const auto corpus = testing::toy_corpus(12, 2);
  SedConfig pre, fly;
  fly.precompute_targets = false;
  SedTrainer a(ens, init, corpus, pre), b(ens, init, corpus, fly);
  EXPECT_EQ(a.corpus_loss(), b.corpus_loss());
  a.run_epoch();
  b.run_epoch();
  EXPECT_TRUE(a.student().same_weights(b.student()));
}

TEST(Sed, MembersAreNotModified) {
  auto m = members(2);
  const auto before = m;
  const EnsembleSpec ens(m);
  train_sed(ens, before[0], testing::toy_corpus(12), {.epochs = 2, .batch_size = 4});
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(ens.member(i).same_weights(before[i]));
}

TEST(Sed, ArchitectureMismatchNamesBoth) {
  const EnsembleSpec ens(members(1));
  const EncoderModel other(Architecture{1, 8, 2, 12, 16}, toy_vocab(), 1);
  try {
    train_sed(ens, other, testing::toy_corpus(4), {});
    FAIL();
  } catch (const ArchitectureMismatch& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("L=1 D=8"), std::string::npos) << msg;
    EXPECT_NE(msg.find("L=2 D=8"), std::string::npos) << msg;
  }
  EXPECT_THROW(train_sed(ens, ens.member(0), {}, {}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Stability statistics and full-ensemble prediction

TEST(Stability, HandComputedStatistics) {
  const auto r = stability_stats("g", {1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.max, 4.0);
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_DOUBLE_EQ(r.std, std::sqrt(1.25));
  EXPECT_DOUBLE_EQ(stability_stats("one", {7.0}).std, 0.0);
  EXPECT_THROW(stability_stats("none", {}), std::invalid_argument);
  std::ostringstream out;
  write_stability_csv(out, {r});
  EXPECT_EQ(out.str(), "group,runs,failed,max,mean,std_population\ng,4,0,4.00,2.50,1.12\n");
}

TEST(Stability, StudyNeedsTwoRuns) {
  const EnsembleSpec ens(members(2));
  EXPECT_THROW(stability_study(ens, ens.member(0), testing::toy_corpus(8), {}, {1}, {toy_task("t", 10, 1)},
                               PoolingSpec(1)),
               std::invalid_argument);
}

TEST(Stability, StudyReportsThreeGroups) {
  const EnsembleSpec ens(members(2));
  const auto tasks = std::vector<StsTask>{toy_task("a", 20, 1), toy_task("b", 20, 2)};
  const auto study = stability_study(ens, ens.member(0), testing::toy_corpus(16), {.epochs = 1, .batch_size = 8},
                                     {1, 2}, tasks, PoolingSpec(2));
  EXPECT_EQ(study.members.values.size(), 2u);
  EXPECT_EQ(study.students.values.size(), 2u);
  EXPECT_EQ(study.full_ensemble.values.size(), 1u);
  EXPECT_EQ(study.groups().size(), 3u);
}

TEST(Stability, IdenticalSeedsGiveZeroStd) {
  const EnsembleSpec ens(members(2));
  const auto tasks = std::vector<StsTask>{toy_task("a", 20, 1)};
  const auto study = stability_study(ens, ens.member(0), testing::toy_corpus(16), {.epochs = 1, .batch_size = 8},
                                     {5, 5}, tasks, PoolingSpec(2));
  EXPECT_EQ(study.students.std, 0.0);
}

TEST(Stability, StatisticsMatchOnePassOracle) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(74.07, 0.5);
  std::vector<double> v{75.22};
  for (int i = 0; i < 9; ++i) v.push_back(g(rng));
  // Welford's one-pass recurrence, independent of the two-pass implementation.
  double mean = 0.0, m2 = 0.0, mx = v[0];
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double delta = v[i] - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v[i] - mean);
    mx = std::max(mx, v[i]);
  }
  const auto r = stability_stats("g", v);
  EXPECT_EQ(r.max, mx);
  EXPECT_NEAR(r.mean, mean, 1e-12);
  EXPECT_NEAR(r.std, std::sqrt(m2 / static_cast<double>(v.size())), 1e-12);
  EXPECT_GE(r.max, r.mean);
}

TEST(FullEnsemble, SingleMemberMatchesMemberEvaluation) {
  const auto m = members(1);
  const EnsembleSpec ens(m);
  const auto tasks = std::vector<StsTask>{toy_task("a", 25, 3)};
  const auto a = full_ensemble_predict(ens, tasks, PoolingSpec(2));
  const auto b = evaluate_suite(m[0], tasks, PoolingSpec(2));
  EXPECT_EQ(a.tasks, b.tasks);
}

// ---------------------------------------------------------------------------
// Early stopping

struct Scripted {
  std::vector<double> scores;
  std::size_t epoch = 0;
  std::function<void()> run() {
    return [this] { ++epoch; };
  }
  std::function<double()> score() {
    return [this] { return scores[epoch - 1]; };
  }
  std::function<std::size_t()> snap() {
    return [this] { return epoch; };
  }
};

TEST(EarlyStopping, StopsAfterPatienceAndRestoresBest) {
  Scripted s{{1.0, 3.0, 2.0, 2.5, 9.0, 9.0}};
  auto r = train_with_early_stopping<std::size_t>(6, 2, s.run(), s.score(), s.snap());
  EXPECT_EQ(r.best_epoch, 2u);
  EXPECT_EQ(r.best, 2u);
  EXPECT_EQ(r.trajectory, (std::vector<double>{1.0, 3.0, 2.0, 2.5}));
}

TEST(EarlyStopping, MonotoneImprovementRunsToCap) {
  Scripted s{{1.0, 2.0, 3.0}};
  auto r = train_with_early_stopping<std::size_t>(3, 1, s.run(), s.score(), s.snap());
  EXPECT_EQ(r.best_epoch, 3u);
  EXPECT_EQ(r.trajectory.size(), 3u);
}

TEST(EarlyStopping, TiesAreNotImprovements) {
  Scripted s{{2.0, 2.0, 2.0}};
  auto r = train_with_early_stopping<std::size_t>(3, 2, s.run(), s.score(), s.snap());
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_EQ(r.trajectory.size(), 3u);
}

TEST(EarlyStopping, DecreasingScoresReturnFirstEpoch) {
  Scripted s{{5.0, 4.0, 3.0, 2.0}};
  auto r = train_with_early_stopping<std::size_t>(4, 1, s.run(), s.score(), s.snap());
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_EQ(r.best, 1u);
  EXPECT_EQ(r.trajectory.size(), 2u);
}

TEST(EarlyStopping, NoisyTrajectoryReturnsRecordedMaximum) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Scripted s;
    for (int e = 0; e < 15; ++e) s.scores.push_back(0.2 * e + g(rng));
    auto r = train_with_early_stopping<std::size_t>(15, 3, s.run(), s.score(), s.snap());
    const auto best = std::max_element(r.trajectory.begin(), r.trajectory.end());
    EXPECT_EQ(r.best_score, *best);
    EXPECT_EQ(r.best, static_cast<std::size_t>(best - r.trajectory.begin()) + 1);
    EXPECT_EQ(r.best_epoch, r.best);
  }
}

TEST(EarlyStopping, ZeroEpochsIsAnError) {
  Scripted s{{}};
  EXPECT_THROW(train_with_early_stopping<std::size_t>(0, 1, s.run(), s.score(), s.snap()), std::invalid_argument);
}

TEST(EarlyStopping, SupervisedRejectsOverlappingDev) {
  const auto m = members(1).front();
  const auto dev = toy_task("dev", 10, 5);
  std::vector<ScoredPair> train(dev.pairs.begin(), dev.pairs.begin() + 3);
  std::swap(train[0].sentence_1, train[0].sentence_2);
  EXPECT_THROW(train_supervised_with_early_stopping(m, train, dev, RegressionTargetMap(0.0), {}),
               std::invalid_argument);
}

TEST(EarlyStopping, SupervisedReturnsBestEpochSnapshot) {
  const auto m = members(1).front();
  const auto train = toy_task("train", 30, 6).pairs;
  const auto dev = toy_task("dev", 20, 7);
  SupervisedConfig cfg;
  cfg.regression.epochs = 3;
  cfg.regression.batch_size = 8;
  const auto r = train_supervised_with_early_stopping(m, train, dev, RegressionTargetMap(0.0), cfg);
  ASSERT_GE(r.best_epoch, 1u);
  EXPECT_DOUBLE_EQ(evaluate_task(*r.best.model, dev, PoolingSpec(2)).spearman_x100(), r.best_score);
}

// ---------------------------------------------------------------------------
// Grid search

TEST(GridSearch, SingleCandidateIsSelected) {
  const auto r = grid_search_lower_bound({0.3}, 2, [](double, std::uint64_t) { return 1.0; });
  EXPECT_DOUBLE_EQ(r.selected, 0.3);
}

TEST(GridSearch, PicksPlantedPeakOverDefaultGrid) {
  const auto bounds = default_lower_bounds();
  ASSERT_EQ(bounds.size(), 20u);
  EXPECT_DOUBLE_EQ(bounds.front(), 0.0);
  EXPECT_DOUBLE_EQ(bounds.back(), 0.95);
  const auto r = grid_search_lower_bound(bounds, 3, [](double b, std::uint64_t) { return -(b - 0.35) * (b - 0.35); });
  EXPECT_DOUBLE_EQ(r.selected, 0.35);
  EXPECT_EQ(r.means.size(), 20u);
}

TEST(GridSearch, TiesGoToSmallerBoundAndSeedsAreShared) {
  std::map<double, std::vector<std::uint64_t>> seen;
  const auto r = grid_search_lower_bound({0.6, 0.2, 0.4}, 3, [&](double b, std::uint64_t seed) {
    seen[b].push_back(seed);
    return b >= 0.4 ? 5.0 : 1.0;
  });
  EXPECT_DOUBLE_EQ(r.selected, 0.4);
  EXPECT_EQ(seen[0.2], seen[0.4]);
  EXPECT_EQ(seen[0.4], seen[0.6]);
}

TEST(GridSearch, FailedCellsAreExcluded) {
  const auto r = grid_search_lower_bound({0.1, 0.2}, 2, [](double b, std::uint64_t seed) {
    if (b == 0.2 && seed == derive_seed(1, 0)) throw std::runtime_error("diverged");
    return b;
  });
  EXPECT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.scores[1].size(), 1u);
  EXPECT_DOUBLE_EQ(r.selected, 0.2);
  EXPECT_THROW(grid_search_lower_bound({0.1}, 1, [](double, std::uint64_t) -> double { throw std::runtime_error("x"); }),
               std::runtime_error);
  EXPECT_THROW(grid_search_lower_bound({1.0}, 1, [](double, std::uint64_t) { return 0.0; }), std::invalid_argument);
}

TEST(GridSearch, EncoderCellsRun) {
  const auto m = members(1).front();
  const auto train = toy_task("train", 20, 6).pairs;
  const auto dev = toy_task("dev", 20, 7);
  RegressionConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  const auto r = grid_search_lower_bound(m, train, dev, {0.0, 0.5}, 1, cfg, PoolingSpec(2));
  EXPECT_EQ(r.scores[0].size(), 1u);
  EXPECT_EQ(r.scores[1].size(), 1u);
  std::ostringstream out;
  r.write_csv(out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "lower_bound,completed_runs,mean_dev_spearman_x100,selected");
}

// ---------------------------------------------------------------------------
// Pooling ablation

TEST(PoolingAblation, CellsMatchStandaloneEvaluation) {
  const auto m = members(2);
  const auto tasks = std::vector<StsTask>{toy_task("a", 20, 1), toy_task("b", 20, 2)};
  const auto table = pooling_ablation({{"m0", &m[0]}, {"m1", &m[1]}}, tasks);
  ASSERT_EQ(table.rows.size(), 2u);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t k = 1; k <= 3; ++k) {
      EXPECT_EQ(table.rows[r].avg_spearman_x100[k - 1],
                evaluate_suite(m[r], tasks, PoolingSpec(k)).average_spearman_x100());
    }
  }
  std::ostringstream out;
  table.write_csv(out);
  EXPECT_EQ(out.str().substr(0, 15), "model,k1,k2,k3\n");
}

TEST(PoolingAblation, DegenerateModelGivesEqualColumns) {
  // Zero sublayer outputs and unit norms make every layer repeat the
  // embedding-layer states (up to the norm epsilon).
  EncoderModel m = members(1).front();
  for (auto& [name, v] : m.named_parameters()) {
    if (name.find("attn.wo") != std::string::npos || name.find("attn.bo") != std::string::npos ||
        name.find("ffn.w2") != std::string::npos || name.find("ffn.b2") != std::string::npos ||
        name.find(".bias") != std::string::npos) {
      v.mutable_value().fill(0.0);
    } else if (name.find(".gain") != std::string::npos) {
      v.mutable_value().fill(1.0);
    }
  }
  const auto tasks = std::vector<StsTask>{toy_task("a", 30, 1), toy_task("b", 30, 2)};
  const auto row = pooling_ablation({{"flat", &m}}, tasks).rows.front();
  EXPECT_NEAR(row.avg_spearman_x100[0], row.avg_spearman_x100[1], 1e-6);
  EXPECT_NEAR(row.avg_spearman_x100[0], row.avg_spearman_x100[2], 1e-6);
  const auto live = members(1, 40).front();
  const auto live_row = pooling_ablation({{"live", &live}}, tasks).rows.front();
  EXPECT_NE(live_row.avg_spearman_x100[0], live_row.avg_spearman_x100[2]);
}

TEST(PoolingAblation, ShallowModelIsRejected) {
  const EncoderModel shallow(Architecture{1, 8, 2, 12, 16}, toy_vocab(), 1);
  EXPECT_THROW(pooling_ablation({{"s", &shallow}}, {toy_task("a", 10, 1)}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Pipeline

struct TinyWorld {
  DataBundle data;
  RunConfig config;
};

TinyWorld tiny_world() {
  SyntheticWorldSpec spec;
  spec.clusters = 4;
  spec.sentences_per_cluster = 120;
  spec.pairs_per_task = 30;
  spec.test_tasks = 2;
  spec.nli_pairs = 30;
  const auto world = generate_synthetic_world(spec);
  TinyWorld t;
  t.data.corpus = world.corpus;
  t.data.eval_tasks = world.test_tasks;
  t.data.nli = world.nli;
  t.config.arch = kSmall;
  t.config.pretrain_steps = 5;
  t.config.ct_steps = 4;
  t.config.sed_ensemble_size = 2;
  t.config.sed_batch_size = 16;
  t.config.flow_layers = 2;
  t.config.flow_batch_size = 16;
  return t;
}

TEST(Pipeline, RunsAllStagesAndWritesOutputs) {
  auto t = tiny_world();
  t.config.stages = {Stage::Pretrain, Stage::Nli, Stage::Ct, Stage::Sed, Stage::Flow};
  const auto dir = fs::temp_directory_path() / "sedkit_pipeline_all";
  fs::remove_all(dir);
  const auto r = run_pipeline(t.config, t.data, dir);
  EXPECT_EQ(r.members.size(), 2u);
  ASSERT_TRUE(r.student && r.flow);
  EXPECT_EQ(r.member_reports.size(), 2u);
  EXPECT_TRUE(r.report.metadata.flow);
  for (auto name : {"base.ckpt", "member-0.ckpt", "member-1.ckpt", "student.ckpt", "flow.ckpt", "report.csv",
                    "report.csv.meta.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  EXPECT_EQ(r.manifest["status"], "complete");
  EXPECT_EQ(r.manifest["completed_stages"].size(), 5u);
  EXPECT_EQ(RunConfig::parse(r.manifest["config"].get<std::string>()), t.config);
  EXPECT_TRUE(load_encoder_checkpoint(dir / "student.ckpt").same_weights(*r.student));
}

TEST(Pipeline, IsDeterministic) {
  const auto t = tiny_world();
  const auto a = run_pipeline(t.config, t.data);
  const auto b = run_pipeline(t.config, t.data);
  EXPECT_EQ(encoder_checkpoint_bytes(*a.final_model), encoder_checkpoint_bytes(*b.final_model));
  EXPECT_EQ(flow_checkpoint_bytes(*a.flow), flow_checkpoint_bytes(*b.flow));
  EXPECT_EQ(a.report, b.report);
  EXPECT_EQ(a.manifest, b.manifest);
}

TEST(Pipeline, PretrainOnlyReportEqualsDirectEvaluation) {
  auto t = tiny_world();
  t.config.stages = {Stage::Pretrain};
  const auto r = run_pipeline(t.config, t.data);
  EXPECT_TRUE(r.final_model->same_weights(*r.base));
  const auto direct = evaluate_suite(*r.base, t.data.eval_tasks, PoolingSpec(2));
  EXPECT_EQ(r.report.tasks, direct.tasks);
  EXPECT_EQ(r.report.metadata.pooling_k, 2u);
}

TEST(Pipeline, RejectsStagesAfterSed) {
  auto t = tiny_world();
  t.config.stages = {Stage::Pretrain, Stage::Sed, Stage::Ct};
  EXPECT_THROW(run_pipeline(t.config, t.data), ConfigError);
}

TEST(Pipeline, FailureWritesPartialManifest) {
  auto t = tiny_world();
  t.config.stages = {Stage::Ct, Stage::Sed};
  t.config.base_checkpoint = "/nonexistent/base.ckpt";
  const auto dir = fs::temp_directory_path() / "sedkit_pipeline_fail";
  fs::remove_all(dir);
  EXPECT_THROW(run_pipeline(t.config, t.data, dir), CheckpointError);
  std::ifstream in(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest["status"], "failed");
  EXPECT_TRUE(manifest["completed_stages"].empty());
}

TEST(Pipeline, ResumesFromBaseCheckpoint) {
  auto t = tiny_world();
  const auto dir = fs::temp_directory_path() / "sedkit_pipeline_resume";
  fs::remove_all(dir);
  t.config.stages = {Stage::Pretrain};
  const auto first = run_pipeline(t.config, t.data, dir);
  t.config.stages = {Stage::Ct};
  t.config.base_checkpoint = (dir / "base.ckpt").string();
  const auto second = run_pipeline(t.config, t.data);
  EXPECT_TRUE(second.base->same_weights(*first.base));
  EXPECT_FALSE(second.final_model->same_weights(*first.base));
}

}  // namespace
}  // namespace sedkit
