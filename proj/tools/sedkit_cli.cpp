// sedkit command-line driver. Every subcommand reads defaults from an
// optional `--config FILE` (the same format run manifests embed) and lets
// flags override individual fields.
//
// Exit codes: 0 success, 1 data/model/config-file error, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sedkit/diagnostics.hpp"
#include "sedkit/encoder/pretrain.hpp"
#include "sedkit/evalsts/evaluate.hpp"
#include "sedkit/experiments/pipeline.hpp"
#include "sedkit/experiments/sed.hpp"
#include "sedkit/experiments/studies.hpp"
#include "sedkit/io/checkpoint.hpp"
#include "sedkit/io/config.hpp"
#include "sedkit/io/corpus.hpp"
#include "sedkit/io/hash.hpp"
#include "sedkit/io/synthetic.hpp"
#include "sedkit/objectives/trainers.hpp"

namespace fs = std::filesystem;
using namespace sedkit;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Finds `--config FILE` or `--config=FILE` before CLI11 runs, so flags can
/// bind straight to the loaded values.
std::optional<std::string> scan_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return std::nullopt;
}

/// Sidecar manifest next to a subcommand's primary output.
class Manifest {
 public:
  Manifest(std::string command, const RunConfig& config) {
    json_["format"] = "sedkit-manifest/1";
    json_["command"] = std::move(command);
    json_["config"] = config.to_text();
    json_["inputs"] = nlohmann::ordered_json::object();
    json_["outputs"] = nlohmann::ordered_json::object();
  }
  void input(const fs::path& p) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) json_["inputs"][f.string()] = file_sha256_hex(f);
    } else {
      json_["inputs"][p.string()] = file_sha256_hex(p);
    }
  }
  void output(const fs::path& p) { json_["outputs"][p.filename().string()] = file_sha256_hex(p); }
  nlohmann::ordered_json& json() { return json_; }
  void write(const fs::path& primary) const {
    std::ofstream out(primary.string() + ".manifest.json", std::ios::binary | std::ios::trunc);
    out << json_.dump(2) << '\n';
  }

 private:
  nlohmann::ordered_json json_;
};

std::vector<std::string> load_corpus(const RunConfig& c) {
  if (c.corpus.empty()) throw DataError("a corpus is required (--corpus)");
  return sample_corpus(c.corpus, c.corpus_size, derive_seed(c.seed, seed_tag::kCorpus), c.sample_with_replacement);
}

std::vector<EncoderModel> load_models(const std::vector<std::string>& paths) {
  std::vector<EncoderModel> out;
  for (const auto& p : paths) out.push_back(load_encoder_checkpoint(p));
  return out;
}

void emit_csv(const std::string& out_path, const std::function<void(std::ostream&)>& write) {
  if (out_path.empty() || out_path == "-") {
    write(std::cout);
    return;
  }
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + out_path);
  write(out);
}

void print_diagnostics() {
  for (const auto& [category, entry] : Diagnostics::instance().snapshot()) {
    std::cerr << "warning: " << category << " x" << entry.count;
    if (!entry.samples.empty()) std::cerr << " (e.g. " << entry.samples.front() << ")";
    std::cerr << '\n';
  }
}

RegressionConfig regression_config(const RunConfig& c) {
  return {c.supervised_epochs, c.supervised_batch_size, c.supervised_lr, c.supervised_warmup_fraction, c.train_pool,
          c.seed};
}

SedConfig sed_config(const RunConfig& c) {
  return {c.sed_epochs,      c.sed_batch_size,         c.sed_lr, c.sed_warmup_fraction,
          c.train_pool,      derive_seed(c.seed, seed_tag::kSed), c.sed_precompute_targets};
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  try {
    if (auto path = scan_config_path(argc, argv)) cfg = RunConfig::parse(read_text(*path));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  CLI::App app{"sedkit: sentence embedding training, distillation and STS evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "Config file supplying defaults for every option");
  app.add_option("--seed", cfg.seed, "Run seed")->capture_default_str();

  std::string out, model_path, flow_path, student_init_path, train_path, dev_path, tasks_dir;
  std::vector<std::string> model_paths;

  // gen-synthetic --------------------------------------------------------
  SyntheticWorldSpec world_spec;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a seeded synthetic corpus, STS tasks and NLI data");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", world_spec.seed, "World seed")->capture_default_str();
  gen->add_option("--clusters", world_spec.clusters)->capture_default_str();
  gen->add_option("--sentences-per-cluster", world_spec.sentences_per_cluster)->capture_default_str();
  gen->add_option("--pairs-per-task", world_spec.pairs_per_task)->capture_default_str();
  gen->add_option("--test-tasks", world_spec.test_tasks)->capture_default_str();

  // pretrain ---------------------------------------------------------------
  auto* pretrain = app.add_subcommand("pretrain", "Train a base encoder with masked-token prediction");
  pretrain->add_option("--corpus", cfg.corpus)->required();
  pretrain->add_option("--count", cfg.corpus_size, "Sentences to sample (0 = all)")->capture_default_str();
  pretrain->add_option("--out", out, "Checkpoint path")->required();
  pretrain->add_option("--steps", cfg.pretrain_steps)->capture_default_str();
  pretrain->add_option("--lr", cfg.pretrain_lr)->capture_default_str();
  pretrain->add_option("--layers", cfg.arch.layers)->capture_default_str();
  pretrain->add_option("--hidden", cfg.arch.hidden)->capture_default_str();
  pretrain->add_option("--heads", cfg.arch.heads)->capture_default_str();
  pretrain->add_option("--ffn", cfg.arch.ffn)->capture_default_str();
  pretrain->add_option("--max-len", cfg.arch.max_len)->capture_default_str();

  // train-nli ----------------------------------------------------------------
  auto* nli = app.add_subcommand("train-nli", "Fine-tune with the siamese NLI objective");
  nli->add_option("--model", model_path, "Input checkpoint")->required();
  nli->add_option("--nli", cfg.nli, "premise<TAB>hypothesis<TAB>label file")->required();
  nli->add_option("--out", out)->required();
  nli->add_option("--epochs", cfg.nli_epochs)->capture_default_str();
  nli->add_option("--batch-size", cfg.nli_batch_size)->capture_default_str();
  nli->add_option("--lr", cfg.nli_lr)->capture_default_str();
  std::size_t member = 0;
  nli->add_option("--member", member, "Ensemble member index (selects the seed)")->capture_default_str();

  // train-ct -----------------------------------------------------------------
  auto* ct = app.add_subcommand("train-ct", "Fine-tune with Contrastive Tension");
  ct->add_option("--model", model_path)->required();
  ct->add_option("--corpus", cfg.corpus)->required();
  ct->add_option("--count", cfg.corpus_size)->capture_default_str();
  ct->add_option("--out", out)->required();
  ct->add_option("--steps", cfg.ct_steps)->capture_default_str();
  ct->add_option("--batch-size", cfg.ct_batch_size)->capture_default_str();
  ct->add_option("--negatives", cfg.ct_negatives)->capture_default_str();
  ct->add_option("--start-lr", cfg.ct_start_lr)->capture_default_str();
  ct->add_option("--end-lr", cfg.ct_end_lr)->capture_default_str();
  ct->add_option("--member", member)->capture_default_str();

  // train-sed ----------------------------------------------------------------
  auto* sed = app.add_subcommand("train-sed", "Distil an ensemble into a student");
  sed->add_option("--teachers", model_paths, "Ensemble member checkpoints")->required();
  sed->add_option("--student-init", student_init_path, "Student initialization checkpoint")->required();
  sed->add_option("--corpus", cfg.corpus)->required();
  sed->add_option("--count", cfg.corpus_size)->capture_default_str();
  sed->add_option("--out", out)->required();
  sed->add_option("--epochs", cfg.sed_epochs)->capture_default_str();
  sed->add_option("--batch-size", cfg.sed_batch_size)->capture_default_str();
  sed->add_option("--lr", cfg.sed_lr)->capture_default_str();
  sed->add_option("--target-pool", cfg.sed_target_pool)->capture_default_str();

  // fit-flow -----------------------------------------------------------------
  auto* flow = app.add_subcommand("fit-flow", "Fit a coupling flow on embeddings of the task sentences");
  flow->add_option("--model", model_path)->required();
  flow->add_option("--tasks", tasks_dir, "Directory of STS .tsv tasks")->required();
  flow->add_option("--out", out)->required();
  flow->add_option("--pool", cfg.eval_pool)->capture_default_str();
  flow->add_option("--layers", cfg.flow_layers)->capture_default_str();
  flow->add_option("--hidden", cfg.flow_hidden, "0 = twice the embedding width")->capture_default_str();
  flow->add_option("--epochs", cfg.flow_epochs)->capture_default_str();
  flow->add_option("--batch-size", cfg.flow_batch_size)->capture_default_str();
  flow->add_option("--lr", cfg.flow_lr)->capture_default_str();

  // train-supervised ---------------------------------------------------------
  auto* sup = app.add_subcommand("train-supervised", "STS regression with early stopping on a dev task");
  sup->add_option("--model", model_path)->required();
  sup->add_option("--train", train_path, "Training pairs .tsv")->required();
  sup->add_option("--dev", dev_path, "Dev task .tsv")->required();
  sup->add_option("--out", out)->required();
  sup->add_option("--lower-bound", cfg.supervised_lower_bound)->capture_default_str();
  sup->add_option("--epochs", cfg.supervised_epochs)->capture_default_str();
  sup->add_option("--patience", cfg.supervised_patience)->capture_default_str();
  sup->add_option("--batch-size", cfg.supervised_batch_size)->capture_default_str();
  sup->add_option("--lr", cfg.supervised_lr)->capture_default_str();

  // grid-search --------------------------------------------------------------
  auto* grid = app.add_subcommand("grid-search", "Search the regression lower bound on a dev task");
  grid->add_option("--model", model_path)->required();
  grid->add_option("--train", train_path)->required();
  grid->add_option("--dev", dev_path)->required();
  grid->add_option("--out", out, "CSV path (- for stdout)");
  grid->add_option("--bounds", cfg.supervised_bounds, "Candidate bounds")->delimiter(',');
  grid->add_option("--seeds-per-bound", cfg.supervised_seeds_per_bound)->capture_default_str();
  grid->add_option("--epochs", cfg.supervised_epochs)->capture_default_str();

  // evaluate -----------------------------------------------------------------
  auto* eval = app.add_subcommand("evaluate", "Score STS tasks; several --model values evaluate the ensemble mean");
  eval->add_option("--model", model_paths)->required();
  eval->add_option("--tasks", tasks_dir)->required();
  eval->add_option("--pool", cfg.eval_pool)->capture_default_str();
  eval->add_option("--flow", flow_path, "Flow checkpoint for latent-space scoring");
  std::string scoring = "cosine";
  eval->add_option("--scoring", scoring, "Flow scoring: cosine or negative_euclidean")->capture_default_str();
  eval->add_option("--out", out, "CSV path (- for stdout)");
  eval->add_option("--model-id", cfg.model_id)->capture_default_str();

  // stability ----------------------------------------------------------------
  auto* stab = app.add_subcommand("stability", "Members, full ensemble and seeded students: max/mean/std");
  stab->add_option("--teachers", model_paths)->required();
  stab->add_option("--student-init", student_init_path)->required();
  stab->add_option("--corpus", cfg.corpus)->required();
  stab->add_option("--count", cfg.corpus_size)->capture_default_str();
  stab->add_option("--tasks", tasks_dir)->required();
  stab->add_option("--runs", cfg.stability_runs)->capture_default_str();
  stab->add_option("--pool", cfg.eval_pool)->capture_default_str();
  stab->add_option("--epochs", cfg.sed_epochs)->capture_default_str();
  stab->add_option("--out", out, "CSV path (- for stdout)");

  // ablate-pooling -----------------------------------------------------------
  auto* abl = app.add_subcommand("ablate-pooling", "Average Spearman for final-k-layer pooling, k = 1..3");
  abl->add_option("--model", model_paths)->required();
  abl->add_option("--tasks", tasks_dir)->required();
  abl->add_option("--out", out, "CSV path (- for stdout)");

  // run-pipeline -------------------------------------------------------------
  auto* pipe = app.add_subcommand("run-pipeline", "Run the configured stage sequence end to end");
  pipe->add_option("--out-dir", cfg.out_dir, "Output directory (default: $SEDKIT_OUT_DIR or sedkit-out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    cfg.validate();
    if (*gen) {
      const auto world = generate_synthetic_world(world_spec);
      write_synthetic_world(world, out);
      std::cout << "wrote " << world.corpus.size() << " corpus sentences, " << world.test_tasks.size()
                << " test tasks and " << world.nli.size() << " NLI pairs to " << out << '\n';
    } else if (*pretrain) {
      Manifest m("pretrain", cfg);
      m.input(cfg.corpus);
      PretrainConfig pc;
      pc.arch = cfg.arch;
      pc.steps = cfg.pretrain_steps;
      pc.batch_size = cfg.pretrain_batch_size;
      pc.lr = cfg.pretrain_lr;
      pc.warmup_fraction = cfg.pretrain_warmup_fraction;
      pc.mask_prob = cfg.pretrain_mask_prob;
      pc.min_count = cfg.pretrain_min_count;
      pc.seed = derive_seed(cfg.seed, seed_tag::kPretrain);
      save_checkpoint(pretrain_base(load_corpus(cfg), pc), out);
      m.output(out);
      m.write(out);
    } else if (*nli) {
      Manifest m("train-nli", cfg);
      m.input(model_path);
      m.input(cfg.nli);
      LoadIssues issues;
      const auto data = load_nli_tsv(cfg.nli, &issues);
      for (const auto& msg : issues.messages) std::cerr << "warning: " << msg << '\n';
      const auto model = train_nli(load_encoder_checkpoint(model_path), data,
                                   {cfg.nli_epochs, cfg.nli_batch_size, cfg.nli_lr, cfg.nli_warmup_fraction,
                                    cfg.train_pool, derive_seed(cfg.seed, seed_tag::kNli + member)});
      save_checkpoint(model, out);
      m.output(out);
      m.write(out);
    } else if (*ct) {
      Manifest m("train-ct", cfg);
      m.input(model_path);
      m.input(cfg.corpus);
      CtConfig cc;
      cc.steps = cfg.ct_steps;
      cc.batch_size = cfg.ct_batch_size;
      cc.negatives_per_positive = cfg.ct_negatives;
      cc.start_lr = cfg.ct_start_lr;
      cc.end_lr = cfg.ct_end_lr;
      cc.pool_k = cfg.train_pool;
      cc.seed = derive_seed(cfg.seed, seed_tag::kCt + member);
      cc.keep_model_b = cfg.ct_keep_model_b;
      save_checkpoint(train_ct(load_encoder_checkpoint(model_path), load_corpus(cfg), cc), out);
      m.output(out);
      m.write(out);
    } else if (*sed) {
      Manifest m("train-sed", cfg);
      for (const auto& p : model_paths) m.input(p);
      m.input(student_init_path);
      m.input(cfg.corpus);
      const EnsembleSpec ensemble(load_models(model_paths), PoolingSpec(cfg.sed_target_pool));
      const auto student = train_sed(ensemble, load_encoder_checkpoint(student_init_path), load_corpus(cfg),
                                     sed_config(cfg));
      save_checkpoint(student, out);
      m.output(out);
      m.write(out);
    } else if (*flow) {
      Manifest m("fit-flow", cfg);
      m.input(model_path);
      m.input(tasks_dir);
      const auto model = load_encoder_checkpoint(model_path);
      const auto fitted = pipeline_detail::fit_flow_for(model, cfg, load_sts_dir(tasks_dir));
      save_checkpoint(fitted, out);
      m.output(out);
      m.write(out);
    } else if (*sup) {
      Manifest m("train-supervised", cfg);
      m.input(model_path);
      m.input(train_path);
      m.input(dev_path);
      SupervisedConfig sc;
      sc.regression = regression_config(cfg);
      sc.patience = cfg.supervised_patience;
      sc.eval_pool = cfg.eval_pool;
      const auto result =
          train_supervised_with_early_stopping(load_encoder_checkpoint(model_path),
                                               load_sts_tsv(train_path, Split::Train).pairs,
                                               load_sts_tsv(dev_path, Split::Dev),
                                               RegressionTargetMap(cfg.supervised_lower_bound), sc);
      save_checkpoint(*result.best.model, out);
      m.json()["best_epoch"] = result.best_epoch;
      m.json()["dev_spearman_x100"] = result.trajectory;
      m.output(out);
      m.write(out);
      std::cout << "best epoch " << result.best_epoch << " dev Spearman x100 "
                << CorrelationReport::fixed2(result.best_score) << '\n';
    } else if (*grid) {
      const auto result = grid_search_lower_bound(
          load_encoder_checkpoint(model_path), load_sts_tsv(train_path, Split::Train).pairs,
          load_sts_tsv(dev_path, Split::Dev), cfg.supervised_bounds, cfg.supervised_seeds_per_bound,
          regression_config(cfg), PoolingSpec(cfg.eval_pool));
      emit_csv(out, [&](std::ostream& o) { result.write_csv(o); });
      std::cerr << "selected lower bound " << format_double(result.selected) << " (" << result.rule << ")\n";
    } else if (*eval) {
      std::optional<CouplingFlow> f;
      if (!flow_path.empty()) f.emplace(load_flow_checkpoint(flow_path));
      if (scoring != "cosine" && scoring != "negative_euclidean") {
        throw ConfigError("--scoring must be cosine or negative_euclidean");
      }
      const FlowScoringOptions opts{f ? &*f : nullptr,
                                    scoring == "cosine" ? FlowScoring::Cosine : FlowScoring::NegativeEuclidean};
      const auto tasks = load_sts_dir(tasks_dir);
      auto models = load_models(model_paths);
      CorrelationReport report;
      ReportMetadata meta{cfg.model_id, cfg.eval_pool, false, cfg.seed};
      if (models.size() == 1) {
        report = evaluate_suite(models.front(), tasks, PoolingSpec(cfg.eval_pool), opts, meta);
      } else {
        const EnsembleSpec ensemble(std::move(models));
        report = evaluate_suite(ensemble_embedder(ensemble, PoolingSpec(cfg.eval_pool)), tasks, opts, meta);
      }
      for (const auto& failed : report.failed) std::cerr << "warning: task " << failed.task << ": " << failed.reason << '\n';
      if (out.empty() || out == "-") {
        report.write_csv(std::cout);
      } else {
        report.save(out);
      }
    } else if (*stab) {
      const EnsembleSpec ensemble(load_models(model_paths), PoolingSpec(cfg.sed_target_pool));
      std::vector<std::uint64_t> seeds;
      for (std::size_t r = 0; r < cfg.stability_runs; ++r) seeds.push_back(derive_seed(cfg.seed, seed_tag::kSed + r));
      const auto study = stability_study(ensemble, load_encoder_checkpoint(student_init_path), load_corpus(cfg),
                                         sed_config(cfg), seeds, load_sts_dir(tasks_dir), PoolingSpec(cfg.eval_pool));
      emit_csv(out, [&](std::ostream& o) { write_stability_csv(o, study.groups()); });
    } else if (*abl) {
      const auto models = load_models(model_paths);
      std::vector<std::pair<std::string, const EncoderModel*>> named;
      for (std::size_t i = 0; i < models.size(); ++i) named.emplace_back(fs::path(model_paths[i]).stem().string(), &models[i]);
      const auto table = pooling_ablation(named, load_sts_dir(tasks_dir));
      emit_csv(out, [&](std::ostream& o) { table.write_csv(o); });
    } else if (*pipe) {
      if (config_path.empty()) throw ConfigError("run-pipeline needs --config");
      const fs::path dir = resolve_out_dir(cfg.out_dir);
      const auto result = run_pipeline(cfg, load_data(cfg), dir);
      result.report.write_csv(std::cout);
      std::cerr << "outputs in " << dir.string() << '\n';
    }
  } catch (const std::exception& e) {
    print_diagnostics();
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  print_diagnostics();
  return 0;
}
