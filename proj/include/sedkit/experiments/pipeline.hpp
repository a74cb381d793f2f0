#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sedkit/encoder/pretrain.hpp"
#include "sedkit/evalsts/evaluate.hpp"
#include "sedkit/experiments/sed.hpp"
#include "sedkit/flow/coupling_flow.hpp"
#include "sedkit/io/checkpoint.hpp"
#include "sedkit/io/config.hpp"
#include "sedkit/io/corpus.hpp"
#include "sedkit/io/hash.hpp"
#include "sedkit/objectives/trainers.hpp"

namespace sedkit {

/// Seed tags. Every stage draws its randomness from derive_seed(run seed, tag).
namespace seed_tag {
inline constexpr std::uint64_t kPretrain = 0x050;
inline constexpr std::uint64_t kNli = 0x100;  // + member index
inline constexpr std::uint64_t kCt = 0x200;   // + member index
inline constexpr std::uint64_t kSed = 0x300;
inline constexpr std::uint64_t kFlow = 0x400;
inline constexpr std::uint64_t kCorpus = 0x500;
}  // namespace seed_tag

struct DataBundle {
  std::vector<std::string> corpus;
  std::vector<StsTask> eval_tasks;
  std::vector<LabeledNliPair> nli;
  std::map<std::string, std::string> input_hashes;  // path -> sha256
};

/// Reads every input named in the config and records its SHA-256. The corpus
/// is subsampled to `corpus_size` with the corpus seed.
inline DataBundle load_data(const RunConfig& config) {
  namespace fs = std::filesystem;
  DataBundle data;
  const bool needs_corpus = std::any_of(config.stages.begin(), config.stages.end(), [](Stage s) {
    return s == Stage::Pretrain || s == Stage::Ct || s == Stage::Sed;
  });
  if (needs_corpus) {
    if (config.corpus.empty()) throw ConfigError("data.corpus is required by the configured stages");
    data.corpus = sample_corpus(config.corpus, config.corpus_size, derive_seed(config.seed, seed_tag::kCorpus),
                                config.sample_with_replacement);
    data.input_hashes[config.corpus] = file_sha256_hex(config.corpus);
  }
  if (std::find(config.stages.begin(), config.stages.end(), Stage::Nli) != config.stages.end()) {
    if (config.nli.empty()) throw ConfigError("data.nli is required by the nli stage");
    LoadIssues issues;
    data.nli = load_nli_tsv(config.nli, &issues);
    data.input_hashes[config.nli] = file_sha256_hex(config.nli);
  }
  if (config.sts_dir.empty()) throw ConfigError("data.sts_dir is required for evaluation");
  data.eval_tasks = load_sts_dir(config.sts_dir, Split::Test);
  for (const auto& entry : fs::directory_iterator(config.sts_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tsv") {
      data.input_hashes[entry.path().string()] = file_sha256_hex(entry.path());
    }
  }
  if (!config.base_checkpoint.empty() &&
      std::find(config.stages.begin(), config.stages.end(), Stage::Pretrain) == config.stages.end()) {
    data.input_hashes[config.base_checkpoint] = file_sha256_hex(config.base_checkpoint);
  }
  return data;
}

struct PipelineResult {
  std::optional<EncoderModel> base;
  std::vector<EncoderModel> members;
  std::optional<EncoderModel> student;
  std::optional<EncoderModel> final_model;
  std::optional<CouplingFlow> flow;
  CorrelationReport report;
  std::vector<CorrelationReport> member_reports;
  nlohmann::ordered_json manifest;
};

namespace pipeline_detail {

inline bool has(const std::vector<Stage>& stages, Stage s) {
  return std::find(stages.begin(), stages.end(), s) != stages.end();
}

inline void check_stage_order(const std::vector<Stage>& stages) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i] != Stage::Sed) continue;
    for (std::size_t j = i + 1; j < stages.size(); ++j) {
      if (stages[j] != Stage::Flow) throw ConfigError("run.stages: only flow may follow sed");
    }
  }
}

inline std::vector<Embedding> eval_sentence_embeddings(const EncoderModel& model, const std::vector<StsTask>& tasks,
                                                       PoolingSpec pool) {
  std::set<std::string> seen;
  std::vector<Embedding> out;
  for (const auto& t : tasks) {
    for (const auto& p : t.pairs) {
      for (const auto* s : {&p.sentence_1, &p.sentence_2}) {
        if (seen.insert(*s).second) out.push_back(model.encode(*s, pool));
      }
    }
  }
  return out;
}

inline CouplingFlow fit_flow_for(const EncoderModel& model, const RunConfig& config, const std::vector<StsTask>& tasks) {
  const auto seed = derive_seed(config.seed, seed_tag::kFlow);
  CouplingFlow init(model.dim(), config.flow_layers, config.flow_hidden, seed);
  auto fit = fit_flow(init, eval_sentence_embeddings(model, tasks, PoolingSpec(config.eval_pool)),
                      {config.flow_lr, config.flow_epochs, config.flow_batch_size, seed});
  return std::move(fit.flow);
}

}  // namespace pipeline_detail

/// Runs the configured stage sequence end to end.
///
/// Pretrain (or a loaded base checkpoint) feeds each ensemble member through
/// the NLI and CT stages in configured order; SED distils the members into a
/// student; Flow fits a normalizing flow on the final model's embeddings of
/// the evaluation sentences. When `out_dir` is non-empty the checkpoints,
/// report.csv and manifest.json are written there. A failure writes a
/// manifest with status "failed" before the exception propagates.
inline PipelineResult run_pipeline(const RunConfig& config, const DataBundle& data,
                                   const std::filesystem::path& out_dir = {}) {
  using namespace pipeline_detail;
  namespace fs = std::filesystem;
  config.validate();
  check_stage_order(config.stages);
  if (data.eval_tasks.empty()) throw DataError("no evaluation tasks");

  PipelineResult result;
  auto& manifest = result.manifest;
  manifest["format"] = "sedkit-manifest/1";
  manifest["model_id"] = config.model_id;
  manifest["status"] = "running";
  for (Stage s : config.stages) manifest["stages"].push_back(stage_name(s));
  manifest["completed_stages"] = nlohmann::ordered_json::array();
  manifest["config"] = config.to_text();
  manifest["seeds"] = {{"run", config.seed},
                       {"pretrain", derive_seed(config.seed, seed_tag::kPretrain)},
                       {"sed", derive_seed(config.seed, seed_tag::kSed)},
                       {"flow", derive_seed(config.seed, seed_tag::kFlow)},
                       {"corpus", derive_seed(config.seed, seed_tag::kCorpus)}};
  manifest["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [path, hash] : data.input_hashes) manifest["inputs"][path] = hash;
  manifest["outputs"] = nlohmann::ordered_json::object();

  const bool write = !out_dir.empty();
  if (write) fs::create_directories(out_dir);
  auto save_encoder = [&](const EncoderModel& m, const std::string& name) {
    if (!write) return;
    save_checkpoint(m, out_dir / name);
    manifest["outputs"][name] = file_sha256_hex(out_dir / name);
  };
  auto write_manifest = [&] {
    if (!write) return;
    std::ofstream out(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
  };
  auto completed = [&](Stage s) { manifest["completed_stages"].push_back(stage_name(s)); };

  try {
    const PoolingSpec eval_pool(config.eval_pool);

    if (has(config.stages, Stage::Pretrain)) {
      PretrainConfig pc;
      pc.arch = config.arch;
      pc.steps = config.pretrain_steps;
      pc.batch_size = config.pretrain_batch_size;
      pc.lr = config.pretrain_lr;
      pc.warmup_fraction = config.pretrain_warmup_fraction;
      pc.mask_prob = config.pretrain_mask_prob;
      pc.min_count = config.pretrain_min_count;
      pc.seed = derive_seed(config.seed, seed_tag::kPretrain);
      result.base.emplace(pretrain_base(data.corpus, pc));
      completed(Stage::Pretrain);
    } else {
      if (config.base_checkpoint.empty()) throw ConfigError("data.base_checkpoint is required without a pretrain stage");
      result.base.emplace(load_encoder_checkpoint(config.base_checkpoint));
    }
    save_encoder(*result.base, "base.ckpt");

    const bool sed = has(config.stages, Stage::Sed);
    const std::size_t members = sed ? config.sed_ensemble_size : 1;
    const bool tunes = has(config.stages, Stage::Nli) || has(config.stages, Stage::Ct);
    if (tunes) {
      for (std::size_t m = 0; m < members; ++m) {
        EncoderModel model = *result.base;
        for (Stage s : config.stages) {
          if (s == Stage::Nli) {
            model = train_nli(model, data.nli,
                              {config.nli_epochs, config.nli_batch_size, config.nli_lr, config.nli_warmup_fraction,
                               config.train_pool, derive_seed(config.seed, seed_tag::kNli + m)});
          } else if (s == Stage::Ct) {
            CtConfig cc;
            cc.steps = config.ct_steps;
            cc.batch_size = config.ct_batch_size;
            cc.negatives_per_positive = config.ct_negatives;
            cc.start_lr = config.ct_start_lr;
            cc.end_lr = config.ct_end_lr;
            cc.pool_k = config.train_pool;
            cc.seed = derive_seed(config.seed, seed_tag::kCt + m);
            cc.keep_model_b = config.ct_keep_model_b;
            model = train_ct(model, data.corpus, cc);
          }
        }
        save_encoder(model, "member-" + std::to_string(m) + ".ckpt");
        result.members.push_back(std::move(model));
      }
      for (Stage s : config.stages)
        if (s == Stage::Nli || s == Stage::Ct) completed(s);
    } else {
      result.members.push_back(*result.base);
    }

    if (sed) {
      EnsembleSpec ensemble(result.members, PoolingSpec(config.sed_target_pool));
      const EncoderModel& init =
          config.sed_student_init == StudentInit::Base ? *result.base : result.members.front();
      SedConfig sc{config.sed_epochs,      config.sed_batch_size, config.sed_lr,
                   config.sed_warmup_fraction, config.train_pool, derive_seed(config.seed, seed_tag::kSed),
                   config.sed_precompute_targets};
      result.student.emplace(train_sed(ensemble, init, data.corpus, sc));
      save_encoder(*result.student, "student.ckpt");
      completed(Stage::Sed);
      result.final_model.emplace(*result.student);
    } else {
      result.final_model.emplace(result.members.front());
    }

    if (has(config.stages, Stage::Flow)) {
      result.flow.emplace(fit_flow_for(*result.final_model, config, data.eval_tasks));
      if (write) {
        save_checkpoint(*result.flow, out_dir / "flow.ckpt");
        manifest["outputs"]["flow.ckpt"] = file_sha256_hex(out_dir / "flow.ckpt");
      }
      completed(Stage::Flow);
    }

    const FlowScoringOptions flow_opts{result.flow ? &*result.flow : nullptr, config.flow_scoring};
    result.report = evaluate_suite(*result.final_model, data.eval_tasks, eval_pool, flow_opts,
                                   {config.model_id, config.eval_pool, false, config.seed});
    if (tunes) {
      for (std::size_t m = 0; m < result.members.size(); ++m) {
        std::optional<CouplingFlow> member_flow;
        if (result.flow && config.flow_apply_to_members) {
          member_flow.emplace(fit_flow_for(result.members[m], config, data.eval_tasks));
        }
        result.member_reports.push_back(
            evaluate_suite(result.members[m], data.eval_tasks, eval_pool,
                           {member_flow ? &*member_flow : nullptr, config.flow_scoring},
                           {config.model_id + "-member-" + std::to_string(m), config.eval_pool, false, config.seed}));
      }
    }
    if (write) {
      result.report.save(out_dir / "report.csv");
      manifest["outputs"]["report.csv"] = file_sha256_hex(out_dir / "report.csv");
    }
    manifest["status"] = result.report.partial() ? "partial" : "complete";
    manifest["avg_spearman_x100"] = result.report.average_spearman_x100();
    write_manifest();
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    try {
      write_manifest();
    } catch (...) {
    }
    throw;
  }
  return result;
}

}  // namespace sedkit
