#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "sedkit/encoder/model.hpp"
#include "sedkit/evalsts/sts_data.hpp"
#include "sedkit/flow/coupling_flow.hpp"

namespace sedkit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Stage { Pretrain, Nli, Ct, Sed, Flow };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Nli: return "nli";
    case Stage::Ct: return "ct";
    case Stage::Sed: return "sed";
    default: return "flow";
  }
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::Pretrain, Stage::Nli, Stage::Ct, Stage::Sed, Stage::Flow})
    if (s == stage_name(st)) return st;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

enum class StudentInit { Base, FirstMember };

/// Every knob of a run. Each field has a default; the text form lists every
/// field, so a resolved config can be embedded in a manifest and re-parsed.
///
/// Desk-scale defaults keep the reference ratios: 4 ensemble members instead
/// of 10, 5 000 corpus sentences instead of 100k, 3 stability runs instead of
/// 10, and learning rates raised for the small model while keeping the CT
/// start:end ratio (5:1) and the 10% warm-up.
struct RunConfig {
  // [run]
  std::vector<Stage> stages{Stage::Pretrain, Stage::Ct, Stage::Sed, Stage::Flow};
  std::uint64_t seed = 1;
  std::string out_dir;
  std::string model_id = "model";
  // [data]
  std::string corpus;
  std::string sts_dir;
  std::string sts_train;
  std::string sts_dev;
  std::string nli;
  std::string base_checkpoint;
  std::size_t corpus_size = 5000;
  bool sample_with_replacement = false;
  // [arch]
  Architecture arch;
  // [pretrain]
  std::size_t pretrain_steps = 300;
  std::size_t pretrain_batch_size = 16;
  double pretrain_lr = 1e-3;
  double pretrain_warmup_fraction = 0.1;
  double pretrain_mask_prob = 0.15;
  std::size_t pretrain_min_count = 1;
  // [nli]
  std::size_t nli_epochs = 1;
  std::size_t nli_batch_size = 16;
  double nli_lr = 1e-3;
  double nli_warmup_fraction = 0.1;
  // [ct]
  std::size_t ct_steps = 300;
  std::size_t ct_batch_size = 16;
  std::size_t ct_negatives = 7;
  double ct_start_lr = 1e-3;
  double ct_end_lr = 2e-4;
  bool ct_keep_model_b = true;
  // [sed]
  std::size_t sed_ensemble_size = 4;
  std::size_t sed_epochs = 1;
  std::size_t sed_batch_size = 32;
  double sed_lr = 1e-3;
  double sed_warmup_fraction = 0.1;
  std::size_t sed_target_pool = 1;
  StudentInit sed_student_init = StudentInit::Base;
  bool sed_precompute_targets = true;
  // [flow]
  std::size_t flow_layers = 4;
  std::size_t flow_hidden = 0;
  double flow_lr = 1e-3;
  std::size_t flow_epochs = 1;
  std::size_t flow_batch_size = 32;
  FlowScoring flow_scoring = FlowScoring::Cosine;
  bool flow_apply_to_members = false;
  // [eval]
  std::size_t eval_pool = 2;
  std::size_t train_pool = 1;
  // [supervised]
  std::size_t supervised_epochs = 8;
  std::size_t supervised_batch_size = 16;
  double supervised_lr = 1e-3;
  double supervised_warmup_fraction = 0.1;
  std::size_t supervised_patience = 2;
  double supervised_lower_bound = 0.0;
  std::size_t supervised_seeds_per_bound = 1;
  std::vector<double> supervised_bounds = default_bounds();
  // [stability]
  std::size_t stability_runs = 3;

  static std::vector<double> default_bounds() {
    std::vector<double> b;
    for (int i = 0; i < 20; ++i) b.push_back(i / 20.0);
    return b;
  }

  bool operator==(const RunConfig&) const = default;

  std::string to_text() const;
  static RunConfig parse(std::string_view text);
  void validate() const;
};

namespace config_detail {

struct StagesRef {
  std::vector<Stage>* v;
};
struct BoundsRef {
  std::vector<double>* v;
};
struct InitRef {
  StudentInit* v;
};
struct ScoringRef {
  FlowScoring* v;
};
using FieldRef = std::variant<std::size_t*, double*, bool*, std::string*, StagesRef, BoundsRef, InitRef,
                              ScoringRef>;

struct Field {
  const char* section;
  const char* key;
  FieldRef ref;
};

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "config fields assume an LP64 target");

inline std::vector<Field> fields(RunConfig& c) {
  return {
      {"run", "stages", StagesRef{&c.stages}},
      {"run", "seed", &c.seed},
      {"run", "out_dir", &c.out_dir},
      {"run", "model_id", &c.model_id},
      {"data", "corpus", &c.corpus},
      {"data", "sts_dir", &c.sts_dir},
      {"data", "sts_train", &c.sts_train},
      {"data", "sts_dev", &c.sts_dev},
      {"data", "nli", &c.nli},
      {"data", "base_checkpoint", &c.base_checkpoint},
      {"data", "corpus_size", &c.corpus_size},
      {"data", "sample_with_replacement", &c.sample_with_replacement},
      {"arch", "layers", &c.arch.layers},
      {"arch", "hidden", &c.arch.hidden},
      {"arch", "heads", &c.arch.heads},
      {"arch", "ffn", &c.arch.ffn},
      {"arch", "max_len", &c.arch.max_len},
      {"pretrain", "steps", &c.pretrain_steps},
      {"pretrain", "batch_size", &c.pretrain_batch_size},
      {"pretrain", "lr", &c.pretrain_lr},
      {"pretrain", "warmup_fraction", &c.pretrain_warmup_fraction},
      {"pretrain", "mask_prob", &c.pretrain_mask_prob},
      {"pretrain", "min_count", &c.pretrain_min_count},
      {"nli", "epochs", &c.nli_epochs},
      {"nli", "batch_size", &c.nli_batch_size},
      {"nli", "lr", &c.nli_lr},
      {"nli", "warmup_fraction", &c.nli_warmup_fraction},
      {"ct", "steps", &c.ct_steps},
      {"ct", "batch_size", &c.ct_batch_size},
      {"ct", "negatives", &c.ct_negatives},
      {"ct", "start_lr", &c.ct_start_lr},
      {"ct", "end_lr", &c.ct_end_lr},
      {"ct", "keep_model_b", &c.ct_keep_model_b},
      {"sed", "ensemble_size", &c.sed_ensemble_size},
      {"sed", "epochs", &c.sed_epochs},
      {"sed", "batch_size", &c.sed_batch_size},
      {"sed", "lr", &c.sed_lr},
      {"sed", "warmup_fraction", &c.sed_warmup_fraction},
      {"sed", "target_pool", &c.sed_target_pool},
      {"sed", "student_init", InitRef{&c.sed_student_init}},
      {"sed", "precompute_targets", &c.sed_precompute_targets},
      {"flow", "layers", &c.flow_layers},
      {"flow", "hidden", &c.flow_hidden},
      {"flow", "lr", &c.flow_lr},
      {"flow", "epochs", &c.flow_epochs},
      {"flow", "batch_size", &c.flow_batch_size},
      {"flow", "scoring", ScoringRef{&c.flow_scoring}},
      {"flow", "apply_to_members", &c.flow_apply_to_members},
      {"eval", "pool", &c.eval_pool},
      {"eval", "train_pool", &c.train_pool},
      {"supervised", "epochs", &c.supervised_epochs},
      {"supervised", "batch_size", &c.supervised_batch_size},
      {"supervised", "lr", &c.supervised_lr},
      {"supervised", "warmup_fraction", &c.supervised_warmup_fraction},
      {"supervised", "patience", &c.supervised_patience},
      {"supervised", "lower_bound", &c.supervised_lower_bound},
      {"supervised", "seeds_per_bound", &c.supervised_seeds_per_bound},
      {"supervised", "bounds", BoundsRef{&c.supervised_bounds}},
      {"stability", "runs", &c.stability_runs},
  };
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(',', start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::uint64_t parse_uint(std::string_view v, const std::string& where) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(where + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

inline double parse_real(std::string_view v, const std::string& where) {
  double out = 0.0;
  if (!parse_double(v, out)) throw ConfigError(where + ": expected a number, got '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view v, const std::string& where) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(where + ": expected true or false, got '" + std::string(v) + "'");
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

inline std::string format(const FieldRef& ref) {
  return std::visit(
      Overloaded{
          [](std::size_t* v) { return std::to_string(*v); },
          [](double* v) { return format_double(*v); },
          [](bool* v) { return std::string(*v ? "true" : "false"); },
          [](std::string* v) { return *v; },
          [](StagesRef r) {
            std::string s;
            for (std::size_t i = 0; i < r.v->size(); ++i) s += (i ? ", " : "") + std::string(stage_name((*r.v)[i]));
            return s;
          },
          [](BoundsRef r) {
            std::string s;
            for (std::size_t i = 0; i < r.v->size(); ++i) s += (i ? ", " : "") + format_double((*r.v)[i]);
            return s;
          },
          [](InitRef r) { return std::string(*r.v == StudentInit::Base ? "base" : "first_member"); },
          [](ScoringRef r) { return std::string(*r.v == FlowScoring::Cosine ? "cosine" : "negative_euclidean"); },
      },
      ref);
}

inline void assign(const FieldRef& ref, std::string_view value, const std::string& where) {
  std::visit(Overloaded{
                 [&](std::size_t* v) { *v = static_cast<std::size_t>(parse_uint(value, where)); },
                 [&](double* v) { *v = parse_real(value, where); },
                 [&](bool* v) { *v = parse_bool(value, where); },
                 [&](std::string* v) { *v = std::string(value); },
                 [&](StagesRef r) {
                   r.v->clear();
                   for (auto s : split_commas(value)) r.v->push_back(parse_stage(s));
                 },
                 [&](BoundsRef r) {
                   r.v->clear();
                   for (auto s : split_commas(value)) r.v->push_back(parse_real(s, where));
                 },
                 [&](InitRef r) {
                   if (value == "base") *r.v = StudentInit::Base;
                   else if (value == "first_member") *r.v = StudentInit::FirstMember;
                   else throw ConfigError(where + ": expected base or first_member");
                 },
                 [&](ScoringRef r) {
                   if (value == "cosine") *r.v = FlowScoring::Cosine;
                   else if (value == "negative_euclidean") *r.v = FlowScoring::NegativeEuclidean;
                   else throw ConfigError(where + ": expected cosine or negative_euclidean");
                 },
             },
             ref);
}

}  // namespace config_detail

inline std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::ostringstream out;
  std::string section;
  for (const auto& f : config_detail::fields(copy)) {
    if (section != f.section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << config_detail::format(f.ref) << '\n';
  }
  return out.str();
}

inline RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  auto table = config_detail::fields(cfg);
  std::string section;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    auto line = config_detail::trim(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++lineno;
    const std::string where = "config line " + std::to_string(lineno);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = std::string(config_detail::trim(line.substr(1, line.size() - 2)));
      bool known = false;
      for (const auto& f : table) known = known || section == f.section;
      if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
    const auto key = config_detail::trim(line.substr(0, eq));
    auto value = line.substr(eq + 1);
    // " #" starts a trailing comment; a bare '#' inside a path is kept.
    for (std::size_t i = 1; i < value.size(); ++i) {
      if (value[i] == '#' && (value[i - 1] == ' ' || value[i - 1] == '\t')) {
        value = value.substr(0, i);
        break;
      }
    }
    value = config_detail::trim(value);
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    bool found = false;
    for (const auto& f : table) {
      if (section == f.section && key == f.key) {
        config_detail::assign(f.ref, value, where + " (" + section + "." + std::string(key) + ")");
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError(where + ": unknown key '" + std::string(key) + "' in [" + section + "]");
  }
  cfg.validate();
  return cfg;
}

inline void RunConfig::validate() const {
  try {
    arch.validate();
    PoolingSpec eval(eval_pool), target(sed_target_pool), train(train_pool);
    (void)eval, (void)target, (void)train;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (stages.empty()) throw ConfigError("run.stages: at least one stage is required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i] == Stage::Pretrain && i != 0) throw ConfigError("run.stages: pretrain must come first");
    if (stages[i] == Stage::Flow && i + 1 != stages.size()) throw ConfigError("run.stages: flow must be the last stage");
    for (std::size_t j = 0; j < i; ++j)
      if (stages[j] == stages[i]) throw ConfigError(std::string("run.stages: duplicate stage ") + stage_name(stages[i]));
  }
  if (ct_batch_size % (ct_negatives + 1) != 0) throw ConfigError("ct.batch_size must be divisible by negatives + 1");
  if (sed_ensemble_size == 0) throw ConfigError("sed.ensemble_size must be at least 1");
  if (supervised_bounds.empty()) throw ConfigError("supervised.bounds must not be empty");
  for (double b : supervised_bounds)
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("supervised.bounds: each bound must lie in [0, 1)");
  for (double lr : {pretrain_lr, nli_lr, ct_start_lr, ct_end_lr, sed_lr, flow_lr, supervised_lr})
    if (!(lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
}

/// Output directory: explicit setting, else $SEDKIT_OUT_DIR, else "sedkit-out".
inline std::string resolve_out_dir(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("SEDKIT_OUT_DIR"); env && *env) return env;
  return "sedkit-out";
}

}  // namespace sedkit
