#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diffcore/random.hpp"
#include "sedkit/evalsts/sts_data.hpp"
#include "sedkit/objectives/objectives.hpp"

namespace sedkit {

/// Desk-scale stand-in for a sentence corpus plus STS and NLI data.
///
/// Clusters sit on a line in a latent space, `spacing` apart. Each cluster
/// draws topical words from its own window of a shared word list; windows of
/// neighbouring clusters overlap, so lexical overlap decays with cluster
/// distance. Gold similarity is 5 * exp(-latent distance), rounded to 0.1.
struct SyntheticWorldSpec {
  std::size_t clusters = 8;
  std::size_t sentences_per_cluster = 1100;
  std::size_t words_per_cluster = 12;
  std::size_t word_stride = 6;
  std::size_t glue_words = 10;
  std::size_t min_len = 5;
  std::size_t max_len = 10;
  double topical_prob = 0.7;
  double spacing = 0.5;
  double corpus_fraction = 0.6;
  double train_fraction = 0.1;
  double dev_fraction = 0.05;
  double test_fraction = 0.15;
  double nli_fraction = 0.1;
  std::size_t test_tasks = 5;
  std::size_t pairs_per_task = 100;
  std::size_t train_pairs = 300;
  std::size_t dev_pairs = 100;
  std::size_t nli_pairs = 600;
  double same_cluster_prob = 0.2;
  std::uint64_t seed = 7;

  std::size_t vocabulary_size() const { return (clusters - 1) * word_stride + words_per_cluster + glue_words; }
};

inline double synthetic_gold(std::size_t cluster_a, std::size_t cluster_b, double spacing) {
  const double distance = spacing * std::abs(static_cast<double>(cluster_a) - static_cast<double>(cluster_b));
  return std::round(50.0 * std::exp(-distance)) / 10.0;
}

inline NliLabel synthetic_nli_label(std::size_t cluster_a, std::size_t cluster_b) {
  const auto d = cluster_a > cluster_b ? cluster_a - cluster_b : cluster_b - cluster_a;
  return d == 0 ? NliLabel::Entailment : d == 1 ? NliLabel::Neutral : NliLabel::Contradiction;
}

struct SyntheticWorld {
  SyntheticWorldSpec spec;
  std::vector<std::string> corpus;
  std::vector<StsTask> test_tasks;
  StsTask train;
  StsTask dev;
  std::vector<LabeledNliPair> nli;
  std::map<std::string, std::size_t> cluster_of;
};

namespace synthetic_detail {

inline std::string pseudo_word(std::size_t index, std::string_view prefix = "") {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};
  std::string w(prefix);
  std::size_t n = index;
  do {
    w += kOnsets[n % 14];
    n /= 14;
    w += kVowels[n % 5];
    n /= 5;
  } while (n > 0);
  return w + kOnsets[(index * 7 + 3) % 14];
}

struct Pools {
  std::vector<std::vector<std::string>> corpus, train, dev, test, nli;
};

}  // namespace synthetic_detail

inline SyntheticWorld generate_synthetic_world(const SyntheticWorldSpec& spec) {
  using namespace synthetic_detail;
  if (spec.clusters < 2) throw std::invalid_argument("synthetic: at least two clusters are required");
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw std::invalid_argument("synthetic: bad sentence lengths");
  if (spec.word_stride == 0 || spec.words_per_cluster == 0) throw std::invalid_argument("synthetic: empty word windows");
  const double total =
      spec.corpus_fraction + spec.train_fraction + spec.dev_fraction + spec.test_fraction + spec.nli_fraction;
  if (total > 1.0 + 1e-12) throw std::invalid_argument("synthetic: split fractions sum above 1");
  auto per_cluster = [&](double f) { return static_cast<std::size_t>(std::floor(f * spec.sentences_per_cluster)); };
  for (double f : {spec.train_fraction, spec.dev_fraction, spec.test_fraction, spec.nli_fraction}) {
    if (per_cluster(f) < 2) {
      throw std::invalid_argument("synthetic: a split receives fewer than 2 sentences per cluster; raise "
                                  "sentences_per_cluster or the split fraction");
    }
  }
  if (per_cluster(spec.corpus_fraction) < 1) throw std::invalid_argument("synthetic: empty corpus split");

  std::vector<std::string> topical, glue;
  for (std::size_t i = 0; i < (spec.clusters - 1) * spec.word_stride + spec.words_per_cluster; ++i)
    topical.push_back(pseudo_word(i));
  for (std::size_t i = 0; i < spec.glue_words; ++i) glue.push_back(pseudo_word(i, "q"));

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
  std::set<std::string> seen;
  SyntheticWorld world;
  world.spec = spec;
  Pools pools;
  for (auto* p : {&pools.corpus, &pools.train, &pools.dev, &pools.test, &pools.nli}) p->resize(spec.clusters);

  for (std::size_t c = 0; c < spec.clusters; ++c) {
    const std::size_t window_start = c * spec.word_stride;
    std::vector<std::string> sentences;
    std::size_t attempts = 0;
    while (sentences.size() < spec.sentences_per_cluster) {
      if (++attempts > 50 * spec.sentences_per_cluster) {
        throw std::invalid_argument("synthetic: cannot draw enough distinct sentences; enlarge the vocabulary");
      }
      const std::size_t len = len_dist(rng);
      std::string s;
      for (std::size_t w = 0; w < len; ++w) {
        if (w) s += ' ';
        if (coin(rng) < spec.topical_prob) {
          s += topical[window_start + std::uniform_int_distribution<std::size_t>(0, spec.words_per_cluster - 1)(rng)];
        } else {
          s += glue[std::uniform_int_distribution<std::size_t>(0, spec.glue_words - 1)(rng)];
        }
      }
      if (seen.insert(s).second) {
        sentences.push_back(s);
        world.cluster_of[s] = c;
      }
    }
    std::size_t at = 0;
    auto take = [&](std::vector<std::string>& dst, std::size_t n) {
      dst.assign(sentences.begin() + static_cast<std::ptrdiff_t>(at),
                 sentences.begin() + static_cast<std::ptrdiff_t>(at + n));
      at += n;
    };
    take(pools.test[c], per_cluster(spec.test_fraction));
    take(pools.train[c], per_cluster(spec.train_fraction));
    take(pools.dev[c], per_cluster(spec.dev_fraction));
    take(pools.nli[c], per_cluster(spec.nli_fraction));
    take(pools.corpus[c], per_cluster(spec.corpus_fraction));
  }

  std::uniform_int_distribution<std::size_t> pick_cluster(0, spec.clusters - 1);
  auto pick = [&](const std::vector<std::string>& pool, const std::string* avoid) -> const std::string& {
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    while (true) {
      const auto& s = pool[d(rng)];
      if (!avoid || s != *avoid) return s;
    }
  };
  auto make_pairs = [&](const std::vector<std::vector<std::string>>& pool, std::size_t n) {
    std::vector<ScoredPair> out;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = pick_cluster(rng);
      std::size_t b = a;
      if (coin(rng) >= spec.same_cluster_prob) {
        while (b == a) b = pick_cluster(rng);
      }
      const auto& s1 = pick(pool[a], nullptr);
      const auto& s2 = pick(pool[b], a == b ? &s1 : nullptr);
      out.push_back({s1, s2, synthetic_gold(a, b, spec.spacing)});
    }
    return out;
  };

  for (const auto& sentences : pools.corpus) world.corpus.insert(world.corpus.end(), sentences.begin(), sentences.end());
  std::shuffle(world.corpus.begin(), world.corpus.end(), rng);
  for (std::size_t t = 0; t < spec.test_tasks; ++t) {
    world.test_tasks.push_back({"synth-" + std::to_string(t + 1), make_pairs(pools.test, spec.pairs_per_task), Split::Test});
  }
  world.train = {"train", make_pairs(pools.train, spec.train_pairs), Split::Train};
  world.dev = {"dev", make_pairs(pools.dev, spec.dev_pairs), Split::Dev};

  for (std::size_t i = 0; i < spec.nli_pairs; ++i) {
    const auto label = static_cast<NliLabel>(i % 3);
    const std::size_t a = pick_cluster(rng);
    std::size_t b = a;
    if (label == NliLabel::Neutral) {
      b = (a == 0) ? 1 : (a + 1 == spec.clusters) ? a - 1 : (coin(rng) < 0.5 ? a - 1 : a + 1);
    } else if (label == NliLabel::Contradiction) {
      if (spec.clusters < 3) continue;
      do {
        b = pick_cluster(rng);
      } while ((a > b ? a - b : b - a) < 2);
    }
    const auto& s1 = pick(pools.nli[a], nullptr);
    const auto& s2 = pick(pools.nli[b], a == b ? &s1 : nullptr);
    world.nli.push_back({s1, s2, synthetic_nli_label(a, b)});
  }
  return world;
}

/// Writes corpus.txt, sts/test/*.tsv, sts/train.tsv, sts/dev.tsv, nli.tsv and
/// clusters.tsv (sentence to cluster assignment) under `dir`.
inline void write_synthetic_world(const SyntheticWorld& world, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "sts" / "test");
  auto open = [](const fs::path& p) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
  };
  {
    auto out = open(dir / "corpus.txt");
    for (const auto& s : world.corpus) out << s << '\n';
  }
  for (const auto& task : world.test_tasks) {
    auto out = open(dir / "sts" / "test" / (task.name + ".tsv"));
    write_sts_tsv(out, task);
  }
  {
    auto out = open(dir / "sts" / "train.tsv");
    write_sts_tsv(out, world.train);
  }
  {
    auto out = open(dir / "sts" / "dev.tsv");
    write_sts_tsv(out, world.dev);
  }
  {
    auto out = open(dir / "nli.tsv");
    for (const auto& ex : world.nli) out << ex.premise << '\t' << ex.hypothesis << '\t' << nli_label_name(ex.label) << '\n';
  }
  {
    auto out = open(dir / "clusters.tsv");
    for (const auto& [s, c] : world.cluster_of) out << s << '\t' << c << '\n';
  }
}

}  // namespace sedkit
