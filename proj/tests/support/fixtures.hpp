#pragma once

#include <random>
#include <string>
#include <vector>

namespace sedkit::testing {

/// Small deterministic corpus: sentences built from a few topical word pools.
inline std::vector<std::string> toy_corpus(std::size_t count, std::uint64_t seed = 3) {
  static const std::vector<std::vector<std::string>> pools = {
      {"cat", "dog", "pet", "fur", "paw", "bark", "meow"},
      {"car", "road", "wheel", "drive", "engine", "fuel", "brake"},
      {"rain", "cloud", "storm", "wind", "sun", "snow", "cold"},
      {"bread", "cheese", "soup", "bake", "salt", "meal", "cook"},
  };
  static const std::vector<std::string> glue = {"the", "a", "is", "and", "of", "with", "near"};
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& pool = pools[rng() % pools.size()];
    const std::size_t len = 3 + rng() % 6;
    std::string s;
    for (std::size_t w = 0; w < len; ++w) {
      if (w) s += ' ';
      s += (rng() % 3 == 0) ? glue[rng() % glue.size()] : pool[rng() % pool.size()];
    }
    if (rng() % 2) s += " .";
    out.push_back(s);
  }
  return out;
}

}  // namespace sedkit::testing
