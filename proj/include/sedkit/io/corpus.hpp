#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "sedkit/diffcore/random.hpp"
#include "sedkit/evalsts/sts_data.hpp"

namespace sedkit {

/// Non-empty lines of a one-sentence-per-line file, text preserved exactly
/// apart from a trailing carriage return.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

/// Uniform sample of `count` sentences. Without replacement this is the
/// first `count` entries of a seeded shuffle; `count == 0` means all lines.
inline std::vector<std::string> sample_sentences(const std::vector<std::string>& lines, std::size_t count,
                                                 std::uint64_t seed, bool with_replacement = false) {
  if (lines.empty()) throw DataError("corpus has no non-empty lines");
  if (count == 0) count = lines.size();
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  if (with_replacement) {
    std::uniform_int_distribution<std::size_t> pick(0, lines.size() - 1);
    for (std::size_t i = 0; i < count; ++i) out.push_back(lines[pick(rng)]);
    return out;
  }
  if (count > lines.size()) {
    throw DataError("corpus has " + std::to_string(lines.size()) + " lines, cannot sample " + std::to_string(count) +
                    " without replacement");
  }
  std::vector<std::size_t> order(lines.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < count; ++i) out.push_back(lines[order[i]]);
  return out;
}

inline std::vector<std::string> sample_corpus(const std::filesystem::path& path, std::size_t count, std::uint64_t seed,
                                              bool with_replacement = false) {
  return sample_sentences(read_lines(path), count, seed, with_replacement);
}

}  // namespace sedkit
