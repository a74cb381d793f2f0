#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sedkit/types.hpp"

namespace sedkit {

enum class Split { Train, Dev, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    default: return "test";
  }
}

struct StsTask {
  std::string name;
  std::vector<ScoredPair> pairs;
  Split split = Split::Test;

  std::vector<std::string> sentences() const {
    std::vector<std::string> out;
    out.reserve(pairs.size() * 2);
    for (const auto& p : pairs) {
      out.push_back(p.sentence_1);
      out.push_back(p.sentence_2);
    }
    return out;
  }
};

/// Raised when an input file cannot be used at all.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lines that were skipped while loading, with 1-based line numbers.
struct LoadIssues {
  std::vector<std::string> messages;
  bool empty() const noexcept { return messages.empty(); }
};

inline bool valid_gold(double gold) { return gold >= 0.0 && gold <= 5.0; }

/// Splits a line on tab characters, dropping a trailing carriage return.
inline std::vector<std::string_view> split_tabs(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline bool parse_double(std::string_view text, double& out) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (text.empty()) return false;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

/// Parses STS TSV text: `sentence1<TAB>sentence2<TAB>gold` per line, `#`
/// comments and blank lines ignored. Malformed or out-of-range lines are
/// skipped and listed in `issues`.
inline StsTask parse_sts_tsv(std::istream& in, std::string name, Split split, LoadIssues* issues = nullptr) {
  StsTask task{std::move(name), {}, split};
  LoadIssues local;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty() || view.front() == '#') continue;
    auto fields = split_tabs(view);
    double gold = 0.0;
    if (fields.size() != 3) {
      local.messages.push_back("line " + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                               std::to_string(fields.size()));
      continue;
    }
    if (!parse_double(fields[2], gold)) {
      local.messages.push_back("line " + std::to_string(lineno) + ": gold score is not a number");
      continue;
    }
    if (!valid_gold(gold)) {
      local.messages.push_back("line " + std::to_string(lineno) + ": gold " + std::string(fields[2]) +
                               " outside [0, 5]");
      continue;
    }
    task.pairs.push_back({std::string(fields[0]), std::string(fields[1]), gold});
  }
  if (issues) *issues = local;
  if (task.pairs.empty()) {
    std::string msg = "STS task '" + task.name + "' has no valid lines";
    if (!local.empty()) msg += " (" + std::to_string(local.messages.size()) + " malformed)";
    throw DataError(msg);
  }
  return task;
}

inline StsTask load_sts_tsv(const std::filesystem::path& path, Split split = Split::Test,
                            LoadIssues* issues = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open STS file " + path.string());
  return parse_sts_tsv(in, path.stem().string(), split, issues);
}

/// Loads every `*.tsv` in a directory, ordered by file name.
inline std::vector<StsTask> load_sts_dir(const std::filesystem::path& dir, Split split = Split::Test) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tsv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .tsv tasks in " + dir.string());
  std::vector<StsTask> tasks;
  for (const auto& f : files) tasks.push_back(load_sts_tsv(f, split));
  return tasks;
}

/// Shortest round-trippable decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_sts_tsv(std::ostream& out, const StsTask& task) {
  for (const auto& p : task.pairs) out << p.sentence_1 << '\t' << p.sentence_2 << '\t' << format_double(p.gold) << '\n';
}

}  // namespace sedkit
