#pragma once

#include <cstddef>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace sedkit {

/// Process-wide warning log. Entries are counted per category and the first
/// few messages of each category are kept for run metadata.
class Diagnostics {
 public:
  static Diagnostics& instance() {
    static Diagnostics d;
    return d;
  }

  void warn(const std::string& category, const std::string& message) {
    std::lock_guard lock(mutex_);
    auto& entry = entries_[category];
    ++entry.count;
    if (entry.samples.size() < kMaxSamples) entry.samples.push_back(message);
  }

  std::size_t count(const std::string& category) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(category);
    return it == entries_.end() ? 0 : it->second.count;
  }

  struct Entry {
    std::size_t count = 0;
    std::vector<std::string> samples;
  };

  std::map<std::string, Entry> snapshot() const {
    std::lock_guard lock(mutex_);
    return entries_;
  }

  void reset() {
    std::lock_guard lock(mutex_);
    entries_.clear();
  }

 private:
  static constexpr std::size_t kMaxSamples = 8;
  mutable std::mutex mutex_;
  std::map<std::string, Entry> entries_;
};

namespace warning {
inline constexpr const char* kTruncation = "truncation";
inline constexpr const char* kZeroNorm = "zero_norm";
inline constexpr const char* kFlowDegenerate = "flow_degenerate";
inline constexpr const char* kFailedRun = "failed_run";
}  // namespace warning

}  // namespace sedkit
