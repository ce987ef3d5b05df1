#pragma once

// Retrieval metrics over ranked lists and reflection-quality metrics over
// first-pass drafts.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace grc::eval {

/// 1-based rank of `target` in `ranked`, 0 if absent.
int rank_of(std::span<const int> ranked, int target);

double recall_at_k(std::span<const int> ranked, int target, int k);
double ndcg_at_k(std::span<const int> ranked, int target, int k);

struct AccResult {
  double value = 0.0;
  std::size_t used = 0;   // drafts averaged
  bool short_list = false;  // fewer than k drafts were available
};

/// Fraction of the first min(k, n) entries where predicted equals true.
AccResult accuracy_at_k(std::span<const int> predicted, std::span<const int> truth, int k);

struct UserRecord {
  std::int64_t user = 0;
  int target = -1;
  std::vector<int> ranked;      // unique items, best first
  // first-pass drafts in base-score order; empty for plain decoding
  std::vector<int> pred_loc, true_loc;
  std::vector<int> pred_cat, true_cat;
};

struct MetricRow {
  std::string metric;
  int k = 0;
  double value = 0.0;
};

struct EvalReport {
  std::vector<int> ks;
  std::size_t users = 0;
  std::vector<MetricRow> rows;          // recall, ndcg, then acc_loc, acc_cat when present
  std::vector<std::size_t> short_users;  // per k, users with fewer than k drafts
  nlohmann::json per_user = nlohmann::json::array();

  double value(const std::string& metric, int k) const;
  nlohmann::json to_json() const;
  /// metric,k,value with fixed formatting; `comment` becomes a leading '#' line.
  void write_csv(const std::filesystem::path& path, const std::string& comment) const;
};

/// Acc metrics are macro-averaged: per user over its top-k drafts, then
/// over users that have drafts.
EvalReport evaluate(const std::vector<UserRecord>& users, const std::vector<int>& ks);

}  // namespace grc::eval
