#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/common.hpp"

namespace grc::data {

struct Item {
  std::int64_t external_id = 0;
  std::vector<double> embedding;
  std::vector<int> attributes;  // bucket per catalog attribute
};

struct Catalog {
  std::vector<std::string> attribute_names{"category", "brand"};
  std::vector<int> attribute_cardinality;
  std::vector<Item> items;  // dense item index = position
  int embedding_dim = 0;

  std::size_t size() const { return items.size(); }
  int attribute(int item, std::size_t k) const { return items.at(static_cast<std::size_t>(item)).attributes.at(k); }
  Matrix embeddings() const;
};

struct InteractionSequence {
  std::int64_t user = 0;
  std::vector<int> items;               // dense item indices, chronological
  std::vector<std::int64_t> timestamps;
};

struct Dataset {
  Catalog catalog;
  std::vector<InteractionSequence> sequences;
};

struct SyntheticConfig {
  int n_items = 500;
  int n_users = 2000;
  int n_categories = 10;
  int n_brands = 8;
  int dim = 16;
  int min_length = 5;
  int max_length = 15;
  double successor_prob = 0.5;  // jump to one of the item's planted successors
  double stay_prob = 0.3;       // otherwise stay inside the current category
  int successors_per_item = 3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

/// Catalog with category/brand structure planted in the embeddings and
/// users walking a category-sticky Markov chain over items.
Dataset generate_synthetic(const SyntheticConfig& config);

struct IngestResult {
  Dataset dataset;
  std::size_t dropped_users = 0;
};

/// Reads `user_id,item_id,timestamp` interactions and
/// `item_id,category,brand[,embedding...]` item metadata. Lines starting
/// with '#' are comments. Items without embeddings get a deterministic
/// pseudo-random vector of `embedding_dim` derived from the item id.
IngestResult ingest_csv(const std::filesystem::path& interactions, const std::filesystem::path& items,
                        int embedding_dim);

/// Writes the dataset in the ingest format; `comment` (if non-empty) becomes
/// a leading '#' line of both files.
void write_csv(const Dataset& dataset, const std::filesystem::path& interactions, const std::filesystem::path& items,
               const std::string& comment);

struct UserSplit {
  std::int64_t user = 0;
  std::vector<int> train;
  int valid = -1;
  int test = -1;
};

/// Leave-one-out: last item is the test target, the one before it the
/// validation target. The training prefix keeps the last `max_history - 1`
/// items before the validation target so the test-time history
/// (train + valid) holds at most `max_history` items. Sequences shorter than
/// three items are skipped.
std::vector<UserSplit> leave_one_out(const std::vector<InteractionSequence>& sequences, int max_history);

/// One next-item prediction instance.
struct Example {
  std::int64_t user = 0;
  std::vector<int> history;
  int target = -1;
};

/// Next-item instances inside each training prefix.
std::vector<Example> training_examples(const std::vector<UserSplit>& splits, int max_history);

enum class EvalSplit { kValid, kTest };

std::vector<Example> evaluation_examples(const std::vector<UserSplit>& splits, EvalSplit split, int max_history);

nlohmann::json dataset_manifest(const Dataset& dataset);

}  // namespace grc::data
