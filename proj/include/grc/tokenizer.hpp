#pragma once

// Residual k-means item tokenizer and the code -> item lookup.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/common.hpp"

namespace grc::tok {

struct Codebook {
  int level = 0;      // 0-based quantization level
  Matrix centroids;   // codebook size x embedding dim
};

/// Discrete code of one item: one token per level plus a disambiguation
/// suffix that separates items whose level tokens collide.
struct SemanticId {
  std::vector<int> tokens;
  int suffix = 0;

  /// Token sequence fed to the sequence model; the suffix is appended when
  /// the catalog needs it.
  std::vector<int> code(bool with_suffix) const;
  bool operator==(const SemanticId&) const = default;
};

struct FitOptions {
  int levels = 4;
  int codebook_size = 32;
  int iterations = 25;
  std::uint64_t seed = 0;
};

struct FitReport {
  /// Mean squared residual norm after each level (index 0 = after level 1).
  std::vector<double> residual_mse;
  int reseeded_clusters = 0;
};

/// Residual k-means: level l clusters what remains after subtracting the
/// assigned centroids of levels < l. Farthest-point seeding from a seeded
/// random start; empty clusters are re-seeded from the worst-fit point.
std::vector<Codebook> fit_codebooks(const Matrix& embeddings, const FitOptions& options, FitReport* report = nullptr);

/// Greedy residual encoding; ties go to the lowest centroid index.
SemanticId encode(std::span<const double> embedding, const std::vector<Codebook>& codebooks);

/// Maps a full code (tokens + optional suffix) to an item id.
class LookupTable {
 public:
  void insert(std::vector<int> code, int item);
  std::optional<int> find(std::span<const int> code) const;
  std::size_t size() const { return table_.size(); }

 private:
  std::map<std::vector<int>, int> table_;
};

struct Disambiguated {
  std::vector<SemanticId> ids;  // indexed by item id
  LookupTable lookup;
  bool uses_suffix = false;     // any collision present
  int max_suffix = 0;
};

/// Items sharing all level tokens get suffixes 0, 1, ... in item-id order.
/// Throws ConfigError when a collision group exceeds `suffix_alphabet`.
Disambiguated disambiguate(std::vector<SemanticId> ids, int suffix_alphabet);

/// Fitted, frozen tokenizer for a catalog.
class Tokenizer {
 public:
  static Tokenizer build(const Matrix& item_embeddings, const FitOptions& options, FitReport* report = nullptr);

  int levels() const { return static_cast<int>(codebooks_.size()); }
  int codebook_size() const { return codebooks_.empty() ? 0 : static_cast<int>(codebooks_[0].centroids.rows); }
  /// Length of the sequences the model generates.
  int code_length() const { return levels() + (uses_suffix_ ? 1 : 0); }
  bool uses_suffix() const { return uses_suffix_; }
  /// Per-position vocabulary sizes of the generated code.
  std::vector<int> code_vocab() const;

  const std::vector<Codebook>& codebooks() const { return codebooks_; }
  const std::vector<SemanticId>& item_ids() const { return ids_; }
  std::vector<int> item_code(int item) const { return ids_.at(static_cast<std::size_t>(item)).code(uses_suffix_); }
  std::optional<int> lookup(std::span<const int> code) const { return lookup_.find(code); }
  std::size_t num_items() const { return ids_.size(); }
  std::uint64_t seed() const { return seed_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  std::vector<Codebook> codebooks_;
  std::vector<SemanticId> ids_;
  LookupTable lookup_;
  bool uses_suffix_ = false;
  std::uint64_t seed_ = 0;

  void rebuild_lookup();
};

}  // namespace grc::tok
