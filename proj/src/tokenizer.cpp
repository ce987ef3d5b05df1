#include "grc/tokenizer.hpp"

#include <algorithm>
#include <limits>
#include <random>

namespace grc::tok {

namespace {

std::size_t nearest(std::span<const double> x, const Matrix& centroids, double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = squared_distance(x, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

Matrix farthest_point_seeds(const Matrix& data, std::size_t k, std::mt19937_64& rng) {
  Matrix centroids(k, data.cols);
  std::uniform_int_distribution<std::size_t> pick(0, data.rows - 1);
  std::size_t chosen = pick(rng);
  std::vector<double> min_d(data.rows, std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(data.row(chosen).begin(), data.row(chosen).end(), centroids.row(c).begin());
    double far_d = -1.0;
    std::size_t far = 0;
    for (std::size_t i = 0; i < data.rows; ++i) {
      min_d[i] = std::min(min_d[i], squared_distance(data.row(i), centroids.row(c)));
      if (min_d[i] > far_d) {
        far_d = min_d[i];
        far = i;
      }
    }
    chosen = far;
  }
  return centroids;
}

// Lloyd iterations; returns the number of empty-cluster reseeds.
int lloyd(const Matrix& data, Matrix& centroids, int iterations) {
  const std::size_t k = centroids.rows;
  std::vector<std::size_t> assign(data.rows);
  std::vector<double> dist(data.rows);
  int reseeded = 0;
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < data.rows; ++i) assign[i] = nearest(data.row(i), centroids, &dist[i]);
    Matrix sums(k, data.cols);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < data.rows; ++i) {
      auto s = sums.row(assign[i]);
      auto x = data.row(i);
      for (std::size_t j = 0; j < data.cols; ++j) s[j] += x[j];
      ++counts[assign[i]];
    }
    bool changed = false;
    for (std::size_t c = 0; c < k; ++c) {
      auto dst = centroids.row(c);
      if (counts[c] == 0) {
        // Farthest point from its current centroid; lowest index on ties.
        std::size_t far = 0;
        for (std::size_t i = 1; i < data.rows; ++i) {
          if (dist[i] > dist[far]) far = i;
        }
        std::copy(data.row(far).begin(), data.row(far).end(), dst.begin());
        dist[far] = 0.0;
        ++reseeded;
        changed = true;
        continue;
      }
      for (std::size_t j = 0; j < data.cols; ++j) {
        const double v = sums(c, j) / static_cast<double>(counts[c]);
        if (v != dst[j]) changed = true;
        dst[j] = v;
      }
    }
    if (!changed) break;
  }
  return reseeded;
}

}  // namespace

std::vector<int> SemanticId::code(bool with_suffix) const {
  std::vector<int> out = tokens;
  if (with_suffix) out.push_back(suffix);
  return out;
}

std::vector<Codebook> fit_codebooks(const Matrix& embeddings, const FitOptions& options, FitReport* report) {
  if (options.levels < 1 || options.codebook_size < 1) throw ConfigError("tokenizer: levels and codebook size must be >= 1");
  if (embeddings.cols < 1) throw ConfigError("tokenizer: embedding dimension must be >= 1");
  if (embeddings.rows < static_cast<std::size_t>(options.codebook_size)) {
    throw ConfigError("tokenizer: need at least " + std::to_string(options.codebook_size) + " items, got " +
                      std::to_string(embeddings.rows));
  }
  std::mt19937_64 rng(options.seed);
  Matrix residual = embeddings;
  std::vector<Codebook> books;
  if (report) *report = {};
  for (int level = 0; level < options.levels; ++level) {
    Codebook book;
    book.level = level;
    book.centroids = farthest_point_seeds(residual, static_cast<std::size_t>(options.codebook_size), rng);
    const int reseeded = lloyd(residual, book.centroids, options.iterations);
    double mse = 0.0;
    for (std::size_t i = 0; i < residual.rows; ++i) {
      const std::size_t c = nearest(residual.row(i), book.centroids);
      auto r = residual.row(i);
      auto cen = book.centroids.row(c);
      for (std::size_t j = 0; j < residual.cols; ++j) {
        r[j] -= cen[j];
        mse += r[j] * r[j];
      }
    }
    if (report) {
      report->residual_mse.push_back(mse / static_cast<double>(residual.rows));
      report->reseeded_clusters += reseeded;
    }
    books.push_back(std::move(book));
  }
  return books;
}

SemanticId encode(std::span<const double> embedding, const std::vector<Codebook>& codebooks) {
  SemanticId id;
  std::vector<double> residual(embedding.begin(), embedding.end());
  for (const auto& book : codebooks) {
    const std::size_t c = nearest(residual, book.centroids);
    id.tokens.push_back(static_cast<int>(c));
    auto cen = book.centroids.row(c);
    for (std::size_t j = 0; j < residual.size(); ++j) residual[j] -= cen[j];
  }
  return id;
}

void LookupTable::insert(std::vector<int> code, int item) {
  auto [it, inserted] = table_.emplace(std::move(code), item);
  if (!inserted) throw ContractViolation("lookup: code already maps to item " + std::to_string(it->second));
}

std::optional<int> LookupTable::find(std::span<const int> code) const {
  auto it = table_.find(std::vector<int>(code.begin(), code.end()));
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

Disambiguated disambiguate(std::vector<SemanticId> ids, int suffix_alphabet) {
  Disambiguated out;
  std::map<std::vector<int>, int> seen;
  for (auto& id : ids) {
    int& next = seen[id.tokens];
    if (next >= suffix_alphabet) {
      throw ConfigError("tokenizer: " + std::to_string(next + 1) +
                        " items share one code; raise the suffix alphabet above " + std::to_string(suffix_alphabet));
    }
    id.suffix = next++;
    out.max_suffix = std::max(out.max_suffix, id.suffix);
  }
  out.uses_suffix = out.max_suffix > 0;
  for (std::size_t i = 0; i < ids.size(); ++i) out.lookup.insert(ids[i].code(out.uses_suffix), static_cast<int>(i));
  out.ids = std::move(ids);
  return out;
}

Tokenizer Tokenizer::build(const Matrix& item_embeddings, const FitOptions& options, FitReport* report) {
  Tokenizer t;
  t.seed_ = options.seed;
  t.codebooks_ = fit_codebooks(item_embeddings, options, report);
  std::vector<SemanticId> ids;
  ids.reserve(item_embeddings.rows);
  for (std::size_t i = 0; i < item_embeddings.rows; ++i) ids.push_back(encode(item_embeddings.row(i), t.codebooks_));
  // Suffix tokens live in the final level's vocabulary.
  auto d = disambiguate(std::move(ids), options.codebook_size);
  t.ids_ = std::move(d.ids);
  t.lookup_ = std::move(d.lookup);
  t.uses_suffix_ = d.uses_suffix;
  return t;
}

std::vector<int> Tokenizer::code_vocab() const {
  std::vector<int> v(static_cast<std::size_t>(code_length()), codebook_size());
  return v;
}

void Tokenizer::rebuild_lookup() {
  lookup_ = {};
  for (std::size_t i = 0; i < ids_.size(); ++i) lookup_.insert(ids_[i].code(uses_suffix_), static_cast<int>(i));
}

nlohmann::json Tokenizer::to_json() const {
  nlohmann::json j;
  j["levels"] = levels();
  j["codebook_size"] = codebook_size();
  j["seed"] = seed_;
  j["uses_suffix"] = uses_suffix_;
  j["code_length"] = code_length();
  auto books = nlohmann::json::array();
  for (const auto& b : codebooks_) {
    books.push_back({{"level", b.level}, {"rows", b.centroids.rows}, {"cols", b.centroids.cols},
                     {"centroids", b.centroids.values}});
  }
  j["codebooks"] = std::move(books);
  auto items = nlohmann::json::array();
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    items.push_back({{"item", i}, {"tokens", ids_[i].tokens}, {"suffix", ids_[i].suffix}});
  }
  j["items"] = std::move(items);
  return j;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  Tokenizer t;
  t.seed_ = j.at("seed").get<std::uint64_t>();
  t.uses_suffix_ = j.at("uses_suffix").get<bool>();
  for (const auto& b : j.at("codebooks")) {
    Codebook book;
    book.level = b.at("level").get<int>();
    book.centroids.rows = b.at("rows").get<std::size_t>();
    book.centroids.cols = b.at("cols").get<std::size_t>();
    book.centroids.values = b.at("centroids").get<std::vector<double>>();
    if (book.centroids.values.size() != book.centroids.rows * book.centroids.cols) {
      throw ConfigError("codebook file: centroid matrix size mismatch at level " + std::to_string(book.level));
    }
    t.codebooks_.push_back(std::move(book));
  }
  for (const auto& it : j.at("items")) {
    SemanticId id;
    id.tokens = it.at("tokens").get<std::vector<int>>();
    id.suffix = it.at("suffix").get<int>();
    t.ids_.push_back(std::move(id));
  }
  t.rebuild_lookup();
  return t;
}

}  // namespace grc::tok
