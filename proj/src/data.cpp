#include "grc/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace grc::data {

Matrix Catalog::embeddings() const {
  Matrix m(items.size(), static_cast<std::size_t>(embedding_dim));
  for (std::size_t i = 0; i < items.size(); ++i) std::copy(items[i].embedding.begin(), items[i].embedding.end(), m.row(i).begin());
  return m;
}

nlohmann::json SyntheticConfig::to_json() const {
  return {{"n_items", n_items},
          {"n_users", n_users},
          {"n_categories", n_categories},
          {"n_brands", n_brands},
          {"dim", dim},
          {"min_length", min_length},
          {"max_length", max_length},
          {"successor_prob", successor_prob},
          {"stay_prob", stay_prob},
          {"successors_per_item", successors_per_item},
          {"seed", seed}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.n_items = j.value("n_items", c.n_items);
  c.n_users = j.value("n_users", c.n_users);
  c.n_categories = j.value("n_categories", c.n_categories);
  c.n_brands = j.value("n_brands", c.n_brands);
  c.dim = j.value("dim", c.dim);
  c.min_length = j.value("min_length", c.min_length);
  c.max_length = j.value("max_length", c.max_length);
  c.successor_prob = j.value("successor_prob", c.successor_prob);
  c.stay_prob = j.value("stay_prob", c.stay_prob);
  c.successors_per_item = j.value("successors_per_item", c.successors_per_item);
  c.seed = j.value("seed", c.seed);
  return c;
}

Dataset generate_synthetic(const SyntheticConfig& c) {
  if (c.n_items <= 0 || c.n_users <= 0) throw ConfigError("synthetic data: n_items and n_users must be positive");
  if (c.n_categories <= 0 || c.n_brands <= 0) throw ConfigError("synthetic data: need at least one category and brand");
  if (c.n_items < c.n_categories) throw ConfigError("synthetic data: n_items must be >= n_categories");
  if (c.dim < 4) throw ConfigError("synthetic data: dim must be >= 4");
  if (c.min_length < 3 || c.max_length < c.min_length) throw ConfigError("synthetic data: need 3 <= min_length <= max_length");
  if (c.successor_prob < 0 || c.stay_prob < 0 || c.successor_prob + c.stay_prob > 1.0) {
    throw ConfigError("synthetic data: transition probabilities must be non-negative and sum to <= 1");
  }

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<std::size_t>(c.dim);

  Matrix category_centers(static_cast<std::size_t>(c.n_categories), d);
  for (double& v : category_centers.values) v = 3.0 * normal(rng);
  Matrix brand_offsets(static_cast<std::size_t>(c.n_brands), d);
  for (double& v : brand_offsets.values) v = 1.0 * normal(rng);

  Dataset ds;
  ds.catalog.embedding_dim = c.dim;
  ds.catalog.attribute_cardinality = {c.n_categories, c.n_brands};
  std::uniform_int_distribution<int> any_cat(0, c.n_categories - 1);
  std::uniform_int_distribution<int> any_brand(0, c.n_brands - 1);
  std::vector<std::vector<int>> by_category(static_cast<std::size_t>(c.n_categories));
  for (int i = 0; i < c.n_items; ++i) {
    Item item;
    item.external_id = i;
    const int cat = i < c.n_categories ? i : any_cat(rng);
    const int brand = any_brand(rng);
    item.attributes = {cat, brand};
    item.embedding.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      item.embedding[j] = category_centers(static_cast<std::size_t>(cat), j) +
                          brand_offsets(static_cast<std::size_t>(brand), j) + 0.3 * normal(rng);
    }
    by_category[static_cast<std::size_t>(cat)].push_back(i);
    ds.catalog.items.push_back(std::move(item));
  }

  // Planted successors: each item points at a few items of its own category.
  std::vector<std::vector<int>> successors(static_cast<std::size_t>(c.n_items));
  for (int i = 0; i < c.n_items; ++i) {
    const auto& pool = by_category[static_cast<std::size_t>(ds.catalog.items[static_cast<std::size_t>(i)].attributes[0])];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int s = 0; s < c.successors_per_item; ++s) successors[static_cast<std::size_t>(i)].push_back(pool[pick(rng)]);
  }

  std::uniform_int_distribution<int> any_item(0, c.n_items - 1);
  std::uniform_int_distribution<int> length(c.min_length, c.max_length);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> gap(1, 3600);
  for (int u = 0; u < c.n_users; ++u) {
    InteractionSequence seq;
    seq.user = u;
    const int n = length(rng);
    int current = any_item(rng);
    std::int64_t t = 1'600'000'000 + static_cast<std::int64_t>(u) * 1000;
    for (int k = 0; k < n; ++k) {
      seq.items.push_back(current);
      seq.timestamps.push_back(t);
      t += gap(rng);
      const double r = unit(rng);
      const auto& succ = successors[static_cast<std::size_t>(current)];
      if (r < c.successor_prob && !succ.empty()) {
        current = succ[std::uniform_int_distribution<std::size_t>(0, succ.size() - 1)(rng)];
      } else if (r < c.successor_prob + c.stay_prob) {
        const auto& pool = by_category[static_cast<std::size_t>(ds.catalog.items[static_cast<std::size_t>(current)].attributes[0])];
        current = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      } else {
        current = any_item(rng);
      }
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::filesystem::path& file, std::size_t line_no, const char* field) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto res = std::from_chars(first, last, value);
  if (text.empty() || res.ec != std::errc() || res.ptr != last) {
    throw ConfigError(file.string() + ":" + std::to_string(line_no) + ": malformed " + field + " '" + text + "'");
  }
  return value;
}

// Deterministic embedding for items that arrive without one.
std::vector<double> hashed_embedding(std::int64_t item_id, int dim) {
  std::mt19937_64 rng(fnv1a(std::to_string(item_id)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (double& x : v) x = normal(rng);
  return v;
}

// Integer labels order numerically, everything else lexicographically after them.
struct BucketOrder {
  static bool as_int(const std::string& s, long long& v) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return !s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size();
  }
  bool operator()(const std::string& a, const std::string& b) const {
    long long x = 0;
    long long y = 0;
    const bool ia = as_int(a, x);
    const bool ib = as_int(b, y);
    if (ia && ib) return x != y ? x < y : a < b;
    if (ia != ib) return ia;
    return a < b;
  }
};

struct LineReader {
  std::ifstream in;
  std::filesystem::path path;
  std::size_t line_no = 0;

  explicit LineReader(const std::filesystem::path& p) : in(p), path(p) {
    if (!in) throw ConfigError("cannot open " + p.string());
  }
  // Next non-comment, non-blank line.
  bool next(std::string& line) {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      return true;
    }
    return false;
  }
};

}  // namespace

IngestResult ingest_csv(const std::filesystem::path& interactions, const std::filesystem::path& items_path,
                        int embedding_dim) {
  IngestResult result;
  Catalog& cat = result.dataset.catalog;

  struct RawItem {
    std::string category;
    std::string brand;
    std::vector<double> embedding;
  };
  std::map<std::int64_t, RawItem> raw_items;
  {
    LineReader r(items_path);
    std::string line;
    if (!r.next(line)) throw ConfigError(items_path.string() + ": missing header");
    auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "item_id" || header[1] != "category" || header[2] != "brand") {
      throw ConfigError(items_path.string() + ":" + std::to_string(r.line_no) +
                        ": expected header item_id,category,brand[,embedding...]");
    }
    while (r.next(line)) {
      auto cells = split_csv_line(line);
      if (cells.size() < 3) {
        throw ConfigError(items_path.string() + ":" + std::to_string(r.line_no) + ": expected at least 3 fields");
      }
      const auto id = parse_number<std::int64_t>(cells[0], items_path, r.line_no, "item_id");
      RawItem item{cells[1], cells[2], {}};
      for (std::size_t k = 3; k < cells.size(); ++k) {
        item.embedding.push_back(parse_number<double>(cells[k], items_path, r.line_no, "embedding value"));
      }
      if (!raw_items.emplace(id, std::move(item)).second) {
        throw ConfigError(items_path.string() + ":" + std::to_string(r.line_no) + ": duplicate item_id " + cells[0]);
      }
    }
  }

  int dim = embedding_dim;
  for (const auto& [id, item] : raw_items) {
    if (item.embedding.empty()) continue;
    if (dim <= 0) dim = static_cast<int>(item.embedding.size());
    if (static_cast<int>(item.embedding.size()) != dim) {
      throw ConfigError(items_path.string() + ": item " + std::to_string(id) + " has embedding of size " +
                        std::to_string(item.embedding.size()) + ", expected " + std::to_string(dim));
    }
  }
  if (dim <= 0) dim = 16;
  cat.embedding_dim = dim;

  std::set<std::string, BucketOrder> categories;
  std::set<std::string, BucketOrder> brands;
  for (const auto& [id, item] : raw_items) {
    categories.insert(item.category);
    brands.insert(item.brand);
  }
  auto bucket = [](const std::set<std::string, BucketOrder>& s, const std::string& v) {
    return static_cast<int>(std::distance(s.begin(), s.find(v)));
  };
  cat.attribute_cardinality = {static_cast<int>(categories.size()), static_cast<int>(brands.size())};
  std::map<std::int64_t, int> dense;
  for (auto& [id, raw] : raw_items) {
    Item item;
    item.external_id = id;
    item.attributes = {bucket(categories, raw.category), bucket(brands, raw.brand)};
    item.embedding = raw.embedding.empty() ? hashed_embedding(id, dim) : std::move(raw.embedding);
    dense[id] = static_cast<int>(cat.items.size());
    cat.items.push_back(std::move(item));
  }

  struct Event {
    std::int64_t timestamp;
    int item;
  };
  std::map<std::int64_t, std::vector<Event>> per_user;
  {
    LineReader r(interactions);
    std::string line;
    if (r.next(line)) {
      auto header = split_csv_line(line);
      if (header.size() != 3 || header[0] != "user_id" || header[1] != "item_id" || header[2] != "timestamp") {
        throw ConfigError(interactions.string() + ":" + std::to_string(r.line_no) +
                          ": expected header user_id,item_id,timestamp");
      }
      while (r.next(line)) {
        auto cells = split_csv_line(line);
        if (cells.size() != 3) {
          throw ConfigError(interactions.string() + ":" + std::to_string(r.line_no) + ": expected 3 fields");
        }
        const auto user = parse_number<std::int64_t>(cells[0], interactions, r.line_no, "user_id");
        const auto item = parse_number<std::int64_t>(cells[1], interactions, r.line_no, "item_id");
        const auto ts = parse_number<std::int64_t>(cells[2], interactions, r.line_no, "timestamp");
        auto it = dense.find(item);
        if (it == dense.end()) {
          throw ConfigError(interactions.string() + ":" + std::to_string(r.line_no) + ": unknown item_id " + cells[1]);
        }
        per_user[user].push_back({ts, it->second});
      }
    }
  }

  for (auto& [user, events] : per_user) {
    if (events.size() < 3) {
      ++result.dropped_users;
      continue;
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
    InteractionSequence seq;
    seq.user = user;
    for (const auto& e : events) {
      seq.items.push_back(e.item);
      seq.timestamps.push_back(e.timestamp);
    }
    result.dataset.sequences.push_back(std::move(seq));
  }
  return result;
}

void write_csv(const Dataset& ds, const std::filesystem::path& interactions, const std::filesystem::path& items,
               const std::string& comment) {
  {
    std::ofstream os(items);
    if (!os) throw std::runtime_error("cannot write " + items.string());
    if (!comment.empty()) os << "# " << comment << '\n';
    os << "item_id,category,brand";
    for (int j = 0; j < ds.catalog.embedding_dim; ++j) os << ",e" << j;
    os << '\n';
    for (const auto& item : ds.catalog.items) {
      os << item.external_id << ',' << item.attributes.at(0) << ',' << item.attributes.at(1);
      for (double v : item.embedding) os << ',' << format_double(v);
      os << '\n';
    }
  }
  std::ofstream os(interactions);
  if (!os) throw std::runtime_error("cannot write " + interactions.string());
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "user_id,item_id,timestamp\n";
  for (const auto& seq : ds.sequences) {
    for (std::size_t k = 0; k < seq.items.size(); ++k) {
      os << seq.user << ',' << ds.catalog.items[static_cast<std::size_t>(seq.items[k])].external_id << ','
         << seq.timestamps[k] << '\n';
    }
  }
}

std::vector<UserSplit> leave_one_out(const std::vector<InteractionSequence>& sequences, int max_history) {
  if (max_history < 2) throw ConfigError("leave_one_out: max history must be >= 2");
  std::vector<UserSplit> out;
  for (const auto& seq : sequences) {
    const std::size_t n = seq.items.size();
    if (n < 3) continue;
    UserSplit s;
    s.user = seq.user;
    s.test = seq.items[n - 1];
    s.valid = seq.items[n - 2];
    const std::size_t keep = std::min<std::size_t>(n - 2, static_cast<std::size_t>(max_history - 1));
    s.train.assign(seq.items.begin() + static_cast<std::ptrdiff_t>(n - 2 - keep),
                   seq.items.begin() + static_cast<std::ptrdiff_t>(n - 2));
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::vector<int> last_n(const std::vector<int>& v, std::size_t end, int max_history) {
  const std::size_t start = end > static_cast<std::size_t>(max_history) ? end - static_cast<std::size_t>(max_history) : 0;
  return {v.begin() + static_cast<std::ptrdiff_t>(start), v.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace

std::vector<Example> training_examples(const std::vector<UserSplit>& splits, int max_history) {
  std::vector<Example> out;
  for (const auto& s : splits) {
    for (std::size_t k = 1; k < s.train.size(); ++k) out.push_back({s.user, last_n(s.train, k, max_history), s.train[k]});
  }
  return out;
}

std::vector<Example> evaluation_examples(const std::vector<UserSplit>& splits, EvalSplit split, int max_history) {
  std::vector<Example> out;
  for (const auto& s : splits) {
    if (split == EvalSplit::kValid) {
      if (s.train.empty()) continue;
      out.push_back({s.user, last_n(s.train, s.train.size(), max_history), s.valid});
    } else {
      auto hist = s.train;
      hist.push_back(s.valid);
      out.push_back({s.user, last_n(hist, hist.size(), max_history), s.test});
    }
  }
  return out;
}

nlohmann::json dataset_manifest(const Dataset& ds) {
  std::size_t interactions = 0;
  for (const auto& s : ds.sequences) interactions += s.items.size();
  return {{"items", ds.catalog.size()},
          {"users", ds.sequences.size()},
          {"interactions", interactions},
          {"embedding_dim", ds.catalog.embedding_dim},
          {"attributes", ds.catalog.attribute_names},
          {"attribute_cardinality", ds.catalog.attribute_cardinality}};
}

}  // namespace grc::data
