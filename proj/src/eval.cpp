#include "grc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "grc/common.hpp"

namespace grc::eval {

int rank_of(std::span<const int> ranked, int target) {
  const auto it = std::find(ranked.begin(), ranked.end(), target);
  return it == ranked.end() ? 0 : static_cast<int>(it - ranked.begin()) + 1;
}

double recall_at_k(std::span<const int> ranked, int target, int k) {
  if (k < 1) throw ContractViolation("recall@k needs k >= 1");
  const int r = rank_of(ranked, target);
  return r >= 1 && r <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const int> ranked, int target, int k) {
  if (k < 1) throw ContractViolation("ndcg@k needs k >= 1");
  const int r = rank_of(ranked, target);
  return r >= 1 && r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

AccResult accuracy_at_k(std::span<const int> predicted, std::span<const int> truth, int k) {
  if (k < 1) throw ContractViolation("acc@k needs k >= 1");
  if (predicted.size() != truth.size()) throw ContractViolation("acc@k: prediction and label counts differ");
  AccResult r;
  r.used = std::min(predicted.size(), static_cast<std::size_t>(k));
  r.short_list = predicted.size() < static_cast<std::size_t>(k);
  if (r.used == 0) return r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.used; ++i) hits += predicted[i] == truth[i];
  r.value = static_cast<double>(hits) / static_cast<double>(r.used);
  return r;
}

double EvalReport::value(const std::string& metric, int k) const {
  for (const auto& r : rows)
    if (r.metric == metric && r.k == k) return r.value;
  throw ContractViolation("eval report has no " + metric + "@" + std::to_string(k));
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& r : rows) metrics[r.metric + "@" + std::to_string(r.k)] = r.value;
  return {{"ks", ks},
          {"users", users},
          {"metrics", metrics},
          {"short_users", short_users},
          {"acc_averaging", "macro"},
          {"per_user", per_user}};
}

void EvalReport::write_csv(const std::filesystem::path& path, const std::string& comment) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "metric,k,value\n";
  for (const auto& r : rows) out << r.metric << ',' << r.k << ',' << format_double(r.value) << '\n';
}

EvalReport evaluate(const std::vector<UserRecord>& users, const std::vector<int>& ks) {
  if (ks.empty()) throw ConfigError("eval.ks must not be empty");
  for (int k : ks)
    if (k < 1) throw ConfigError("eval.ks entries must be >= 1");
  EvalReport rep;
  rep.ks = ks;
  rep.users = users.size();
  const double n = users.empty() ? 1.0 : static_cast<double>(users.size());
  std::vector<double> rec(ks.size()), ndcg(ks.size()), loc(ks.size()), cat(ks.size());
  rep.short_users.assign(ks.size(), 0);
  std::size_t with_drafts = 0;
  for (const auto& u : users) {
    nlohmann::json row = {{"user", u.user}, {"target", u.target}, {"rank", rank_of(u.ranked, u.target)}};
    const bool has = !u.pred_loc.empty();
    with_drafts += has;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      rec[i] += recall_at_k(u.ranked, u.target, ks[i]);
      ndcg[i] += ndcg_at_k(u.ranked, u.target, ks[i]);
      if (!has) continue;
      const auto l = accuracy_at_k(u.pred_loc, u.true_loc, ks[i]);
      const auto c = accuracy_at_k(u.pred_cat, u.true_cat, ks[i]);
      loc[i] += l.value;
      cat[i] += c.value;
      rep.short_users[i] += l.short_list;
    }
    rep.per_user.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < ks.size(); ++i) rep.rows.push_back({"recall", ks[i], rec[i] / n});
  for (std::size_t i = 0; i < ks.size(); ++i) rep.rows.push_back({"ndcg", ks[i], ndcg[i] / n});
  if (with_drafts > 0) {
    const double d = static_cast<double>(with_drafts);
    for (std::size_t i = 0; i < ks.size(); ++i) rep.rows.push_back({"acc_loc", ks[i], loc[i] / d});
    for (std::size_t i = 0; i < ks.size(); ++i) rep.rows.push_back({"acc_cat", ks[i], cat[i] / d});
  }
  return rep;
}

}  // namespace grc::eval
