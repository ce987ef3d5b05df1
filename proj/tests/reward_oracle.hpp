#pragma once

// Brute-force reward evaluator. Knows nothing about the library; works on
// plain vectors and set arithmetic.

#include <algorithm>
#include <iterator>
#include <optional>
#include <set>
#include <vector>

namespace oracle {

struct Weights {
  double beta_cor = 2.2;
  double beta_last = 2.0;
  double beta_loc = 1.0;
  double beta_sem = 0.8;
  double eps = 1e-6;
};

struct Case {
  std::vector<int> draft, correction, gt;  // codes, equal length L
  int pred_loc = 1;                        // 1..L+1
  std::vector<int> pred_sem;               // K flags
  std::optional<std::vector<int>> draft_attrs, corr_attrs;  // nullopt: no item
  std::vector<int> gt_attrs;
};

struct Out {
  int l0 = 0, l1 = 0;
  double task = 0, loc_label = 0, loc_cor = 0, loc = 0, sem_label = 0, sem_cor = 0, sem = 0, delta = 0, cor = 0,
         total = 0;
};

inline Out evaluate(const Case& c, const Weights& w) {
  Out o;
  const int L = static_cast<int>(c.gt.size());
  std::set<int> hit0, hit1;
  for (int t = 1; t <= L; ++t) {
    if (c.draft[t - 1] == c.gt[t - 1]) hit0.insert(t);
    if (c.correction[t - 1] == c.gt[t - 1]) hit1.insert(t);
  }
  o.l0 = static_cast<int>(hit0.size());
  o.l1 = static_cast<int>(hit1.size());
  o.task = o.l0 + w.beta_last * o.l1;

  // true first error by scanning all positions
  int gt_loc = L + 1;
  for (int t = L; t >= 1; --t)
    if (!hit0.count(t)) gt_loc = t;
  o.loc_label = c.pred_loc == gt_loc ? 1.0 : 0.0;
  std::set<int> region, fixed;
  for (int t = 1; t <= L; ++t) {
    if (t >= c.pred_loc) region.insert(t);
    if (!hit0.count(t) && hit1.count(t)) fixed.insert(t);
  }
  std::vector<int> both;
  std::set_intersection(region.begin(), region.end(), fixed.begin(), fixed.end(), std::back_inserter(both));
  o.loc_cor = static_cast<double>(both.size()) / (static_cast<double>(region.size()) + w.eps);
  o.loc = o.loc_label + o.loc_cor;

  const std::size_t K = c.pred_sem.size();
  int label_hits = 0, cor_hits = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const bool d_same = c.draft_attrs.has_value() && (*c.draft_attrs)[k] == c.gt_attrs[k];
    const bool c_same = c.corr_attrs.has_value() && (*c.corr_attrs)[k] == c.gt_attrs[k];
    const int truth = d_same ? 1 : 0;
    if (c.pred_sem[k] == truth) ++label_hits;
    if (c.pred_sem[k] == 0 && !d_same && c_same) ++cor_hits;
  }
  o.sem_label = static_cast<double>(label_hits) / static_cast<double>(K);
  o.sem_cor = static_cast<double>(cor_hits) / static_cast<double>(K);
  o.sem = o.sem_label + o.sem_cor;

  o.delta = o.l1 > o.l0 ? static_cast<double>(o.l1 - o.l0) : 0.0;
  o.cor = w.beta_loc * o.loc + w.beta_sem * o.sem + o.delta;
  o.total = o.task + w.beta_cor * o.cor;
  return o;
}

}  // namespace oracle
