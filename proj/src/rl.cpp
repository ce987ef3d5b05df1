#include "grc/rl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "grc/ops.hpp"
#include "grc/optim.hpp"
#include "grc/sft.hpp"

namespace grc::rl {

using ad::Tensor;
using model::PositionRole;
using model::Segment;

nlohmann::json RewardConfig::to_json() const {
  return {{"beta_cor", beta_cor}, {"beta_last", beta_last}, {"beta_loc", beta_loc}, {"beta_sem", beta_sem},
          {"epsilon", epsilon}};
}

RewardConfig RewardConfig::from_json(const nlohmann::json& j) {
  RewardConfig c;
  c.beta_cor = j.value("beta_cor", c.beta_cor);
  c.beta_last = j.value("beta_last", c.beta_last);
  c.beta_loc = j.value("beta_loc", c.beta_loc);
  c.beta_sem = j.value("beta_sem", c.beta_sem);
  c.epsilon = j.value("epsilon", c.epsilon);
  if (c.epsilon <= 0) throw ConfigError("reward.epsilon must be > 0");
  return c;
}

TaskReward reward_task(std::span<const int> draft, std::span<const int> correction, std::span<const int> gt,
                       double beta_last) {
  if (draft.size() != gt.size() || correction.size() != gt.size())
    throw ContractViolation("reward_task: code lengths differ");
  TaskReward r;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    r.l0 += draft[t] == gt[t];
    r.l1 += correction[t] == gt[t];
  }
  r.r_task = static_cast<double>(r.l0) + beta_last * static_cast<double>(r.l1);
  return r;
}

LocReward reward_loc(int pred_loc, int gt_loc, std::span<const int> draft, std::span<const int> correction,
                     std::span<const int> gt, double epsilon) {
  const int L = static_cast<int>(gt.size());
  if (draft.size() != gt.size() || correction.size() != gt.size())
    throw ContractViolation("reward_loc: code lengths differ");
  if (pred_loc < 1 || pred_loc > L + 1) throw ContractViolation("reward_loc: predicted location out of range");
  LocReward r;
  r.label = pred_loc == gt_loc ? 1.0 : 0.0;
  int region = 0, fixed = 0;
  for (int t = pred_loc; t <= L; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    ++region;
    if (draft[i] != gt[i] && correction[i] == gt[i]) ++fixed;
  }
  r.correction = static_cast<double>(fixed) / (static_cast<double>(region) + epsilon);
  r.total = r.label + r.correction;
  return r;
}

SemReward reward_sem(std::span<const int> pred_sem, std::span<const int> gt_sem, std::optional<int> draft_item,
                     std::optional<int> corrected_item, int gt_item, const data::Catalog& catalog) {
  const std::size_t K = pred_sem.size();
  if (K == 0 || gt_sem.size() != K) throw ContractViolation("reward_sem: needs K >= 1 matching flags");
  int agree = 0, fixed = 0;
  for (std::size_t k = 0; k < K; ++k) {
    agree += pred_sem[k] == gt_sem[k];
    const int g = catalog.attribute(gt_item, k);
    const bool draft_match = draft_item && catalog.attribute(*draft_item, k) == g;
    const bool corr_match = corrected_item && catalog.attribute(*corrected_item, k) == g;
    fixed += pred_sem[k] == 0 && !draft_match && corr_match;
  }
  SemReward r;
  r.label = static_cast<double>(agree) / static_cast<double>(K);
  r.correction = static_cast<double>(fixed) / static_cast<double>(K);
  r.total = r.label + r.correction;
  return r;
}

double reward_delta(int l0, int l1) { return l1 > l0 ? static_cast<double>(l1 - l0) : 0.0; }

RewardBreakdown compute_reward(std::span<const int> draft, std::span<const int> reflection,
                               std::span<const int> correction, int gt_item, const tok::Tokenizer& tokenizer,
                               const data::Catalog& catalog, const RewardConfig& c) {
  const auto gt = tokenizer.item_code(gt_item);
  if (reflection.size() != catalog.attribute_cardinality.size() + 1)
    throw ContractViolation("compute_reward: reflection length must be K+1");
  const auto i0 = tokenizer.lookup(draft);
  const auto i1 = tokenizer.lookup(correction);
  RewardBreakdown r;
  const TaskReward task = reward_task(draft, correction, gt, c.beta_last);
  r.l0 = task.l0;
  r.l1 = task.l1;
  r.r_task = task.r_task;
  const LocReward loc = reward_loc(reflection[0] + 1, sft::annotate_loc(draft, gt), draft, correction, gt, c.epsilon);
  r.r_loc_label = loc.label;
  r.r_loc_cor = loc.correction;
  r.r_loc = loc.total;
  const auto gt_sem = sft::annotate_sem(i0, gt_item, catalog).flags;
  const SemReward sem = reward_sem(reflection.subspan(1), gt_sem, i0, i1, gt_item, catalog);
  r.r_sem_label = sem.label;
  r.r_sem_cor = sem.correction;
  r.r_sem = sem.total;
  r.r_delta = reward_delta(r.l0, r.l1);
  r.r_cor = c.beta_loc * r.r_loc + c.beta_sem * r.r_sem + r.r_delta;
  r.r_total = r.r_task + c.beta_cor * r.r_cor;
  return r;
}

int slot_value(const model::TemplateTokens& tokens, PositionRole role) {
  const auto i = static_cast<std::size_t>(role.index);
  switch (role.segment) {
    case Segment::kDraft: return tokens.draft.at(i);
    case Segment::kReflection: return tokens.reflection.at(i);
    case Segment::kCorrection: return tokens.correction.at(i);
    default: throw ContractViolation("slot_value: delimiter slot");
  }
}

namespace {

struct Sampler {
  double temperature;
  std::mt19937_64* rng;

  // Samples every row of logits [N, V]; returns tokens and untempered log-probs.
  void operator()(const Tensor& logits, std::vector<int>& tokens, std::vector<double>& logprobs) const {
    const std::size_t N = logits.dim(0), V = logits.dim(1);
    tokens.assign(N, 0);
    logprobs.assign(N, 0.0);
    std::vector<double> w(V);
    for (std::size_t r = 0; r < N; ++r) {
      const auto row = logits.data().subspan(r * V, V);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0;
      for (double x : row) z += std::exp(x - mx);
      const double log_z = mx + std::log(z);
      int tok;
      if (temperature <= 1e-8) {
        tok = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      } else {
        for (std::size_t v = 0; v < V; ++v) w[v] = std::exp((row[v] - mx) / temperature);
        std::discrete_distribution<int> dist(w.begin(), w.end());
        tok = dist(*rng);
      }
      tokens[r] = tok;
      logprobs[r] = row[static_cast<std::size_t>(tok)] - log_z;
    }
  }
};

}  // namespace

std::vector<Episode> rollout_batch(const model::Seq2Seq& policy, const std::vector<data::Example>& examples,
                                   const model::ItemFeatures& features, int group_size, const RolloutOptions& options,
                                   std::mt19937_64& rng) {
  if (group_size < 1) throw ContractViolation("rollout: group size must be >= 1");
  if (examples.empty()) return {};
  ad::NoGradGuard no_grad;
  const auto& layout = policy.layout();
  const int L = policy.config().code_length();
  const int K = policy.config().num_attributes();
  const auto G = static_cast<std::size_t>(group_size);
  const std::size_t N = examples.size() * G;

  std::vector<std::vector<int>> histories;
  for (const auto& e : examples) histories.push_back(e.history);
  std::vector<std::size_t> rows(N);
  for (std::size_t i = 0; i < N; ++i) rows[i] = i / G;
  const auto enc = policy.encode(histories, features).select(rows);

  const auto supervised = layout.supervised_slots();
  std::vector<int> column(static_cast<std::size_t>(layout.length()), -1);
  for (std::size_t j = 0; j < supervised.size(); ++j) column[static_cast<std::size_t>(supervised[j])] = static_cast<int>(j);

  std::vector<Episode> eps(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& ex = examples[i / G];
    eps[i].user = ex.user;
    eps[i].history = ex.history;
    eps[i].target = ex.target;
    eps[i].old_logprobs.assign(supervised.size(), 0.0);
  }
  const Sampler draw{options.temperature, &rng};
  const Sampler draw_reflection{options.reflection_temperature, &rng};
  std::vector<int> toks;
  std::vector<double> lps;
  auto record = [&](int slot, auto member) {
    const auto j = static_cast<std::size_t>(column[static_cast<std::size_t>(slot)]);
    for (std::size_t i = 0; i < N; ++i) {
      (eps[i].tokens.*member).push_back(toks[i]);
      eps[i].old_logprobs[j] = lps[i];
    }
  };

  for (int t = 0; t < L; ++t) {
    const auto n = static_cast<std::size_t>(t + 1);
    std::vector<int> ids;
    ids.reserve(N * n);
    for (const auto& e : eps) {
      ids.push_back(policy.bos_id());
      for (int s = 0; s < t; ++s) ids.push_back(policy.input_id(s, e.tokens.draft[static_cast<std::size_t>(s)]));
    }
    draw(policy.step_logits(enc, ids, n, {Segment::kDraft, t}), toks, lps);
    record(layout.slot({Segment::kDraft, t}), &model::TemplateTokens::draft);
  }

  std::vector<std::vector<int>> drafts;
  for (const auto& e : eps) drafts.push_back(e.tokens.draft);
  const auto refl = policy.reflection_logits(enc, drafts);
  for (int j = 0; j <= K; ++j) {
    draw_reflection(refl[static_cast<std::size_t>(j)], toks, lps);
    record(layout.slot({Segment::kReflection, j}), &model::TemplateTokens::reflection);
  }

  for (int t = 0; t < L; ++t) {
    const int slot = layout.slot({Segment::kCorrection, t});
    const auto n = static_cast<std::size_t>(layout.predict_position(slot) + 1);
    std::vector<int> ids;
    ids.reserve(N * n);
    for (const auto& e : eps) {
      const auto row = policy.template_input_ids(e.tokens, n);
      ids.insert(ids.end(), row.begin(), row.end());
    }
    draw(policy.step_logits(enc, ids, n, {Segment::kCorrection, t}), toks, lps);
    record(slot, &model::TemplateTokens::correction);
  }
  return eps;
}

Episode rollout(const model::Seq2Seq& policy, const data::Example& example, const model::ItemFeatures& features,
                const RolloutOptions& options, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return std::move(rollout_batch(policy, {example}, features, 1, options, rng).front());
}

AdvantageMode parse_advantage_mode(const std::string& text) {
  if (text == "zscore") return AdvantageMode::kZScore;
  if (text == "rank") return AdvantageMode::kRank;
  throw ConfigError("rl.advantage must be zscore or rank (got '" + text + "')");
}

const char* advantage_mode_name(AdvantageMode m) { return m == AdvantageMode::kZScore ? "zscore" : "rank"; }

std::vector<double> group_advantage(std::span<const double> rewards, AdvantageMode mode) {
  const std::size_t n = rewards.size();
  std::vector<double> adv(n, 0.0);
  if (n < 2) return adv;
  if (mode == AdvantageMode::kZScore) {
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
    double var = 0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / (sd + 1e-8);
    return adv;
  }
  // average ranks for ties, mapped to [-1, 1]
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rewards[a] < rewards[b]; });
  const double mid = static_cast<double>(n - 1) / 2.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && rewards[order[j + 1]] == rewards[order[i]]) ++j;
    const double rank = static_cast<double>(i + j) / 2.0;
    for (std::size_t k = i; k <= j; ++k) adv[order[k]] = (rank - mid) / mid;
    i = j + 1;
  }
  return adv;
}

LossResult grpo_loss(const model::Seq2Seq& policy, const model::Seq2Seq* reference, const std::vector<Episode>& episodes,
                     const model::ItemFeatures& features, const LossConfig& config) {
  if (config.beta_kl > 0 && reference == nullptr) throw ContractViolation("grpo_loss: KL penalty needs a reference");
  LossResult res;
  if (episodes.empty()) {
    res.loss = Tensor::scalar(0.0);
    return res;
  }
  const auto& layout = policy.layout();
  const auto supervised = layout.supervised_slots();
  const std::size_t N = episodes.size(), S = supervised.size();

  std::vector<std::vector<int>> histories;
  std::vector<model::TemplateTokens> templates;
  for (const auto& e : episodes) {
    if (e.old_logprobs.size() != S) throw ContractViolation("grpo_loss: episode log-prob count mismatch");
    histories.push_back(e.history);
    templates.push_back(e.tokens);
  }
  const auto out = policy.forward_template(policy.encode(histories, features), templates);

  std::vector<Tensor> cols;
  for (int s : supervised) {
    std::vector<int> idx(N);
    for (std::size_t i = 0; i < N; ++i) idx[i] = slot_value(episodes[i].tokens, layout.role(s));
    cols.push_back(ad::reshape(ad::pick(out.slot_logprobs[static_cast<std::size_t>(s)], idx), {N, 1}));
  }
  const Tensor lp_new = ad::concat(cols, 1);

  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < N; ++i) {
    bool ok = std::isfinite(episodes[i].advantage);
    for (std::size_t j = 0; j < S && ok; ++j) {
      const double d = lp_new[i * S + j] - episodes[i].old_logprobs[j];
      ok = std::isfinite(d) && d < 700.0;
    }
    if (ok) kept.push_back(i);
  }
  res.kept = kept.size();
  res.dropped = N - kept.size();
  if (kept.empty()) {
    res.loss = Tensor::scalar(0.0);
    return res;
  }
  const std::size_t M = kept.size();
  std::vector<double> old(M * S), adv(M * S);
  for (std::size_t r = 0; r < M; ++r)
    for (std::size_t j = 0; j < S; ++j) {
      old[r * S + j] = episodes[kept[r]].old_logprobs[j];
      adv[r * S + j] = episodes[kept[r]].advantage;
    }
  const Tensor A = Tensor::from({M, S}, std::move(adv));
  const Tensor ratio = ad::exp(ad::sub(ad::gather_rows(lp_new, kept), Tensor::from({M, S}, std::move(old))));
  const Tensor surr = ad::minimum(ad::mul(ratio, A), ad::mul(ad::clip(ratio, 1 - config.clip_epsilon, 1 + config.clip_epsilon), A));
  const Tensor surr_mean = ad::scale(ad::sum(surr), 1.0 / static_cast<double>(M * S));
  res.surrogate = surr_mean.item();
  Tensor loss = ad::scale(surr_mean, -1.0);

  if (reference != nullptr) {
    model::TemplateOutput ref;
    {
      ad::NoGradGuard no_grad;
      std::vector<std::vector<int>> kh;
      std::vector<model::TemplateTokens> kt;
      for (std::size_t i : kept) kh.push_back(histories[i]), kt.push_back(templates[i]);
      ref = reference->forward_template(reference->encode(kh, features), kt);
    }
    Tensor kl_sum;
    for (int s : supervised) {
      const Tensor lp = ad::gather_rows(out.slot_logprobs[static_cast<std::size_t>(s)], kept);
      const Tensor lr = ref.slot_logprobs[static_cast<std::size_t>(s)].detach();
      const Tensor term = ad::sum(ad::mul(ad::exp(lp), ad::sub(lp, lr)));
      kl_sum = kl_sum.defined() ? ad::add(kl_sum, term) : term;
    }
    const Tensor kl = ad::scale(kl_sum, 1.0 / static_cast<double>(M * S));
    res.kl = kl.item();
    loss = ad::add(loss, ad::scale(kl, config.beta_kl));
  }
  res.loss = loss;
  return res;
}

nlohmann::json RlConfig::to_json() const {
  return {{"iterations", iterations},
          {"users_per_iteration", users_per_iteration},
          {"group_size", group_size},
          {"updates_per_iteration", updates_per_iteration},
          {"learning_rate", learning_rate},
          {"max_grad_norm", max_grad_norm},
          {"kl_guard", kl_guard},
          {"advantage", advantage_mode_name(advantage)},
          {"temperature", rollout.temperature},
          {"reflection_temperature", rollout.reflection_temperature},
          {"clip_epsilon", loss.clip_epsilon},
          {"beta_kl", loss.beta_kl},
          {"reward", reward.to_json()},
          {"seed", seed}};
}

RlConfig RlConfig::from_json(const nlohmann::json& j) {
  RlConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.users_per_iteration = j.value("users_per_iteration", c.users_per_iteration);
  c.group_size = j.value("group_size", c.group_size);
  c.updates_per_iteration = j.value("updates_per_iteration", c.updates_per_iteration);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.kl_guard = j.value("kl_guard", c.kl_guard);
  c.advantage = parse_advantage_mode(j.value("advantage", std::string("zscore")));
  c.rollout.temperature = j.value("temperature", c.rollout.temperature);
  c.rollout.reflection_temperature = j.value("reflection_temperature", c.rollout.reflection_temperature);
  c.loss.clip_epsilon = j.value("clip_epsilon", c.loss.clip_epsilon);
  c.loss.beta_kl = j.value("beta_kl", c.loss.beta_kl);
  if (j.contains("reward")) c.reward = RewardConfig::from_json(j.at("reward"));
  c.seed = j.value("seed", c.seed);
  if (c.iterations < 0 || c.users_per_iteration < 1 || c.group_size < 1 || c.updates_per_iteration < 1)
    throw ConfigError("rl: iterations/users/group/updates out of range");
  if (c.learning_rate <= 0 || c.loss.clip_epsilon <= 0 || c.loss.beta_kl < 0) throw ConfigError("rl: bad lr/clip/beta_kl");
  return c;
}

namespace {

Stat stat_of(const std::vector<Episode>& eps, double RewardBreakdown::*field) {
  Stat s;
  for (const auto& e : eps) s.mean += e.reward.*field;
  s.mean /= static_cast<double>(eps.size());
  double var = 0;
  for (const auto& e : eps) var += (e.reward.*field - s.mean) * (e.reward.*field - s.mean);
  s.std = std::sqrt(var / static_cast<double>(eps.size()));
  return s;
}

}  // namespace

std::vector<IterationLog> train_rl(model::Seq2Seq& policy, const model::Seq2Seq& reference,
                                   const std::vector<data::Example>& pairs, const model::ItemFeatures& features,
                                   const tok::Tokenizer& tokenizer, const data::Catalog& catalog, const RlConfig& config,
                                   const RlProgress& progress) {
  if (config.iterations > 0 && pairs.empty()) throw ConfigError("rl: no training pairs");
  std::mt19937_64 rng(config.seed);
  ad::Adam opt(policy.params(), {.learning_rate = config.learning_rate, .max_grad_norm = config.max_grad_norm});
  std::uniform_int_distribution<std::size_t> pick(0, pairs.empty() ? 0 : pairs.size() - 1);
  const auto G = static_cast<std::size_t>(config.group_size);
  std::vector<IterationLog> logs;
  for (int it = 1; it <= config.iterations; ++it) {
    std::vector<data::Example> batch;
    for (int u = 0; u < config.users_per_iteration; ++u) batch.push_back(pairs[pick(rng)]);
    auto eps = rollout_batch(policy, batch, features, config.group_size, config.rollout, rng);
    for (auto& e : eps)
      e.reward = compute_reward(e.tokens.draft, e.tokens.reflection, e.tokens.correction, e.target, tokenizer, catalog,
                                config.reward);
    for (std::size_t g = 0; g < batch.size(); ++g) {
      std::vector<double> r;
      for (std::size_t i = 0; i < G; ++i) r.push_back(eps[g * G + i].reward.r_total);
      const auto a = group_advantage(r, config.advantage);
      for (std::size_t i = 0; i < G; ++i) eps[g * G + i].advantage = a[i];
    }

    IterationLog log;
    log.iteration = it;
    for (int u = 0; u < config.updates_per_iteration; ++u) {
      opt.zero_grad();
      const auto res = grpo_loss(policy, &reference, eps, features, config.loss);
      log.dropped += res.dropped;
      if (u == 0) log.kl = res.kl;
      if (res.kept == 0) continue;
      ad::backward(res.loss);
      opt.step();
    }
    log.learning_rate = opt.learning_rate();
    if (log.kl > config.kl_guard) {
      opt.set_learning_rate(opt.learning_rate() / 2);
      log.kl_guard_tripped = true;
    }
    log.total = stat_of(eps, &RewardBreakdown::r_total);
    log.task = stat_of(eps, &RewardBreakdown::r_task);
    log.cor = stat_of(eps, &RewardBreakdown::r_cor);
    log.loc = stat_of(eps, &RewardBreakdown::r_loc);
    log.sem = stat_of(eps, &RewardBreakdown::r_sem);
    log.delta = stat_of(eps, &RewardBreakdown::r_delta);
    for (const auto& e : eps) log.mean_l0 += e.reward.l0, log.mean_l1 += e.reward.l1;
    log.mean_l0 /= static_cast<double>(eps.size());
    log.mean_l1 /= static_cast<double>(eps.size());
    logs.push_back(log);
    if (progress) progress(log);
  }
  return logs;
}

void write_reward_csv(const std::filesystem::path& path, const std::vector<IterationLog>& logs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,mean_total,std_total,mean_task,std_task,mean_cor,std_cor,mean_loc,std_loc,mean_sem,std_sem,"
         "mean_delta,std_delta,mean_l0,mean_l1,mean_kl,learning_rate,dropped,kl_guard\n";
  for (const auto& l : logs) {
    out << l.iteration;
    for (const Stat* s : {&l.total, &l.task, &l.cor, &l.loc, &l.sem, &l.delta})
      out << ',' << format_double(s->mean) << ',' << format_double(s->std);
    out << ',' << format_double(l.mean_l0) << ',' << format_double(l.mean_l1) << ',' << format_double(l.kl) << ','
        << format_double(l.learning_rate) << ',' << l.dropped << ',' << (l.kl_guard_tripped ? 1 : 0) << '\n';
  }
}

}  // namespace grc::rl
