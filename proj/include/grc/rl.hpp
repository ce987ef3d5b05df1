#pragma once

// Episode rollouts, the decomposed reward, group-relative advantages and the
// clipped policy objective with a KL penalty to a frozen reference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/data.hpp"
#include "grc/model.hpp"
#include "grc/tokenizer.hpp"

namespace grc::rl {

struct RewardConfig {
  double beta_cor = 2.2;
  double beta_last = 2.0;
  double beta_loc = 1.0;
  double beta_sem = 0.8;
  double epsilon = 1e-6;

  nlohmann::json to_json() const;
  static RewardConfig from_json(const nlohmann::json& j);
};

struct TaskReward {
  int l0 = 0;
  int l1 = 0;
  double r_task = 0.0;
};

/// Token hit counts of draft and correction against the target.
TaskReward reward_task(std::span<const int> draft, std::span<const int> correction, std::span<const int> gt,
                       double beta_last);

struct LocReward {
  double label = 0.0;
  double correction = 0.0;
  double total = 0.0;
};

/// pred_loc and gt_loc are 1-based (L+1: nothing wrong).
LocReward reward_loc(int pred_loc, int gt_loc, std::span<const int> draft, std::span<const int> correction,
                     std::span<const int> gt, double epsilon);

struct SemReward {
  double label = 0.0;
  double correction = 0.0;
  double total = 0.0;
};

/// Unresolvable items count as attribute mismatches.
SemReward reward_sem(std::span<const int> pred_sem, std::span<const int> gt_sem, std::optional<int> draft_item,
                     std::optional<int> corrected_item, int gt_item, const data::Catalog& catalog);

double reward_delta(int l0, int l1);

struct RewardBreakdown {
  int l0 = 0;
  int l1 = 0;
  double r_task = 0.0;
  double r_loc_label = 0.0;
  double r_loc_cor = 0.0;
  double r_loc = 0.0;
  double r_sem_label = 0.0;
  double r_sem_cor = 0.0;
  double r_sem = 0.0;
  double r_delta = 0.0;
  double r_cor = 0.0;
  double r_total = 0.0;
};

/// `reflection` holds slot classes: [loc - 1, sem_1..sem_K].
RewardBreakdown compute_reward(std::span<const int> draft, std::span<const int> reflection,
                               std::span<const int> correction, int gt_item, const tok::Tokenizer& tokenizer,
                               const data::Catalog& catalog, const RewardConfig& config);

struct Episode {
  std::int64_t user = 0;
  std::vector<int> history;
  int target = -1;
  model::TemplateTokens tokens;       // draft, sampled reflection classes, correction
  std::vector<double> old_logprobs;   // per supervised slot, layout order
  RewardBreakdown reward;
  double advantage = 0.0;
};

/// Class held by a supervised slot of a template.
int slot_value(const model::TemplateTokens& tokens, model::PositionRole role);

struct RolloutOptions {
  double temperature = 1.0;             // draft and correction
  double reflection_temperature = 1.0;
};

/// G episodes per example, ordered example-major. Drafts are sampled token by
/// token, the reflection in one parallel pass and the correction conditioned
/// on draft and sampled reflection. A temperature <= 1e-8 is greedy.
/// Recorded log-probs are under the untempered policy.
std::vector<Episode> rollout_batch(const model::Seq2Seq& policy, const std::vector<data::Example>& examples,
                                   const model::ItemFeatures& features, int group_size, const RolloutOptions& options,
                                   std::mt19937_64& rng);

Episode rollout(const model::Seq2Seq& policy, const data::Example& example, const model::ItemFeatures& features,
                const RolloutOptions& options, std::uint64_t seed);

enum class AdvantageMode { kZScore, kRank };
AdvantageMode parse_advantage_mode(const std::string& text);
const char* advantage_mode_name(AdvantageMode m);

/// Centered advantages for one group. A group of one gets 0.
std::vector<double> group_advantage(std::span<const double> rewards, AdvantageMode mode);

struct LossConfig {
  double clip_epsilon = 0.15;
  double beta_kl = 0.03;
};

struct LossResult {
  ad::Tensor loss;
  double surrogate = 0.0;  // mean clipped surrogate over kept episodes
  double kl = 0.0;         // mean per-position KL to the reference
  std::size_t kept = 0;
  std::size_t dropped = 0;  // non-finite ratios
};

/// -mean_i mean_t min(rho A, clip(rho) A) + beta_kl * mean KL(pi || ref).
/// `reference` may be null when beta_kl is 0.
LossResult grpo_loss(const model::Seq2Seq& policy, const model::Seq2Seq* reference, const std::vector<Episode>& episodes,
                     const model::ItemFeatures& features, const LossConfig& config);

struct RlConfig {
  int iterations = 40;
  int users_per_iteration = 16;
  int group_size = 8;
  int updates_per_iteration = 1;
  double learning_rate = 1e-4;
  double max_grad_norm = 1.0;
  double kl_guard = 5.0;
  AdvantageMode advantage = AdvantageMode::kZScore;
  RolloutOptions rollout;
  LossConfig loss;
  RewardConfig reward;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static RlConfig from_json(const nlohmann::json& j);
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

struct IterationLog {
  int iteration = 0;
  Stat total, task, cor, loc, sem, delta;
  double mean_l0 = 0.0;
  double mean_l1 = 0.0;
  double kl = 0.0;
  double learning_rate = 0.0;
  std::size_t dropped = 0;
  bool kl_guard_tripped = false;
};

using RlProgress = std::function<void(const IterationLog&)>;

/// Optimizes `policy` in place; `reference` stays frozen.
std::vector<IterationLog> train_rl(model::Seq2Seq& policy, const model::Seq2Seq& reference,
                                   const std::vector<data::Example>& pairs, const model::ItemFeatures& features,
                                   const tok::Tokenizer& tokenizer, const data::Catalog& catalog, const RlConfig& config,
                                   const RlProgress& progress = {});

void write_reward_csv(const std::filesystem::path& path, const std::vector<IterationLog>& logs);

}  // namespace grc::rl
