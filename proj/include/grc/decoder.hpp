#pragma once

// Beam-search drafting, parallel reflection with entropy, entropy-calibrated
// pruning, the skip rule and the correction pass.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/model.hpp"

namespace grc::decode {

struct DraftBeam {
  std::vector<int> tokens;
  double score = 0.0;  // summed log-probabilities
};

struct BeamSearchResult {
  std::vector<DraftBeam> beams;  // non-increasing score
  bool truncated = false;        // fewer sequences than the requested width
};

/// Standard beam search over the L draft levels for one encoded user
/// (batch 1). Ties are broken by lexicographic token order.
BeamSearchResult beam_search_draft(const model::Seq2Seq& model, const model::Encoded& user, int width);

enum class BeamStatus { kPending, kSkippedCorrect, kCorrected };
const char* status_name(BeamStatus s);

enum class SkipMode { kNormal, kForceAll, kDisabled };
SkipMode parse_skip_mode(const std::string& text);
const char* skip_mode_name(SkipMode m);

struct Beam {
  std::vector<int> draft;
  double base_score = 0.0;
  std::vector<int> reflection;               // greedy class per slot (slot 0: loc - 1)
  std::vector<std::vector<double>> reflection_probs;
  double entropy = 0.0;                      // mean slot entropy, natural log
  double egrs_score = 0.0;
  BeamStatus status = BeamStatus::kPending;
  std::vector<int> final_tokens;
  int item = -1;                             // -1: final code has no item
  int correction_steps = 0;

  /// 1-based predicted first divergence; L+1 means "already correct".
  int predicted_loc() const { return reflection.empty() ? 0 : reflection[0] + 1; }
};

/// H = -sum p log p over one distribution.
double entropy(std::span<const double> probs);

/// One masked parallel pass: greedy reflection tokens and mean entropy for
/// every beam.
void reflect(const model::Seq2Seq& model, const model::Encoded& user, std::vector<Beam>& beams);

/// egrs = base + alpha * H; keeps the best `budget` beams, ordered by egrs,
/// then base score, then draft tokens.
std::vector<Beam> egrs_rank(std::vector<Beam> beams, double alpha, int budget);

void apply_skip_rule(Beam& beam, int code_length, SkipMode mode);

/// Correction decode for every pending beam, conditioned on its draft and
/// greedy reflection. Width 1 is greedy; wider keeps that many hypotheses
/// per beam and returns the best. Each pending beam costs L decode steps.
void correct_pass(const model::Seq2Seq& model, const model::Encoded& user, std::vector<Beam>& beams, int width = 1);

using Lookup = std::function<std::optional<int>(std::span<const int>)>;

struct RankedItem {
  int item = -1;
  double score = 0.0;
};

struct DecodeResult {
  std::vector<RankedItem> ranked;  // unique items, best first
  std::vector<Beam> beams;         // surviving beams in egrs order
  std::vector<Beam> drafts;        // every reflected draft in base-score order
  int skipped = 0;
  int corrected = 0;
  int invalid = 0;
  int duplicates = 0;
  int fallbacks = 0;               // beams ranked by their draft item instead
  long correction_steps = 0;
  bool truncated = false;
};

/// Maps finals through the lookup, drops invalid codes, deduplicates
/// (keeping the highest egrs score) and ranks by egrs score. With
/// `draft_fallback`, a beam whose final is invalid or already ranked
/// contributes its draft item (if valid and new) at its own position.
DecodeResult finalize(std::vector<Beam> beams, const Lookup& lookup, bool draft_fallback = false);

struct DecodeConfig {
  int beam_size = 20;         // B
  int draft_pool = 0;         // drafts reflected before pruning; 0 means B
  double alpha = 0.2;         // entropy weight
  SkipMode skip = SkipMode::kNormal;
  int correction_width = 1;
  bool draft_fallback = true;

  nlohmann::json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j);
};

/// Full generate / reflect / re-rank / correct pipeline for one user.
DecodeResult decode_user(const model::Seq2Seq& model, const model::Encoded& user, const DecodeConfig& config,
                         const Lookup& lookup);

/// Plain one-pass beam search mapped through the lookup (no reflection).
DecodeResult decode_one_pass(const model::Seq2Seq& model, const model::Encoded& user, int beam_size,
                             const Lookup& lookup);

nlohmann::json to_json(const DecodeResult& result, bool with_beams);

}  // namespace grc::decode
