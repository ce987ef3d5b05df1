#pragma once

// Reflection labels, the three-segment supervision template and the
// supervised fine-tuning objective.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/data.hpp"
#include "grc/model.hpp"
#include "grc/tokenizer.hpp"

namespace grc::sft {

/// First 1-based position where the draft differs from the target; L+1 if
/// they agree everywhere.
int annotate_loc(std::span<const int> draft, std::span<const int> gt);

struct SemLabel {
  std::vector<int> flags;  // one per catalog attribute
  bool invalid_item = false;
};

/// flag k = 1 iff attribute k of the draft item matches the target item.
/// An unresolvable draft yields all zeros with the invalid marker set.
SemLabel annotate_sem(std::optional<int> draft_item, int gt_item, const data::Catalog& catalog);

struct ReflectionLabel {
  int loc = 0;             // 1..L+1
  std::vector<int> sem;    // K flags
  bool invalid_item = false;

  /// Class indices as fed to the reflection slots.
  std::vector<int> slot_values() const;
};

ReflectionLabel annotate(std::span<const int> draft, int gt_item, const tok::Tokenizer& tokenizer,
                         const data::Catalog& catalog);

/// One template token with its role; delimiters carry value 0.
struct TemplateToken {
  model::PositionRole role;
  int value = 0;
  bool operator==(const TemplateToken&) const = default;
};

/// Serialized sequence o = [draft, EOF1, loc, sem..., EOF2, correction, EOF3].
struct Template {
  std::vector<int> draft;
  ReflectionLabel label;
  std::vector<int> correction;

  model::TemplateTokens tokens() const;
  std::vector<TemplateToken> serialize() const;
  /// Loss weight per template position: 0 on delimiters, 1 on draft
  /// positions, lambda on reflection and correction positions.
  std::vector<double> loss_weights(double lambda_rc) const;
  /// Inverse of serialize; throws ContractViolation on a malformed sequence.
  static Template parse(std::span<const TemplateToken> sequence, int code_length, int num_attributes);
};

struct SftRecord {
  std::int64_t user = 0;
  std::vector<int> history;
  int target = -1;
  int draft_item = -1;     // -1: draft code has no item
  Template tmpl;

  nlohmann::json to_json() const;
  static SftRecord from_json(const nlohmann::json& j);
};

struct CorpusStats {
  std::size_t pairs = 0;
  std::size_t templates = 0;
  std::size_t skipped_pairs = 0;
  std::size_t dropped_correct = 0;
  std::size_t invalid_drafts = 0;
};

struct CorpusOptions {
  int beams_per_pair = 4;  // B_sft
  int max_correct_per_pair = 1;
};

/// Beam-search drafts from the pretrained model, annotated against each
/// pair's target. Output order follows the input pairs.
std::vector<SftRecord> make_sft_corpus(const model::Seq2Seq& pretrained, const std::vector<data::Example>& pairs,
                                       const model::ItemFeatures& features, const tok::Tokenizer& tokenizer,
                                       const data::Catalog& catalog, const CorpusOptions& options,
                                       CorpusStats* stats = nullptr);

enum class DraftTarget { kGroundTruth, kDraft };
DraftTarget parse_draft_target(const std::string& text);

struct LossParts {
  ad::Tensor loss;
  double draft_nll = 0.0;       // batch means
  double reflection_nll = 0.0;
  double correction_nll = 0.0;
};

/// Per template: sum of draft NLL + lambda * (sum of reflection NLL + sum of
/// correction NLL), averaged over the batch. Delimiters carry no loss.
/// With kGroundTruth the draft positions are scored against the correction
/// segment (the target code) while the model still reads its own draft.
LossParts sft_loss(const model::TemplateOutput& outputs, const std::vector<Template>& templates, double lambda_rc,
                   DraftTarget draft_target = DraftTarget::kGroundTruth);

}  // namespace grc::sft
