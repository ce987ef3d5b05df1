#include "grc/sft.hpp"

#include "grc/decoder.hpp"
#include "grc/ops.hpp"

namespace grc::sft {

using model::PositionRole;
using model::Segment;

int annotate_loc(std::span<const int> draft, std::span<const int> gt) {
  if (draft.size() != gt.size()) throw ContractViolation("annotate_loc: draft and target lengths differ");
  for (std::size_t t = 0; t < draft.size(); ++t)
    if (draft[t] != gt[t]) return static_cast<int>(t) + 1;
  return static_cast<int>(draft.size()) + 1;
}

SemLabel annotate_sem(std::optional<int> draft_item, int gt_item, const data::Catalog& catalog) {
  SemLabel out;
  const std::size_t K = catalog.attribute_cardinality.size();
  out.flags.assign(K, 0);
  if (!draft_item) {
    out.invalid_item = true;
    return out;
  }
  for (std::size_t k = 0; k < K; ++k) out.flags[k] = catalog.attribute(*draft_item, k) == catalog.attribute(gt_item, k);
  return out;
}

std::vector<int> ReflectionLabel::slot_values() const {
  std::vector<int> v{loc - 1};
  v.insert(v.end(), sem.begin(), sem.end());
  return v;
}

ReflectionLabel annotate(std::span<const int> draft, int gt_item, const tok::Tokenizer& tokenizer,
                         const data::Catalog& catalog) {
  ReflectionLabel label;
  label.loc = annotate_loc(draft, tokenizer.item_code(gt_item));
  const SemLabel sem = annotate_sem(tokenizer.lookup(draft), gt_item, catalog);
  label.sem = sem.flags;
  label.invalid_item = sem.invalid_item;
  return label;
}

model::TemplateTokens Template::tokens() const { return {draft, label.slot_values(), correction}; }

std::vector<TemplateToken> Template::serialize() const {
  const int L = static_cast<int>(draft.size());
  const int K = static_cast<int>(label.sem.size());
  if (correction.size() != draft.size()) throw ContractViolation("template: correction length differs from draft");
  model::TemplateLayout layout(L, K);
  const auto values = label.slot_values();
  std::vector<TemplateToken> out;
  for (int s = 0; s < layout.length(); ++s) {
    const PositionRole r = layout.role(s);
    int v = 0;
    if (r.segment == Segment::kDraft) v = draft[r.index];
    if (r.segment == Segment::kReflection) v = values[r.index];
    if (r.segment == Segment::kCorrection) v = correction[r.index];
    out.push_back({r, v});
  }
  return out;
}

std::vector<double> Template::loss_weights(double lambda_rc) const {
  const auto seq = serialize();
  std::vector<double> w;
  for (const auto& t : seq) {
    switch (t.role.segment) {
      case Segment::kDraft: w.push_back(1.0); break;
      case Segment::kReflection:
      case Segment::kCorrection: w.push_back(lambda_rc); break;
      default: w.push_back(0.0);
    }
  }
  return w;
}

Template Template::parse(std::span<const TemplateToken> seq, int L, int K) {
  model::TemplateLayout layout(L, K);
  if (seq.size() != static_cast<std::size_t>(layout.length()))
    throw ContractViolation("template parse: expected " + std::to_string(layout.length()) + " tokens, got " +
                            std::to_string(seq.size()));
  Template t;
  t.draft.resize(static_cast<std::size_t>(L));
  t.correction.resize(static_cast<std::size_t>(L));
  t.label.sem.resize(static_cast<std::size_t>(K));
  for (int s = 0; s < layout.length(); ++s) {
    const auto& tok = seq[static_cast<std::size_t>(s)];
    if (!(tok.role == layout.role(s)))
      throw ContractViolation("template parse: role mismatch at position " + std::to_string(s));
    const PositionRole r = tok.role;
    if (r.segment == Segment::kDraft) t.draft[r.index] = tok.value;
    if (r.segment == Segment::kCorrection) t.correction[r.index] = tok.value;
    if (r.segment == Segment::kReflection) {
      if (r.index == 0) {
        if (tok.value < 0 || tok.value > L) throw ContractViolation("template parse: localization out of range");
        t.label.loc = tok.value + 1;
      } else {
        if (tok.value != 0 && tok.value != 1) throw ContractViolation("template parse: semantic flag not binary");
        t.label.sem[r.index - 1] = tok.value;
      }
    }
    if (model::TemplateLayout(L, K).is_delimiter(s) && tok.value != 0)
      throw ContractViolation("template parse: delimiter carries a value");
  }
  return t;
}

nlohmann::json SftRecord::to_json() const {
  return {{"user", user},
          {"history", history},
          {"target", target},
          {"draft", tmpl.draft},
          {"draft_item", draft_item},
          {"loc", tmpl.label.loc},
          {"sem", tmpl.label.sem},
          {"invalid_item", tmpl.label.invalid_item},
          {"correction", tmpl.correction}};
}

SftRecord SftRecord::from_json(const nlohmann::json& j) {
  SftRecord r;
  r.user = j.at("user").get<std::int64_t>();
  r.history = j.at("history").get<std::vector<int>>();
  r.target = j.at("target").get<int>();
  r.draft_item = j.at("draft_item").get<int>();
  r.tmpl.draft = j.at("draft").get<std::vector<int>>();
  r.tmpl.label.loc = j.at("loc").get<int>();
  r.tmpl.label.sem = j.at("sem").get<std::vector<int>>();
  r.tmpl.label.invalid_item = j.at("invalid_item").get<bool>();
  r.tmpl.correction = j.at("correction").get<std::vector<int>>();
  return r;
}

std::vector<SftRecord> make_sft_corpus(const model::Seq2Seq& pretrained, const std::vector<data::Example>& pairs,
                                       const model::ItemFeatures& features, const tok::Tokenizer& tokenizer,
                                       const data::Catalog& catalog, const CorpusOptions& options,
                                       CorpusStats* stats) {
  if (options.beams_per_pair < 1) throw ConfigError("sft.beams_per_pair must be >= 1");
  ad::NoGradGuard no_grad;
  CorpusStats local;
  std::vector<SftRecord> out;
  for (const auto& pair : pairs) {
    ++local.pairs;
    const auto enc = pretrained.encode({pair.history}, features);
    const auto search = decode::beam_search_draft(pretrained, enc, options.beams_per_pair);
    if (search.beams.empty()) {
      ++local.skipped_pairs;
      continue;
    }
    const auto gt = tokenizer.item_code(pair.target);
    int correct = 0;
    for (const auto& beam : search.beams) {
      SftRecord rec;
      rec.user = pair.user;
      rec.history = pair.history;
      rec.target = pair.target;
      rec.tmpl.draft = beam.tokens;
      rec.tmpl.label = annotate(beam.tokens, pair.target, tokenizer, catalog);
      rec.tmpl.correction = gt;
      const auto item = tokenizer.lookup(beam.tokens);
      rec.draft_item = item ? *item : -1;
      if (rec.tmpl.label.loc == static_cast<int>(gt.size()) + 1 && ++correct > options.max_correct_per_pair) {
        ++local.dropped_correct;
        continue;
      }
      if (rec.tmpl.label.invalid_item) ++local.invalid_drafts;
      out.push_back(std::move(rec));
      ++local.templates;
    }
  }
  if (stats) *stats = local;
  return out;
}

DraftTarget parse_draft_target(const std::string& text) {
  if (text == "ground_truth") return DraftTarget::kGroundTruth;
  if (text == "draft") return DraftTarget::kDraft;
  throw ConfigError("sft.draft_target must be ground_truth or draft (got '" + text + "')");
}

LossParts sft_loss(const model::TemplateOutput& outputs, const std::vector<Template>& templates, double lambda_rc,
                   DraftTarget draft_target) {
  if (templates.empty()) throw ContractViolation("sft_loss: empty batch");
  const int L = static_cast<int>(templates[0].draft.size());
  const int K = static_cast<int>(templates[0].label.sem.size());
  model::TemplateLayout layout(L, K);
  if (outputs.slot_logprobs.size() != static_cast<std::size_t>(layout.length()))
    throw ContractViolation("sft_loss: outputs do not match the template layout");
  const std::size_t b = templates.size();
  std::vector<std::vector<int>> values(b);
  for (std::size_t r = 0; r < b; ++r) values[r] = templates[r].tokens().reflection;

  ad::Tensor draft_sum, rc_sum;
  LossParts parts;
  for (int s : layout.supervised_slots()) {
    const PositionRole role = layout.role(s);
    std::vector<int> target(b);
    for (std::size_t r = 0; r < b; ++r) {
      const Template& t = templates[r];
      switch (role.segment) {
        case Segment::kDraft:
          target[r] = draft_target == DraftTarget::kGroundTruth ? t.correction[role.index] : t.draft[role.index];
          break;
        case Segment::kReflection: target[r] = values[r][role.index]; break;
        default: target[r] = t.correction[role.index];
      }
    }
    const ad::Tensor& lp = outputs.slot_logprobs[s];
    if (!lp.defined() || lp.dim(0) != b) throw ContractViolation("sft_loss: missing output for a supervised slot");
    const ad::Tensor nll = ad::scale(ad::sum(ad::pick(lp, target)), -1.0 / static_cast<double>(b));
    if (role.segment == Segment::kDraft) {
      parts.draft_nll += nll.item();
      draft_sum = draft_sum.defined() ? ad::add(draft_sum, nll) : nll;
    } else {
      (role.segment == Segment::kReflection ? parts.reflection_nll : parts.correction_nll) += nll.item();
      rc_sum = rc_sum.defined() ? ad::add(rc_sum, nll) : nll;
    }
  }
  parts.loss = ad::add(draft_sum, ad::scale(rc_sum, lambda_rc));
  return parts;
}

}  // namespace grc::sft
