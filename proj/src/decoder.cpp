#include "grc/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "grc/ops.hpp"

namespace grc::decode {

using ad::Tensor;
using model::Segment;

namespace {

model::Encoded tile(const model::Encoded& user, std::size_t n) {
  if (user.batch != 1) throw ContractViolation("decoder expects one encoded user per call");
  const std::vector<std::size_t> rows(n, 0);
  return user.select(rows);
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct Candidate {
  double score;
  std::size_t parent;
  int token;
};

// Higher score first; equal scores fall back to token order of the extended
// sequence, which is parent order (parents are already ranked) then token.
bool candidate_before(const Candidate& a, const Candidate& b, const std::vector<std::vector<int>>& prefixes) {
  if (a.score != b.score) return a.score > b.score;
  const auto& pa = prefixes[a.parent];
  const auto& pb = prefixes[b.parent];
  if (pa != pb) return pa < pb;
  return a.token < b.token;
}

}  // namespace

BeamSearchResult beam_search_draft(const model::Seq2Seq& m, const model::Encoded& user, int width) {
  if (width < 1) throw ContractViolation("beam width must be >= 1");
  ad::NoGradGuard no_grad;
  const int L = m.config().code_length();
  std::vector<std::vector<int>> prefixes{{}};
  std::vector<double> scores{0.0};
  for (int t = 0; t < L; ++t) {
    const std::size_t nb = prefixes.size();
    const auto enc = tile(user, nb);
    const auto n = static_cast<std::size_t>(t + 1);
    std::vector<int> ids;
    ids.reserve(nb * n);
    for (const auto& p : prefixes) {
      ids.push_back(m.bos_id());
      for (int s = 0; s < t; ++s) ids.push_back(m.input_id(s, p[s]));
    }
    const Tensor lp = ad::log_softmax(m.step_logits(enc, ids, n, {Segment::kDraft, t}));
    const std::size_t V = lp.dim(1);
    std::vector<Candidate> cands;
    cands.reserve(nb * V);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t v = 0; v < V; ++v) cands.push_back({scores[b] + lp[b * V + v], b, static_cast<int>(v)});
    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) { return candidate_before(a, b, prefixes); });
    std::vector<std::vector<int>> next;
    std::vector<double> next_scores;
    for (std::size_t i = 0; i < keep; ++i) {
      auto p = prefixes[cands[i].parent];
      p.push_back(cands[i].token);
      next.push_back(std::move(p));
      next_scores.push_back(cands[i].score);
    }
    prefixes = std::move(next);
    scores = std::move(next_scores);
  }
  BeamSearchResult out;
  for (std::size_t i = 0; i < prefixes.size(); ++i) out.beams.push_back({prefixes[i], scores[i]});
  out.truncated = out.beams.size() < static_cast<std::size_t>(width);
  return out;
}

const char* status_name(BeamStatus s) {
  switch (s) {
    case BeamStatus::kPending: return "pending";
    case BeamStatus::kSkippedCorrect: return "skipped-correct";
    case BeamStatus::kCorrected: return "corrected";
  }
  return "?";
}

SkipMode parse_skip_mode(const std::string& text) {
  if (text == "normal") return SkipMode::kNormal;
  if (text == "force_all") return SkipMode::kForceAll;
  if (text == "disabled") return SkipMode::kDisabled;
  throw ConfigError("decode.skip must be one of normal, force_all, disabled (got '" + text + "')");
}

const char* skip_mode_name(SkipMode m) {
  switch (m) {
    case SkipMode::kNormal: return "normal";
    case SkipMode::kForceAll: return "force_all";
    case SkipMode::kDisabled: return "disabled";
  }
  return "?";
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

void reflect(const model::Seq2Seq& m, const model::Encoded& user, std::vector<Beam>& beams) {
  if (beams.empty()) return;
  ad::NoGradGuard no_grad;
  std::vector<std::vector<int>> drafts;
  drafts.reserve(beams.size());
  for (const auto& b : beams) drafts.push_back(b.draft);
  const auto logits = m.reflection_logits(tile(user, beams.size()), drafts);
  const auto slots = logits.size();
  for (auto& b : beams) {
    b.reflection.assign(slots, 0);
    b.reflection_probs.assign(slots, {});
    b.entropy = 0.0;
  }
  for (std::size_t j = 0; j < slots; ++j) {
    const Tensor p = ad::softmax(logits[j]);
    const std::size_t V = p.dim(1);
    for (std::size_t r = 0; r < beams.size(); ++r) {
      const std::span<const double> row = p.data().subspan(r * V, V);
      beams[r].reflection[j] = argmax(row);
      beams[r].reflection_probs[j].assign(row.begin(), row.end());
      beams[r].entropy += entropy(row);
    }
  }
  for (auto& b : beams) b.entropy /= static_cast<double>(slots);
}

std::vector<Beam> egrs_rank(std::vector<Beam> beams, double alpha, int budget) {
  if (budget < 1) throw ContractViolation("beam budget must be >= 1");
  for (auto& b : beams) b.egrs_score = b.base_score + alpha * b.entropy;
  std::stable_sort(beams.begin(), beams.end(), [](const Beam& a, const Beam& b) {
    if (a.egrs_score != b.egrs_score) return a.egrs_score > b.egrs_score;
    if (a.base_score != b.base_score) return a.base_score > b.base_score;
    return a.draft < b.draft;
  });
  if (beams.size() > static_cast<std::size_t>(budget)) beams.resize(static_cast<std::size_t>(budget));
  return beams;
}

void apply_skip_rule(Beam& beam, int code_length, SkipMode mode) {
  bool skip = false;
  switch (mode) {
    case SkipMode::kNormal:
      if (beam.reflection.empty()) throw ContractViolation("skip rule needs a reflected beam");
      skip = beam.predicted_loc() == code_length + 1;
      break;
    case SkipMode::kForceAll: skip = true; break;
    case SkipMode::kDisabled: skip = false; break;
  }
  if (skip) {
    beam.status = BeamStatus::kSkippedCorrect;
    beam.final_tokens = beam.draft;
  } else {
    beam.status = BeamStatus::kPending;
    beam.final_tokens.clear();
  }
}

void correct_pass(const model::Seq2Seq& m, const model::Encoded& user, std::vector<Beam>& beams, int width) {
  if (width < 1) throw ContractViolation("correction width must be >= 1");
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < beams.size(); ++i)
    if (beams[i].status == BeamStatus::kPending) pending.push_back(i);
  if (pending.empty()) return;
  ad::NoGradGuard no_grad;
  const auto& layout = m.layout();
  const int L = m.config().code_length();

  struct Hyp {
    std::size_t beam;
    std::vector<int> tokens;
    double score;
  };
  std::vector<Hyp> hyps;
  for (std::size_t i : pending) hyps.push_back({i, {}, 0.0});

  for (int t = 0; t < L; ++t) {
    const int slot = layout.slot({Segment::kCorrection, t});
    const auto n = static_cast<std::size_t>(layout.predict_position(slot) + 1);
    std::vector<int> ids;
    ids.reserve(hyps.size() * n);
    for (const auto& h : hyps) {
      const Beam& b = beams[h.beam];
      const auto row = m.template_input_ids({b.draft, b.reflection, h.tokens}, n);
      ids.insert(ids.end(), row.begin(), row.end());
    }
    const Tensor lp = ad::log_softmax(m.step_logits(tile(user, hyps.size()), ids, n, {Segment::kCorrection, t}));
    const std::size_t V = lp.dim(1);
    for (std::size_t i : pending) ++beams[i].correction_steps;

    std::vector<Hyp> next;
    if (width == 1) {
      for (std::size_t h = 0; h < hyps.size(); ++h) {
        const int tok = argmax(lp.data().subspan(h * V, V));
        hyps[h].tokens.push_back(tok);
        hyps[h].score += lp[h * V + static_cast<std::size_t>(tok)];
      }
      continue;
    }
    // Expand every hypothesis and keep the best `width` per beam.
    for (std::size_t i : pending) {
      std::vector<Hyp> cands;
      for (std::size_t h = 0; h < hyps.size(); ++h) {
        if (hyps[h].beam != i) continue;
        for (std::size_t v = 0; v < V; ++v) {
          Hyp c = hyps[h];
          c.tokens.push_back(static_cast<int>(v));
          c.score += lp[h * V + v];
          cands.push_back(std::move(c));
        }
      }
      const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(width));
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                        [](const Hyp& a, const Hyp& b) { return a.score != b.score ? a.score > b.score : a.tokens < b.tokens; });
      for (std::size_t k = 0; k < keep; ++k) next.push_back(std::move(cands[k]));
    }
    hyps = std::move(next);
  }
  // Hypotheses stay grouped per beam with the best first.
  std::set<std::size_t> done;
  for (const auto& h : hyps) {
    if (!done.insert(h.beam).second) continue;
    beams[h.beam].final_tokens = h.tokens;
    beams[h.beam].status = BeamStatus::kCorrected;
  }
}

DecodeResult finalize(std::vector<Beam> beams, const Lookup& lookup, bool draft_fallback) {
  DecodeResult out;
  for (auto& b : beams) {
    if (b.status == BeamStatus::kPending) throw ContractViolation("finalize: beam still pending correction");
    const auto item = lookup(b.final_tokens);
    b.item = item ? *item : -1;
    if (!item) ++out.invalid;
    if (b.status == BeamStatus::kSkippedCorrect) ++out.skipped;
    if (b.status == BeamStatus::kCorrected) ++out.corrected;
    out.correction_steps += b.correction_steps;
  }
  std::vector<std::size_t> order(beams.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const Beam& a = beams[x];
    const Beam& b = beams[y];
    if (a.egrs_score != b.egrs_score) return a.egrs_score > b.egrs_score;
    if (a.base_score != b.base_score) return a.base_score > b.base_score;
    return a.draft < b.draft;
  });
  std::set<int> seen;
  for (std::size_t i : order) {
    const Beam& b = beams[i];
    if (b.item >= 0 && seen.insert(b.item).second) {
      out.ranked.push_back({b.item, b.egrs_score});
      continue;
    }
    if (b.item >= 0) ++out.duplicates;
    if (!draft_fallback || b.final_tokens == b.draft) continue;
    const auto d = lookup(b.draft);
    if (d && seen.insert(*d).second) {
      out.ranked.push_back({*d, b.egrs_score});
      ++out.fallbacks;
    }
  }
  out.beams.reserve(beams.size());
  for (std::size_t i : order) out.beams.push_back(std::move(beams[i]));
  return out;
}

nlohmann::json DecodeConfig::to_json() const {
  return {{"beam_size", beam_size},
          {"draft_pool", draft_pool},
          {"alpha", alpha},
          {"skip", skip_mode_name(skip)},
          {"correction_width", correction_width},
          {"draft_fallback", draft_fallback}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j) {
  DecodeConfig c;
  c.beam_size = j.value("beam_size", c.beam_size);
  c.draft_pool = j.value("draft_pool", c.draft_pool);
  c.alpha = j.value("alpha", c.alpha);
  c.skip = parse_skip_mode(j.value("skip", std::string(skip_mode_name(c.skip))));
  c.correction_width = j.value("correction_width", c.correction_width);
  c.draft_fallback = j.value("draft_fallback", c.draft_fallback);
  if (c.beam_size < 1) throw ConfigError("decode.beam_size must be >= 1");
  if (c.draft_pool < 0) throw ConfigError("decode.draft_pool must be >= 0");
  if (c.correction_width < 1) throw ConfigError("decode.correction_width must be >= 1");
  return c;
}

DecodeResult decode_user(const model::Seq2Seq& m, const model::Encoded& user, const DecodeConfig& config,
                         const Lookup& lookup) {
  const int pool = config.draft_pool > 0 ? config.draft_pool : config.beam_size;
  const auto search = beam_search_draft(m, user, pool);
  std::vector<Beam> beams;
  beams.reserve(search.beams.size());
  for (const auto& d : search.beams) {
    Beam b;
    b.draft = d.tokens;
    b.base_score = d.score;
    beams.push_back(std::move(b));
  }
  reflect(m, user, beams);
  for (auto& b : beams) b.egrs_score = b.base_score + config.alpha * b.entropy;
  std::vector<Beam> drafts = beams;
  auto kept = egrs_rank(std::move(beams), config.alpha, config.beam_size);
  for (auto& b : kept) apply_skip_rule(b, m.config().code_length(), config.skip);
  correct_pass(m, user, kept, config.correction_width);
  DecodeResult out = finalize(std::move(kept), lookup, config.draft_fallback);
  out.drafts = std::move(drafts);
  out.truncated = search.truncated;
  return out;
}

DecodeResult decode_one_pass(const model::Seq2Seq& m, const model::Encoded& user, int beam_size,
                             const Lookup& lookup) {
  const auto search = beam_search_draft(m, user, beam_size);
  std::vector<Beam> beams;
  for (const auto& d : search.beams) {
    Beam b;
    b.draft = d.tokens;
    b.base_score = d.score;
    b.egrs_score = d.score;
    b.status = BeamStatus::kSkippedCorrect;
    b.final_tokens = d.tokens;
    beams.push_back(std::move(b));
  }
  DecodeResult out = finalize(std::move(beams), lookup);
  out.truncated = search.truncated;
  return out;
}

namespace {

nlohmann::json beam_json(const Beam& b) {
  nlohmann::json j = {{"draft", b.draft}, {"base", b.base_score}};
  if (!b.reflection.empty()) {
    j["loc"] = b.predicted_loc();
    j["sem"] = std::vector<int>(b.reflection.begin() + 1, b.reflection.end());
    j["entropy"] = b.entropy;
    j["egrs"] = b.egrs_score;
  }
  if (!b.final_tokens.empty()) {
    j["status"] = status_name(b.status);
    j["final"] = b.final_tokens;
    j["item"] = b.item;
    j["steps"] = b.correction_steps;
  }
  return j;
}

}  // namespace

nlohmann::json to_json(const DecodeResult& r, bool with_beams) {
  nlohmann::json ranked = nlohmann::json::array();
  for (const auto& x : r.ranked) ranked.push_back({x.item, x.score});
  nlohmann::json j = {{"ranked", ranked},           {"skipped", r.skipped},
                      {"corrected", r.corrected},   {"invalid", r.invalid},
                      {"duplicates", r.duplicates}, {"fallbacks", r.fallbacks}, {"correction_steps", r.correction_steps},
                      {"truncated", r.truncated}};
  if (with_beams) {
    j["beams"] = nlohmann::json::array();
    for (const auto& b : r.beams) j["beams"].push_back(beam_json(b));
    j["drafts"] = nlohmann::json::array();
    for (const auto& b : r.drafts) j["drafts"].push_back(beam_json(b));
  }
  return j;
}

}  // namespace grc::decode
