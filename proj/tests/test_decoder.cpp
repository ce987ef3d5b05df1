#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "grc/decoder.hpp"
#include "grc/ops.hpp"

using namespace grc;
using namespace grc::decode;
using model::ItemFeatures;
using model::ModelConfig;
using model::Seq2Seq;

namespace {

ModelConfig config_for(std::vector<int> vocab, std::vector<int> attrs = {3, 2}) {
  ModelConfig c;
  c.code_vocab = std::move(vocab);
  c.attribute_cardinality = std::move(attrs);
  c.embed_dim = 16;
  c.hidden_dim = 24;
  c.heads = 2;
  return c;
}

ItemFeatures random_features(int n, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ItemFeatures f;
  for (int i = 0; i < n; ++i) {
    std::vector<int> code, attrs;
    for (int v : c.code_vocab) code.push_back(std::uniform_int_distribution<int>(0, v - 1)(rng));
    for (int a : c.attribute_cardinality) attrs.push_back(std::uniform_int_distribution<int>(0, a - 1)(rng));
    f.codes.push_back(code);
    f.attributes.push_back(attrs);
  }
  return f;
}

model::Encoded user_of(const Seq2Seq& m, const ItemFeatures& f, std::vector<int> history) {
  ad::NoGradGuard g;
  return m.encode({std::move(history)}, f);
}

Lookup table_lookup(const ItemFeatures& f) {
  auto table = std::make_shared<std::map<std::vector<int>, int>>();
  for (std::size_t i = 0; i < f.codes.size(); ++i) table->emplace(f.codes[i], static_cast<int>(i));
  return [table](std::span<const int> code) -> std::optional<int> {
    auto it = table->find(std::vector<int>(code.begin(), code.end()));
    if (it == table->end()) return std::nullopt;
    return it->second;
  };
}

// log p(draft) from a full-template forward pass, summed over draft slots
double draft_logprob(const Seq2Seq& m, const model::Encoded& user, const std::vector<int>& draft) {
  ad::NoGradGuard g;
  const auto& c = m.config();
  model::TemplateTokens t;
  t.draft = draft;
  t.reflection.assign(static_cast<std::size_t>(c.num_attributes() + 1), 0);
  t.correction = draft;
  const auto out = m.forward_template(user, {t});
  double s = 0;
  for (int i = 0; i < c.code_length(); ++i) s += out.slot_logprobs[static_cast<std::size_t>(i)][static_cast<std::size_t>(draft[i])];
  return s;
}

void set_all(ad::Tensor& t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

Beam make_beam(std::vector<int> draft, double base, double entropy) {
  Beam b;
  b.draft = std::move(draft);
  b.base_score = base;
  b.entropy = entropy;
  b.reflection = {0};
  return b;
}

}  // namespace

TEST(BeamSearch, MatchesExhaustiveEnumeration) {
  const auto c = config_for({5, 5});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Seq2Seq m(c, seed);
    const auto f = random_features(12, c, seed + 10);
    const auto user = user_of(m, f, {0, 3, 7, 5});
    struct Seq {
      std::vector<int> tokens;
      double score;
    };
    std::vector<Seq> all;
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b) all.push_back({{a, b}, draft_logprob(m, user, {a, b})});
    std::sort(all.begin(), all.end(), [](const Seq& x, const Seq& y) {
      return x.score != y.score ? x.score > y.score : x.tokens < y.tokens;
    });
    const auto res = beam_search_draft(m, user, 25);
    ASSERT_EQ(res.beams.size(), 25u);
    EXPECT_FALSE(res.truncated);
    for (std::size_t i = 0; i < all.size(); ++i) {
      EXPECT_EQ(res.beams[i].tokens, all[i].tokens) << "seed " << seed << " rank " << i;
      EXPECT_NEAR(res.beams[i].score, all[i].score, 1e-12);
    }
  }
}

TEST(BeamSearch, WidthOneIsGreedy) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 4);
  const auto f = random_features(20, c, 5);
  const auto user = user_of(m, f, {1, 2, 3});
  ad::NoGradGuard g;
  std::vector<int> prefix;
  std::vector<int> ids{m.bos_id()};
  double score = 0;
  for (int t = 0; t < c.code_length(); ++t) {
    const auto lp = ad::log_softmax(m.step_logits(user, ids, ids.size(), {model::Segment::kDraft, t}));
    const auto d = lp.data();
    const int best = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
    score += d[static_cast<std::size_t>(best)];
    prefix.push_back(best);
    ids.push_back(m.input_id(t, best));
  }
  const auto res = beam_search_draft(m, user, 1);
  ASSERT_EQ(res.beams.size(), 1u);
  EXPECT_EQ(res.beams[0].tokens, prefix);
  EXPECT_NEAR(res.beams[0].score, score, 1e-12);
}

TEST(BeamSearch, SortedAndTruncated) {
  const auto c = config_for({5, 5});
  Seq2Seq m(c, 6);
  const auto f = random_features(10, c, 7);
  const auto user = user_of(m, f, {2, 4});
  const auto res = beam_search_draft(m, user, 40);
  EXPECT_TRUE(res.truncated);
  ASSERT_EQ(res.beams.size(), 25u);
  for (std::size_t i = 1; i < res.beams.size(); ++i) EXPECT_GE(res.beams[i - 1].score, res.beams[i].score);
  EXPECT_THROW(beam_search_draft(m, user, 0), ContractViolation);
}

TEST(Entropy, UniformAndOneHot) {
  const std::vector<double> u(5, 0.2);
  EXPECT_NEAR(entropy(u), std::log(5.0), 1e-12);
  const std::vector<double> one{0, 1, 0};
  EXPECT_EQ(entropy(one), 0.0);
}

TEST(Reflect, UniformSlotsGiveHandEntropy) {
  // L=4, K=2: loc slot is 5-way, two binary slots
  const auto c = config_for({3, 3, 3, 3}, {4, 3});
  Seq2Seq m(c, 8);
  for (const auto& name : m.params().names())
    if (name.rfind("head.loc", 0) == 0 || name.rfind("head.sem", 0) == 0) set_all(m.params().at(name), 0.0);
  const auto f = random_features(10, c, 9);
  const auto user = user_of(m, f, {1, 5});
  std::vector<Beam> beams{make_beam({0, 1, 2, 0}, 0, 0), make_beam({2, 2, 2, 2}, 0, 0)};
  reflect(m, user, beams);
  const double expected = (std::log(5.0) + 2 * std::log(2.0)) / 3.0;
  for (const auto& b : beams) {
    EXPECT_NEAR(b.entropy, expected, 1e-9);
    ASSERT_EQ(b.reflection.size(), 3u);
    EXPECT_EQ(b.reflection_probs[0].size(), 5u);
  }
}

TEST(Reflect, OneHotSlotsGiveZero) {
  const auto c = config_for({3, 3}, {4, 3});
  Seq2Seq m(c, 10);
  for (const auto& name : m.params().names()) {
    if (name.rfind("head.loc", 0) != 0 && name.rfind("head.sem", 0) != 0) continue;
    auto& t = m.params().at(name);
    set_all(t, 0.0);
    if (name.size() > 2 && name.substr(name.size() - 2) == ".b") t.mutable_data()[0] = 1e3;
  }
  const auto f = random_features(10, c, 11);
  const auto user = user_of(m, f, {3});
  std::vector<Beam> beams{make_beam({0, 1}, 0, 0)};
  reflect(m, user, beams);
  EXPECT_EQ(beams[0].entropy, 0.0);
  EXPECT_EQ(beams[0].reflection, (std::vector<int>{0, 0, 0}));
}

TEST(Reflect, EntropyWithinBounds) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 12);
  const auto f = random_features(30, c, 13);
  const auto user = user_of(m, f, {1, 2, 3, 4});
  const auto search = beam_search_draft(m, user, 15);
  std::vector<Beam> beams;
  for (const auto& d : search.beams) beams.push_back(make_beam(d.tokens, d.score, 0));
  reflect(m, user, beams);
  const double bound = (std::log(4.0) + std::log(2.0) * 2) / 3.0;
  for (const auto& b : beams) {
    EXPECT_GE(b.entropy, 0.0);
    EXPECT_LE(b.entropy, bound + 1e-12);
  }
}

TEST(EgrsRank, ZeroAlphaKeepsBaseOrder) {
  std::vector<Beam> beams{make_beam({1}, -3, 0.9), make_beam({2}, -1, 0.1), make_beam({3}, -2, 0.5)};
  const auto r = egrs_rank(beams, 0.0, 3);
  EXPECT_EQ(r[0].draft, std::vector<int>{2});
  EXPECT_EQ(r[1].draft, std::vector<int>{3});
  EXPECT_EQ(r[2].draft, std::vector<int>{1});
  for (const auto& b : r) EXPECT_EQ(b.egrs_score, b.base_score);
}

TEST(EgrsRank, EqualBasePrefersHigherEntropy) {
  std::vector<Beam> beams{make_beam({0, 0}, -2.0, 0.1), make_beam({1, 1}, -2.0, 0.7)};
  const auto r = egrs_rank(beams, 0.2, 2);
  EXPECT_EQ(r[0].draft, (std::vector<int>{1, 1}));
  EXPECT_NEAR(r[0].egrs_score, -2.0 + 0.2 * 0.7, 1e-15);
}

TEST(EgrsRank, MonotonePruning) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> U(-5, 0), H(0, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Beam> beams;
    for (int i = 0; i < 30; ++i) beams.push_back(make_beam({i}, U(rng), H(rng)));
    const auto kept = egrs_rank(beams, 0.2, 10);
    ASSERT_EQ(kept.size(), 10u);
    double worst_kept = kept.back().egrs_score;
    std::set<int> ids;
    for (const auto& b : kept) ids.insert(b.draft[0]);
    for (const auto& b : beams)
      if (!ids.count(b.draft[0])) EXPECT_LE(b.base_score + 0.2 * b.entropy, worst_kept);
  }
}

TEST(SkipRule, Modes) {
  Beam b = make_beam({1, 2, 3}, -1, 0);
  b.reflection = {3, 1, 1};
  apply_skip_rule(b, 3, SkipMode::kNormal);
  EXPECT_EQ(b.status, BeamStatus::kSkippedCorrect);
  EXPECT_EQ(b.final_tokens, b.draft);
  b.reflection = {0, 1, 1};
  apply_skip_rule(b, 3, SkipMode::kNormal);
  EXPECT_EQ(b.status, BeamStatus::kPending);
  apply_skip_rule(b, 3, SkipMode::kForceAll);
  EXPECT_EQ(b.status, BeamStatus::kSkippedCorrect);
  b.reflection = {3, 1, 1};
  apply_skip_rule(b, 3, SkipMode::kDisabled);
  EXPECT_EQ(b.status, BeamStatus::kPending);
  EXPECT_EQ(parse_skip_mode("force_all"), SkipMode::kForceAll);
  EXPECT_THROW(parse_skip_mode("sometimes"), ConfigError);
}

TEST(CorrectPass, StepBudgetAndSkippedBeams) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 15);
  const auto f = random_features(30, c, 16);
  const auto user = user_of(m, f, {5, 6, 7});
  const auto search = beam_search_draft(m, user, 8);
  std::vector<Beam> beams;
  for (const auto& d : search.beams) beams.push_back(make_beam(d.tokens, d.score, 0));
  reflect(m, user, beams);
  for (std::size_t i = 0; i < beams.size(); ++i) apply_skip_rule(beams[i], 3, i % 2 ? SkipMode::kForceAll : SkipMode::kDisabled);
  correct_pass(m, user, beams, 1);
  for (const auto& b : beams) {
    if (b.status == BeamStatus::kSkippedCorrect) {
      EXPECT_EQ(b.correction_steps, 0);
      EXPECT_EQ(b.final_tokens, b.draft);
    } else {
      EXPECT_EQ(b.status, BeamStatus::kCorrected);
      EXPECT_EQ(b.correction_steps, 3);
      EXPECT_EQ(b.final_tokens.size(), 3u);
    }
  }
}

TEST(CorrectPass, GreedyMatchesStepwiseArgmax) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 17);
  const auto f = random_features(30, c, 18);
  const auto user = user_of(m, f, {1, 9});
  std::vector<Beam> beams{make_beam({1, 2, 3}, 0, 0)};
  beams[0].reflection = {1, 0, 1};
  correct_pass(m, user, beams, 1);
  ad::NoGradGuard g;
  std::vector<int> corr;
  const auto& layout = m.layout();
  for (int t = 0; t < 3; ++t) {
    const int slot = layout.slot({model::Segment::kCorrection, t});
    const auto n = static_cast<std::size_t>(layout.predict_position(slot) + 1);
    const auto ids = m.template_input_ids({beams[0].draft, beams[0].reflection, corr}, n);
    const auto lg = m.step_logits(user, ids, n, {model::Segment::kCorrection, t});
    const auto d = lg.data();
    corr.push_back(static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin()));
  }
  EXPECT_EQ(beams[0].final_tokens, corr);
}

TEST(CorrectPass, WiderSearchScoresAtLeastGreedy) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 19);
  const auto f = random_features(30, c, 20);
  const auto user = user_of(m, f, {4, 2});
  auto score = [&](const Beam& b) {
    ad::NoGradGuard g;
    const auto out = m.forward_template(user, {{b.draft, b.reflection, b.final_tokens}});
    double s = 0;
    for (int t = 0; t < 3; ++t) {
      const int slot = m.layout().slot({model::Segment::kCorrection, t});
      s += out.slot_logprobs[static_cast<std::size_t>(slot)][static_cast<std::size_t>(b.final_tokens[t])];
    }
    return s;
  };
  std::vector<Beam> g1{make_beam({0, 1, 2}, 0, 0)}, g4 = g1;
  g1[0].reflection = g4[0].reflection = {2, 1, 0};
  correct_pass(m, user, g1, 1);
  correct_pass(m, user, g4, 4);
  EXPECT_EQ(g4[0].final_tokens.size(), 3u);
  EXPECT_GE(score(g4[0]), score(g1[0]) - 1e-12);
  EXPECT_EQ(g4[0].correction_steps, 3);
}

TEST(Finalize, DedupInvalidAndOrder) {
  ItemFeatures f;
  f.codes = {{0, 0}, {1, 1}, {2, 2}};
  f.attributes = {{0}, {0}, {0}};
  const auto lookup = table_lookup(f);
  std::vector<Beam> beams;
  auto add = [&](std::vector<int> fin, double egrs) {
    Beam b = make_beam(fin, egrs, 0);
    b.egrs_score = egrs;
    b.status = BeamStatus::kCorrected;
    b.final_tokens = fin;
    beams.push_back(b);
  };
  add({1, 1}, -2.0);
  add({1, 1}, -1.0);
  add({4, 4}, -0.5);
  add({0, 0}, -3.0);
  const auto r = finalize(beams, lookup);
  ASSERT_EQ(r.ranked.size(), 2u);
  EXPECT_EQ(r.ranked[0].item, 1);
  EXPECT_EQ(r.ranked[0].score, -1.0);
  EXPECT_EQ(r.ranked[1].item, 0);
  EXPECT_EQ(r.invalid, 1);
  EXPECT_EQ(r.duplicates, 1);
  EXPECT_EQ(r.corrected, 4);

  std::vector<Beam> bad{beams[2]};
  const auto empty = finalize(bad, lookup);
  EXPECT_TRUE(empty.ranked.empty());
  EXPECT_EQ(empty.invalid, 1);

  beams[0].status = BeamStatus::kPending;
  EXPECT_THROW(finalize(beams, lookup), ContractViolation);
}

TEST(Finalize, DraftFallbackFillsCollapsedBeams) {
  ItemFeatures f;
  f.codes = {{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  f.attributes = {{0}, {0}, {0}, {0}};
  const auto lookup = table_lookup(f);
  std::vector<Beam> beams;
  auto add = [&](std::vector<int> draft, std::vector<int> fin, double egrs) {
    Beam b;
    b.draft = std::move(draft);
    b.egrs_score = egrs;
    b.status = BeamStatus::kCorrected;
    b.final_tokens = std::move(fin);
    beams.push_back(b);
  };
  add({2, 0}, {1, 1}, -1.0);  // corrected to item 1
  add({2, 2}, {1, 1}, -2.0);  // collapses onto item 1, draft is item 2
  add({3, 3}, {4, 4}, -3.0);  // invalid correction, draft is item 3
  add({1, 1}, {1, 1}, -4.0);  // draft already ranked
  add({0, 0}, {0, 0}, -5.0);
  const auto plain = finalize(beams, lookup);
  ASSERT_EQ(plain.ranked.size(), 2u);
  EXPECT_EQ(plain.fallbacks, 0);
  const auto r = finalize(beams, lookup, true);
  ASSERT_EQ(r.ranked.size(), 4u);
  const std::vector<int> want{1, 2, 3, 0};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(r.ranked[i].item, want[i]);
  EXPECT_EQ(r.ranked[1].score, -2.0);
  EXPECT_EQ(r.fallbacks, 2);
  EXPECT_EQ(r.duplicates, 2);
  EXPECT_EQ(r.invalid, 1);
}

TEST(DecodeUser, DegeneratesToOnePass) {
  const auto c = config_for({5, 6, 4});
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Seq2Seq m(c, seed);
    const auto f = random_features(60, c, seed + 1);
    const auto lookup = table_lookup(f);
    const auto user = user_of(m, f, {3, 1, 4, 1, 5});
    DecodeConfig cfg;
    cfg.beam_size = 20;
    cfg.alpha = 0.0;
    cfg.skip = SkipMode::kForceAll;
    const auto a = decode_user(m, user, cfg, lookup);
    const auto b = decode_one_pass(m, user, 20, lookup);
    ASSERT_EQ(a.ranked.size(), b.ranked.size());
    for (std::size_t i = 0; i < a.ranked.size(); ++i) {
      EXPECT_EQ(a.ranked[i].item, b.ranked[i].item);
      EXPECT_EQ(a.ranked[i].score, b.ranked[i].score);
    }
    EXPECT_EQ(a.correction_steps, 0);
  }
}

TEST(DecodeUser, InvariantsAndBudget) {
  const auto c = config_for({5, 6, 4});
  Seq2Seq m(c, 24);
  const auto f = random_features(80, c, 25);
  const auto lookup = table_lookup(f);
  const auto user = user_of(m, f, {7, 8, 9});
  DecodeConfig cfg;
  cfg.beam_size = 10;
  cfg.draft_pool = 20;
  const auto r = decode_user(m, user, cfg, lookup);
  EXPECT_LE(r.ranked.size(), 10u);
  EXPECT_EQ(r.beams.size(), 10u);
  EXPECT_EQ(r.drafts.size(), 20u);
  std::set<int> items;
  for (const auto& x : r.ranked) EXPECT_TRUE(items.insert(x.item).second);
  EXPECT_LE(r.correction_steps, 3L * (10 - r.skipped));
  EXPECT_EQ(r.skipped + r.corrected, 10);
  for (const auto& b : r.beams) {
    EXPECT_DOUBLE_EQ(b.egrs_score, b.base_score + 0.2 * b.entropy);
    if (b.status == BeamStatus::kSkippedCorrect) EXPECT_EQ(b.final_tokens, b.draft);
  }
  for (std::size_t i = 1; i < r.ranked.size(); ++i) EXPECT_GE(r.ranked[i - 1].score, r.ranked[i].score);
  const auto j = to_json(r, true);
  EXPECT_EQ(j["beams"].size(), 10u);
  EXPECT_EQ(j["drafts"].size(), 20u);
}

TEST(DecodeConfig, JsonRoundTripAndValidation) {
  DecodeConfig c;
  c.beam_size = 7;
  c.skip = SkipMode::kDisabled;
  c.draft_fallback = false;
  const auto back = DecodeConfig::from_json(c.to_json());
  EXPECT_FALSE(back.draft_fallback);
  EXPECT_EQ(back.beam_size, 7);
  EXPECT_EQ(back.skip, SkipMode::kDisabled);
  EXPECT_THROW(DecodeConfig::from_json({{"beam_size", 0}}), ConfigError);
}
