#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "grc/model.hpp"
#include "grc/ops.hpp"
#include "grc/optim.hpp"

using namespace grc;
using namespace grc::model;
using ad::Tensor;

namespace {

constexpr int kL = 3;
constexpr int kK = 2;

ModelConfig small_config() {
  ModelConfig c;
  c.code_vocab = {5, 6, 4};
  c.attribute_cardinality = {3, 2};
  c.embed_dim = 16;
  c.hidden_dim = 24;
  c.heads = 2;
  return c;
}

ItemFeatures random_features(int n_items, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ItemFeatures f;
  for (int i = 0; i < n_items; ++i) {
    std::vector<int> code, attrs;
    for (int v : c.code_vocab) code.push_back(std::uniform_int_distribution<int>(0, v - 1)(rng));
    for (int a : c.attribute_cardinality) attrs.push_back(std::uniform_int_distribution<int>(0, a - 1)(rng));
    f.codes.push_back(code);
    f.attributes.push_back(attrs);
  }
  return f;
}

TemplateTokens random_template(const ModelConfig& c, std::mt19937_64& rng) {
  TemplateTokens t;
  for (int v : c.code_vocab) t.draft.push_back(std::uniform_int_distribution<int>(0, v - 1)(rng));
  t.reflection.push_back(std::uniform_int_distribution<int>(0, c.code_length())(rng));
  for (int k = 0; k < c.num_attributes(); ++k) t.reflection.push_back(std::uniform_int_distribution<int>(0, 1)(rng));
  for (int v : c.code_vocab) t.correction.push_back(std::uniform_int_distribution<int>(0, v - 1)(rng));
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Layout, LengthAndRoleTiling) {
  TemplateLayout layout(kL, kK);
  EXPECT_EQ(layout.length(), 2 * kL + kK + 4);
  std::vector<Segment> expected;
  for (int t = 0; t < kL; ++t) expected.push_back(Segment::kDraft);
  expected.push_back(Segment::kEof1);
  for (int j = 0; j <= kK; ++j) expected.push_back(Segment::kReflection);
  expected.push_back(Segment::kEof2);
  for (int t = 0; t < kL; ++t) expected.push_back(Segment::kCorrection);
  expected.push_back(Segment::kEof3);
  ASSERT_EQ(static_cast<int>(expected.size()), layout.length());
  for (int s = 0; s < layout.length(); ++s) {
    EXPECT_EQ(layout.role(s).segment, expected[s]) << s;
    EXPECT_EQ(layout.slot(layout.role(s)), s);
  }
  EXPECT_EQ(layout.supervised_slots().size(), static_cast<std::size_t>(2 * kL + kK + 1));
  EXPECT_THROW(layout.role(layout.length()), ContractViolation);
  EXPECT_EQ(ModelConfig{small_config()}.template_length(), 2 * kL + kK + 4);
}

TEST(Mask, TemplateMaskProperties) {
  TemplateLayout layout(kL, kK);
  const int n = layout.length();
  const auto allowed = template_mask_allowed(layout, n);
  auto pos = [&](Segment s, int i) { return layout.input_position(layout.slot({s, i})); };
  for (int j = 0; j <= kK; ++j) {
    const int pj = pos(Segment::kReflection, j);
    for (int j2 = 0; j2 <= kK; ++j2) EXPECT_EQ(allowed[pj][pos(Segment::kReflection, j2)], j == j2);
    for (int t = 0; t < kL; ++t) {
      EXPECT_TRUE(allowed[pj][pos(Segment::kDraft, t)]);
      EXPECT_FALSE(allowed[pj][pos(Segment::kCorrection, t)]);
      EXPECT_TRUE(allowed[pos(Segment::kCorrection, t)][pj]);
    }
    EXPECT_TRUE(allowed[pj][layout.eof1_position()]);
    EXPECT_TRUE(allowed[pj][0]);
  }
  for (int t = 0; t < kL; ++t)
    for (int t2 = 0; t2 < kL; ++t2) EXPECT_EQ(allowed[pos(Segment::kDraft, t)][pos(Segment::kDraft, t2)], t2 <= t);
  for (int p = 0; p < n; ++p)
    for (int q = p + 1; q < n; ++q) EXPECT_FALSE(allowed[p][q]);
  const Tensor m = template_mask(layout, n);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) EXPECT_EQ(m[static_cast<std::size_t>(p * n + q)], allowed[p][q] ? 0.0 : ad::kMaskedOut);
}

TEST(Encoder, OutputLengthAndDeterminism) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 1);
  const auto f = random_features(10, model.config(), 2);
  const auto e1 = model.encode({{4}}, f);
  EXPECT_EQ(e1.hidden.shape(), (ad::Shape{1, 1, 16}));
  const auto a = model.encode({{1, 2, 3}}, f);
  const auto b = model.encode({{1, 2, 3}}, f);
  EXPECT_EQ(values(a.hidden), values(b.hidden));
  const auto swapped = model.encode({{2, 1, 3}}, f);
  EXPECT_GT(max_abs_diff(a.hidden, swapped.hidden), 1e-6);
  for (double v : a.hidden.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encoder, EmptyHistoryIsContractViolation) {
  Seq2Seq model(small_config(), 1);
  const auto f = random_features(4, model.config(), 2);
  EXPECT_THROW(model.encode({{}}, f), ContractViolation);
  EXPECT_THROW(model.encode({{9}}, f), ContractViolation);
}

TEST(Encoder, PaddingDoesNotLeakIntoShortRows) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 1);
  const auto f = random_features(10, model.config(), 2);
  const auto alone = model.encode({{5, 6}}, f);
  const auto batched = model.encode({{5, 6}, {1, 2, 3, 4}}, f);
  std::vector<int> ids{0, model.input_id(0, 1)};
  const Tensor h1 = model.decode_hidden(alone, ids, 2);
  const auto row = std::vector<std::size_t>{0};
  const Tensor h2 = model.decode_hidden(batched.select(row), ids, 2);
  EXPECT_LT(max_abs_diff(h1, h2), 1e-12);
}

TEST(DecodeStep, VocabularyPerRole) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 3);
  const auto f = random_features(5, model.config(), 4);
  const auto enc = model.encode({{0, 1}}, f);
  const std::vector<int> bos{model.bos_id()};
  EXPECT_EQ(model.step_logits(enc, bos, 1, {Segment::kDraft, 0}).shape(), (ad::Shape{1, 5}));
  std::vector<int> pre{model.bos_id(), model.input_id(0, 1), model.input_id(1, 2), model.input_id(2, 3), model.input_id(3, 0)};
  EXPECT_EQ(model.step_logits(enc, pre, 5, {Segment::kReflection, 0}).dim(1), static_cast<std::size_t>(kL + 1));
  EXPECT_EQ(model.step_logits(enc, pre, 5, {Segment::kReflection, 2}).dim(1), 2u);
  EXPECT_THROW(model.step_logits(enc, pre, 5, {Segment::kDraft, 1}), ContractViolation);
  EXPECT_THROW(model.step_logits(enc, bos, 1, {Segment::kEof1, 0}), ContractViolation);
  std::vector<int> wrong{model.bos_id(), model.input_id(1, 0)};
  EXPECT_THROW(model.step_logits(enc, wrong, 2, {Segment::kDraft, 1}), ContractViolation);
  EXPECT_THROW(model.input_id(0, 5), ContractViolation);
}

TEST(ForwardTemplate, OutputCoversSupervisedSlots) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 5);
  const auto f = random_features(5, model.config(), 6);
  std::mt19937_64 rng(1);
  const auto enc = model.encode({{0, 1}, {3}}, f);
  const auto out = model.forward_template(enc, {random_template(model.config(), rng), random_template(model.config(), rng)});
  int defined = 0;
  for (int s = 0; s < model.layout().length(); ++s) {
    if (!out.slot_logprobs[s].defined()) {
      EXPECT_TRUE(model.layout().is_delimiter(s));
      continue;
    }
    ++defined;
    const auto& lp = out.slot_logprobs[s];
    EXPECT_EQ(lp.dim(1), static_cast<std::size_t>(model.vocab_size(model.layout().role(s))));
    for (std::size_t r = 0; r < 2; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < lp.dim(1); ++c) total += std::exp(lp[r * lp.dim(1) + c]);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
  EXPECT_EQ(defined, 2 * kL + kK + 1);
}

TEST(ForwardTemplate, MalformedTemplateIsContractViolation) {
  Seq2Seq model(small_config(), 5);
  const auto f = random_features(5, model.config(), 6);
  const auto enc = model.encode({{0}}, f);
  TemplateTokens t{{0, 0, 0}, {0, 0}, {0, 0, 0}};
  EXPECT_THROW(model.forward_template(enc, {t}), ContractViolation);
  t = {{0, 0, 9}, {0, 0, 0}, {0, 0, 0}};
  EXPECT_THROW(model.forward_template(enc, {t}), ContractViolation);
  t = {{0, 0, 0}, {kL + 1, 0, 0}, {0, 0, 0}};
  EXPECT_THROW(model.forward_template(enc, {t}), ContractViolation);
}

TEST(MaskIsolation, LaterTokensNeverChangeEarlierPositions) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 7);
  const auto f = random_features(6, model.config(), 8);
  const auto enc = model.encode({{1, 4, 2}}, f);
  std::mt19937_64 rng(9);
  const int n = model.layout().length();
  for (int trial = 0; trial < 20; ++trial) {
    const auto base = random_template(model.config(), rng);
    const auto alt = random_template(model.config(), rng);
    const auto ids_a = model.template_input_ids(base, static_cast<std::size_t>(n));
    const auto ids_b = model.template_input_ids(alt, static_cast<std::size_t>(n));
    // Splice: identical up to position p, different afterwards.
    const int p = std::uniform_int_distribution<int>(0, n - 1)(rng);
    std::vector<int> mixed = ids_a;
    for (int q = p + 1; q < n; ++q) mixed[q] = ids_b[q];
    const Tensor ha = model.decode_hidden(enc, ids_a, static_cast<std::size_t>(n));
    const Tensor hm = model.decode_hidden(enc, mixed, static_cast<std::size_t>(n));
    const auto d = static_cast<std::size_t>(model.config().embed_dim);
    for (int q = 0; q <= p; ++q)
      for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(ha[q * d + c], hm[q * d + c]) << "p=" << p << " q=" << q;
  }
}

TEST(MaskIsolation, ReflectionTokenDoesNotReachOtherReflectionPositions) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 7);
  const auto f = random_features(6, model.config(), 8);
  const auto enc = model.encode({{1, 4, 2}}, f);
  std::mt19937_64 rng(10);
  const auto& layout = model.layout();
  const int n = layout.length();
  const auto d = static_cast<std::size_t>(model.config().embed_dim);
  for (int j = 0; j <= kK; ++j) {
    auto base = random_template(model.config(), rng);
    auto flipped = base;
    flipped.reflection[j] = j == 0 ? (base.reflection[0] + 1) % (kL + 1) : 1 - base.reflection[j];
    const Tensor ha = model.decode_hidden(enc, model.template_input_ids(base, n), static_cast<std::size_t>(n));
    const Tensor hb = model.decode_hidden(enc, model.template_input_ids(flipped, n), static_cast<std::size_t>(n));
    for (int j2 = 0; j2 <= kK; ++j2) {
      const int q = layout.reflection_position(j2);
      double diff = 0;
      for (std::size_t c = 0; c < d; ++c) diff = std::max(diff, std::abs(ha[q * d + c] - hb[q * d + c]));
      if (j2 == j) {
        EXPECT_GT(diff, 0.0);
      } else {
        EXPECT_EQ(diff, 0.0) << "flipping slot " << j << " reached slot " << j2;
      }
    }
    // The correction segment does see the flipped label.
    const int c0 = layout.input_position(layout.slot({Segment::kCorrection, 0}));
    double cdiff = 0;
    for (std::size_t c = 0; c < d; ++c) cdiff = std::max(cdiff, std::abs(ha[c0 * d + c] - hb[c0 * d + c]));
    EXPECT_GT(cdiff, 0.0);
  }
}

TEST(Factorization, TemplateLogProbEqualsStepChain) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 11);
  const auto f = random_features(6, model.config(), 12);
  const auto enc = model.encode({{3, 0, 5}}, f);
  std::mt19937_64 rng(13);
  const auto& layout = model.layout();
  for (int trial = 0; trial < 3; ++trial) {
    const auto t = random_template(model.config(), rng);
    const auto out = model.forward_template(enc, {t});
    double whole = 0, chain = 0;
    for (int s : layout.supervised_slots()) {
      const PositionRole r = layout.role(s);
      const int target = r.segment == Segment::kDraft        ? t.draft[r.index]
                         : r.segment == Segment::kReflection ? t.reflection[r.index]
                                                             : t.correction[r.index];
      whole += out.slot_logprobs[s][static_cast<std::size_t>(target)];
      const auto n = static_cast<std::size_t>(layout.predict_position(s) + 1);
      const auto prefix = model.template_input_ids(t, n);
      const Tensor lp = ad::log_softmax(model.step_logits(enc, prefix, n, r));
      chain += lp[static_cast<std::size_t>(target)];
    }
    EXPECT_NEAR(whole, chain, 1e-9);
  }
}

TEST(Pretrain, InitialLossIsNearLogV) {
  ad::NoGradGuard g;
  ModelConfig c = small_config();
  c.code_vocab = {8, 8, 8};
  Seq2Seq model(c, 21);
  const auto f = random_features(30, c, 22);
  std::vector<std::vector<int>> hist, targets;
  for (int i = 0; i < 30; ++i) {
    hist.push_back({i, (i + 7) % 30});
    targets.push_back(f.codes[static_cast<std::size_t>((i + 3) % 30)]);
  }
  const double loss = model.pretrain_loss(model.encode(hist, f), targets).item();
  EXPECT_NEAR(loss, std::log(8.0), 0.05);
}

TEST(Pretrain, SingleExampleOverfits) {
  Seq2Seq model(small_config(), 31);
  const auto f = random_features(6, model.config(), 32);
  ad::Adam opt(model.params(), {.learning_rate = 1e-2});
  double loss = 0;
  for (int step = 0; step < 300; ++step) {
    opt.zero_grad();
    const Tensor l = model.pretrain_loss(model.encode({{1, 2}}, f), {f.codes[4]});
    loss = l.item();
    ad::backward(l);
    opt.step();
  }
  EXPECT_LT(loss, 0.01);
}

TEST(Pretrain, LossDecreasesOnStructuredCorpus) {
  // Target = code of the item after the last history item in a fixed cycle.
  Seq2Seq model(small_config(), 41);
  const int n = 24;
  const auto f = random_features(n, model.config(), 42);
  std::mt19937_64 rng(43);
  ad::Adam opt(model.params(), {.learning_rate = 3e-3});
  auto batch_loss = [&](bool train) {
    std::vector<std::vector<int>> hist, targets;
    for (int b = 0; b < 16; ++b) {
      const int start = std::uniform_int_distribution<int>(0, n - 1)(rng);
      hist.push_back({start, (start + 1) % n});
      targets.push_back(f.codes[static_cast<std::size_t>((start + 2) % n)]);
    }
    if (!train) {
      ad::NoGradGuard g;
      return model.pretrain_loss(model.encode(hist, f), targets).item();
    }
    opt.zero_grad();
    const Tensor l = model.pretrain_loss(model.encode(hist, f), targets);
    ad::backward(l);
    opt.step();
    return l.item();
  };
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += batch_loss(false);
  for (int step = 0; step < 200; ++step) batch_loss(true);
  for (int i = 0; i < 5; ++i) last += batch_loss(false);
  EXPECT_LT(last, 0.5 * first);
}

TEST(Gradients, ModelParametersMatchFiniteDifferences) {
  ModelConfig c = small_config();
  c.embed_dim = 8;
  c.hidden_dim = 8;
  Seq2Seq model(c, 51);
  const auto f = random_features(5, c, 52);
  std::mt19937_64 rng(53);
  const auto t = random_template(c, rng);
  auto loss_fn = [&] {
    const auto out = model.forward_template(model.encode({{0, 3}}, f), {t});
    Tensor total;
    for (int s : model.layout().supervised_slots()) {
      const PositionRole r = model.layout().role(s);
      const int target = r.segment == Segment::kDraft        ? t.draft[r.index]
                         : r.segment == Segment::kReflection ? t.reflection[r.index]
                                                             : t.correction[r.index];
      const std::vector<int> idx{target};
      const Tensor lp = ad::sum(ad::pick(out.slot_logprobs[s], idx));
      total = total.defined() ? ad::add(total, lp) : lp;
    }
    return ad::scale(total, -1.0);
  };
  model.params().zero_grad();
  ad::backward(loss_fn());
  for (const char* name : {"enc.code1", "enc.layer0.self.q.w", "dec.layer1.cross.v.w", "dec.layer0.ln1.g", "head.loc.w"}) {
    Tensor& p = model.params().at(name);
    const auto analytic = p.grad();
    auto v = p.mutable_data();
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      ad::NoGradGuard g;
      const double keep = v[i];
      v[i] = keep + 1e-5;
      const double up = loss_fn().item();
      v[i] = keep - 1e-5;
      const double down = loss_fn().item();
      v[i] = keep;
      const double num = (up - down) / 2e-5;
      diff += (num - analytic[i]) * (num - analytic[i]);
      norm += num * num;
    }
    EXPECT_LT(std::sqrt(diff), 1e-4 * std::max(std::sqrt(norm), 1e-8)) << name;
  }
}

TEST(Checkpoint, SaveLoadReproducesOutputs) {
  ad::NoGradGuard g;
  Seq2Seq model(small_config(), 61);
  const auto path = std::filesystem::temp_directory_path() / ("grc_model_" + std::to_string(::getpid()) + ".bin");
  model.save(path, {{"stage", "test"}});
  nlohmann::json header;
  Seq2Seq back = Seq2Seq::load(path, &header);
  EXPECT_EQ(header.at("stage"), "test");
  EXPECT_EQ(back.config().to_json(), model.config().to_json());
  const auto f = random_features(4, model.config(), 62);
  std::mt19937_64 rng(63);
  const auto t = random_template(model.config(), rng);
  const auto a = model.forward_template(model.encode({{1}}, f), {t});
  const auto b = back.forward_template(back.encode({{1}}, f), {t});
  for (int s : model.layout().supervised_slots()) EXPECT_EQ(values(a.slot_logprobs[s]), values(b.slot_logprobs[s]));
  std::filesystem::remove(path);
}
