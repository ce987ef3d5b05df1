#include "grc/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "grc/ops.hpp"

namespace grc::model {

using ad::Tensor;

void ModelConfig::validate() const {
  if (code_vocab.empty()) throw ConfigError("model: code length must be >= 1");
  if (attribute_cardinality.empty()) throw ConfigError("model: at least one attribute is required");
  for (int v : code_vocab)
    if (v < 1) throw ConfigError("model: code vocabularies must be non-empty");
  for (int c : attribute_cardinality)
    if (c < 1) throw ConfigError("model: attribute cardinalities must be positive");
  if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("model: embed_dim must be even and >= 2");
  if (heads < 1 || embed_dim % heads != 0) throw ConfigError("model: embed_dim must be divisible by heads");
  if (hidden_dim < 1 || encoder_layers < 1 || decoder_layers < 1) throw ConfigError("model: bad layer sizes");
  if (max_history < 1) throw ConfigError("model: max_history must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"code_vocab", code_vocab},       {"attribute_cardinality", attribute_cardinality},
          {"embed_dim", embed_dim},         {"hidden_dim", hidden_dim},
          {"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers},
          {"heads", heads},                 {"max_history", max_history}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.code_vocab = j.at("code_vocab").get<std::vector<int>>();
  c.attribute_cardinality = j.at("attribute_cardinality").get<std::vector<int>>();
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.heads = j.value("heads", c.heads);
  c.max_history = j.value("max_history", c.max_history);
  c.validate();
  return c;
}

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::kDraft: return "draft";
    case Segment::kEof1: return "eof1";
    case Segment::kReflection: return "reflection";
    case Segment::kEof2: return "eof2";
    case Segment::kCorrection: return "correction";
    case Segment::kEof3: return "eof3";
  }
  return "?";
}

// ---------------------------------------------------------------- layout

TemplateLayout::TemplateLayout(int code_length, int num_attributes) : L_(code_length), K_(num_attributes) {
  if (L_ < 1 || K_ < 1) throw ContractViolation("template layout needs L >= 1 and K >= 1");
}

PositionRole TemplateLayout::role(int s) const {
  if (s < 0 || s >= length()) throw ContractViolation("template slot out of range: " + std::to_string(s));
  if (s < L_) return {Segment::kDraft, s};
  if (s == L_) return {Segment::kEof1, 0};
  if (s <= L_ + K_ + 1) return {Segment::kReflection, s - L_ - 1};
  if (s == L_ + K_ + 2) return {Segment::kEof2, 0};
  if (s < 2 * L_ + K_ + 3) return {Segment::kCorrection, s - L_ - K_ - 3};
  return {Segment::kEof3, 0};
}

int TemplateLayout::slot(PositionRole r) const {
  auto check = [&](int lo, int hi) {
    if (r.index < lo || r.index >= hi)
      throw ContractViolation(std::string("role index out of range for ") + segment_name(r.segment));
  };
  switch (r.segment) {
    case Segment::kDraft: check(0, L_); return r.index;
    case Segment::kEof1: return L_;
    case Segment::kReflection: check(0, K_ + 1); return L_ + 1 + r.index;
    case Segment::kEof2: return L_ + K_ + 2;
    case Segment::kCorrection: check(0, L_); return L_ + K_ + 3 + r.index;
    case Segment::kEof3: return 2 * L_ + K_ + 3;
  }
  throw ContractViolation("unknown segment");
}

int TemplateLayout::input_position(int s) const {
  role(s);
  return s + 1 < length() ? s + 1 : -1;
}

int TemplateLayout::predict_position(int s) const {
  const PositionRole r = role(s);
  if (r.segment == Segment::kReflection) return eof1_position();
  return s;
}

bool TemplateLayout::is_delimiter(int s) const {
  const Segment seg = role(s).segment;
  return seg == Segment::kEof1 || seg == Segment::kEof2 || seg == Segment::kEof3;
}

std::vector<int> TemplateLayout::supervised_slots() const {
  std::vector<int> out;
  for (int s = 0; s < length(); ++s)
    if (!is_delimiter(s)) out.push_back(s);
  return out;
}

std::vector<std::vector<bool>> template_mask_allowed(const TemplateLayout& layout, int n) {
  if (n < 1 || n > layout.length()) throw ContractViolation("template mask size out of range");
  const int first = layout.reflection_position(0);
  const int last = layout.reflection_position(layout.num_attributes());
  auto is_reflection = [&](int p) { return p >= first && p <= last; };
  std::vector<std::vector<bool>> allowed(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n)));
  for (int p = 0; p < n; ++p)
    for (int q = 0; q <= p; ++q)
      allowed[p][q] = !(p != q && is_reflection(p) && is_reflection(q));
  return allowed;
}

Tensor template_mask(const TemplateLayout& layout, int n) {
  const auto allowed = template_mask_allowed(layout, n);
  std::vector<double> v(static_cast<std::size_t>(n) * n, ad::kMaskedOut);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q)
      if (allowed[p][q]) v[static_cast<std::size_t>(p) * n + q] = 0.0;
  return Tensor::from({static_cast<std::size_t>(n), static_cast<std::size_t>(n)}, std::move(v));
}

Encoded Encoded::select(std::span<const std::size_t> rows) const {
  Encoded out;
  out.hidden = ad::gather_rows(hidden, rows);
  out.key_mask = ad::gather_rows(key_mask, rows);
  out.batch = rows.size();
  return out;
}

// ---------------------------------------------------------------- model

namespace {

std::string idx(const std::string& base, int i) { return base + std::to_string(i); }

}  // namespace

Seq2Seq::Seq2Seq(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), layout_((config_.validate(), config_.code_length()), config_.num_attributes()) {
  const int L = config_.code_length();
  const int K = config_.num_attributes();
  const auto d = static_cast<std::size_t>(config_.embed_dim);
  const auto hdim = static_cast<std::size_t>(config_.hidden_dim);

  level_offset_.resize(static_cast<std::size_t>(L));
  int next = 4;  // BOS1, EOF1, EOF2, EOF3
  for (int t = 0; t < L; ++t) {
    level_offset_[t] = next;
    next += config_.code_vocab[t];
  }
  loc_offset_ = next;
  next += L + 1;
  sem_offset_ = next;
  next += 2 * K;
  decoder_vocab_ = next;

  std::mt19937_64 rng(seed);
  const double emb_std = 0.3;
  const double head_std = 0.02;
  auto proj_std = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out, double std) {
    params_.add(name + ".w", {in, out}, std, rng);
    params_.add_constant(name + ".b", {out}, 0.0);
  };
  auto add_norm = [&](const std::string& name) {
    params_.add_constant(name + ".g", {d}, 1.0);
    params_.add_constant(name + ".b", {d}, 0.0);
  };
  auto add_attention = [&](const std::string& name) {
    for (const char* p : {".q", ".k", ".v", ".o"}) add_linear(name + p, d, d, proj_std(d));
  };
  auto add_ffn = [&](const std::string& name) {
    add_linear(name + ".in", d, hdim, proj_std(d));
    add_linear(name + ".out", hdim, d, proj_std(hdim));
  };

  for (int t = 0; t < L; ++t)
    params_.add(idx("enc.code", t), {static_cast<std::size_t>(config_.code_vocab[t]), d}, emb_std, rng);
  for (int k = 0; k < K; ++k)
    params_.add(idx("enc.attr", k), {static_cast<std::size_t>(config_.attribute_cardinality[k]), d}, emb_std, rng);
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = idx("enc.layer", l);
    add_norm(p + ".ln1");
    add_attention(p + ".self");
    add_norm(p + ".ln2");
    add_ffn(p + ".ffn");
  }
  add_norm("enc.ln");

  params_.add("dec.tok", {static_cast<std::size_t>(decoder_vocab_), d}, emb_std, rng);
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = idx("dec.layer", l);
    add_norm(p + ".ln1");
    add_attention(p + ".self");
    add_norm(p + ".ln2");
    add_attention(p + ".cross");
    add_norm(p + ".ln3");
    add_ffn(p + ".ffn");
  }
  add_norm("dec.ln");

  for (int t = 0; t < L; ++t) add_linear(idx("head.level", t), d, static_cast<std::size_t>(config_.code_vocab[t]), head_std);
  add_linear("head.loc", d, static_cast<std::size_t>(L + 1), head_std);
  for (int k = 0; k < K; ++k) add_linear(idx("head.sem", k), d, 2, head_std);
}

int Seq2Seq::vocab_size(PositionRole role) const {
  switch (role.segment) {
    case Segment::kDraft:
    case Segment::kCorrection:
      layout_.slot(role);
      return config_.code_vocab[role.index];
    case Segment::kReflection:
      layout_.slot(role);
      return role.index == 0 ? config_.code_length() + 1 : 2;
    default:
      return 0;
  }
}

int Seq2Seq::input_id(int s, int value) const {
  const PositionRole r = layout_.role(s);
  const int v = vocab_size(r);
  if (v > 0 && (value < 0 || value >= v))
    throw ContractViolation(std::string("token value out of vocabulary at ") + segment_name(r.segment) + " slot " +
                            std::to_string(s));
  switch (r.segment) {
    case Segment::kDraft:
    case Segment::kCorrection: return level_offset_[r.index] + value;
    case Segment::kEof1: return 1;
    case Segment::kReflection: return r.index == 0 ? loc_offset_ + value : sem_offset_ + 2 * (r.index - 1) + value;
    case Segment::kEof2: return 2;
    case Segment::kEof3: return 3;
  }
  throw ContractViolation("unknown segment");
}

Tensor Seq2Seq::linear(const Tensor& x, const std::string& name) const {
  return ad::add(ad::matmul(x, params_.at(name + ".w")), params_.at(name + ".b"));
}

Tensor Seq2Seq::norm(const Tensor& x, const std::string& name) const {
  return ad::layer_norm(x, params_.at(name + ".g"), params_.at(name + ".b"));
}

Tensor Seq2Seq::feed_forward(const Tensor& x, const std::string& name) const {
  return linear(ad::gelu(linear(x, name + ".in")), name + ".out");
}

Tensor Seq2Seq::attention(const Tensor& q_in, const Tensor& kv_in, const std::string& name, const Tensor& mask) const {
  const Tensor q = linear(q_in, name + ".q");
  const Tensor k = linear(kv_in, name + ".k");
  const Tensor v = linear(kv_in, name + ".v");
  const auto heads = static_cast<std::size_t>(config_.heads);
  const std::size_t dh = static_cast<std::size_t>(config_.embed_dim) / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ad::slice(q, 2, h * dh, dh);
    const Tensor kh = ad::slice(k, 2, h * dh, dh);
    const Tensor vh = ad::slice(v, 2, h * dh, dh);
    Tensor scores = ad::scale(ad::matmul(qh, ad::transpose_last2(kh)), inv);
    scores = ad::masked_fill(scores, mask);
    outs.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  const Tensor merged = heads == 1 ? outs[0] : ad::concat(outs, 2);
  return linear(merged, name + ".o");
}

const Tensor& Seq2Seq::positional(std::size_t n) const {
  if (positional_cache_.size() <= n) positional_cache_.resize(n + 1);
  Tensor& pe = positional_cache_[n];
  if (!pe.defined()) {
    const auto d = static_cast<std::size_t>(config_.embed_dim);
    std::vector<double> v(n * d);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < d; i += 2) {
        const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        v[p * d + i] = std::sin(angle);
        v[p * d + i + 1] = std::cos(angle);
      }
    pe = Tensor::from({n, d}, std::move(v));
  }
  return pe;
}

const Tensor& Seq2Seq::decoder_mask(std::size_t n) const {
  if (mask_cache_.size() <= n) mask_cache_.resize(n + 1);
  Tensor& m = mask_cache_[n];
  if (!m.defined()) m = template_mask(layout_, static_cast<int>(n));
  return m;
}

Encoded Seq2Seq::encode(const std::vector<std::vector<int>>& histories, const ItemFeatures& features) const {
  if (histories.empty()) throw ContractViolation("encode: empty batch");
  const auto cap = static_cast<std::size_t>(config_.max_history);
  std::size_t m = 0;
  for (const auto& h : histories) {
    if (h.empty()) throw ContractViolation("encode: empty history");
    m = std::max(m, std::min(h.size(), cap));
  }
  const std::size_t b = histories.size();
  const int L = config_.code_length();
  const int K = config_.num_attributes();
  std::vector<std::vector<int>> code_ids(static_cast<std::size_t>(L), std::vector<int>(b * m, 0));
  std::vector<std::vector<int>> attr_ids(static_cast<std::size_t>(K), std::vector<int>(b * m, 0));
  std::vector<double> key(b * m, ad::kMaskedOut);
  for (std::size_t r = 0; r < b; ++r) {
    const auto& h = histories[r];
    const std::size_t len = std::min(h.size(), cap);
    const std::size_t start = h.size() - len;
    for (std::size_t p = 0; p < len; ++p) {
      const int item = h[start + p];
      if (item < 0 || static_cast<std::size_t>(item) >= features.codes.size())
        throw ContractViolation("encode: unknown item " + std::to_string(item));
      const auto& code = features.codes[static_cast<std::size_t>(item)];
      const auto& attrs = features.attributes.at(static_cast<std::size_t>(item));
      if (code.size() != static_cast<std::size_t>(L) || attrs.size() != static_cast<std::size_t>(K))
        throw ContractViolation("encode: item features do not match the model config");
      for (int t = 0; t < L; ++t) code_ids[t][r * m + p] = code[t];
      for (int k = 0; k < K; ++k) attr_ids[k][r * m + p] = attrs[k];
      key[r * m + p] = 0.0;
    }
  }
  Tensor x;
  for (int t = 0; t < L; ++t) {
    Tensor e = ad::embedding(params_.at(idx("enc.code", t)), code_ids[t], {b, m});
    x = x.defined() ? ad::add(x, e) : e;
  }
  for (int k = 0; k < K; ++k) x = ad::add(x, ad::embedding(params_.at(idx("enc.attr", k)), attr_ids[k], {b, m}));
  x = ad::add(x, positional(m));

  Encoded out;
  out.key_mask = Tensor::from({b, 1, m}, std::move(key));
  out.batch = b;
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = idx("enc.layer", l);
    const Tensor n1 = norm(x, p + ".ln1");
    x = ad::add(x, attention(n1, n1, p + ".self", out.key_mask));
    x = ad::add(x, feed_forward(norm(x, p + ".ln2"), p + ".ffn"));
  }
  out.hidden = norm(x, "enc.ln");
  return out;
}

Tensor Seq2Seq::decode_hidden(const Encoded& enc, std::span<const int> input_ids, std::size_t n) const {
  const std::size_t b = enc.batch;
  if (n < 1 || n > static_cast<std::size_t>(layout_.length()))
    throw ContractViolation("decoder input length out of range: " + std::to_string(n));
  if (input_ids.size() != b * n) throw ContractViolation("decoder input ids do not match batch x length");
  for (int id : input_ids)
    if (id < 0 || id >= decoder_vocab_) throw ContractViolation("decoder input id out of range");
  Tensor y = ad::add(ad::embedding(params_.at("dec.tok"), input_ids, {b, n}), positional(n));
  const Tensor& mask = decoder_mask(n);
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = idx("dec.layer", l);
    const Tensor n1 = norm(y, p + ".ln1");
    y = ad::add(y, attention(n1, n1, p + ".self", mask));
    y = ad::add(y, attention(norm(y, p + ".ln2"), enc.hidden, p + ".cross", enc.key_mask));
    y = ad::add(y, feed_forward(norm(y, p + ".ln3"), p + ".ffn"));
  }
  return norm(y, "dec.ln");
}

Tensor Seq2Seq::head_logits(const Tensor& hidden, int pos, PositionRole role) const {
  const std::size_t b = hidden.dim(0);
  const std::size_t d = hidden.dim(2);
  const Tensor row = ad::reshape(ad::slice(hidden, 1, static_cast<std::size_t>(pos), 1), {b, d});
  switch (role.segment) {
    case Segment::kDraft:
    case Segment::kCorrection: return linear(row, idx("head.level", role.index));
    case Segment::kReflection:
      return role.index == 0 ? linear(row, "head.loc") : linear(row, idx("head.sem", role.index - 1));
    default: throw ContractViolation(std::string("no output head for ") + segment_name(role.segment));
  }
}

namespace {

void check_prefix(const Seq2Seq& model, std::span<const int> ids, std::size_t b, std::size_t n) {
  // Every position must carry a token admissible for its template slot.
  const auto& layout = model.layout();
  for (std::size_t r = 0; r < b; ++r) {
    if (ids[r * n] != model.bos_id()) throw ContractViolation("decoder prefix must start with BOS1");
    for (std::size_t p = 1; p < n; ++p) {
      const int s = static_cast<int>(p) - 1;
      const PositionRole role = layout.role(s);
      const int v = model.vocab_size(role);
      const int lo = model.input_id(s, 0);
      const int hi = lo + std::max(v, 1);
      const int id = ids[r * n + p];
      if (id < lo || id >= hi)
        throw ContractViolation(std::string("decoder prefix token does not fit its role (") +
                                segment_name(role.segment) + ")");
    }
  }
}

}  // namespace

Tensor Seq2Seq::step_logits(const Encoded& enc, std::span<const int> prefix_ids, std::size_t n,
                            PositionRole role) const {
  const int s = layout_.slot(role);
  if (layout_.is_delimiter(s)) throw ContractViolation("delimiter slots have no output distribution");
  if (static_cast<std::size_t>(layout_.predict_position(s)) + 1 != n)
    throw ContractViolation(std::string("prefix length does not precede role ") + segment_name(role.segment) + "(" +
                            std::to_string(role.index) + ")");
  if (prefix_ids.size() != enc.batch * n) throw ContractViolation("prefix ids do not match batch x length");
  check_prefix(*this, prefix_ids, enc.batch, n);
  const Tensor hidden = decode_hidden(enc, prefix_ids, n);
  return head_logits(hidden, static_cast<int>(n) - 1, role);
}

std::vector<Tensor> Seq2Seq::reflection_logits(const Encoded& enc, const std::vector<std::vector<int>>& drafts) const {
  const int L = config_.code_length();
  if (drafts.size() != enc.batch) throw ContractViolation("reflection: one draft per encoded row required");
  const auto n = static_cast<std::size_t>(layout_.eof1_position() + 1);
  std::vector<int> ids;
  ids.reserve(enc.batch * n);
  for (const auto& draft : drafts) {
    if (draft.size() != static_cast<std::size_t>(L)) throw ContractViolation("reflection: draft length != L");
    ids.push_back(bos_id());
    for (int t = 0; t < L; ++t) ids.push_back(input_id(t, draft[t]));
    ids.push_back(input_id(L, 0));
  }
  const Tensor hidden = decode_hidden(enc, ids, n);
  std::vector<Tensor> out;
  for (int j = 0; j <= config_.num_attributes(); ++j)
    out.push_back(head_logits(hidden, layout_.eof1_position(), {Segment::kReflection, j}));
  return out;
}

std::vector<int> Seq2Seq::template_input_ids(const TemplateTokens& tokens, std::size_t n) const {
  const int L = config_.code_length();
  const int K = config_.num_attributes();
  if (n < 1 || n > static_cast<std::size_t>(layout_.length())) throw ContractViolation("template prefix length out of range");
  std::vector<int> ids{bos_id()};
  for (std::size_t p = 1; p < n; ++p) {
    const int s = static_cast<int>(p) - 1;
    const PositionRole r = layout_.role(s);
    int value = 0;
    switch (r.segment) {
      case Segment::kDraft:
        if (tokens.draft.size() != static_cast<std::size_t>(L)) throw ContractViolation("template draft length != L");
        value = tokens.draft[r.index];
        break;
      case Segment::kReflection:
        if (tokens.reflection.size() != static_cast<std::size_t>(K + 1))
          throw ContractViolation("template reflection length != K+1");
        value = tokens.reflection[r.index];
        break;
      case Segment::kCorrection:
        if (tokens.correction.size() < static_cast<std::size_t>(r.index + 1))
          throw ContractViolation("template correction too short");
        value = tokens.correction[r.index];
        break;
      default: break;
    }
    ids.push_back(input_id(s, value));
  }
  return ids;
}

TemplateOutput Seq2Seq::forward_template(const Encoded& enc, const std::vector<TemplateTokens>& templates) const {
  if (templates.size() != enc.batch) throw ContractViolation("forward_template: one template per encoded row");
  const int L = config_.code_length();
  const int K = config_.num_attributes();
  const auto n = static_cast<std::size_t>(layout_.length());
  std::vector<int> ids;
  ids.reserve(enc.batch * n);
  for (const auto& t : templates) {
    if (t.draft.size() != static_cast<std::size_t>(L) || t.reflection.size() != static_cast<std::size_t>(K + 1) ||
        t.correction.size() != static_cast<std::size_t>(L))
      throw ContractViolation("forward_template: malformed template");
    const auto row = template_input_ids(t, n);
    ids.insert(ids.end(), row.begin(), row.end());
  }
  const Tensor hidden = decode_hidden(enc, ids, n);
  TemplateOutput out;
  out.slot_logprobs.resize(n);
  for (int s : layout_.supervised_slots())
    out.slot_logprobs[s] = ad::log_softmax(head_logits(hidden, layout_.predict_position(s), layout_.role(s)));
  return out;
}

Tensor Seq2Seq::pretrain_loss(const Encoded& enc, const std::vector<std::vector<int>>& targets) const {
  const int L = config_.code_length();
  if (targets.size() != enc.batch) throw ContractViolation("pretrain: one target per encoded row");
  const auto n = static_cast<std::size_t>(L);
  std::vector<int> ids;
  ids.reserve(enc.batch * n);
  for (const auto& z : targets) {
    if (z.size() != n) throw ContractViolation("pretrain: target length != L");
    ids.push_back(bos_id());
    for (int t = 0; t + 1 < L; ++t) ids.push_back(input_id(t, z[t]));
  }
  const Tensor hidden = decode_hidden(enc, ids, n);
  Tensor total;
  for (int t = 0; t < L; ++t) {
    std::vector<int> col(enc.batch);
    for (std::size_t r = 0; r < enc.batch; ++r) col[r] = targets[r][t];
    const Tensor ce = ad::cross_entropy(head_logits(hidden, t, {Segment::kDraft, t}), col);
    total = total.defined() ? ad::add(total, ce) : ce;
  }
  return ad::scale(total, 1.0 / L);
}

void Seq2Seq::save(const std::filesystem::path& path, nlohmann::json header) const {
  header["model_config"] = config_.to_json();
  ad::save_checkpoint(path, params_, header);
}

Seq2Seq Seq2Seq::load(const std::filesystem::path& path, nlohmann::json* header) {
  const ad::LoadedCheckpoint ckpt = ad::read_checkpoint(path);
  if (!ckpt.header.contains("model_config")) throw ConfigError("checkpoint has no model_config: " + path.string());
  Seq2Seq model(ModelConfig::from_json(ckpt.header.at("model_config")), 0);
  nlohmann::json h = ad::load_checkpoint(path, model.params_);
  if (header) *header = std::move(h);
  return model;
}

Seq2Seq Seq2Seq::clone() const {
  Seq2Seq out = *this;
  out.params_ = params_.clone();
  return out;
}

}  // namespace grc::model
