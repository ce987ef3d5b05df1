#pragma once

// Encoder-decoder transformer over semantic codes with the
// draft / reflection / correction decoding template.
//
// Decoder positions (L = code length, K = attribute count):
//
//   0            BOS1
//   1..L         draft tokens
//   L+1          EOF1 (also opens the reflection segment)
//   L+2..L+K+2   reflection labels: localization, then one bit per attribute
//   L+K+3        EOF2 (opens the correction segment)
//   L+K+4..      correction tokens
//
// Position p holds template slot p-1, so the template of length 2L+K+4
// occupies exactly 2L+K+4 decoder positions. Draft, correction and delimiter
// slots are predicted by the preceding position. All K+1 reflection slots are
// predicted in parallel from the EOF1 position; reflection positions never
// attend to each other.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/params.hpp"
#include "grc/tensor.hpp"

namespace grc::model {

struct ModelConfig {
  std::vector<int> code_vocab;             // vocabulary per code position (L entries)
  std::vector<int> attribute_cardinality;  // buckets per attribute (K entries)
  int embed_dim = 32;
  int hidden_dim = 64;
  int encoder_layers = 1;
  int decoder_layers = 2;
  int heads = 2;
  int max_history = 20;

  int code_length() const { return static_cast<int>(code_vocab.size()); }
  int num_attributes() const { return static_cast<int>(attribute_cardinality.size()); }
  int reflection_slots() const { return num_attributes() + 1; }
  int template_length() const { return 2 * code_length() + num_attributes() + 4; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

enum class Segment { kDraft, kEof1, kReflection, kEof2, kCorrection, kEof3 };

struct PositionRole {
  Segment segment = Segment::kDraft;
  int index = 0;  // code level for draft/correction, slot for reflection
  bool operator==(const PositionRole&) const = default;
};

const char* segment_name(Segment s);

/// Slot/position bookkeeping of the three-segment template.
class TemplateLayout {
 public:
  TemplateLayout(int code_length, int num_attributes);

  int code_length() const { return L_; }
  int num_attributes() const { return K_; }
  int length() const { return 2 * L_ + K_ + 4; }

  PositionRole role(int slot) const;
  int slot(PositionRole role) const;
  /// Decoder position that carries the token of `slot`; -1 for EOF3.
  int input_position(int slot) const;
  /// Decoder position whose output distribution predicts `slot`.
  int predict_position(int slot) const;
  bool is_delimiter(int slot) const;
  /// Slots with a learned distribution, in template order.
  std::vector<int> supervised_slots() const;

  int eof1_position() const { return L_ + 1; }
  int reflection_position(int j) const { return L_ + 2 + j; }
  int eof2_position() const { return L_ + K_ + 3; }

 private:
  int L_;
  int K_;
};

/// Additive attention mask over decoder positions [0, n): causal, with
/// reflection positions blocked from each other.
ad::Tensor template_mask(const TemplateLayout& layout, int n);

/// Boolean view of template_mask: allowed[p][q].
std::vector<std::vector<bool>> template_mask_allowed(const TemplateLayout& layout, int n);

/// Per-item features visible to the encoder.
struct ItemFeatures {
  std::vector<std::vector<int>> codes;       // item -> code tokens
  std::vector<std::vector<int>> attributes;  // item -> attribute buckets
};

/// Template contents as class indices within each slot's vocabulary.
/// reflection[0] is the localization class (first divergence - 1, so the
/// value L means "fully correct"); reflection[1 + k] is attribute k's bit.
struct TemplateTokens {
  std::vector<int> draft;
  std::vector<int> reflection;
  std::vector<int> correction;
};

struct Encoded {
  ad::Tensor hidden;    // [b, m, d]
  ad::Tensor key_mask;  // [b, 1, m]
  std::size_t batch = 0;

  /// Rows in the given order (differentiable when hidden is).
  Encoded select(std::span<const std::size_t> rows) const;
};

/// Log-probabilities for every supervised template slot, [b, V_slot];
/// undefined tensors at delimiter slots.
struct TemplateOutput {
  std::vector<ad::Tensor> slot_logprobs;
};

class Seq2Seq {
 public:
  Seq2Seq(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const TemplateLayout& layout() const { return layout_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  /// Encodes histories (item ids) into hidden states. Empty histories are a
  /// contract violation; histories longer than max_history keep their tail.
  Encoded encode(const std::vector<std::vector<int>>& histories, const ItemFeatures& features) const;

  /// Decoder input id of the token held by `slot` with class `value`.
  int input_id(int slot, int value) const;
  int bos_id() const { return 0; }

  /// Decoder hidden states for input ids [b, n] laid out per template positions.
  ad::Tensor decode_hidden(const Encoded& enc, std::span<const int> input_ids, std::size_t n) const;

  /// Logits [b, V] for the slot with `role`, given decoder inputs [b, n].
  /// The prefix must end at that slot's predicting position.
  ad::Tensor step_logits(const Encoded& enc, std::span<const int> prefix_ids, std::size_t n, PositionRole role) const;

  /// All K+1 reflection logits from one pass over [BOS1, draft, EOF1].
  std::vector<ad::Tensor> reflection_logits(const Encoded& enc, const std::vector<std::vector<int>>& drafts) const;

  /// Decoder input ids for a (possibly partial) template; stops at `n` positions.
  std::vector<int> template_input_ids(const TemplateTokens& tokens, std::size_t n) const;

  /// One teacher-forced pass over full templates.
  TemplateOutput forward_template(const Encoded& enc, const std::vector<TemplateTokens>& templates) const;

  /// Mean next-token NLL of the target codes with teacher forcing.
  ad::Tensor pretrain_loss(const Encoded& enc, const std::vector<std::vector<int>>& targets) const;

  /// Logits at decoder position `pos` of hidden [b, n, d] for `role`'s head.
  ad::Tensor head_logits(const ad::Tensor& hidden, int pos, PositionRole role) const;

  int vocab_size(PositionRole role) const;

  /// Deep copy; plain copies share parameter storage.
  Seq2Seq clone() const;

  void save(const std::filesystem::path& path, nlohmann::json header) const;
  /// Reads the model config from the checkpoint header and restores weights.
  static Seq2Seq load(const std::filesystem::path& path, nlohmann::json* header = nullptr);

 private:
  struct Attention {
    std::string prefix;
  };

  ad::Tensor linear(const ad::Tensor& x, const std::string& name) const;
  ad::Tensor attention(const ad::Tensor& q_in, const ad::Tensor& kv_in, const std::string& name,
                       const ad::Tensor& mask) const;
  ad::Tensor feed_forward(const ad::Tensor& x, const std::string& name) const;
  ad::Tensor norm(const ad::Tensor& x, const std::string& name) const;
  const ad::Tensor& positional(std::size_t n) const;
  const ad::Tensor& decoder_mask(std::size_t n) const;

  ModelConfig config_;
  TemplateLayout layout_;
  ad::ParameterStore params_;
  std::vector<int> level_offset_;
  int loc_offset_ = 0;
  int sem_offset_ = 0;
  int decoder_vocab_ = 0;
  mutable std::vector<ad::Tensor> positional_cache_;
  mutable std::vector<ad::Tensor> mask_cache_;
};

}  // namespace grc::model
