#include "grc/training.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "grc/ops.hpp"
#include "grc/optim.hpp"

namespace grc::train {

model::ItemFeatures make_item_features(const tok::Tokenizer& tokenizer, const data::Catalog& catalog) {
  if (tokenizer.num_items() != catalog.size()) throw ContractViolation("tokenizer and catalog sizes differ");
  model::ItemFeatures f;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    f.codes.push_back(tokenizer.item_code(static_cast<int>(i)));
    f.attributes.push_back(catalog.items[i].attributes);
  }
  return f;
}

model::ModelConfig model_config_for(const tok::Tokenizer& tokenizer, const data::Catalog& catalog,
                                    const nlohmann::json& sizes) {
  nlohmann::json j = sizes;
  j["code_vocab"] = tokenizer.code_vocab();
  j["attribute_cardinality"] = catalog.attribute_cardinality;
  return model::ModelConfig::from_json(j);
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

nlohmann::json PretrainOptions::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"max_grad_norm", max_grad_norm}, {"seed", seed}};
}

PretrainOptions PretrainOptions::from_json(const nlohmann::json& j) {
  PretrainOptions o;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.max_grad_norm = j.value("max_grad_norm", o.max_grad_norm);
  o.seed = j.value("seed", o.seed);
  if (o.epochs < 0 || o.batch_size < 1 || o.learning_rate <= 0) throw ConfigError("pretrain: bad epochs/batch/lr");
  return o;
}

std::vector<EpochStats> pretrain(model::Seq2Seq& model, const std::vector<data::Example>& examples,
                                 const model::ItemFeatures& features, const tok::Tokenizer& tokenizer,
                                 const PretrainOptions& options, const Progress& progress) {
  if (examples.empty()) throw ConfigError("pretrain: no training examples");
  std::mt19937_64 rng(options.seed);
  ad::Adam opt(model.params(), {.learning_rate = options.learning_rate, .max_grad_norm = options.max_grad_norm});
  std::vector<EpochStats> curve;
  const auto bs = static_cast<std::size_t>(options.batch_size);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = shuffled(examples.size(), rng);
    EpochStats st{epoch + 1, 0.0, 0};
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<std::vector<int>> hist, targets;
      for (std::size_t i = start; i < end; ++i) {
        hist.push_back(examples[order[i]].history);
        targets.push_back(tokenizer.item_code(examples[order[i]].target));
      }
      opt.zero_grad();
      const ad::Tensor loss = model.pretrain_loss(model.encode(hist, features), targets);
      st.mean_loss += loss.item();
      ++st.steps;
      ad::backward(loss);
      opt.step();
    }
    st.mean_loss /= static_cast<double>(st.steps);
    curve.push_back(st);
    if (progress) progress(st);
  }
  return curve;
}

double pretrain_nll(const model::Seq2Seq& model, const std::vector<data::Example>& examples,
                    const model::ItemFeatures& features, const tok::Tokenizer& tokenizer, int batch_size) {
  if (examples.empty()) throw ConfigError("pretrain_nll: no examples");
  ad::NoGradGuard no_grad;
  double total = 0.0;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < examples.size(); start += bs) {
    const std::size_t end = std::min(examples.size(), start + bs);
    std::vector<std::vector<int>> hist, targets;
    for (std::size_t i = start; i < end; ++i) {
      hist.push_back(examples[i].history);
      targets.push_back(tokenizer.item_code(examples[i].target));
    }
    total += model.pretrain_loss(model.encode(hist, features), targets).item() * static_cast<double>(end - start);
  }
  return total / static_cast<double>(examples.size());
}

nlohmann::json SftOptions::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"max_grad_norm", max_grad_norm},
          {"lambda_rc", lambda_rc},
          {"draft_target", draft_target == sft::DraftTarget::kGroundTruth ? "ground_truth" : "draft"},
          {"seed", seed}};
}

SftOptions SftOptions::from_json(const nlohmann::json& j) {
  SftOptions o;
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.max_grad_norm = j.value("max_grad_norm", o.max_grad_norm);
  o.lambda_rc = j.value("lambda_rc", o.lambda_rc);
  o.draft_target = sft::parse_draft_target(j.value("draft_target", std::string("ground_truth")));
  o.seed = j.value("seed", o.seed);
  if (o.epochs < 0 || o.batch_size < 1 || o.learning_rate <= 0) throw ConfigError("sft: bad epochs/batch/lr");
  if (o.lambda_rc < 0) throw ConfigError("sft.lambda_rc must be >= 0");
  return o;
}

std::vector<EpochStats> train_sft(model::Seq2Seq& model, const std::vector<sft::SftRecord>& corpus,
                                  const model::ItemFeatures& features, const SftOptions& options,
                                  const Progress& progress) {
  if (corpus.empty()) throw ConfigError("sft: empty corpus");
  std::mt19937_64 rng(options.seed);
  ad::Adam opt(model.params(), {.learning_rate = options.learning_rate, .max_grad_norm = options.max_grad_norm});
  std::vector<EpochStats> curve;
  const auto bs = static_cast<std::size_t>(options.batch_size);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = shuffled(corpus.size(), rng);
    EpochStats st{epoch + 1, 0.0, 0};
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<std::vector<int>> hist;
      std::vector<sft::Template> templates;
      std::vector<model::TemplateTokens> tokens;
      for (std::size_t i = start; i < end; ++i) {
        const auto& rec = corpus[order[i]];
        hist.push_back(rec.history);
        templates.push_back(rec.tmpl);
        tokens.push_back(rec.tmpl.tokens());
      }
      opt.zero_grad();
      const auto out = model.forward_template(model.encode(hist, features), tokens);
      const auto parts = sft::sft_loss(out, templates, options.lambda_rc, options.draft_target);
      st.mean_loss += parts.loss.item();
      ++st.steps;
      ad::backward(parts.loss);
      opt.step();
    }
    st.mean_loss /= static_cast<double>(st.steps);
    curve.push_back(st);
    if (progress) progress(st);
  }
  return curve;
}

}  // namespace grc::train
