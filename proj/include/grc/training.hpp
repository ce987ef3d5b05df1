#pragma once

// Minibatch training loops for the pretraining and SFT stages.

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/data.hpp"
#include "grc/model.hpp"
#include "grc/sft.hpp"
#include "grc/tokenizer.hpp"

namespace grc::train {

model::ItemFeatures make_item_features(const tok::Tokenizer& tokenizer, const data::Catalog& catalog);

/// Model shape for a tokenizer/catalog pair with the given sizes.
model::ModelConfig model_config_for(const tok::Tokenizer& tokenizer, const data::Catalog& catalog,
                                    const nlohmann::json& sizes);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

using Progress = std::function<void(const EpochStats&)>;

struct PretrainOptions {
  int epochs = 8;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainOptions from_json(const nlohmann::json& j);
};

std::vector<EpochStats> pretrain(model::Seq2Seq& model, const std::vector<data::Example>& examples,
                                 const model::ItemFeatures& features, const tok::Tokenizer& tokenizer,
                                 const PretrainOptions& options, const Progress& progress = {});

/// Mean per-token NLL of the targets (no gradient).
double pretrain_nll(const model::Seq2Seq& model, const std::vector<data::Example>& examples,
                    const model::ItemFeatures& features, const tok::Tokenizer& tokenizer, int batch_size = 64);

struct SftOptions {
  int epochs = 3;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double max_grad_norm = 1.0;
  double lambda_rc = 1.2;
  sft::DraftTarget draft_target = sft::DraftTarget::kGroundTruth;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SftOptions from_json(const nlohmann::json& j);
};

std::vector<EpochStats> train_sft(model::Seq2Seq& model, const std::vector<sft::SftRecord>& corpus,
                                  const model::ItemFeatures& features, const SftOptions& options,
                                  const Progress& progress = {});

}  // namespace grc::train
