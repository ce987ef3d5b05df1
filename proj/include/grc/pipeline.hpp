#pragma once

// Experiment config, run directory, stage manifests and the stage bodies
// chained by the command-line tool.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/common.hpp"
#include "grc/eval.hpp"

namespace grc::pipeline {

/// An upstream artifact is absent; the message names the subcommand to run.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage's recorded manifest disagrees with its current inputs or outputs.
class ResumeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json default_config();

/// Fully resolved experiment config (defaults + file + overrides).
class ExperimentConfig {
 public:
  ExperimentConfig() : json_(default_config()) {}

  /// Parses JSON text and merges it over the defaults. Syntax errors report
  /// line and column; unknown or mistyped fields report their path.
  static ExperimentConfig parse(const std::string& text, const std::string& source);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// `dotted.path=value`; value is read as JSON, else as a string.
  void set(const std::string& assignment);

  const nlohmann::json& json() const { return json_; }
  const nlohmann::json& section(const std::string& name) const { return json_.at(name); }
  std::uint64_t seed() const { return json_.at("seed").get<std::uint64_t>(); }
  /// Hex FNV-1a of the canonical serialization.
  std::string hash() const;

 private:
  explicit ExperimentConfig(nlohmann::json j) : json_(std::move(j)) {}
  nlohmann::json json_;
};

enum class Variant { kBackbone, kSft, kRl };
Variant parse_variant(const std::string& text);
const char* variant_name(Variant v);
std::vector<Variant> all_variants();

class Run {
 public:
  /// Artifacts go under `runs_root / config.hash()`.
  Run(ExperimentConfig config, const std::filesystem::path& runs_root, bool force, std::ostream& log);

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return config_; }

  void gen_data();
  void tokenize();
  void pretrain();
  void build_sft_corpus();
  void sft();
  void rl();
  void decode(Variant v);
  eval::EvalReport evaluate(Variant v);
  /// All stages; returns the reports in all_variants() order.
  std::vector<eval::EvalReport> run_all();

 private:
  struct Stage;
  bool up_to_date(const Stage& stage);
  void finish(const Stage& stage, double seconds);
  template <class Body>
  void run_stage(const Stage& stage, Body&& body);
  std::uint64_t stage_seed(const std::string& stage) const;
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  std::string comment(const nlohmann::json& stage_config) const;

  ExperimentConfig config_;
  std::filesystem::path dir_;
  bool force_;
  std::ostream& log_;
};

/// Hex FNV-1a of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

}  // namespace grc::pipeline
