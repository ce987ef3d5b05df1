#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "grc/common.hpp"
#include "grc/pipeline.hpp"

using namespace grc;
using namespace grc::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"({
  "seed": 3,
  "dataset": {"synthetic": {"n_items": 60, "n_users": 60, "n_categories": 4, "n_brands": 3, "dim": 8,
                            "min_length": 4, "max_length": 8}},
  "tokenizer": {"levels": 2, "codebook_size": 8, "iterations": 10},
  "model": {"embed_dim": 8, "hidden_dim": 16, "decoder_layers": 1, "heads": 2, "max_history": 6},
  "pretrain": {"epochs": 1},
  "sft": {"beams_per_pair": 2, "max_pairs": 40, "epochs": 1},
  "rl": {"iterations": 2, "users_per_iteration": 2, "group_size": 2},
  "decode": {"beam_size": 4, "max_users": 10},
  "eval": {"ks": [1, 5]}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

struct TempRoot {
  fs::path path;
  explicit TempRoot(const std::string& tag)
      : path(fs::temp_directory_path() / ("grc_pipe_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempRoot() { fs::remove_all(path); }
};

std::string error_of(const std::string& text) {
  try {
    ExperimentConfig::parse(text, "x.config");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, SyntaxErrorReportsLineAndColumn) {
  const auto msg = error_of("{\n  \"seed\": 3,\n  \"decode\": {\"alpha\": }\n}");
  EXPECT_NE(msg.find("x.config"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(Config, UnknownAndMistypedFieldsNamePath) {
  EXPECT_NE(error_of(R"({"decode": {"beam_sise": 3}})").find("decode.beam_sise"), std::string::npos);
  EXPECT_NE(error_of(R"({"rl": {"reward": {"beta_cor": "big"}}})").find("rl.reward.beta_cor"), std::string::npos);
  EXPECT_NE(error_of(R"({"decode": {"beam_size": 2.5}})").find("integer"), std::string::npos);
  EXPECT_NE(error_of("[1, 2]").find("object"), std::string::npos);
  EXPECT_EQ(error_of(R"({"decode": {"alpha": 1}})"), "");
}

TEST(Config, SetOverridesAndHash) {
  auto a = ExperimentConfig::parse(kTiny, "tiny");
  const auto h0 = a.hash();
  EXPECT_EQ(ExperimentConfig::parse(kTiny, "again").hash(), h0);
  a.set("decode.alpha=0.5");
  a.set("decode.skip=force_all");
  EXPECT_EQ(a.section("decode").at("alpha"), 0.5);
  EXPECT_EQ(a.section("decode").at("skip"), "force_all");
  EXPECT_NE(a.hash(), h0);
  EXPECT_THROW(a.set("decode.nope=1"), ConfigError);
  EXPECT_THROW(a.set("decode.alpha"), ConfigError);
  EXPECT_THROW(a.set("decode.beam_size=wide"), ConfigError);
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(Config, VariantNames) {
  for (auto v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("zebra"), ConfigError);
}

TEST(Stages, MissingPrerequisiteNamesProducer) {
  TempRoot root("missing");
  std::ostringstream log;
  pipeline::Run run(ExperimentConfig::parse(kTiny, "tiny"), root.path, false, log);
  try {
    run.evaluate(Variant::kSft);
    FAIL() << "expected MissingPrerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_NE(std::string(e.what()).find("grc gen-data"), std::string::npos) << e.what();
  }
  run.gen_data();
  run.tokenize();
  EXPECT_THROW(run.sft(), MissingPrerequisite);
  try {
    run.evaluate(Variant::kRl);
    FAIL();
  } catch (const MissingPrerequisite& e) {
    EXPECT_NE(std::string(e.what()).find("grc decode"), std::string::npos) << e.what();
  }
}

TEST(Stages, EndToEndResumeAndDeterminism) {
  TempRoot a("a"), b("b");
  std::ostringstream log;
  const auto cfg = ExperimentConfig::parse(kTiny, "tiny");
  pipeline::Run first(cfg, a.path, false, log);
  const auto reports = first.run_all();
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(first.dir(), a.path / cfg.hash());
  for (const auto& r : reports) {
    EXPECT_EQ(r.users, 10u);
    EXPECT_GE(r.value("recall", 5), r.value("recall", 1));
  }
  EXPECT_THROW(reports[0].value("acc_loc", 1), ContractViolation);
  EXPECT_NO_THROW(reports[1].value("acc_loc", 1));

  // every produced file carries the config hash
  for (const char* f : {"interactions.csv", "items.csv", "metrics_sft.csv", "rl_rewards.csv", "pretrain_curve.csv"})
    EXPECT_NE(first_line(first.dir() / f).find(cfg.hash()), std::string::npos) << f;
  for (const char* f : {"tokenizer.json", "metrics_rl.json", "pretrain_metrics.json", "gen-data.manifest.json"})
    EXPECT_NE(slurp(first.dir() / f).find(cfg.hash()), std::string::npos) << f;
  EXPECT_NE(first_line(first.dir() / "sft_corpus.jsonl").find(cfg.hash()), std::string::npos);
  EXPECT_NE(first_line(first.dir() / "decode_rl.jsonl").find(cfg.hash()), std::string::npos);

  // second pass skips everything
  const auto manifest = slurp(first.dir() / "sft.manifest.json");
  std::ostringstream log2;
  pipeline::Run again(cfg, a.path, false, log2);
  again.run_all();
  EXPECT_EQ(log2.str().find("running"), std::string::npos) << log2.str();
  EXPECT_EQ(slurp(first.dir() / "sft.manifest.json"), manifest);

  // fresh directory, same bytes
  pipeline::Run other(cfg, b.path, false, log);
  other.run_all();
  for (const char* f : {"metrics_backbone.csv", "metrics_sft.csv", "metrics_rl.csv", "rl_rewards.csv",
                        "sft.manifest.json", "rl.manifest.json"})
    EXPECT_EQ(slurp(first.dir() / f), slurp(other.dir() / f)) << f;

  // tampering with an artifact blocks resumption unless forced
  { std::ofstream(first.dir() / "tokenizer.json", std::ios::app) << " "; }
  pipeline::Run strict(cfg, a.path, false, log);
  EXPECT_THROW(strict.tokenize(), ResumeMismatch);
  EXPECT_THROW(strict.pretrain(), ResumeMismatch);
  pipeline::Run forced(cfg, a.path, true, log);
  forced.tokenize();
  EXPECT_EQ(slurp(first.dir() / "tokenizer.json"), slurp(other.dir() / "tokenizer.json"));
  EXPECT_NO_THROW(strict.pretrain());
}
