// grc: stage runner for the generate / reflect / correct recommender.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grc/common.hpp"
#include "grc/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string runs = "runs";
  bool force = false;
  int threads = 1;
  std::string variant = "all";
};

grc::pipeline::ExperimentConfig resolve(const Options& o) {
  auto cfg = o.config.empty() ? grc::pipeline::ExperimentConfig{} : grc::pipeline::ExperimentConfig::load(o.config);
  for (const auto& s : o.sets) cfg.set(s);
  return cfg;
}

std::vector<grc::pipeline::Variant> variants(const Options& o) {
  if (o.variant == "all") return grc::pipeline::all_variants();
  return {grc::pipeline::parse_variant(o.variant)};
}

void print_report(const grc::pipeline::Variant v, const grc::eval::EvalReport& rep) {
  std::cout << grc::pipeline::variant_name(v) << ":";
  for (const auto& r : rep.rows) std::cout << ' ' << r.metric << '@' << r.k << '=' << grc::format_double(r.value);
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grc: generative recommendation with reflection and correction"};
  app.require_subcommand(1);
  Options o;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "write interactions.csv and items.csv"},
      {"tokenize", "fit the semantic-ID tokenizer"},
      {"pretrain", "train the one-pass backbone"},
      {"build-sft-corpus", "annotate backbone drafts into SFT templates"},
      {"sft", "fine-tune on generate/reflect/correct templates"},
      {"rl", "GRPO fine-tuning from the SFT checkpoint"},
      {"decode", "rank items for evaluation users"},
      {"eval", "score decoded rankings"},
      {"run-all", "every stage in order"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", o.config, "experiment config (JSON)");
    sub->add_option("--set", o.sets, "override, e.g. --set decode.beam_size=50")->allow_extra_args(false);
    sub->add_option("--runs", o.runs, "root directory for run folders")->capture_default_str();
    sub->add_flag("--force", o.force, "rerun stages whose manifest disagrees");
    sub->add_option("--threads", o.threads, "worker cap")->check(CLI::PositiveNumber)->capture_default_str();
    if (name == "decode" || name == "eval")
      sub->add_option("--variant", o.variant, "backbone, sft, rl or all")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    grc::pipeline::Run run(resolve(o), o.runs, o.force, std::cerr);
    std::cerr << "run directory " << run.dir().string() << '\n';
    if (cmd == "gen-data") run.gen_data();
    else if (cmd == "tokenize") run.tokenize();
    else if (cmd == "pretrain") run.pretrain();
    else if (cmd == "build-sft-corpus") run.build_sft_corpus();
    else if (cmd == "sft") run.sft();
    else if (cmd == "rl") run.rl();
    else if (cmd == "decode") {
      for (auto v : variants(o)) run.decode(v);
    } else if (cmd == "eval") {
      for (auto v : variants(o)) print_report(v, run.evaluate(v));
    } else {
      const auto reports = run.run_all();
      const auto vs = grc::pipeline::all_variants();
      for (std::size_t i = 0; i < vs.size(); ++i) print_report(vs[i], reports[i]);
    }
  } catch (const grc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const grc::pipeline::MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const grc::pipeline::ResumeMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
