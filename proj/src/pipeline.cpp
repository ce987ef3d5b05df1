#include "grc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "grc/data.hpp"
#include "grc/decoder.hpp"
#include "grc/model.hpp"
#include "grc/ops.hpp"
#include "grc/rl.hpp"
#include "grc/sft.hpp"
#include "grc/tokenizer.hpp"
#include "grc/training.hpp"

namespace grc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

json default_config() {
  json synthetic = data::SyntheticConfig{}.to_json();
  synthetic.erase("seed");
  return {
      {"seed", 7},
      {"dataset",
       {{"source", "synthetic"},
        {"synthetic", synthetic},
        {"interactions", ""},
        {"items", ""},
        {"embedding_dim", 16}}},
      {"tokenizer", {{"levels", 3}, {"codebook_size", 16}, {"iterations", 25}}},
      {"model",
       {{"embed_dim", 32},
        {"hidden_dim", 64},
        {"encoder_layers", 1},
        {"decoder_layers", 2},
        {"heads", 2},
        {"max_history", 20}}},
      {"pretrain", {{"epochs", 8}, {"batch_size", 32}, {"learning_rate", 2e-3}, {"max_grad_norm", 1.0}}},
      {"sft",
       {{"beams_per_pair", 4},
        {"max_correct_per_pair", 1},
        {"max_pairs", 0},
        {"lambda_rc", 1.2},
        {"draft_target", "ground_truth"},
        {"epochs", 2},
        {"batch_size", 32},
        {"learning_rate", 1e-3},
        {"max_grad_norm", 1.0}}},
      {"rl",
       {{"iterations", 40},
        {"users_per_iteration", 16},
        {"group_size", 8},
        {"updates_per_iteration", 1},
        {"learning_rate", 1e-4},
        {"max_grad_norm", 1.0},
        {"kl_guard", 5.0},
        {"advantage", "zscore"},
        {"temperature", 1.0},
        {"reflection_temperature", 1.0},
        {"clip_epsilon", 0.15},
        {"beta_kl", 0.03},
        {"reward", rl::RewardConfig{}.to_json()}}},
      {"decode",
       {{"beam_size", 200},
        {"draft_pool", 0},
        {"alpha", 0.2},
        {"skip", "normal"},
        {"correction_width", 1},
        {"draft_fallback", true},
        {"split", "test"},
        {"max_users", 0}}},
      {"eval", {{"ks", {5, 10, 100, 200}}}},
  };
}

namespace {

const char* kind(const json& v) {
  if (v.is_number()) return "number";
  if (v.is_boolean()) return "boolean";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

void merge(json& base, const json& over, const std::string& where) {
  if (!over.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : over.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("config field '" + path + "' is not recognised");
    json& slot = base[key];
    if (slot.is_object()) {
      merge(slot, value, path);
      continue;
    }
    const bool ok = (slot.is_number() && value.is_number()) || std::string(kind(slot)) == kind(value);
    if (!ok) throw ConfigError("config field '" + path + "' expects " + kind(slot) + ", got " + kind(value));
    if (slot.is_number_integer() && !value.is_number_integer())
      throw ConfigError("config field '" + path + "' expects an integer");
    slot = value;
  }
}

std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

const std::map<std::string, std::string>& producers() {
  static const std::map<std::string, std::string> m{
      {"interactions.csv", "gen-data"}, {"items.csv", "gen-data"},       {"tokenizer.json", "tokenize"},
      {"pretrain.ckpt", "pretrain"},    {"sft_corpus.jsonl", "build-sft-corpus"}, {"sft.ckpt", "sft"},
      {"rl.ckpt", "rl"},
  };
  return m;
}

std::string producer_of(const std::string& file) {
  const auto it = producers().find(file);
  if (it != producers().end()) return it->second;
  if (file.rfind("decode_", 0) == 0) return "decode";
  return "run-all";
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& source) {
  nlohmann::json user;
  try {
    user = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": JSON syntax error at " + line_col(text, e.byte == 0 ? 0 : e.byte - 1));
  }
  nlohmann::json resolved = default_config();
  try {
    merge(resolved, user, "");
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return ExperimentConfig(std::move(resolved));
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(read_file(path), path.string());
}

void ExperimentConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  nlohmann::json over = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) over = nlohmann::json{{*it, over}};
  merge(json_, over, "");
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(json_.dump())); }

Variant parse_variant(const std::string& text) {
  if (text == "backbone") return Variant::kBackbone;
  if (text == "sft") return Variant::kSft;
  if (text == "rl") return Variant::kRl;
  throw ConfigError("variant must be backbone, sft or rl (got '" + text + "')");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBackbone: return "backbone";
    case Variant::kSft: return "sft";
    case Variant::kRl: return "rl";
  }
  return "?";
}

std::vector<Variant> all_variants() { return {Variant::kBackbone, Variant::kSft, Variant::kRl}; }

std::string file_hash(const fs::path& path) { return hex64(fnv1a(read_file(path))); }

struct Run::Stage {
  std::string name;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  json config;
};

Run::Run(ExperimentConfig config, const fs::path& runs_root, bool force, std::ostream& log)
    : config_(std::move(config)), dir_(runs_root / config_.hash()), force_(force), log_(log) {
  fs::create_directories(dir_);
  const fs::path cfg = dir_ / "config.json";
  if (!fs::exists(cfg)) write_json(cfg, config_.json());
}

std::uint64_t Run::stage_seed(const std::string& stage) const { return fnv1a(stage, config_.seed() * 0x9E3779B97F4A7C15ULL + 1); }

std::string Run::comment(const json& stage_config) const { return "config " + config_.hash() + " " + stage_config.dump(); }

bool Run::up_to_date(const Stage& stage) {
  for (const auto& in : stage.inputs)
    if (!fs::exists(path(in)))
      throw MissingPrerequisite(stage.name + ": missing " + in + " in " + dir_.string() + "; run `grc " +
                                producer_of(in) + "` first");
  const fs::path mpath = path(stage.name + ".manifest.json");
  if (!fs::exists(mpath)) return false;
  const json m = read_json(mpath);
  std::vector<std::string> problems;
  if (m.value("config_hash", "") != config_.hash()) problems.push_back("config hash differs");
  if (m.value("stage_config", json()) != stage.config) problems.push_back("stage config differs");
  for (const auto& in : stage.inputs)
    if (m["inputs"].value(in, "") != file_hash(path(in))) problems.push_back("input " + in + " changed");
  for (const auto& out : stage.outputs) {
    if (!fs::exists(path(out)))
      problems.push_back("output " + out + " missing");
    else if (m["outputs"].value(out, "") != file_hash(path(out)))
      problems.push_back("output " + out + " modified");
  }
  if (problems.empty()) {
    log_ << "[" << stage.name << "] up to date\n";
    return true;
  }
  std::string why;
  for (const auto& p : problems) why += (why.empty() ? "" : "; ") + p;
  if (force_) {
    log_ << "[" << stage.name << "] rerunning (--force): " << why << "\n";
    return false;
  }
  throw ResumeMismatch(stage.name + ": manifest mismatch (" + why + "); pass --force to rerun");
}

void Run::finish(const Stage& stage, double seconds) {
  json m = {{"stage", stage.name},
            {"config_hash", config_.hash()},
            {"stage_config", stage.config},
            {"seed", stage_seed(stage.name)},
            {"inputs", json::object()},
            {"outputs", json::object()}};
  for (const auto& in : stage.inputs) m["inputs"][in] = file_hash(path(in));
  for (const auto& out : stage.outputs) m["outputs"][out] = file_hash(path(out));
  write_json(path(stage.name + ".manifest.json"), m);
  std::ostringstream t;
  t << std::fixed << std::setprecision(3) << seconds;
  write_json(path(stage.name + ".timing.json"), {{"stage", stage.name}, {"wall_seconds", std::stod(t.str())}});
  log_ << "[" << stage.name << "] done in " << t.str() << " s\n";
}

template <class Body>
void Run::run_stage(const Stage& stage, Body&& body) {
  if (up_to_date(stage)) return;
  log_ << "[" << stage.name << "] running\n";
  const auto t0 = std::chrono::steady_clock::now();
  body();
  finish(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

namespace {

struct Loaded {
  data::Dataset dataset;
  tok::Tokenizer tokenizer;
  model::ItemFeatures features;
  std::vector<data::UserSplit> splits;
};

int embedding_dim(const json& ds) {
  return ds.at("source") == "synthetic" ? ds.at("synthetic").at("dim").get<int>() : ds.at("embedding_dim").get<int>();
}

data::Dataset load_dataset(const fs::path& dir, const json& cfg) {
  return data::ingest_csv(dir / "interactions.csv", dir / "items.csv", embedding_dim(cfg)).dataset;
}

tok::Tokenizer load_tokenizer(const fs::path& dir) {
  return tok::Tokenizer::from_json(read_json(dir / "tokenizer.json").at("tokenizer"));
}

Loaded load_all(const fs::path& dir, const ExperimentConfig& cfg) {
  Loaded l;
  l.dataset = load_dataset(dir, cfg.section("dataset"));
  l.tokenizer = load_tokenizer(dir);
  l.features = train::make_item_features(l.tokenizer, l.dataset.catalog);
  l.splits = data::leave_one_out(l.dataset.sequences, cfg.section("model").at("max_history").get<int>());
  return l;
}

int max_history(const ExperimentConfig& cfg) { return cfg.section("model").at("max_history").get<int>(); }

template <class T>
T with_seed(const json& section, std::uint64_t seed) {
  json j = section;
  j["seed"] = seed;
  return T::from_json(j);
}

void write_curve(const fs::path& p, const std::vector<train::EpochStats>& curve, const std::string& comment) {
  std::ofstream out(p);
  out << "# " << comment << "\nepoch,mean_loss,steps\n";
  for (const auto& e : curve) out << e.epoch << ',' << format_double(e.mean_loss) << ',' << e.steps << '\n';
}

}  // namespace

void Run::gen_data() {
  const json& ds = config_.section("dataset");
  json stage_cfg = ds;
  const std::string source = ds.at("source");
  if (source != "synthetic" && source != "csv") throw ConfigError("dataset.source must be synthetic or csv");
  if (source == "csv") {
    for (const char* key : {"interactions", "items"}) {
      const fs::path p = ds.at(key).get<std::string>();
      if (p.empty() || !fs::exists(p)) throw ConfigError(std::string("dataset.") + key + " file not found: " + p.string());
      stage_cfg[std::string(key) + "_hash"] = file_hash(p);
    }
  }
  const Stage st{"gen-data", {}, {"interactions.csv", "items.csv"}, stage_cfg};
  run_stage(st, [&] {
    data::Dataset d;
    if (source == "synthetic") {
      d = data::generate_synthetic(with_seed<data::SyntheticConfig>(ds.at("synthetic"), stage_seed("gen-data")));
    } else {
      const auto res = data::ingest_csv(ds.at("interactions").get<std::string>(), ds.at("items").get<std::string>(),
                                        ds.at("embedding_dim").get<int>());
      if (res.dropped_users > 0) log_ << "[gen-data] dropped " << res.dropped_users << " users\n";
      d = res.dataset;
    }
    data::write_csv(d, path("interactions.csv"), path("items.csv"), comment(stage_cfg));
    log_ << "[gen-data] " << d.catalog.size() << " items, " << d.sequences.size() << " users\n";
  });
}

void Run::tokenize() {
  const json& tc = config_.section("tokenizer");
  const Stage st{"tokenize", {"interactions.csv", "items.csv"}, {"tokenizer.json"}, tc};
  run_stage(st, [&] {
    const auto d = load_dataset(dir_, config_.section("dataset"));
    tok::FitOptions o;
    o.levels = tc.at("levels");
    o.codebook_size = tc.at("codebook_size");
    o.iterations = tc.at("iterations");
    o.seed = stage_seed("tokenize");
    tok::FitReport rep;
    const auto t = tok::Tokenizer::build(d.catalog.embeddings(), o, &rep);
    write_json(path("tokenizer.json"), {{"config_hash", config_.hash()},
                                        {"stage_config", tc},
                                        {"tokenizer", t.to_json()},
                                        {"report", {{"residual_mse", rep.residual_mse},
                                                    {"reseeded_clusters", rep.reseeded_clusters},
                                                    {"code_length", t.code_length()},
                                                    {"uses_suffix", t.uses_suffix()}}}});
    log_ << "[tokenize] code length " << t.code_length() << (t.uses_suffix() ? " (with suffix)" : "") << "\n";
  });
}

void Run::pretrain() {
  const json stage_cfg = {{"model", config_.section("model")}, {"pretrain", config_.section("pretrain")}};
  const Stage st{"pretrain", {"interactions.csv", "items.csv", "tokenizer.json"},
                 {"pretrain.ckpt", "pretrain_curve.csv", "pretrain_metrics.json"}, stage_cfg};
  run_stage(st, [&] {
    const auto l = load_all(dir_, config_);
    const int H = max_history(config_);
    const auto examples = data::training_examples(l.splits, H);
    const auto valid = data::evaluation_examples(l.splits, data::EvalSplit::kValid, H);
    const auto seed = stage_seed("pretrain");
    model::Seq2Seq m(train::model_config_for(l.tokenizer, l.dataset.catalog, config_.section("model")), seed);
    const auto opts = with_seed<train::PretrainOptions>(config_.section("pretrain"), seed);
    log_ << "[pretrain] " << examples.size() << " examples, " << m.params().total_values() << " weights\n";
    const auto curve = train::pretrain(m, examples, l.features, l.tokenizer, opts, [&](const train::EpochStats& e) {
      log_ << "[pretrain] epoch " << e.epoch << " loss " << e.mean_loss << "\n";
    });
    double uniform = 0;
    for (int v : m.config().code_vocab) uniform += std::log(static_cast<double>(v));
    uniform /= static_cast<double>(m.config().code_length());
    const double valid_nll = valid.empty() ? 0.0 : train::pretrain_nll(m, valid, l.features, l.tokenizer);
    const json metrics = {{"train_nll", curve.empty() ? uniform : curve.back().mean_loss},
                          {"valid_nll", valid_nll},
                          {"uniform_nll", uniform}};
    m.save(path("pretrain.ckpt"), {{"config_hash", config_.hash()}, {"stage", "pretrain"}, {"stage_config", stage_cfg},
                                   {"metrics", metrics}});
    write_curve(path("pretrain_curve.csv"), curve, comment(stage_cfg));
    write_json(path("pretrain_metrics.json"), {{"config_hash", config_.hash()}, {"stage_config", stage_cfg}, {"metrics", metrics}});
    log_ << "[pretrain] valid NLL " << valid_nll << " vs uniform " << uniform << "\n";
  });
}

namespace {

std::vector<data::Example> cap_pairs(std::vector<data::Example> pairs, int max_pairs, std::uint64_t seed) {
  if (max_pairs <= 0 || pairs.size() <= static_cast<std::size_t>(max_pairs)) return pairs;
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(max_pairs));
  std::sort(idx.begin(), idx.end());
  std::vector<data::Example> out;
  for (std::size_t i : idx) out.push_back(std::move(pairs[i]));
  return out;
}

}  // namespace

void Run::build_sft_corpus() {
  const json& sc = config_.section("sft");
  const json stage_cfg = {{"beams_per_pair", sc.at("beams_per_pair")},
                          {"max_correct_per_pair", sc.at("max_correct_per_pair")},
                          {"max_pairs", sc.at("max_pairs")}};
  const Stage st{"build-sft-corpus", {"interactions.csv", "items.csv", "tokenizer.json", "pretrain.ckpt"},
                 {"sft_corpus.jsonl"}, stage_cfg};
  run_stage(st, [&] {
    const auto l = load_all(dir_, config_);
    const auto m = model::Seq2Seq::load(path("pretrain.ckpt"));
    const auto pairs = cap_pairs(data::training_examples(l.splits, max_history(config_)), sc.at("max_pairs").get<int>(),
                                 stage_seed("build-sft-corpus"));
    sft::CorpusOptions o;
    o.beams_per_pair = sc.at("beams_per_pair");
    o.max_correct_per_pair = sc.at("max_correct_per_pair");
    sft::CorpusStats stats;
    const auto corpus = sft::make_sft_corpus(m, pairs, l.features, l.tokenizer, l.dataset.catalog, o, &stats);
    const json js = {{"pairs", stats.pairs},
                     {"templates", stats.templates},
                     {"skipped_pairs", stats.skipped_pairs},
                     {"dropped_correct", stats.dropped_correct},
                     {"invalid_drafts", stats.invalid_drafts}};
    std::ofstream out(path("sft_corpus.jsonl"));
    out << json{{"header", {{"config_hash", config_.hash()}, {"stage_config", stage_cfg}, {"stats", js}}}}.dump() << '\n';
    for (const auto& r : corpus) out << r.to_json().dump() << '\n';
    log_ << "[build-sft-corpus] " << js.dump() << "\n";
  });
}

namespace {

std::vector<sft::SftRecord> read_corpus(const fs::path& p) {
  std::ifstream in(p);
  std::vector<sft::SftRecord> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(sft::SftRecord::from_json(json::parse(line)));
  return out;
}

}  // namespace

void Run::sft() {
  const json& sc = config_.section("sft");
  const Stage st{"sft", {"interactions.csv", "items.csv", "tokenizer.json", "pretrain.ckpt", "sft_corpus.jsonl"},
                 {"sft.ckpt", "sft_curve.csv"}, sc};
  run_stage(st, [&] {
    const auto l = load_all(dir_, config_);
    auto m = model::Seq2Seq::load(path("pretrain.ckpt"));
    const auto corpus = read_corpus(path("sft_corpus.jsonl"));
    const auto opts = with_seed<train::SftOptions>(sc, stage_seed("sft"));
    log_ << "[sft] " << corpus.size() << " templates\n";
    const auto curve = train::train_sft(m, corpus, l.features, opts, [&](const train::EpochStats& e) {
      log_ << "[sft] epoch " << e.epoch << " loss " << e.mean_loss << "\n";
    });
    m.save(path("sft.ckpt"), {{"config_hash", config_.hash()}, {"stage", "sft"}, {"stage_config", sc}});
    write_curve(path("sft_curve.csv"), curve, comment(sc));
  });
}

void Run::rl() {
  const json& rc = config_.section("rl");
  const Stage st{"rl", {"interactions.csv", "items.csv", "tokenizer.json", "sft.ckpt"}, {"rl.ckpt", "rl_rewards.csv"}, rc};
  run_stage(st, [&] {
    const auto l = load_all(dir_, config_);
    auto policy = model::Seq2Seq::load(path("sft.ckpt"));
    const auto reference = policy.clone();
    const auto cfg = with_seed<rl::RlConfig>(rc, stage_seed("rl"));
    const auto pairs = data::training_examples(l.splits, max_history(config_));
    const auto logs = rl::train_rl(policy, reference, pairs, l.features, l.tokenizer, l.dataset.catalog, cfg,
                                   [&](const rl::IterationLog& it) {
                                     if (it.iteration % 5 == 0 || it.iteration == 1 || it.kl_guard_tripped)
                                       log_ << "[rl] iter " << it.iteration << " R_total " << it.total.mean << " KL "
                                            << it.kl << (it.kl_guard_tripped ? " (lr halved)" : "") << "\n";
                                   });
    policy.save(path("rl.ckpt"), {{"config_hash", config_.hash()}, {"stage", "rl"}, {"stage_config", rc}});
    {
      std::ofstream c(path("rl_rewards.csv"));
      c << "# " << comment(rc) << '\n';
    }
    const fs::path tmp = path("rl_rewards.csv.tmp");
    rl::write_reward_csv(tmp, logs);
    {
      std::ofstream c(path("rl_rewards.csv"), std::ios::app);
      c << read_file(tmp);
    }
    fs::remove(tmp);
  });
}

namespace {

const char* checkpoint_of(Variant v) {
  switch (v) {
    case Variant::kBackbone: return "pretrain.ckpt";
    case Variant::kSft: return "sft.ckpt";
    case Variant::kRl: return "rl.ckpt";
  }
  return "";
}

std::string decode_file(Variant v) { return std::string("decode_") + variant_name(v) + ".jsonl"; }

}  // namespace

void Run::decode(Variant v) {
  const json& dc = config_.section("decode");
  json stage_cfg = dc;
  stage_cfg["variant"] = variant_name(v);
  const std::string out_name = decode_file(v);
  const Stage st{std::string("decode_") + variant_name(v),
                 {"interactions.csv", "items.csv", "tokenizer.json", checkpoint_of(v)},
                 {out_name},
                 stage_cfg};
  run_stage(st, [&] {
    const auto l = load_all(dir_, config_);
    const auto m = model::Seq2Seq::load(path(checkpoint_of(v)));
    const auto cfg = decode::DecodeConfig::from_json(dc);
    const std::string split = dc.at("split");
    if (split != "test" && split != "valid") throw ConfigError("decode.split must be test or valid");
    auto examples = data::evaluation_examples(l.splits, split == "test" ? data::EvalSplit::kTest : data::EvalSplit::kValid,
                                              max_history(config_));
    const int cap = dc.at("max_users");
    if (cap > 0 && examples.size() > static_cast<std::size_t>(cap)) examples.resize(static_cast<std::size_t>(cap));
    const decode::Lookup lookup = [&](std::span<const int> code) { return l.tokenizer.lookup(code); };
    std::ofstream out(path(out_name));
    out << json{{"header", {{"config_hash", config_.hash()}, {"stage_config", stage_cfg}, {"users", examples.size()}}}}.dump()
        << '\n';
    long steps = 0, invalid = 0, skipped = 0;
    for (const auto& ex : examples) {
      model::Encoded user;
      {
        ad::NoGradGuard g;
        user = m.encode({ex.history}, l.features);
      }
      const auto res = v == Variant::kBackbone ? decode::decode_one_pass(m, user, cfg.beam_size, lookup)
                                               : decode::decode_user(m, user, cfg, lookup);
      steps += res.correction_steps;
      invalid += res.invalid;
      skipped += res.skipped;
      out << json{{"user", ex.user}, {"target", ex.target}, {"result", decode::to_json(res, v != Variant::kBackbone)}}.dump()
          << '\n';
    }
    log_ << "[" << st.name << "] " << examples.size() << " users, skipped " << skipped << ", invalid " << invalid
         << ", correction steps " << steps << "\n";
  });
}

eval::EvalReport Run::evaluate(Variant v) {
  const json& ec = config_.section("eval");
  const std::string in_name = decode_file(v);
  const std::string base = std::string("metrics_") + variant_name(v);
  const Stage st{std::string("eval_") + variant_name(v),
                 {"interactions.csv", "items.csv", "tokenizer.json", in_name},
                 {base + ".json", base + ".csv"},
                 ec};
  const auto ks = ec.at("ks").get<std::vector<int>>();
  run_stage(st, [&] {
    const auto d = load_dataset(dir_, config_.section("dataset"));
    const auto t = load_tokenizer(dir_);
    std::ifstream in(path(in_name));
    std::string line;
    std::getline(in, line);
    std::vector<eval::UserRecord> users;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      eval::UserRecord u;
      u.user = j.at("user");
      u.target = j.at("target");
      for (const auto& r : j.at("result").at("ranked")) u.ranked.push_back(r.at(0).get<int>());
      const auto& res = j.at("result");
      if (res.contains("drafts")) {
        const auto gt = t.item_code(u.target);
        for (const auto& dr : res.at("drafts")) {
          if (!dr.contains("loc")) continue;
          const auto draft = dr.at("draft").get<std::vector<int>>();
          u.pred_loc.push_back(dr.at("loc").get<int>());
          u.true_loc.push_back(sft::annotate_loc(draft, gt));
          u.pred_cat.push_back(dr.at("sem").at(0).get<int>());
          u.true_cat.push_back(sft::annotate_sem(t.lookup(draft), u.target, d.catalog).flags.at(0));
        }
      }
      users.push_back(std::move(u));
    }
    const auto rep = eval::evaluate(users, ks);
    json j = rep.to_json();
    j["config_hash"] = config_.hash();
    j["variant"] = variant_name(v);
    j["stage_config"] = ec;
    write_json(path(base + ".json"), j);
    rep.write_csv(path(base + ".csv"), comment(ec));
  });
  // rebuild the report from the written file so resumed runs return it too
  const json j = read_json(path(base + ".json"));
  eval::EvalReport rep;
  rep.ks = j.at("ks").get<std::vector<int>>();
  rep.users = j.at("users");
  rep.short_users = j.at("short_users").get<std::vector<std::size_t>>();
  for (const std::string metric : {"recall", "ndcg", "acc_loc", "acc_cat"})
    for (int k : rep.ks) {
      const std::string key = metric + "@" + std::to_string(k);
      if (j.at("metrics").contains(key)) rep.rows.push_back({metric, k, j.at("metrics").at(key).get<double>()});
    }
  return rep;
}

std::vector<eval::EvalReport> Run::run_all() {
  gen_data();
  tokenize();
  pretrain();
  build_sft_corpus();
  sft();
  rl();
  std::vector<eval::EvalReport> reports;
  for (Variant v : all_variants()) {
    decode(v);
    reports.push_back(evaluate(v));
  }
  log_ << "\nvariant   ";
  for (const auto& r : reports.front().rows) log_ << std::setw(12) << (r.metric + "@" + std::to_string(r.k));
  log_ << "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    log_ << std::left << std::setw(10) << variant_name(all_variants()[i]) << std::right;
    for (const auto& r : reports.front().rows) {
      double v = 0;
      bool has = true;
      try {
        v = reports[i].value(r.metric, r.k);
      } catch (const ContractViolation&) {
        has = false;
      }
      if (has)
        log_ << std::setw(12) << std::fixed << std::setprecision(4) << v;
      else
        log_ << std::setw(12) << "-";
    }
    log_ << std::defaultfloat << "\n";
  }
  return reports;
}

}  // namespace grc::pipeline
