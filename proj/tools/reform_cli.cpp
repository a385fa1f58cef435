// Command-line driver for the curriculum: data generation, the three
// training stages, evaluation, reward scoring, verifier training and the
// finite-difference gradient check.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reform/reform.hpp"

namespace fs = std::filesystem;
using namespace reform;

namespace {

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingFile = 4,
  kDataError = 5,
  kCheckpointError = 6,
  kVerifierBar = 7,
  kGradCheckFailed = 8,
};

struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& m) : std::runtime_error(m), code(c) {}
};

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw CliError(kMissingFile, std::string(what) + " not found: " + path);
}

std::vector<int> parse_domains(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw CliError(kUsage, "invalid domain list '" + s + "'");
    }
  }
  return out;
}

AnswerMode parse_mode(const std::string& s) {
  if (s == "base") return AnswerMode::Base;
  if (s == "dgm4") return AnswerMode::Dgm4;
  throw CliError(kUsage, "answer mode must be base or dgm4");
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 1;
  std::size_t n = 3000;
  int domains = 3;
  std::string out;
  double evidence_strength = 0.8;
};

int cmd_gen_data(const GenDataArgs& a) {
  EnvConfig cfg;
  cfg.seed = a.seed;
  cfg.n_domains = a.domains;
  cfg.evidence_strength = a.evidence_strength;
  const Vocab vocab = Vocab::build(a.domains);
  const auto samples = generate(cfg, vocab, a.n);
  const DatasetSplits sp = split_dataset(samples);
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  vocab.save((dir / "vocab.txt").string());
  write_jsonl(sp.train, (dir / "train.jsonl").string());
  write_jsonl(sp.val, (dir / "val.jsonl").string());
  write_jsonl(sp.test, (dir / "test.jsonl").string());
  const DatasetStats st = dataset_stats(samples);
  nlohmann::json j;
  j["total"] = st.total;
  j["class_counts"] = st.class_counts;
  j["splits"] = {{"train", sp.train.size()}, {"val", sp.val.size()}, {"test", sp.test.size()}};
  std::ofstream((dir / "stats.json").string()) << j.dump(2) << "\n";
  std::cout << "wrote " << samples.size() << " samples (" << sp.train.size() << "/" << sp.val.size() << "/"
            << sp.test.size() << ") and a " << vocab.size() << "-token vocabulary to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string stage;
  std::string verifier;
  std::string init;
  std::string data;
  std::string out;
  std::string resume;
  std::vector<std::string> overrides;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  KeyValues kv = a.config.empty() ? KeyValues{} : (require_file(a.config, "config file"), KeyValues::load(a.config));
  if (!a.stage.empty()) kv.set("stage", a.stage);
  if (!a.verifier.empty()) kv.set("verifier", a.verifier);
  if (!a.init.empty()) kv.set("init_checkpoint", a.init);
  if (!a.data.empty()) kv.set("data_dir", a.data);
  if (!a.out.empty()) kv.set("out_dir", a.out);
  if (!a.resume.empty()) kv.set("resume", a.resume);
  for (const auto& o : a.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw CliError(kUsage, "--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (kv.str("stage", "") == "grpo" && kv.str("verifier", "").empty())
    throw CliError(kUsage, "train --stage grpo requires --verifier");
  const TrainConfig cfg = TrainConfig::from(kv);
  require_file((fs::path(cfg.data_dir) / "vocab.txt").string(), "vocabulary file");
  if (!cfg.init_checkpoint.empty()) require_file(cfg.init_checkpoint, "init checkpoint");
  if (!cfg.verifier.empty()) require_file(cfg.verifier, "verifier checkpoint");
  if (!cfg.resume.empty()) require_file(cfg.resume, "resume checkpoint");
  const StageResult r = run_stage(cfg, a.quiet ? nullptr : &std::cout);
  std::cout << "stage " << to_string(cfg.stage) << ": " << r.steps << " steps; final " << r.final_checkpoint;
  if (r.stopped_early)
    std::cout << " (stopped at max_steps; resume from it)";
  else
    std::cout << "; best " << r.best_checkpoint << " (" << r.best_metric << ")";
  std::cout << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string domains;
  std::string mode = "fast";
  std::string answer_mode = "base";
  std::string json_out;
  std::string predictions_out;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const fs::path dir(a.data);
  require_file((dir / "vocab.txt").string(), "vocabulary file");
  const Vocab vocab = Vocab::load((dir / "vocab.txt").string());
  // "all" concatenates the three splits; useful for domains never trained on.
  const std::vector<std::string> splits =
      a.split == "all" ? std::vector<std::string>{"train", "val", "test"} : std::vector<std::string>{a.split};
  std::vector<EpisodeSample> samples;
  for (const auto& sp : splits) {
    const std::string split_path = (dir / (sp + ".jsonl")).string();
    require_file(split_path, "split file");
    auto part = read_jsonl(split_path, vocab);
    samples.insert(samples.end(), part.begin(), part.end());
  }
  std::vector<int> doms;
  if (!a.domains.empty()) {
    doms = parse_domains(a.domains);
    samples = filter_domains(samples, doms);
  }
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  if (static_cast<std::size_t>(ck.params.config.vocab_size) != vocab.size())
    throw CliError(kDataError, "checkpoint vocabulary size does not match " + (dir / "vocab.txt").string());
  const EvalMode mode = a.mode == "explainable" ? EvalMode::Explainable : EvalMode::Fast;
  if (a.mode != "fast" && a.mode != "explainable") throw CliError(kUsage, "--mode must be fast or explainable");
  const AnswerMode am = parse_mode(a.answer_mode);
  const EvalOutput out = eval_run(ck.params, samples, vocab, mode, am, doms);
  std::cout << render_table(out.report);
  if (!a.json_out.empty()) std::ofstream(a.json_out) << to_json(out.report).dump(2) << "\n";
  if (!a.predictions_out.empty()) {
    std::ofstream pf(a.predictions_out);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      nlohmann::json j;
      j["id"] = samples[i].id;
      const ParseResult pr = parse_answer(out.answers[i], am, vocab);
      if (parsed_ok(pr)) {
        j["answer_text"] = answer_to_text(std::get<StructuredAnswer>(pr), vocab);
      } else {
        std::string raw;
        for (TokenId t : out.answers[i]) raw += (raw.empty() ? "" : " ") + vocab.surface(t);
        j["answer_text"] = raw;
      }
      TokenSeq rat = mode == EvalMode::Explainable ? out.reasons[i] : TokenSeq{};
      if (!rat.empty() && rat.back() == tok::kEos) rat.pop_back();
      j["rationale_tokens"] = rat;
      pf << j.dump() << "\n";
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string predictions;
  std::string data;
  std::string split = "test";
  std::string verifier;
  std::string answer_mode = "base";
  std::string out;
};

int cmd_score(const ScoreArgs& a) {
  require_file(a.predictions, "predictions file");
  require_file(a.verifier, "verifier checkpoint");
  const fs::path dir(a.data);
  require_file((dir / "vocab.txt").string(), "vocabulary file");
  const Vocab vocab = Vocab::load((dir / "vocab.txt").string());
  const auto samples = read_jsonl((dir / (a.split + ".jsonl")).string(), vocab);
  std::map<std::int64_t, const EpisodeSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  const VerifierParams v = load_verifier(a.verifier);
  RewardConfig rc;
  rc.mode = parse_mode(a.answer_mode);

  std::ifstream in(a.predictions);
  std::ofstream outf;
  if (!a.out.empty()) outf.open(a.out);
  std::ostream& out = a.out.empty() ? std::cout : outf;
  std::string line;
  std::size_t lineno = 0, n = 0;
  RewardBreakdown sum;
  double rbin = 0, rfin = 0, ra = 0, rc_ = 0, rf = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CliError(kDataError, a.predictions + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("id") || !j.contains("answer_text") || !j["answer_text"].is_string())
      throw CliError(kDataError, a.predictions + ":" + std::to_string(lineno) + ": needs 'id' and 'answer_text'");
    const auto id = j["id"].get<std::int64_t>();
    auto it = by_id.find(id);
    if (it == by_id.end()) throw CliError(kDataError, a.predictions + ":" + std::to_string(lineno) + ": unknown id " + std::to_string(id));
    TokenSeq rat;
    if (j.contains("rationale_tokens"))
      for (const auto& t : j["rationale_tokens"]) rat.push_back(t.get<TokenId>());
    const TokenSeq ans = tokenize_answer_text(j["answer_text"].get<std::string>(), vocab);
    const RewardBreakdown b = total_reward(ans, rat, it->second->label, it->second->caption_tokens, v, vocab, rc);
    nlohmann::json o = {{"id", id}, {"rc", b.rc}, {"rbin", b.rbin}, {"rfin", b.rfin}, {"ra", b.ra},
                        {"rg", b.rg}, {"rf", b.rf}, {"total", b.total}};
    if (rc.mode == AnswerMode::Dgm4) o["rtok"] = b.rtok;
    out << o.dump() << "\n";
    sum.total += b.total, sum.rg += b.rg, sum.rtok += b.rtok;
    rbin += b.rbin, rfin += b.rfin, ra += b.ra, rc_ += b.rc, rf += b.rf;
    ++n;
  }
  if (n == 0) throw CliError(kDataError, "no predictions in " + a.predictions);
  const double d = static_cast<double>(n);
  nlohmann::json agg = {{"n", n}, {"rc", rc_ / d}, {"rbin", rbin / d}, {"rfin", rfin / d}, {"ra", ra / d},
                        {"rg", sum.rg / d}, {"rf", rf / d}, {"total", sum.total / d}};
  if (rc.mode == AnswerMode::Dgm4) agg["rtok"] = sum.rtok / d;
  std::cerr << "mean: " << agg.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct VerifierArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 1;
  double holdout = 0.2;
};

int cmd_train_verifier(const VerifierArgs& a) {
  const fs::path dir(a.data);
  require_file((dir / "vocab.txt").string(), "vocabulary file");
  const Vocab vocab = Vocab::load((dir / "vocab.txt").string());
  std::vector<VerifierExample> pairs;
  for (const char* split : {"train", "val"}) {
    const auto path = (dir / (std::string(split) + ".jsonl")).string();
    require_file(path, "split file");
    for (const auto& s : read_jsonl(path, vocab)) pairs.push_back({s.rationale, s.label.img, s.label.txt});
  }
  VerifierTrainConfig vc;
  vc.seed = a.seed;
  vc.holdout_fraction = a.holdout;
  const VerifierParams v = train_verifier(pairs, vocab.size(), vc);
  save_verifier(v, a.out);
  std::cout << "verifier: " << pairs.size() << " pairs, " << v.epochs_run << " epochs, held-out accuracy image "
            << v.heldout_acc_img << " text " << v.heldout_acc_txt << "\n";
  if (v.heldout_acc_img < 0.99 || v.heldout_acc_txt < 0.99) {
    std::cerr << "error: held-out accuracy below 0.99\n";
    return kVerifierBar;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_check_grad(const std::string& config) {
  GradCheckConfig cfg;
  if (!config.empty()) {
    require_file(config, "config file");
    cfg = GradCheckConfig::from(KeyValues::load(config));
  }
  const GradCheckReport r = run_gradcheck(cfg);
  for (const auto& e : r.entries)
    std::cout << e.loss << ": max relative error " << e.max_rel_error << " over " << e.checked << " coordinates"
              << (e.worst_tensor.empty() ? "" : " (worst in " + e.worst_tensor + ")") << "\n";
  std::cout << "max relative error " << r.max_rel_error << (r.passed ? " < " : " >= ") << cfg.tolerance << "\n";
  return r.passed ? kOk : kGradCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reform: three-stage forensic reasoning curriculum on a synthetic environment"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset with vocabulary and splits");
  gen->add_option("--seed", gd.seed, "generator seed");
  gen->add_option("--n", gd.n, "number of samples");
  gen->add_option("--domains", gd.domains, "number of domains");
  gen->add_option("--evidence-strength", gd.evidence_strength, "evidence planting probability");
  gen->add_option("--out", gd.out, "output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run one curriculum stage");
  train->add_option("--config", ta.config, "key = value config file");
  train->add_option("--stage", ta.stage, "warmup, sft or grpo");
  train->add_option("--verifier", ta.verifier, "verifier checkpoint (grpo)");
  train->add_option("--init", ta.init, "initial checkpoint (sft, grpo)");
  train->add_option("--data", ta.data, "dataset directory");
  train->add_option("--out", ta.out, "output directory");
  train->add_option("--resume", ta.resume, "resume checkpoint");
  train->add_option("--set", ta.overrides, "override a config key (key=value)");
  train->add_flag("--quiet", ta.quiet, "no progress output");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "policy checkpoint")->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--split", ea.split, "train, val, test or all");
  eval->add_option("--domains", ea.domains, "comma-separated domain filter");
  eval->add_option("--mode", ea.mode, "fast or explainable");
  eval->add_option("--answer-mode", ea.answer_mode, "base or dgm4");
  eval->add_option("--json", ea.json_out, "write the report as JSON");
  eval->add_option("--predictions", ea.predictions_out, "write predictions JSONL");

  ScoreArgs sa;
  auto* score = app.add_subcommand("score", "score a predictions file with the reward suite");
  score->add_option("--predictions", sa.predictions, "predictions JSONL")->required();
  score->add_option("--data", sa.data, "dataset directory")->required();
  score->add_option("--split", sa.split, "split the ids refer to");
  score->add_option("--verifier", sa.verifier, "verifier checkpoint")->required();
  score->add_option("--answer-mode", sa.answer_mode, "base or dgm4");
  score->add_option("--out", sa.out, "per-sample output JSONL (default stdout)");

  VerifierArgs va;
  auto* ver = app.add_subcommand("train-verifier", "train the consistency verifier on dataset rationales");
  ver->add_option("--data", va.data, "dataset directory")->required();
  ver->add_option("--out", va.out, "verifier checkpoint path")->required();
  ver->add_option("--seed", va.seed, "holdout split seed");
  ver->add_option("--holdout", va.holdout, "held-out fraction");

  std::string gc_config;
  auto* gc = app.add_subcommand("check-grad", "finite-difference gradient check");
  gc->add_option("--config", gc_config, "key = value config for the small model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gd);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*score) return cmd_score(sa);
    if (*ver) return cmd_train_verifier(va);
    if (*gc) return cmd_check_grad(gc_config);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpointError;
  } catch (const FormatFileError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
