#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "reform/config.hpp"
#include "reform/grpo.hpp"
#include "reform/losses.hpp"
#include "reform/metrics.hpp"
#include "reform/optimizer.hpp"
#include "reform/policy_model.hpp"
#include "reform/rewards.hpp"
#include "reform/synth_env.hpp"

namespace reform {

enum class Stage : std::uint8_t { Warmup, Sft, Grpo };

inline std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::Warmup: return "warmup";
    case Stage::Sft: return "sft";
    case Stage::Grpo: return "grpo";
  }
  return "warmup";
}

inline Stage stage_from_string(std::string_view s) {
  if (s == "warmup") return Stage::Warmup;
  if (s == "sft") return Stage::Sft;
  if (s == "grpo") return Stage::Grpo;
  throw ConfigError("unknown stage '" + std::string(s) + "' (expected warmup, sft or grpo)");
}

struct TrainConfig {
  Stage stage = Stage::Warmup;
  std::string data_dir;         // holds vocab.txt, train.jsonl, val.jsonl
  std::string init_checkpoint;  // required for sft and grpo
  std::string verifier;         // required for grpo
  std::string resume;           // checkpoint written by a stopped run of the same stage
  std::string out_dir = "runs";
  std::uint64_t seed = 1;
  ModelConfig model;
  AnswerMode answer_mode = AnswerMode::Base;
  std::vector<int> train_domains = {0};

  double lr_floor = 3e-4;
  double lr_peak = 3e-3;
  long warmup_steps = 100;
  double weight_decay = 0.01;
  int batch_size = 16;
  int epochs = 4;
  long max_steps = -1;  // stop (and write a resume checkpoint) at this global step
  long eval_every = 0;  // 0: once per epoch (supervised) or every 25 steps (grpo)
  int val_limit = 0;    // 0: whole validation split

  double eta = 0.0;

  GrpoConfig grpo;
  int prompts_per_batch = 4;
  long grpo_steps = 200;
  RewardConfig reward;

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> k = {
        "stage", "data_dir", "init_checkpoint", "verifier", "resume", "out_dir", "seed", "answer_mode",
        "train_domains", "d_model", "n_reason_tokens", "n_heads", "encoder_layers", "decoder_layers", "ffn_width",
        "max_answer_len", "max_reason_len", "max_image_len", "max_text_len", "lr_floor", "lr_peak", "warmup_steps",
        "weight_decay", "batch_size", "epochs", "max_steps", "eval_every", "val_limit", "eta", "group_size",
        "clip_eps", "kl_beta", "std_eps", "temperature", "updates_per_batch", "rollout_reason", "prompts_per_batch",
        "grpo_steps", "reward_c", "reward_a", "reward_g", "reward_f", "reward_tok"};
    return k;
  }

  static TrainConfig from(const KeyValues& kv) {
    kv.require_known(known_keys());
    TrainConfig c;
    if (!kv.has("stage")) throw ConfigError("config: 'stage' is required");
    c.stage = stage_from_string(kv.str("stage", ""));
    c.data_dir = kv.str("data_dir", "");
    c.init_checkpoint = kv.str("init_checkpoint", "");
    c.verifier = kv.str("verifier", "");
    c.resume = kv.str("resume", "");
    c.out_dir = kv.str("out_dir", c.out_dir);
    c.seed = kv.num("seed", c.seed);
    const std::string mode = kv.str("answer_mode", "base");
    if (mode == "base") c.answer_mode = AnswerMode::Base;
    else if (mode == "dgm4") c.answer_mode = AnswerMode::Dgm4;
    else throw ConfigError("config: answer_mode must be base or dgm4");
    if (kv.has("train_domains")) {
      c.train_domains.clear();
      std::stringstream ss(kv.str("train_domains", ""));
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          c.train_domains.push_back(std::stoi(item));
        } catch (const std::exception&) {
          throw ConfigError("config: train_domains must be a comma-separated list of integers");
        }
      }
    }
    auto& m = c.model;
    m.d_model = kv.num("d_model", m.d_model);
    m.n_reason_tokens = kv.num("n_reason_tokens", m.n_reason_tokens);
    m.n_heads = kv.num("n_heads", m.n_heads);
    m.encoder_layers = kv.num("encoder_layers", m.encoder_layers);
    m.decoder_layers = kv.num("decoder_layers", m.decoder_layers);
    m.ffn_width = kv.num("ffn_width", 4 * m.d_model);
    m.max_answer_len = kv.num("max_answer_len", m.max_answer_len);
    m.max_reason_len = kv.num("max_reason_len", m.max_reason_len);
    m.max_image_len = kv.num("max_image_len", m.max_image_len);
    m.max_text_len = kv.num("max_text_len", m.max_text_len);
    // Reinforcement learning refines an already trained policy; it takes a
    // much smaller step size than the supervised stages.
    const bool rl = c.stage == Stage::Grpo;
    c.lr_floor = kv.num("lr_floor", rl ? 1e-5 : c.lr_floor);
    c.lr_peak = kv.num("lr_peak", rl ? 1e-4 : c.lr_peak);
    c.warmup_steps = kv.num("warmup_steps", c.warmup_steps);
    c.weight_decay = kv.num("weight_decay", c.weight_decay);
    c.batch_size = kv.num("batch_size", c.batch_size);
    c.epochs = kv.num("epochs", c.stage == Stage::Sft ? 12 : 4);
    c.max_steps = kv.num("max_steps", c.max_steps);
    c.eval_every = kv.num("eval_every", c.eval_every);
    c.val_limit = kv.num("val_limit", c.val_limit);
    c.eta = kv.num("eta", c.eta);
    auto& g = c.grpo;
    g.group_size = kv.num("group_size", g.group_size);
    g.clip_eps = kv.num("clip_eps", g.clip_eps);
    g.kl_beta = kv.num("kl_beta", g.kl_beta);
    g.std_eps = kv.num("std_eps", g.std_eps);
    g.temperature = kv.num("temperature", g.temperature);
    g.updates_per_batch = kv.num("updates_per_batch", g.updates_per_batch);
    g.rollout_reason = kv.flag("rollout_reason", g.rollout_reason);
    c.prompts_per_batch = kv.num("prompts_per_batch", c.prompts_per_batch);
    c.grpo_steps = kv.num("grpo_steps", c.grpo_steps);
    c.reward.use_c = kv.flag("reward_c", true);
    c.reward.use_a = kv.flag("reward_a", true);
    c.reward.use_g = kv.flag("reward_g", true);
    c.reward.use_f = kv.flag("reward_f", true);
    c.reward.use_tok = kv.flag("reward_tok", true);
    c.reward.mode = c.answer_mode;
    c.validate();
    return c;
  }

  void validate() const {
    if (data_dir.empty()) throw ConfigError("config: 'data_dir' is required");
    if (stage != Stage::Warmup && init_checkpoint.empty() && (stage == Stage::Grpo || resume.empty()))
      throw ConfigError("config: stage " + std::string(to_string(stage)) + " requires 'init_checkpoint'");
    if (stage == Stage::Grpo && verifier.empty()) throw ConfigError("config: stage grpo requires 'verifier'");
    if (!(lr_floor >= 0.0 && lr_floor <= lr_peak)) throw ConfigError("config: need 0 <= lr_floor <= lr_peak");
    if (batch_size < 1 || epochs < 1 || prompts_per_batch < 1 || grpo_steps < 1)
      throw ConfigError("config: batch_size, epochs, prompts_per_batch and grpo_steps must be positive");
    if (eta < -1.0 || eta > 1.0) throw ConfigError("config: eta must lie in [-1, 1]");
    if (train_domains.empty()) throw ConfigError("config: train_domains must not be empty");
    try {
      grpo.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

struct LogRow {
  long step = 0;
  std::string stage;
  double lr = 0.0;
  std::optional<double> lm_r, lm_a, rac, total;
  std::optional<double> mean_reward, rc, ra, rg, rf, rtok, clip_frac, kl, surrogate;
  std::optional<double> val_metric;
  std::string checkpoint;
};

inline constexpr const char* kLogHeader =
    "step,stage,lr,lm_r,lm_a,rac,total,mean_reward,rc,ra,rg,rf,rtok,clip_frac,kl,surrogate,val_metric,checkpoint";

inline std::string format_row(const LogRow& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << r.step << "," << r.stage << "," << num(r.lr) << "," << num(r.lm_r) << "," << num(r.lm_a) << ","
     << num(r.rac) << "," << num(r.total) << "," << num(r.mean_reward) << "," << num(r.rc) << "," << num(r.ra)
     << "," << num(r.rg) << "," << num(r.rf) << "," << num(r.rtok) << "," << num(r.clip_frac) << "," << num(r.kl)
     << "," << num(r.surrogate) << "," << num(r.val_metric) << "," << r.checkpoint;
  return os.str();
}

class RunLog {
 public:
  RunLog(const std::string& path, bool append) : path_(path) {
    const bool exists = std::filesystem::exists(path);
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open run log " + path);
    if (!append || !exists) out_ << kLogHeader << "\n";
  }

  void append(const LogRow& r) {
    if (r.step <= last_step_) throw std::logic_error("run log steps must strictly increase");
    last_step_ = r.step;
    out_ << format_row(r) << "\n";
    out_.flush();
  }

  void set_last_step(long s) noexcept { last_step_ = s; }

 private:
  std::string path_;
  std::ofstream out_;
  long last_step_ = std::numeric_limits<long>::min();
};

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct StageResult {
  std::string final_checkpoint;
  std::string best_checkpoint;
  double best_metric = 0.0;
  long steps = 0;
  bool stopped_early = false;  // max_steps reached; resume checkpoint written
  std::string log_path;
};

/// Example-level training data derived once from the samples.
struct PreparedSample {
  const EpisodeSample* sample = nullptr;
  TokenSeq text;  // rendered prompt
  TokenSeq answer_target;
  TokenSeq reason_target;
};

inline std::vector<PreparedSample> prepare(const std::vector<EpisodeSample>& samples, const Vocab& vocab, AnswerMode mode) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples)
    out.push_back({&s, prompt_tokens(s, vocab), with_eos(serialize_answer(reference_answer(s, mode))), with_eos(s.rationale)});
  return out;
}

inline void set_stage_trainable(ModelParams& p, Stage s) {
  if (s == Stage::Warmup)
    p.set_trainable({ParamGroup::ReasonBank, ParamGroup::ReasonDecoder});
  else
    p.set_trainable({ParamGroup::Embedding, ParamGroup::ReasonBank, ParamGroup::Multimodal, ParamGroup::AnswerDecoder,
                     ParamGroup::ReasonDecoder});
}

/// Mean supervised loss over a sample list (no gradients).
inline LossValue mean_supervised_loss(const ModelParams& p, const std::vector<PreparedSample>& data, const LossTerms& terms,
                                      double eta) {
  LossValue acc;
  for (const auto& d : data) {
    const LossValue l = supervised_loss(p, d.sample->image_tokens, d.text, d.answer_target, d.reason_target, terms, eta);
    acc.total += l.total;
    acc.lm_r += l.lm_r;
    acc.lm_a += l.lm_a;
    acc.rac += l.rac;
  }
  const double n = static_cast<double>(data.size());
  return {acc.total / n, acc.lm_r / n, acc.lm_a / n, acc.rac / n};
}

/// Mean total reward of greedy answers and rationales.
inline RewardBreakdown mean_greedy_reward(const ModelParams& p, const std::vector<PreparedSample>& data,
                                          const VerifierParams& v, const Vocab& vocab, const RewardConfig& rc) {
  RewardBreakdown m;
  CounterRng unused(0, "greedy", 0);
  for (const auto& d : data) {
    const EncodeRun enc = encode_forward(p, d.sample->image_tokens, d.text);
    const MemoryKV ma = memory_kv(p, Head::Answer, enc.s_m);
    const MemoryKV mr = memory_kv(p, Head::Reason, enc.s_m);
    const TokenSeq a = sample_sequence(p, Head::Answer, ma, 0.0, unused).tokens;
    const TokenSeq r = sample_sequence(p, Head::Reason, mr, 0.0, unused).tokens;
    const RewardBreakdown b = total_reward(a, r, d.sample->label, d.sample->caption_tokens, v, vocab, rc);
    m.total += b.total;
    m.rg += b.rg;
    m.rtok += b.rtok;
  }
  const double n = static_cast<double>(data.size());
  m.total /= n;
  m.rg /= n;
  m.rtok /= n;
  return m;
}

namespace detail {
inline std::string stage_file(const TrainConfig& c, const std::string& what) {
  return (std::filesystem::path(c.out_dir) / (std::string(to_string(c.stage)) + "_" + what)).string();
}

inline std::string step_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step%06ld.ckpt", step);
  return buf;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

struct StageContext {
  Vocab vocab;
  std::vector<EpisodeSample> train, val;
};

inline StageContext load_stage_data(const TrainConfig& c) {
  const std::filesystem::path dir(c.data_dir);
  StageContext ctx{Vocab::load((dir / "vocab.txt").string()), {}, {}};
  ctx.train = filter_domains(read_jsonl((dir / "train.jsonl").string(), ctx.vocab), c.train_domains);
  ctx.val = filter_domains(read_jsonl((dir / "val.jsonl").string(), ctx.vocab), c.train_domains);
  if (c.val_limit > 0 && ctx.val.size() > static_cast<std::size_t>(c.val_limit)) ctx.val.resize(static_cast<std::size_t>(c.val_limit));
  if (ctx.train.empty()) throw std::runtime_error("no training samples in the selected domains");
  if (ctx.val.empty()) throw std::runtime_error("no validation samples in the selected domains");
  return ctx;
}

/// Runs one curriculum stage end to end (or up to max_steps).
inline StageResult run_stage(const TrainConfig& c, std::ostream* progress = nullptr) {
  c.validate();
  std::filesystem::create_directories(c.out_dir);
  StageContext ctx = load_stage_data(c);
  const Vocab& vocab = ctx.vocab;

  ModelConfig mc = c.model;
  mc.vocab_size = static_cast<int>(vocab.size());

  ModelParams params;
  AdamState opt;
  long step = 0;
  std::optional<double> best;
  std::string best_file;
  const bool resuming = !c.resume.empty();
  if (resuming) {
    LoadedCheckpoint ck = load_checkpoint(c.resume, mc);
    if (ck.stage_tag != to_string(c.stage))
      throw ConfigError("resume checkpoint belongs to stage '" + ck.stage_tag + "', not '" + std::string(to_string(c.stage)) + "'");
    params = std::move(ck.params);
    step = std::stol(ck.meta.at("step"));
    opt = optimizer_from_tensors(params, ck.extra, std::stol(ck.meta.at("opt_step")));
    if (ck.meta.count("best_metric")) best = std::stod(ck.meta.at("best_metric"));
    if (ck.meta.count("best_file")) best_file = ck.meta.at("best_file");
  } else if (!c.init_checkpoint.empty()) {
    params = load_checkpoint(c.init_checkpoint, mc).params;
    opt = AdamState::zeros_like(params);
  } else {
    params = init_params(mc, c.seed);
    opt = AdamState::zeros_like(params);
  }
  set_stage_trainable(params, c.stage);

  const auto train = prepare(ctx.train, vocab, c.answer_mode);
  const auto val = prepare(ctx.val, vocab, c.answer_mode);
  const AdamWConfig adam{0.9, 0.999, 1e-8, c.weight_decay};

  StageResult res;
  res.log_path = detail::stage_file(c, "log.csv");
  RunLog log(res.log_path, resuming);
  if (resuming) log.set_last_step(step);

  const bool higher_better = c.stage == Stage::Grpo;
  auto save = [&](const std::string& path) {
    std::map<std::string, std::string> meta{{"step", std::to_string(step)},
                                            {"opt_step", std::to_string(opt.step)},
                                            {"seed", std::to_string(c.seed)}};
    if (best) meta["best_metric"] = detail::fmt17(*best);
    if (!best_file.empty()) meta["best_file"] = best_file;
    save_checkpoint(params, std::string(to_string(c.stage)), path, meta, optimizer_tensors(params, opt));
  };
  auto consider = [&](double metric) -> std::string {
    const std::string name = std::string(to_string(c.stage)) + "_" + detail::step_name(step);
    const bool improved = !best || (higher_better ? metric > *best : metric < *best);
    if (improved) {
      best = metric;
      best_file = name;
    }
    save((std::filesystem::path(c.out_dir) / name).string());
    if (improved) {
      std::ofstream(detail::stage_file(c, "best.txt")) << best_file << "\n";
    }
    return name;
  };
  auto stop_early = [&]() {
    const std::string path = detail::stage_file(c, "resume.ckpt");
    save(path);
    res.final_checkpoint = path;
    res.stopped_early = true;
    res.steps = step;
    res.best_metric = best.value_or(0.0);
    res.best_checkpoint = best_file.empty() ? "" : (std::filesystem::path(c.out_dir) / best_file).string();
    return res;
  };

  if (c.stage != Stage::Grpo) {
    const LossTerms terms = c.stage == Stage::Warmup ? kWarmupTerms : kJointTerms;
    const long n = static_cast<long>(train.size());
    const long spe = (n + c.batch_size - 1) / c.batch_size;
    const long total = spe * c.epochs;
    const LrSchedule sched{c.lr_floor, c.lr_peak, c.warmup_steps, total};
    const long eval_every = c.eval_every > 0 ? c.eval_every : spe;
    std::vector<std::size_t> order;
    long order_epoch = -1;
    while (step < total) {
      if (c.max_steps >= 0 && step >= c.max_steps) return stop_early();
      const long epoch = step / spe;
      if (epoch != order_epoch) {
        order.resize(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        CounterRng r(c.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        r.shuffle(std::span<std::size_t>(order));
        order_epoch = epoch;
      }
      const long b = step % spe;
      const std::size_t lo = static_cast<std::size_t>(b * c.batch_size);
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(c.batch_size));
      Gradients g = Gradients::zeros_like(params);
      LossValue acc;
      const double scale = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& d = train[order[k]];
        const LossValue l =
            supervised_loss(params, d.sample->image_tokens, d.text, d.answer_target, d.reason_target, terms, c.eta, &g, scale);
        acc.total += l.total * scale;
        acc.lm_r += l.lm_r * scale;
        acc.lm_a += l.lm_a * scale;
        acc.rac += l.rac * scale;
      }
      const double lr = sched.at(step);
      adamw_step(params, g, opt, lr, adam);
      ++step;
      LogRow row;
      row.step = step;
      row.stage = std::string(to_string(c.stage));
      row.lr = lr;
      row.lm_r = acc.lm_r;
      if (c.stage == Stage::Sft) row.lm_a = acc.lm_a, row.rac = acc.rac;
      row.total = acc.total;
      if (step % eval_every == 0 || step == total) {
        // Stage 2 feeds the answer policy to reinforcement learning, so it is
        // selected on the answer loss; the rationale loss has a high noise floor.
        const LossValue v = mean_supervised_loss(params, val, terms, c.eta);
        row.val_metric = c.stage == Stage::Sft ? v.lm_a : v.total;
        row.checkpoint = consider(*row.val_metric);
        if (progress)
          *progress << to_string(c.stage) << " step " << step << "/" << total << " train " << acc.total << " val " << v.total
                    << "\n";
      }
      log.append(row);
    }
  } else {
    const VerifierParams verifier = load_verifier(c.verifier);
    if (verifier.heldout_acc_img < 0.99 || verifier.heldout_acc_txt < 0.99)
      throw ConfigError("verifier held-out accuracy is below 0.99; refusing to start reinforcement learning");
    if (verifier.vocab_size != vocab.size()) throw ConfigError("verifier vocabulary size does not match the data");
    const ModelParams ref = load_checkpoint(c.init_checkpoint, mc).params;
    std::vector<GrpoPrompt> prompts;
    for (std::size_t i = 0; i < train.size(); ++i) prompts.push_back({train[i].sample->image_tokens, train[i].text, i});
    const RewardFn reward = [&](std::size_t key, std::span<const TokenId> a, std::span<const TokenId> r) {
      const EpisodeSample& s = *train[key].sample;
      return total_reward(a, r, s.label, s.caption_tokens, verifier, vocab, c.reward);
    };
    GrpoConfig gc = c.grpo;
    gc.lr = c.lr_peak;
    const LrSchedule sched{c.lr_floor, c.lr_peak, c.warmup_steps, c.grpo_steps};
    const long eval_every = c.eval_every > 0 ? c.eval_every : 25;
    const std::size_t n = prompts.size();
    const std::size_t P = static_cast<std::size_t>(c.prompts_per_batch);
    while (step < c.grpo_steps) {
      if (c.max_steps >= 0 && step >= c.max_steps) return stop_early();
      std::vector<GrpoPrompt> batch;
      for (std::size_t k = 0; k < P; ++k) {
        const std::size_t pos = static_cast<std::size_t>(step) * P + k;
        const std::size_t epoch = pos / n;
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        CounterRng r(c.seed, "grpo-shuffle", epoch);
        r.shuffle(std::span<std::size_t>(order));
        batch.push_back(prompts[order[pos % n]]);
      }
      const double lr = sched.at(step);
      const StepStats st = grpo_step(params, ref, batch, reward, gc, opt, lr, c.seed, step, adam);
      if (st.aborted) throw NonFiniteGradient("grpo step " + std::to_string(step) + " aborted: " + st.error);
      ++step;
      LogRow row;
      row.step = step;
      row.stage = "grpo";
      row.lr = lr;
      row.mean_reward = st.mean_reward;
      row.rc = st.rc;
      row.ra = st.ra;
      row.rg = st.rg;
      row.rf = st.rf;
      if (c.answer_mode == AnswerMode::Dgm4) row.rtok = st.rtok;
      row.clip_frac = st.clip_frac;
      row.kl = st.kl;
      row.surrogate = st.surrogate;
      if (step % eval_every == 0 || step == c.grpo_steps) {
        const RewardBreakdown v = mean_greedy_reward(params, val, verifier, vocab, c.reward);
        row.val_metric = v.total;
        row.checkpoint = consider(v.total);
        if (progress) *progress << "grpo step " << step << "/" << c.grpo_steps << " reward " << st.mean_reward << " val " << v.total << "\n";
      }
      log.append(row);
    }
  }

  res.final_checkpoint = detail::stage_file(c, "final.ckpt");
  save(res.final_checkpoint);
  res.steps = step;
  res.best_metric = best.value_or(0.0);
  res.best_checkpoint = (std::filesystem::path(c.out_dir) / best_file).string();
  return res;
}

}  // namespace reform
