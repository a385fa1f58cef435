#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reform/optimizer.hpp"
#include "reform/policy_model.hpp"
#include "reform/rewards.hpp"
#include "reform/rng.hpp"

namespace reform {

struct GrpoConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  double std_eps = 1e-8;
  double lr = 1e-3;
  int max_answer_len = 0;  // 0: the model's maximum
  int max_reason_len = 0;
  double temperature = 1.0;
  int updates_per_batch = 1;
  bool rollout_reason = true;

  void validate() const {
    if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("GrpoConfig: clip_eps must be in (0,1)");
    if (kl_beta < 0.0) throw std::invalid_argument("GrpoConfig: kl_beta must be >= 0");
    if (std_eps < 0.0) throw std::invalid_argument("GrpoConfig: std_eps must be >= 0");
    if (temperature < 0.0) throw std::invalid_argument("GrpoConfig: temperature must be >= 0");
    if (updates_per_batch < 1) throw std::invalid_argument("GrpoConfig: updates_per_batch must be >= 1");
    if (max_answer_len < 0 || max_reason_len < 0) throw std::invalid_argument("GrpoConfig: negative rollout length");
  }
};

/// (R_i - mean) / (population std + std_eps); exactly zero when the group has no spread.
inline std::vector<double> group_advantages(std::span<const double> rewards, double std_eps) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> a(rewards.size(), 0.0);
  bool spread = false;
  for (double r : rewards) spread = spread || r != rewards[0];
  if (!spread) return a;
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / (sd + std_eps);
  return a;
}

struct SurrogateValue {
  double value = 0.0;
  double derivative = 0.0;  // d value / d r
  bool clipped = false;
};

inline SurrogateValue clipped_surrogate(double r, double a, double eps) {
  const double rc = std::clamp(r, 1.0 - eps, 1.0 + eps);
  const double unclipped = r * a;
  const double clipped = rc * a;
  if (unclipped <= clipped) return {unclipped, a, false};
  return {clipped, 0.0, true};
}

/// k3 estimator of KL(pi_theta || pi_ref) from per-token log-probabilities.
inline double kl_k3(double logp_theta, double logp_ref) noexcept {
  const double x = logp_ref - logp_theta;
  return std::expm1(x) - x;
}

inline std::vector<double> kl_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size()) throw std::invalid_argument("kl_estimate: length mismatch");
  std::vector<double> out(logp_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kl_k3(logp_theta[i], logp_ref[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Groups
// ---------------------------------------------------------------------------

struct GrpoPrompt {
  TokenSeq image;
  TokenSeq text;
  std::size_t key = 0;  // passed back to the reward function
};

using RewardFn = std::function<RewardBreakdown(std::size_t key, std::span<const TokenId> answer, std::span<const TokenId> reason)>;

struct GroupMember {
  RolloutOutput answer;
  RolloutOutput reason;  // empty when reasons are not rolled out
  RewardBreakdown reward;
  double advantage = 0.0;
};

struct GroupRollout {
  std::size_t prompt_key = 0;
  std::vector<GroupMember> members;
};

inline std::uint64_t rollout_index(long step, std::size_t prompt, std::size_t member) noexcept {
  return (static_cast<std::uint64_t>(step) << 32) ^ (static_cast<std::uint64_t>(prompt) << 12) ^ member;
}

/// Samples G answer (and reason) rollouts from the current policy and scores them.
inline GroupRollout rollout_group(const ModelParams& p, const GrpoPrompt& prompt, const RewardFn& reward,
                                  const GrpoConfig& cfg, std::uint64_t seed, long step, std::size_t prompt_index) {
  const EncodeRun enc = encode_forward(p, prompt.image, prompt.text);
  const MemoryKV mem_a = memory_kv(p, Head::Answer, enc.s_m);
  const MemoryKV mem_r = cfg.rollout_reason ? memory_kv(p, Head::Reason, enc.s_m) : MemoryKV{};
  GroupRollout g;
  g.prompt_key = prompt.key;
  std::vector<double> rewards;
  for (int m = 0; m < cfg.group_size; ++m) {
    const auto idx = rollout_index(step, prompt_index, static_cast<std::size_t>(m));
    GroupMember mb;
    CounterRng ra(seed, "rollout-answer", idx);
    mb.answer = sample_sequence(p, Head::Answer, mem_a, cfg.temperature, ra, cfg.max_answer_len > 0 ? cfg.max_answer_len : -1);
    if (cfg.rollout_reason) {
      CounterRng rr(seed, "rollout-reason", idx);
      mb.reason = sample_sequence(p, Head::Reason, mem_r, cfg.temperature, rr, cfg.max_reason_len > 0 ? cfg.max_reason_len : -1);
    }
    mb.reward = reward(prompt.key, mb.answer.tokens, mb.reason.tokens);
    rewards.push_back(mb.reward.total);
    g.members.push_back(std::move(mb));
  }
  const auto adv = group_advantages(rewards, cfg.std_eps);
  for (std::size_t i = 0; i < adv.size(); ++i) g.members[i].advantage = adv[i];
  return g;
}

struct GroupObjective {
  double loss = 0.0;       // -(1/G) sum_i member objective, times scale
  double surrogate = 0.0;  // sum over tokens of surrogate values
  double kl = 0.0;         // sum over tokens of k3 values
  std::size_t tokens = 0;
  std::size_t clipped = 0;
};

/// Objective of one group under the current parameters, with the member
/// objective being the token-mean of (clipped surrogate - beta * k3) over
/// the answer tokens plus the same over the reason tokens. The sequence
/// advantage is shared by every token of both decoders. When `g` is given,
/// the gradient of `loss` is accumulated into it.
inline GroupObjective group_objective(const ModelParams& p, const ModelParams* ref, const GrpoPrompt& prompt,
                                      const GroupRollout& group, const GrpoConfig& cfg, Gradients* g, double scale = 1.0) {
  const std::size_t G = group.members.size();
  if (G == 0) throw std::invalid_argument("group_objective: empty group");
  std::vector<TokenSeq> at, rt;
  std::vector<std::size_t> a_of, r_of;
  for (std::size_t i = 0; i < G; ++i) {
    const auto& mb = group.members[i];
    if (!mb.answer.tokens.empty()) at.push_back(mb.answer.tokens), a_of.push_back(i);
    if (!mb.reason.tokens.empty()) rt.push_back(mb.reason.tokens), r_of.push_back(i);
  }
  ForwardCache cache = forward(p, prompt.image, prompt.text, at, rt);
  std::optional<ForwardCache> ref_cache;
  const bool use_kl = cfg.kl_beta > 0.0;
  if (use_kl) {
    if (!ref) throw std::invalid_argument("group_objective: a reference policy is required when kl_beta > 0");
    ref_cache = forward(*ref, prompt.image, prompt.text, at, rt);
  }

  GroupObjective out;
  OutputGrads og;
  const double w = scale / static_cast<double>(G);

  auto head_pass = [&](const std::vector<DecodeRun>& runs, const std::vector<DecodeRun>* ref_runs,
                       const std::vector<std::size_t>& owner, bool answer_head, std::vector<Mat>& grads) {
    std::vector<double> lp;
    std::vector<double> lp_ref;
    for (std::size_t s = 0; s < runs.size(); ++s) {
      const auto& mb = group.members[owner[s]];
      const RolloutOutput& ro = answer_head ? mb.answer : mb.reason;
      const Mat& logits = runs[s].logits;
      const std::size_t T = ro.tokens.size();
      const double inv_t = 1.0 / static_cast<double>(T);
      Mat d(logits.rows, logits.cols);
      lp.resize(logits.cols);
      lp_ref.resize(logits.cols);
      double member_obj = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const auto y = static_cast<std::size_t>(ro.tokens[t]);
        log_softmax_row(logits.row_span(t), lp);
        const double l_theta = lp[y];
        const double ratio = std::exp(l_theta - ro.per_step_logprob[t]);
        const SurrogateValue sv = clipped_surrogate(ratio, mb.advantage, cfg.clip_eps);
        double obj = sv.value;
        double dobj = sv.derivative * ratio;
        if (use_kl) {
          log_softmax_row((*ref_runs)[s].logits.row_span(t), lp_ref);
          const double k = kl_k3(l_theta, lp_ref[y]);
          obj -= cfg.kl_beta * k;
          dobj += cfg.kl_beta * std::expm1(lp_ref[y] - l_theta);
          out.kl += k;
        }
        out.surrogate += sv.value;
        out.clipped += sv.clipped ? 1 : 0;
        ++out.tokens;
        member_obj += obj * inv_t;
        const double coef = -w * inv_t * dobj;
        double* dr = d.row(t);
        for (std::size_t v = 0; v < logits.cols; ++v) dr[v] = -coef * std::exp(lp[v]);
        dr[y] += coef;
      }
      out.loss -= w * member_obj;
      grads.push_back(std::move(d));
    }
  };
  head_pass(cache.answers, use_kl ? &ref_cache->answers : nullptr, a_of, true, og.answer_logits);
  head_pass(cache.reasons, use_kl ? &ref_cache->reasons : nullptr, r_of, false, og.reason_logits);
  if (g) backward_into(p, cache, og, *g);
  return out;
}

struct StepStats {
  long step = 0;
  double mean_reward = 0.0;
  double rc = 0.0, ra = 0.0, rg = 0.0, rf = 0.0, rtok = 0.0;
  double mean_advantage = 0.0;
  double clip_frac = 0.0;
  double kl = 0.0;
  double surrogate = 0.0;
  bool updated = false;  // false when every advantage was zero (no signal) or the step aborted
  bool aborted = false;
  std::string error;
};

inline bool all_zero(const Gradients& g) noexcept {
  for (const auto& m : g.g)
    for (double v : m.data)
      if (v != 0.0) return false;
  return true;
}

/// One GRPO batch: roll out G members per prompt under the current policy
/// (which is pi_old for this batch), then take `updates_per_batch` AdamW
/// steps on the negated objective. A batch without any advantage signal
/// leaves parameters and optimizer state untouched.
inline StepStats grpo_step(ModelParams& p, const ModelParams& ref, std::span<const GrpoPrompt> prompts,
                           const RewardFn& reward, const GrpoConfig& cfg, AdamState& opt, double lr, std::uint64_t seed,
                           long step, const AdamWConfig& adam = {}) {
  cfg.validate();
  if (prompts.empty()) throw std::invalid_argument("grpo_step: empty batch");
  StepStats st;
  st.step = step;
  std::vector<GroupRollout> groups;
  double n_members = 0.0;
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    groups.push_back(rollout_group(p, prompts[j], reward, cfg, seed, step, j));
    for (const auto& mb : groups.back().members) {
      st.mean_reward += mb.reward.total;
      st.rc += mb.reward.rc;
      st.ra += mb.reward.ra;
      st.rg += mb.reward.rg;
      st.rf += mb.reward.rf;
      st.rtok += mb.reward.rtok;
      st.mean_advantage += mb.advantage;
      n_members += 1.0;
    }
  }
  for (double* v : {&st.mean_reward, &st.rc, &st.ra, &st.rg, &st.rf, &st.rtok, &st.mean_advantage}) *v /= n_members;

  const double scale = 1.0 / static_cast<double>(prompts.size());
  for (int u = 0; u < cfg.updates_per_batch; ++u) {
    Gradients g = Gradients::zeros_like(p);
    double sur = 0.0, kl = 0.0, tokens = 0.0, clipped = 0.0;
    for (std::size_t j = 0; j < prompts.size(); ++j) {
      const GroupObjective o = group_objective(p, &ref, prompts[j], groups[j], cfg, &g, scale);
      sur += o.surrogate;
      kl += o.kl;
      tokens += static_cast<double>(o.tokens);
      clipped += static_cast<double>(o.clipped);
    }
    if (u == 0 && tokens > 0.0) {
      st.surrogate = sur / tokens;
      st.kl = kl / tokens;
      st.clip_frac = clipped / tokens;
    }
    if (all_zero(g)) break;
    try {
      adamw_step(p, g, opt, lr, adam);
      st.updated = true;
    } catch (const NonFiniteGradient& e) {
      st.aborted = true;
      st.updated = false;
      st.error = e.what();
      break;
    }
  }
  return st;
}

}  // namespace reform
