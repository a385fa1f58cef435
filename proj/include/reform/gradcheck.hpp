#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "reform/config.hpp"
#include "reform/grpo.hpp"
#include "reform/losses.hpp"
#include "reform/policy_model.hpp"

namespace reform {

struct GradCheckConfig {
  ModelConfig model{.vocab_size = 16, .d_model = 8, .n_reason_tokens = 4, .n_heads = 2, .encoder_layers = 1,
                    .decoder_layers = 1, .ffn_width = 16, .max_answer_len = 6, .max_reason_len = 8,
                    .max_image_len = 6, .max_text_len = 6};
  std::uint64_t seed = 7;
  double h = 1e-5;
  double eta = 0.9;  // high margin keeps the hinge active
  double kl_beta = 0.04;
  double clip_eps = 0.2;
  double tolerance = 1e-4;
  double abs_floor = 1e-6;  // denominators never drop below this

  static GradCheckConfig from(const KeyValues& kv) {
    kv.require_known({"vocab_size", "d_model", "n_reason_tokens", "n_heads", "encoder_layers", "decoder_layers",
                      "ffn_width", "max_answer_len", "max_reason_len", "max_image_len", "max_text_len", "seed", "h",
                      "eta", "kl_beta", "clip_eps", "tolerance"});
    GradCheckConfig c;
    auto& m = c.model;
    m.vocab_size = kv.num("vocab_size", m.vocab_size);
    m.d_model = kv.num("d_model", m.d_model);
    m.n_reason_tokens = kv.num("n_reason_tokens", m.n_reason_tokens);
    m.n_heads = kv.num("n_heads", m.n_heads);
    m.encoder_layers = kv.num("encoder_layers", m.encoder_layers);
    m.decoder_layers = kv.num("decoder_layers", m.decoder_layers);
    m.ffn_width = kv.num("ffn_width", m.ffn_width);
    m.max_answer_len = kv.num("max_answer_len", m.max_answer_len);
    m.max_reason_len = kv.num("max_reason_len", m.max_reason_len);
    m.max_image_len = kv.num("max_image_len", m.max_image_len);
    m.max_text_len = kv.num("max_text_len", m.max_text_len);
    c.seed = kv.num("seed", c.seed);
    c.h = kv.num("h", c.h);
    c.eta = kv.num("eta", c.eta);
    c.kl_beta = kv.num("kl_beta", c.kl_beta);
    c.clip_eps = kv.num("clip_eps", c.clip_eps);
    c.tolerance = kv.num("tolerance", c.tolerance);
    m.validate();
    return c;
  }
};

struct GradCheckEntry {
  std::string loss;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Relative error |a - n| / max(|a|, |n|, floor) for one coordinate.
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the analytic gradient of `loss` against central differences on
/// every trainable coordinate.
inline GradCheckEntry check_one(const std::string& name, ModelParams& p,
                                const std::function<double(const ModelParams&, Gradients*)>& loss, double h,
                                double floor) {
  Gradients g = Gradients::zeros_like(p);
  loss(p, &g);
  GradCheckEntry e;
  e.loss = name;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (p.tensors[i].frozen) continue;
    auto& data = p.tensors[i].value.data;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double orig = data[k];
      data[k] = orig + h;
      const double up = loss(p, nullptr);
      data[k] = orig - h;
      const double down = loss(p, nullptr);
      data[k] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = relative_error(g.g[i].data[k], numeric, floor);
      ++e.checked;
      if (rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_tensor = p.tensors[i].name;
      }
    }
  }
  return e;
}

/// Gradient check of L_LM_r, L_LM_a, L_RAC, their sum, and the GRPO group
/// objective (both decoders, with clipping and KL active) on random data.
inline GradCheckReport run_gradcheck(const GradCheckConfig& cfg) {
  const ModelConfig& mc = cfg.model;
  ModelParams p = init_params(mc, cfg.seed);
  p.set_trainable({ParamGroup::Embedding, ParamGroup::ReasonBank, ParamGroup::Multimodal, ParamGroup::AnswerDecoder,
                   ParamGroup::ReasonDecoder});
  // Move away from the symmetric initialization of norms and biases.
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    CounterRng r(cfg.seed, "gradcheck-jitter", i);
    for (double& v : p.tensors[i].value.data) v += r.uniform(-0.1, 0.1);
  }
  CounterRng rng(cfg.seed, "gradcheck-data", 0);
  auto rand_seq = [&](int len, TokenId lo) {
    TokenSeq s;
    for (int i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.between(lo, mc.vocab_size - 1)));
    return s;
  };
  const TokenSeq image = rand_seq(std::min(4, mc.max_image_len), 3);
  const TokenSeq text = rand_seq(std::min(5, mc.max_text_len), 3);
  TokenSeq answer = rand_seq(std::min(3, mc.max_answer_len - 1), 3);
  answer.push_back(tok::kEos);
  TokenSeq reason = rand_seq(std::min(5, mc.max_reason_len - 1), 3);
  reason.push_back(tok::kEos);

  GradCheckReport rep;
  auto sup = [&](LossTerms terms) {
    return [&, terms](const ModelParams& q, Gradients* g) {
      return supervised_loss(q, image, text, answer, reason, terms, cfg.eta, g).total;
    };
  };
  rep.entries.push_back(check_one("lm_r", p, sup({true, false, false}), cfg.h, cfg.abs_floor));
  rep.entries.push_back(check_one("lm_a", p, sup({false, true, false}), cfg.h, cfg.abs_floor));
  rep.entries.push_back(check_one("rac", p, sup({false, false, true}), cfg.h, cfg.abs_floor));
  rep.entries.push_back(check_one("rjf", p, sup({true, true, true}), cfg.h, cfg.abs_floor));

  // GRPO objective: fixed rollouts with synthetic old log-probabilities so
  // that ratios straddle the trust region; the reference policy differs
  // from the current one so the KL term is live.
  GrpoConfig gc;
  gc.group_size = 3;
  gc.clip_eps = cfg.clip_eps;
  gc.kl_beta = cfg.kl_beta;
  const ModelParams ref = init_params(mc, cfg.seed + 1);
  GrpoPrompt prompt{image, text, 0};
  GroupRollout group;
  const std::vector<double> adv = {1.0, -0.5, -0.5};
  const double offsets[] = {0.0, 0.5, -0.6, 0.1, -0.05, 0.4, -0.3};
  std::size_t off_i = 0;
  for (int m = 0; m < gc.group_size; ++m) {
    GroupMember mb;
    mb.answer.tokens = rand_seq(2 + m % 2, 3);
    mb.reason.tokens = rand_seq(3 + m, 3);
    const EncodeRun enc = encode_forward(p, image, text);
    const MemoryKV ma = memory_kv(p, Head::Answer, enc.s_m);
    const MemoryKV mr = memory_kv(p, Head::Reason, enc.s_m);
    for (double l : log_prob(p, Head::Answer, ma, mb.answer.tokens))
      mb.answer.per_step_logprob.push_back(l + offsets[off_i++ % 7]);
    for (double l : log_prob(p, Head::Reason, mr, mb.reason.tokens))
      mb.reason.per_step_logprob.push_back(l + offsets[off_i++ % 7]);
    mb.advantage = adv[static_cast<std::size_t>(m)];
    group.members.push_back(std::move(mb));
  }
  rep.entries.push_back(check_one(
      "grpo", p,
      [&](const ModelParams& q, Gradients* g) { return group_objective(q, &ref, prompt, group, gc, g).loss; }, cfg.h,
      cfg.abs_floor));

  for (const auto& e : rep.entries) rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
  rep.passed = rep.max_rel_error < cfg.tolerance;
  return rep;
}

}  // namespace reform
