#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reform/answer_grammar.hpp"
#include "reform/policy_model.hpp"
#include "reform/rewards.hpp"
#include "reform/synth_env.hpp"

namespace reform {

/// Prediction slot: nullopt when the output did not parse.
using Prediction = std::optional<StructuredAnswer>;

inline double binary_acc(std::span<const Prediction> preds, std::span<const SampleLabel> gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("binary_acc: length mismatch");
  if (preds.empty()) throw std::invalid_argument("binary_acc: empty input");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) ok += preds[i] && binary_of(preds[i]->option) == gts[i].binary();
  return static_cast<double>(ok) / static_cast<double>(preds.size());
}

/// Mean precision at the rank of each positive. Ties keep input order.
/// Returns nullopt when there is no positive.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

/// Scored labels: four image manipulations then FullyRewritten.
inline constexpr std::size_t kNumScoredLabels = 5;
using ClassScoreVector = std::array<double, kNumScoredLabels>;

inline std::array<std::uint8_t, kNumScoredLabels> label_targets(const SampleLabel& gt) {
  std::array<std::uint8_t, kNumScoredLabels> y{};
  for (std::size_t k = 0; k < 4; ++k) y[k] = static_cast<std::size_t>(gt.img) == k + 1 ? 1 : 0;
  y[4] = gt.txt == TextClass::FullyRewritten ? 1 : 0;
  return y;
}

/// Sums the option-letter probabilities of each label's options.
inline ClassScoreVector scores_from_option_probs(std::span<const double> option_probs) {
  ClassScoreVector s{};
  for (std::size_t o = 0; o < kNumOptions; ++o) {
    const ClassPair c = classes_of(static_cast<Option>(o));
    if (c.img != ImageClass::NoManip) s[static_cast<std::size_t>(c.img) - 1] += option_probs[o];
    if (c.txt == TextClass::FullyRewritten) s[4] += option_probs[o];
  }
  for (double& v : s) v = std::clamp(v, 0.0, 1.0);
  return s;
}

/// First-step answer distribution restricted to the option letters (raw
/// probabilities, not renormalized).
inline std::array<double, kNumOptions> option_probs(const ModelParams& p, const MemoryKV& mem_answer) {
  const std::vector<double> logits = decode_step(p, Head::Answer, mem_answer, {});
  const std::vector<double> pr = softmax(logits);
  std::array<double, kNumOptions> out{};
  for (std::size_t o = 0; o < kNumOptions; ++o) out[o] = pr[static_cast<std::size_t>(tok::kLetterA) + o];
  return out;
}

inline ClassScoreVector class_scores(const ModelParams& p, const MemoryKV& mem_answer) {
  return scores_from_option_probs(option_probs(p, mem_answer));
}

/// Mean IoU over samples with a ground-truth box; nullopt if there are none.
inline std::optional<double> miou(std::span<const Prediction> preds, std::span<const SampleLabel> gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("miou: length mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!gts[i].box) continue;
    ++n;
    if (preds[i] && preds[i]->box) sum += iou(preds[i]->box->to_box(), *gts[i].box);
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct TokenCounts {
  std::size_t predicted = 0;
  std::size_t correct = 0;
};

inline TokenCounts token_counts(std::span<const Prediction> preds, std::span<const SampleLabel> gts,
                                std::span<const TokenSeq> captions, const Vocab& vocab) {
  if (preds.size() != gts.size() || preds.size() != captions.size())
    throw std::invalid_argument("token_precision: length mismatch");
  TokenCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!preds[i]) continue;
    const auto mask = predicted_token_mask(*preds[i], captions[i], vocab);
    for (std::size_t k = 0; k < mask.size(); ++k) {
      if (!mask[k]) continue;
      ++c.predicted;
      const auto& m = gts[i].manip_tokens;
      c.correct += std::find(m.begin(), m.end(), static_cast<int>(k)) != m.end();
    }
  }
  return c;
}

/// Micro-averaged precision of predicted manipulated-token masks; nullopt
/// when nothing was predicted.
inline std::optional<double> token_precision(std::span<const Prediction> preds, std::span<const SampleLabel> gts,
                                             std::span<const TokenSeq> captions, const Vocab& vocab) {
  const TokenCounts c = token_counts(preds, gts, captions, vocab);
  if (c.predicted == 0) return std::nullopt;
  return static_cast<double>(c.correct) / static_cast<double>(c.predicted);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, kNumScoredLabels> kScoredLabelNames = {
    "face_swap", "face_attribute", "whole_generated", "inpainted_background", "fully_rewritten"};

struct DomainMetrics {
  std::size_t n_samples = 0;
  double acc = 0.0;
  std::optional<double> map;
  std::optional<double> miou;
  std::optional<double> p_tok;
  std::array<std::optional<double>, kNumScoredLabels> ap{};
  std::size_t n_boxed = 0;
  std::size_t tok_predicted = 0;
};

struct MetricsReport {
  std::map<int, DomainMetrics> domains;
  DomainMetrics aggregate;
  std::vector<int> empty_domains;  // requested domains without samples
};

inline nlohmann::json to_json(const DomainMetrics& d) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["n_samples"] = d.n_samples;
  j["acc"] = d.acc;
  j["map"] = opt(d.map);
  j["miou"] = opt(d.miou);
  j["p_tok"] = opt(d.p_tok);
  nlohmann::json ap = nlohmann::json::object();
  for (std::size_t k = 0; k < kNumScoredLabels; ++k) ap[kScoredLabelNames[k]] = opt(d.ap[k]);
  j["per_class_ap"] = ap;
  return j;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  nlohmann::json doms = nlohmann::json::object();
  for (const auto& [d, m] : r.domains) doms[std::to_string(d)] = to_json(m);
  j["domains"] = doms;
  j["aggregate"] = to_json(r.aggregate);
  j["empty_domains"] = r.empty_domains;
  return j;
}

inline std::string render_table(const MetricsReport& r) {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (!v) return std::string("     -");
    std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * *v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "domain      n     ACC    mAP   mIoU  P_tok\n";
  auto row = [&](const std::string& name, const DomainMetrics& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-8s %5zu ", name.c_str(), m.n_samples);
    os << buf << cell(m.acc) << " " << cell(m.map) << " " << cell(m.miou) << " " << cell(m.p_tok) << "\n";
  };
  for (const auto& [d, m] : r.domains) row(std::to_string(d), m);
  row("all", r.aggregate);
  for (int d : r.empty_domains) os << "warning: domain " << d << " has no samples\n";
  return os.str();
}

struct ScoredSample {
  int domain = 0;
  SampleLabel label;
  TokenSeq caption;
  Prediction pred;
  ClassScoreVector scores{};
};

inline DomainMetrics compute_domain(std::span<const ScoredSample> items, const Vocab& vocab, bool with_tokens) {
  DomainMetrics d;
  d.n_samples = items.size();
  std::vector<Prediction> preds;
  std::vector<SampleLabel> gts;
  std::vector<TokenSeq> caps;
  for (const auto& s : items) {
    preds.push_back(s.pred);
    gts.push_back(s.label);
    caps.push_back(s.caption);
    d.n_boxed += s.label.box ? 1 : 0;
  }
  d.acc = binary_acc(preds, gts);
  double sum = 0.0;
  int present = 0;
  for (std::size_t k = 0; k < kNumScoredLabels; ++k) {
    std::vector<double> sc;
    std::vector<std::uint8_t> y;
    for (const auto& s : items) {
      sc.push_back(s.scores[k]);
      y.push_back(label_targets(s.label)[k]);
    }
    d.ap[k] = average_precision(sc, y);
    if (d.ap[k]) sum += *d.ap[k], ++present;
  }
  if (present > 0) d.map = sum / present;
  d.miou = miou(preds, gts);
  if (with_tokens) {
    const TokenCounts c = token_counts(preds, gts, caps, vocab);
    d.tok_predicted = c.predicted;
    if (c.predicted > 0) d.p_tok = static_cast<double>(c.correct) / static_cast<double>(c.predicted);
  }
  return d;
}

/// Per-domain metrics plus an aggregate: ACC, mIoU and P_tok pooled over
/// samples (equivalently weighted by their per-domain populations), mAP as
/// the mean of the per-domain mAPs.
inline MetricsReport build_report(std::span<const ScoredSample> items, const Vocab& vocab, bool with_tokens,
                                  std::span<const int> expected_domains = {}) {
  MetricsReport r;
  std::map<int, std::vector<ScoredSample>> by;
  for (const auto& s : items) by[s.domain].push_back(s);
  for (int d : expected_domains)
    if (!by.count(d)) r.empty_domains.push_back(d);
  if (items.empty()) return r;
  for (const auto& [d, v] : by) r.domains[d] = compute_domain(v, vocab, with_tokens);
  r.aggregate = compute_domain(items, vocab, with_tokens);
  double s = 0.0;
  int n = 0;
  for (const auto& [d, m] : r.domains)
    if (m.map) s += *m.map, ++n;
  r.aggregate.map = n > 0 ? std::optional<double>(s / n) : std::nullopt;
  return r;
}

enum class EvalMode : std::uint8_t { Fast, Explainable };

struct EvalOutput {
  MetricsReport report;
  std::vector<TokenSeq> answers;  // raw greedy answer tokens per sample
  std::vector<TokenSeq> reasons;  // empty in fast mode
  std::vector<ScoredSample> scored;
};

/// Greedy evaluation. Fast mode never touches the reason decoder.
inline EvalOutput eval_run(const ModelParams& p, std::span<const EpisodeSample> samples, const Vocab& vocab, EvalMode mode,
                           AnswerMode answer_mode = AnswerMode::Base, std::span<const int> expected_domains = {}) {
  if (static_cast<std::size_t>(p.config.vocab_size) != vocab.size())
    throw std::invalid_argument("eval_run: model vocabulary size does not match the vocabulary file");
  EvalOutput out;
  CounterRng unused(0, "greedy", 0);
  for (const auto& s : samples) {
    const TokenSeq text = prompt_tokens(s, vocab);
    const EncodeRun enc = encode_forward(p, s.image_tokens, text);
    const MemoryKV mem_a = memory_kv(p, Head::Answer, enc.s_m);
    RolloutOutput ro = sample_sequence(p, Head::Answer, mem_a, 0.0, unused);
    ScoredSample sc;
    sc.domain = s.domain;
    sc.label = s.label;
    sc.caption = s.caption_tokens;
    const ParseResult pr = parse_answer(ro.tokens, answer_mode, vocab);
    if (parsed_ok(pr)) {
      sc.pred = std::get<StructuredAnswer>(pr);
      sc.scores = class_scores(p, mem_a);
    }
    out.answers.push_back(ro.tokens);
    if (mode == EvalMode::Explainable) {
      const MemoryKV mem_r = memory_kv(p, Head::Reason, enc.s_m);
      out.reasons.push_back(sample_sequence(p, Head::Reason, mem_r, 0.0, unused).tokens);
    }
    out.scored.push_back(std::move(sc));
  }
  out.report = build_report(out.scored, vocab, answer_mode == AnswerMode::Dgm4, expected_domains);
  return out;
}

inline bool operator==(const DomainMetrics& a, const DomainMetrics& b) {
  return a.n_samples == b.n_samples && a.acc == b.acc && a.map == b.map && a.miou == b.miou && a.p_tok == b.p_tok &&
         a.ap == b.ap && a.n_boxed == b.n_boxed && a.tok_predicted == b.tok_predicted;
}

inline bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return a.domains == b.domains && a.aggregate == b.aggregate && a.empty_domains == b.empty_domains;
}

}  // namespace reform
