#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "reform/policy_model.hpp"

namespace reform {

struct LossValue {
  double total = 0.0;
  double lm_r = 0.0;
  double lm_a = 0.0;
  double rac = 0.0;
};

struct LmLoss {
  double loss = 0.0;
  Mat dlogits;  // d loss / d logits, zero at masked rows
  std::size_t n_valid = 0;
};

/// Mean token NLL over unmasked positions. `mask` (1 = keep) may be empty.
inline LmLoss lm_loss(const Mat& logits, std::span<const TokenId> target, std::span<const std::uint8_t> mask = {}) {
  if (logits.rows != target.size()) throw std::invalid_argument("lm_loss: logits/target length mismatch");
  if (!mask.empty() && mask.size() != target.size()) throw std::invalid_argument("lm_loss: mask length mismatch");
  LmLoss out;
  out.dlogits = Mat(logits.rows, logits.cols);
  for (std::size_t t = 0; t < target.size(); ++t)
    if (mask.empty() || mask[t]) ++out.n_valid;
  if (out.n_valid == 0) throw std::invalid_argument("lm_loss: every target position is masked");
  const double inv = 1.0 / static_cast<double>(out.n_valid);
  std::vector<double> lp(logits.cols);
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    const auto y = static_cast<std::size_t>(target[t]);
    if (y >= logits.cols) throw std::out_of_range("lm_loss: target id outside vocabulary");
    log_softmax_row(logits.row_span(t), lp);
    out.loss -= lp[y] * inv;
    double* d = out.dlogits.row(t);
    for (std::size_t v = 0; v < logits.cols; ++v) d[v] = std::exp(lp[v]) * inv;
    d[y] -= inv;
  }
  return out;
}

struct PooledEmbedding {
  std::vector<double> vector;
  std::size_t n_valid = 0;
};

inline PooledEmbedding masked_mean_pool(const Mat& states, std::span<const std::uint8_t> mask = {}) {
  if (!mask.empty() && mask.size() != states.rows) throw std::invalid_argument("masked_mean_pool: mask length mismatch");
  PooledEmbedding p;
  p.vector.assign(states.cols, 0.0);
  for (std::size_t r = 0; r < states.rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    ++p.n_valid;
    for (std::size_t c = 0; c < states.cols; ++c) p.vector[c] += states(r, c);
  }
  if (p.n_valid == 0) throw std::invalid_argument("masked_mean_pool: no valid positions");
  for (double& v : p.vector) v /= static_cast<double>(p.n_valid);
  return p;
}

inline Mat masked_mean_pool_backward(std::span<const double> dpool, std::size_t rows, std::span<const std::uint8_t> mask = {}) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r)
    if (mask.empty() || mask[r]) ++n;
  if (n == 0) throw std::invalid_argument("masked_mean_pool_backward: no valid positions");
  Mat d(rows, dpool.size());
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    for (std::size_t c = 0; c < dpool.size(); ++c) d(r, c) = dpool[c] / static_cast<double>(n);
  }
  return d;
}

struct RacLoss {
  double loss = 0.0;
  double cos = 0.0;
  std::vector<double> d_r, d_a;
};

/// max(0, eta - cos(vR, vA)). The gradient is zero at and beyond the kink.
inline RacLoss rac_loss(std::span<const double> vr, std::span<const double> va, double eta) {
  if (vr.size() != va.size()) throw std::invalid_argument("rac_loss: dimension mismatch");
  double nr = 0.0, na = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < vr.size(); ++i) {
    nr += vr[i] * vr[i];
    na += va[i] * va[i];
    dot += vr[i] * va[i];
  }
  nr = std::sqrt(nr);
  na = std::sqrt(na);
  if (nr == 0.0 || na == 0.0) throw std::invalid_argument("rac_loss: zero-norm embedding");
  RacLoss out;
  out.cos = dot / (nr * na);
  out.d_r.assign(vr.size(), 0.0);
  out.d_a.assign(va.size(), 0.0);
  if (eta - out.cos <= 0.0) return out;
  out.loss = eta - out.cos;
  // d cos / d vr = va/(|vr||va|) - cos * vr/|vr|^2
  for (std::size_t i = 0; i < vr.size(); ++i) {
    out.d_r[i] = -(va[i] / (nr * na) - out.cos * vr[i] / (nr * nr));
    out.d_a[i] = -(vr[i] / (nr * na) - out.cos * va[i] / (na * na));
  }
  return out;
}

inline LossValue rjf_loss(double lm_r, double lm_a, double rac) {
  return {lm_r + lm_a + rac, lm_r, lm_a, rac};
}

// ---------------------------------------------------------------------------
// Per-sample supervised objective through the policy
// ---------------------------------------------------------------------------

struct LossTerms {
  bool lm_r = true;
  bool lm_a = true;
  bool rac = true;
};

inline constexpr LossTerms kWarmupTerms{true, false, false};
inline constexpr LossTerms kJointTerms{true, true, true};

/// Decoder target for a token body: the body followed by EOS.
inline TokenSeq with_eos(std::span<const TokenId> body) {
  TokenSeq t(body.begin(), body.end());
  t.push_back(tok::kEos);
  return t;
}

/// Teacher-forced loss of one example. Pooled embeddings use the final
/// decoder states before the vocabulary projection. When `g` is given the
/// gradient of the returned total (times `scale`) is accumulated into it.
inline LossValue supervised_loss(const ModelParams& p, std::span<const TokenId> image, std::span<const TokenId> text,
                                 const TokenSeq& answer_target, const TokenSeq& reason_target, const LossTerms& terms,
                                 double eta, Gradients* g = nullptr, double scale = 1.0) {
  const bool need_a = terms.lm_a || terms.rac;
  const bool need_r = terms.lm_r || terms.rac;
  std::vector<TokenSeq> at, rt;
  if (need_a) at.push_back(answer_target);
  if (need_r) rt.push_back(reason_target);
  ForwardCache cache = forward(p, image, text, at, rt);

  OutputGrads og;
  double lm_r = 0.0, lm_a = 0.0, rac = 0.0;
  if (need_a) {
    og.answer_logits.emplace_back();
    og.answer_hidden.emplace_back();
  }
  if (need_r) {
    og.reason_logits.emplace_back();
    og.reason_hidden.emplace_back();
  }
  if (terms.lm_r) {
    LmLoss l = lm_loss(cache.reasons[0].logits, reason_target);
    lm_r = l.loss;
    og.reason_logits[0] = std::move(l.dlogits);
  }
  if (terms.lm_a) {
    LmLoss l = lm_loss(cache.answers[0].logits, answer_target);
    lm_a = l.loss;
    og.answer_logits[0] = std::move(l.dlogits);
  }
  if (terms.rac) {
    const Mat& hr = cache.reasons[0].hidden;
    const Mat& ha = cache.answers[0].hidden;
    PooledEmbedding vr = masked_mean_pool(hr);
    PooledEmbedding va = masked_mean_pool(ha);
    RacLoss r = rac_loss(vr.vector, va.vector, eta);
    rac = r.loss;
    if (rac > 0.0) {
      og.reason_hidden[0] = masked_mean_pool_backward(r.d_r, hr.rows);
      og.answer_hidden[0] = masked_mean_pool_backward(r.d_a, ha.rows);
    }
  }
  if (g) {
    auto sc = [&](std::vector<Mat>& v) {
      for (auto& m : v) scale_inplace(m, scale);
    };
    sc(og.answer_logits);
    sc(og.answer_hidden);
    sc(og.reason_logits);
    sc(og.reason_hidden);
    backward_into(p, cache, og, *g);
  }
  return rjf_loss(lm_r, lm_a, rac);
}

}  // namespace reform
