#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reform/answer_grammar.hpp"
#include "reform/checkpoint.hpp"
#include "reform/forensic_types.hpp"
#include "reform/rng.hpp"
#include "reform/tensor.hpp"

namespace reform {

// ---------------------------------------------------------------------------
// Consistency verifier: two-head bag-of-tokens log-linear classifier
// ---------------------------------------------------------------------------

struct VerifierParams {
  std::size_t vocab_size = 0;
  Mat w_img, b_img;  // vocab x 5, 1 x 5
  Mat w_txt, b_txt;  // vocab x 2, 1 x 2
  double heldout_acc_img = 0.0;
  double heldout_acc_txt = 0.0;
  int epochs_run = 0;
};

struct VerifierExample {
  TokenSeq rationale;
  ImageClass img = ImageClass::NoManip;
  TextClass txt = TextClass::NoManip;
};

struct VerifierTrainConfig {
  double holdout_fraction = 0.2;
  std::uint64_t seed = 1;
  int max_epochs = 400;
  double lr = 0.1;
  double l2 = 1e-4;
  double tolerance = 1e-7;  // stop when the training loss improves by less
};

namespace detail {
/// Sorted unique in-vocabulary token ids (presence features).
inline std::vector<std::size_t> presence(std::span<const TokenId> seq, std::size_t vocab_size) {
  std::vector<std::size_t> f;
  for (TokenId t : seq)
    if (t >= 0 && static_cast<std::size_t>(t) < vocab_size) f.push_back(static_cast<std::size_t>(t));
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

inline std::vector<double> head_scores(const Mat& w, const Mat& b, const std::vector<std::size_t>& feats) {
  std::vector<double> s(b.data.begin(), b.data.end());
  for (std::size_t f : feats)
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += w(f, k);
  return s;
}

inline std::size_t argmax_lowest(std::span<const double> s) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] > s[best]) best = i;
  return best;
}
}  // namespace detail

inline std::pair<ImageClass, TextClass> verifier_predict(const VerifierParams& v, std::span<const TokenId> rationale) {
  const auto feats = detail::presence(rationale, v.vocab_size);
  const auto si = detail::head_scores(v.w_img, v.b_img, feats);
  const auto st = detail::head_scores(v.w_txt, v.b_txt, feats);
  return {static_cast<ImageClass>(detail::argmax_lowest(si)), static_cast<TextClass>(detail::argmax_lowest(st))};
}

/// Deterministic full-batch gradient descent on softmax cross-entropy for
/// both heads, starting from zero weights. The seed only drives the
/// train/holdout split.
inline VerifierParams train_verifier(const std::vector<VerifierExample>& pairs, std::size_t vocab_size,
                                     const VerifierTrainConfig& cfg = {}) {
  if (pairs.size() < 100) throw std::invalid_argument("train_verifier: at least 100 pairs are required");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
    throw std::invalid_argument("train_verifier: holdout_fraction must be in (0,1)");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  CounterRng rng(cfg.seed, "verifier-split", 0);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(pairs.size()))));
  const std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  const std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  std::array<bool, kNumImageClasses> seen_i{};
  std::array<bool, kNumTextClasses> seen_t{};
  for (std::size_t i : train) {
    seen_i[static_cast<std::size_t>(pairs[i].img)] = true;
    seen_t[static_cast<std::size_t>(pairs[i].txt)] = true;
  }
  for (bool s : seen_i)
    if (!s) throw std::invalid_argument("train_verifier: an image class is missing from the training data");
  for (bool s : seen_t)
    if (!s) throw std::invalid_argument("train_verifier: a text class is missing from the training data");

  VerifierParams v;
  v.vocab_size = vocab_size;
  v.w_img = Mat(vocab_size, kNumImageClasses);
  v.b_img = Mat(1, kNumImageClasses);
  v.w_txt = Mat(vocab_size, kNumTextClasses);
  v.b_txt = Mat(1, kNumTextClasses);

  std::vector<std::vector<std::size_t>> feats(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) feats[i] = detail::presence(pairs[i].rationale, vocab_size);

  const double inv_n = 1.0 / static_cast<double>(train.size());
  double prev = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Mat gwi(vocab_size, kNumImageClasses), gbi(1, kNumImageClasses);
    Mat gwt(vocab_size, kNumTextClasses), gbt(1, kNumTextClasses);
    double loss = 0.0;
    auto accumulate = [&](const Mat& w, const Mat& b, Mat& gw, Mat& gb, const std::vector<std::size_t>& f, std::size_t y) {
      const auto s = detail::head_scores(w, b, f);
      const auto lp = log_softmax(s);
      loss -= lp[y] * inv_n;
      for (std::size_t k = 0; k < s.size(); ++k) {
        const double d = (std::exp(lp[k]) - (k == y ? 1.0 : 0.0)) * inv_n;
        gb.data[k] += d;
        for (std::size_t t : f) gw(t, k) += d;
      }
    };
    for (std::size_t i : train) {
      accumulate(v.w_img, v.b_img, gwi, gbi, feats[i], static_cast<std::size_t>(pairs[i].img));
      accumulate(v.w_txt, v.b_txt, gwt, gbt, feats[i], static_cast<std::size_t>(pairs[i].txt));
    }
    auto step = [&](Mat& w, const Mat& g, bool decay) {
      for (std::size_t k = 0; k < w.data.size(); ++k) {
        if (decay) loss += 0.5 * cfg.l2 * w.data[k] * w.data[k];
        w.data[k] -= cfg.lr * (g.data[k] + (decay ? cfg.l2 * w.data[k] : 0.0));
      }
    };
    step(v.w_img, gwi, true);
    step(v.b_img, gbi, false);
    step(v.w_txt, gwt, true);
    step(v.b_txt, gbt, false);
    v.epochs_run = epoch + 1;
    if (prev - loss >= 0.0 && prev - loss < cfg.tolerance) break;
    prev = loss;
  }

  std::size_t ok_i = 0, ok_t = 0;
  for (std::size_t i : hold) {
    const auto [pi, pt] = verifier_predict(v, pairs[i].rationale);
    ok_i += pi == pairs[i].img;
    ok_t += pt == pairs[i].txt;
  }
  v.heldout_acc_img = static_cast<double>(ok_i) / static_cast<double>(hold.size());
  v.heldout_acc_txt = static_cast<double>(ok_t) / static_cast<double>(hold.size());
  return v;
}

inline constexpr const char* kVerifierStage = "verifier";

inline void save_verifier(const VerifierParams& v, const std::string& path) {
  CheckpointData ck;
  ck.stage = kVerifierStage;
  ck.meta["vocab_size"] = std::to_string(v.vocab_size);
  ck.meta["heldout_acc_img"] = std::to_string(v.heldout_acc_img);
  ck.meta["heldout_acc_txt"] = std::to_string(v.heldout_acc_txt);
  ck.meta["epochs_run"] = std::to_string(v.epochs_run);
  ck.tensors = {{"verifier.w_img", v.w_img, true},
                {"verifier.b_img", v.b_img, true},
                {"verifier.w_txt", v.w_txt, true},
                {"verifier.b_txt", v.b_txt, true}};
  write_checkpoint(path, ck);
}

inline VerifierParams load_verifier(const std::string& path) {
  using K = CheckpointError::Kind;
  CheckpointData ck = read_checkpoint(path);
  if (ck.stage != kVerifierStage) throw CheckpointError(K::Format, path + ": not a verifier checkpoint (stage " + ck.stage + ")");
  VerifierParams v;
  try {
    v.vocab_size = std::stoul(ck.meta.at("vocab_size"));
    v.heldout_acc_img = std::stod(ck.meta.at("heldout_acc_img"));
    v.heldout_acc_txt = std::stod(ck.meta.at("heldout_acc_txt"));
    v.epochs_run = std::stoi(ck.meta.at("epochs_run"));
  } catch (const std::exception&) {
    throw CheckpointError(K::Format, path + ": verifier metadata missing or malformed");
  }
  auto take = [&](const char* name, std::size_t rows, std::size_t cols) {
    for (auto& t : ck.tensors)
      if (t.name == name) {
        if (t.value.rows != rows || t.value.cols != cols)
          throw CheckpointError(K::Shape, path + ": shape mismatch for " + name);
        return std::move(t.value);
      }
    throw CheckpointError(K::Format, path + ": missing tensor " + name);
  };
  v.w_img = take("verifier.w_img", v.vocab_size, kNumImageClasses);
  v.b_img = take("verifier.b_img", 1, kNumImageClasses);
  v.w_txt = take("verifier.w_txt", v.vocab_size, kNumTextClasses);
  v.b_txt = take("verifier.b_txt", 1, kNumTextClasses);
  return v;
}

// ---------------------------------------------------------------------------
// Reward components
// ---------------------------------------------------------------------------

struct RewardBreakdown {
  int rc = 0;
  int rbin = 0;
  int rfin = 0;
  int ra = 0;
  double rg = 0.0;
  int rf = 0;
  double rtok = 0.0;
  double total = 0.0;
};

inline int consistency_reward(const VerifierParams& v, std::span<const TokenId> rationale, const StructuredAnswer& pred) {
  const auto [vi, vt] = verifier_predict(v, rationale);
  const ClassPair c = classes_of(pred.option);
  return (vi == c.img ? 1 : 0) + (vt == c.txt ? 1 : 0);
}

struct AccuracyReward {
  int rbin = 0, rfin = 0, ra = 0;
};

inline AccuracyReward accuracy_reward(const StructuredAnswer& pred, const SampleLabel& gt) {
  const ClassPair c = classes_of(pred.option);
  AccuracyReward r;
  r.rbin = binary_of(pred.option) == gt.binary() ? 1 : 0;
  r.rfin = (c.img == gt.img ? 1 : 0) + (c.txt == gt.txt ? 1 : 0);
  r.ra = r.rbin + r.rfin;
  return r;
}

/// IoU at bin centers when the ground truth carries a box; otherwise 1 for
/// abstaining and 0 for a spurious box.
inline double grounding_reward(const StructuredAnswer& pred, const SampleLabel& gt) {
  if (!gt.box) return pred.box ? 0.0 : 1.0;
  if (!pred.box) return 0.0;
  return iou(pred.box->to_box(), *gt.box);
}

inline std::string normalize_word(std::string_view w) {
  std::string out;
  for (char c : w) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

/// Binary caption mask of positions whose normalized surface matches a predicted word.
inline std::vector<std::uint8_t> predicted_token_mask(const StructuredAnswer& pred, std::span<const TokenId> caption,
                                                      const Vocab& vocab) {
  std::vector<std::uint8_t> mask(caption.size(), 0);
  if (!pred.fake_words) return mask;
  std::vector<std::string> words;
  for (TokenId w : *pred.fake_words)
    if (vocab.contains(w)) words.push_back(normalize_word(vocab.surface(w)));
  for (std::size_t i = 0; i < caption.size(); ++i) {
    if (!vocab.contains(caption[i])) continue;
    const std::string s = normalize_word(vocab.surface(caption[i]));
    mask[i] = std::find(words.begin(), words.end(), s) != words.end() ? 1 : 0;
  }
  return mask;
}

inline double token_reward(const StructuredAnswer& pred, const SampleLabel& gt, std::span<const TokenId> caption,
                           const Vocab& vocab) {
  const bool predicted_none = !pred.fake_words || pred.fake_words->empty();
  if (gt.manip_tokens.empty()) return predicted_none ? 1.0 : 0.0;
  if (caption.empty()) return 0.0;
  const auto mask = predicted_token_mask(pred, caption, vocab);
  std::vector<std::uint8_t> truth(caption.size(), 0);
  for (int i : gt.manip_tokens)
    if (i >= 0 && static_cast<std::size_t>(i) < caption.size()) truth[static_cast<std::size_t>(i)] = 1;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < caption.size(); ++i) agree += mask[i] == truth[i];
  return static_cast<double>(agree) / static_cast<double>(caption.size());
}

/// Which components enter the total. Format acts as a gate regardless of
/// whether it is also counted.
struct RewardConfig {
  AnswerMode mode = AnswerMode::Base;
  bool use_c = true;
  bool use_a = true;
  bool use_g = true;
  bool use_f = true;
  bool use_tok = true;  // only meaningful in dgm4 mode
};

inline RewardBreakdown total_reward(std::span<const TokenId> raw_output, std::span<const TokenId> rationale,
                                    const SampleLabel& gt, std::span<const TokenId> caption, const VerifierParams& v,
                                    const Vocab& vocab, const RewardConfig& cfg = {}) {
  RewardBreakdown r;
  const ParseResult parsed = parse_answer(raw_output, cfg.mode, vocab);
  if (!parsed_ok(parsed)) return r;
  const auto& ans = std::get<StructuredAnswer>(parsed);
  r.rf = 1;
  r.rc = consistency_reward(v, rationale, ans);
  const AccuracyReward a = accuracy_reward(ans, gt);
  r.rbin = a.rbin;
  r.rfin = a.rfin;
  r.ra = a.ra;
  r.rg = grounding_reward(ans, gt);
  if (cfg.mode == AnswerMode::Dgm4) r.rtok = token_reward(ans, gt, caption, vocab);
  if (cfg.use_c) r.total += r.rc;
  if (cfg.use_a) r.total += r.ra;
  if (cfg.use_g) r.total += r.rg;
  if (cfg.use_f) r.total += r.rf;
  if (cfg.mode == AnswerMode::Dgm4 && cfg.use_tok) r.total += r.rtok;
  return r;
}

}  // namespace reform
