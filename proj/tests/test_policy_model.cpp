#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "reform/gradcheck.hpp"
#include "reform/losses.hpp"
#include "reform/policy_model.hpp"

using namespace reform;

namespace {

ModelConfig small_config(int vocab = 16) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_reason_tokens = 4;
  c.n_heads = 2;
  c.ffn_width = 16;
  c.max_answer_len = 8;
  c.max_reason_len = 8;
  c.max_image_len = 8;
  c.max_text_len = 16;
  return c;
}

const TokenSeq kImage = {5, 6, 7, 8, 9, 10};
const TokenSeq kText = {11, 12, 13, 14};

std::filesystem::path tmp(const char* name) { return std::filesystem::temp_directory_path() / name; }

double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST(Init, DeterministicAndFrozenPriming) {
  const ModelParams a = init_params(small_config(), 3);
  const ModelParams b = init_params(small_config(), 3);
  const ModelParams c = init_params(small_config(), 4);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), c.fingerprint());
  for (const auto& t : a.tensors) {
    EXPECT_EQ(t.frozen, group_of(t.name) == ParamGroup::Priming) << t.name;
    for (double v : t.value.data) EXPECT_EQ(v, to_f32(v));
  }
}

TEST(Init, GainFollowsFanIn) {
  const ModelParams p = init_params(small_config(), 1);
  for (const auto& t : p.tensors) {
    if (t.fan_in == 0) continue;
    const double g = 1.0 / std::sqrt(static_cast<double>(t.fan_in));
    for (double v : t.value.data) EXPECT_LE(std::abs(v), g * (1 + 1e-7)) << t.name;
  }
}

TEST(Config, Validation) {
  ModelConfig c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.n_reason_tokens = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Prime, ShapeAndSensitivity) {
  const ModelParams p = init_params(small_config(), 2);
  const Mat a = prime(p, kImage, kText);
  EXPECT_EQ(a.rows, 4u);
  EXPECT_EQ(prime(p, TokenSeq{5}, TokenSeq{6, 7}).rows, 4u);
  TokenSeq img2 = kImage;
  img2[2] = 15;
  EXPECT_GT(max_abs_diff(a, prime(p, img2, kText)), 0.0);
  TokenSeq too_long(9, 5);
  EXPECT_THROW(prime(p, too_long, kText), std::length_error);
}

TEST(Encode, ShapeDeterminismAndPrimedSensitivity) {
  ModelConfig c = small_config(32);
  c.n_reason_tokens = 32;
  c.max_image_len = 8;
  c.max_text_len = 16;
  const ModelParams p = init_params(c, 2);
  TokenSeq img(8), txt(16);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<TokenId>(5 + i);
  for (std::size_t i = 0; i < txt.size(); ++i) txt[i] = static_cast<TokenId>(10 + i);
  const Mat primed = prime(p, img, txt);
  const Mat s1 = encode(p, img, primed, txt);
  EXPECT_EQ(s1.rows, 56u);
  EXPECT_EQ(s1.data, encode(p, img, primed, txt).data);
  Mat other = primed;
  other(0, 0) += 0.5;
  EXPECT_GT(max_abs_diff(s1, encode(p, img, other, txt)), 0.0);
}

TEST(Decode, SoftmaxNormalizedAndCausal) {
  const ModelParams p = init_params(small_config(), 5);
  const EncodeRun enc = encode_forward(p, kImage, kText);
  const MemoryKV mem = memory_kv(p, Head::Answer, enc.s_m);
  const TokenSeq prefix = {7, 3, 9};
  const auto logits = decode_step(p, Head::Answer, mem, prefix);
  double s = 0.0;
  for (double v : softmax(logits)) s += v;
  EXPECT_NEAR(s, 1.0, 1e-9);

  TokenSeq input{tok::kBos};
  input.insert(input.end(), prefix.begin(), prefix.end());
  const DecodeRun short_run = decoder_forward(p, Head::Answer, mem, input);
  input.push_back(12);
  input.push_back(4);
  const DecodeRun long_run = decoder_forward(p, Head::Answer, mem, input);
  for (std::size_t t = 0; t < short_run.logits.rows; ++t)
    for (std::size_t v = 0; v < short_run.logits.cols; ++v) EXPECT_EQ(short_run.logits(t, v), long_run.logits(t, v));

  EXPECT_THROW(decode_step(p, Head::Answer, mem, TokenSeq(8, 5)), std::length_error);
}

TEST(Decode, AnswerIndependentOfReasonDecoder) {
  const ModelParams p = init_params(small_config(), 6);
  const TokenSeq ans = {15, 10, 5, 11, 2};
  const ForwardCache alone = forward(p, kImage, kText, {ans}, {});
  const ForwardCache both = forward(p, kImage, kText, {ans}, {{40 % 16, 3, 2}});
  EXPECT_EQ(alone.answers[0].logits.data, both.answers[0].logits.data);
}

TEST(Decode, StepperMatchesFullForward) {
  const ModelParams p = init_params(small_config(), 8);
  const EncodeRun enc = encode_forward(p, kImage, kText);
  const MemoryKV mem = memory_kv(p, Head::Reason, enc.s_m);
  const TokenSeq input = {tok::kBos, 9, 10, 11, 12};
  const DecodeRun full = decoder_forward(p, Head::Reason, mem, input);
  DecoderStepper st(p, Head::Reason, mem);
  for (std::size_t t = 0; t < input.size(); ++t) {
    const auto row = st.step(input[t]);
    for (std::size_t v = 0; v < row.size(); ++v) EXPECT_NEAR(row[v], full.logits(t, v), 1e-12);
  }
}

TEST(Sample, GreedyDeterministicAndLogprobsConsistent) {
  const ModelParams p = init_params(small_config(), 9);
  const EncodeRun enc = encode_forward(p, kImage, kText);
  const MemoryKV mem = memory_kv(p, Head::Reason, enc.s_m);
  CounterRng r1(1, "s", 0), r2(2, "s", 0);
  const RolloutOutput g1 = sample_sequence(p, Head::Reason, mem, 0.0, r1);
  const RolloutOutput g2 = sample_sequence(p, Head::Reason, mem, 0.0, r2);
  EXPECT_EQ(g1.tokens, g2.tokens);

  for (int k = 0; k < 20; ++k) {
    CounterRng a(7, "s", static_cast<std::uint64_t>(k)), b(7, "s", static_cast<std::uint64_t>(k));
    const RolloutOutput x = sample_sequence(p, Head::Reason, mem, 1.0, a);
    const RolloutOutput y = sample_sequence(p, Head::Reason, mem, 1.0, b);
    EXPECT_EQ(x.tokens, y.tokens);
    double sum = 0.0;
    for (double l : x.per_step_logprob) {
      EXPECT_LE(l, 0.0);
      sum += l;
    }
    EXPECT_NEAR(x.total_logprob, sum, 1e-12);
    EXPECT_EQ(x.terminated == Termination::Eos, x.tokens.back() == tok::kEos);
    const auto replay = log_prob(p, Head::Reason, mem, x.tokens);
    ASSERT_EQ(replay.size(), x.per_step_logprob.size());
    for (std::size_t t = 0; t < replay.size(); ++t) EXPECT_NEAR(replay[t], x.per_step_logprob[t], 1e-10);
  }
}

TEST(LogProb, ClosedFormCases) {
  // Output head zeroed so logits equal the bias.
  ModelParams p = init_params(small_config(8), 10);
  const DecoderIdx& D = p.layout.answer;
  std::fill(p[D.out.w].data.begin(), p[D.out.w].data.end(), 0.0);
  std::fill(p[D.out.b].data.begin(), p[D.out.b].data.end(), 0.0);
  const TokenSeq img = {5, 6}, txt = {7};
  MemoryKV mem = memory_kv(p, Head::Answer, encode_forward(p, img, txt).s_m);
  for (double l : log_prob(p, Head::Answer, mem, TokenSeq{3, 5, 7})) EXPECT_NEAR(l, -std::log(8.0), 1e-15);

  ModelParams q = init_params(small_config(4), 10);
  const DecoderIdx& E = q.layout.answer;
  std::fill(q[E.out.w].data.begin(), q[E.out.w].data.end(), 0.0);
  std::fill(q[E.out.b].data.begin(), q[E.out.b].data.end(), 0.0);
  q[E.out.b].data[3] = 20.0;
  mem = memory_kv(q, Head::Answer, encode_forward(q, TokenSeq{3}, TokenSeq{3}).s_m);
  const double l = log_prob(q, Head::Answer, mem, TokenSeq{3})[0];
  EXPECT_GT(l, -1e-8);
  EXPECT_NEAR(l, -std::log1p(3.0 * std::exp(-20.0)), 1e-12);
}

TEST(Backward, FrozenPrimingGetsZeroAndLinearity) {
  ModelParams p = init_params(small_config(), 11);
  const TokenSeq ans = {16 - 1, 2}, rea = {9, 10, 2};
  Gradients g1 = Gradients::zeros_like(p), g2 = Gradients::zeros_like(p);
  supervised_loss(p, kImage, kText, ans, rea, kJointTerms, 0.9, &g1, 1.0);
  supervised_loss(p, kImage, kText, ans, rea, kJointTerms, 0.9, &g2, 2.0);
  bool any_nonzero = false;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    for (std::size_t k = 0; k < g1.g[i].data.size(); ++k) {
      if (p.tensors[i].frozen) {
        EXPECT_EQ(g1.g[i].data[k], 0.0) << p.tensors[i].name;
      } else {
        EXPECT_NEAR(g2.g[i].data[k], 2.0 * g1.g[i].data[k], 1e-14 + 1e-12 * std::abs(g1.g[i].data[k]));
        any_nonzero = any_nonzero || g1.g[i].data[k] != 0.0;
      }
    }
  }
  EXPECT_TRUE(any_nonzero);
}

TEST(Backward, StaleCacheRejected) {
  ModelParams p = init_params(small_config(), 12);
  const ForwardCache c = forward(p, kImage, kText, {{3, 2}}, {});
  p[p.layout.tok].data[0] += 1.0;
  EXPECT_THROW(backward(p, c, OutputGrads{}), std::logic_error);
}

TEST(Backward, FiniteDifferenceSmallModel) {
  const GradCheckReport r = run_gradcheck(GradCheckConfig{});
  for (const auto& e : r.entries) {
    EXPECT_LT(e.max_rel_error, 1e-4) << e.loss << " worst " << e.worst_tensor;
    EXPECT_GT(e.checked, 0u);
  }
  EXPECT_TRUE(r.passed);
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto path = tmp("reform_pm_rt.ckpt");
  ModelParams p = init_params(small_config(), 13);
  p.set_trainable({ParamGroup::ReasonBank});
  save_checkpoint(p, "warmup", path.string(), {{"step", "7"}});
  const LoadedCheckpoint l = load_checkpoint(path.string(), small_config());
  EXPECT_EQ(l.stage_tag, "warmup");
  EXPECT_EQ(l.meta.at("step"), "7");
  ASSERT_EQ(l.params.tensors.size(), p.tensors.size());
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    EXPECT_EQ(l.params.tensors[i].value.data, p.tensors[i].value.data);
    EXPECT_EQ(l.params.tensors[i].frozen, p.tensors[i].frozen);
  }
  EXPECT_EQ(l.params.fingerprint(), p.fingerprint());
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedBlobIsChecksumError) {
  const auto path = tmp("reform_pm_trunc.ckpt");
  save_checkpoint(init_params(small_config(), 14), "sft", path.string());
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  try {
    load_checkpoint(path.string());
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Checksum);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptByteIsChecksumError) {
  const auto path = tmp("reform_pm_corrupt.ckpt");
  save_checkpoint(init_params(small_config(), 14), "sft", path.string());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    f.put('\x7f');
  }
  try {
    load_checkpoint(path.string());
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Checksum);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, VocabMismatchIsShapeError) {
  const auto path = tmp("reform_pm_shape.ckpt");
  save_checkpoint(init_params(small_config(16), 15), "sft", path.string());
  try {
    load_checkpoint(path.string(), small_config(20));
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Shape);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, VersionMismatch) {
  const auto path = tmp("reform_pm_version.ckpt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "REFORM-CHECKPOINT\nversion 99\nend\n";
  }
  try {
    read_checkpoint(path.string());
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Version);
  }
  std::filesystem::remove(path);
}
