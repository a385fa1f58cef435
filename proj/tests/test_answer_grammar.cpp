#include <gtest/gtest.h>

#include <random>

#include "reform/answer_grammar.hpp"

using namespace reform;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::build(3);
  return v;
}

TokenSeq toks(std::string_view text) { return tokenize_answer_text(text, vocab()); }

ParseResult parse(std::string_view text, AnswerMode mode = AnswerMode::Base) {
  return parse_answer(toks(text), mode, vocab());
}

FormatErrorKind error_of(const ParseResult& r) { return std::get<FormatError>(r).kind; }

}  // namespace

TEST(Prompt, DeterministicAndContainsOptions) {
  PromptSpec spec;
  spec.caption = {vocab().id("minister"), vocab().id("city")};
  const TokenSeq a = render_prompt(spec, vocab());
  EXPECT_EQ(a, render_prompt(spec, vocab()));
  for (std::size_t k = 0; k < kNumOptions; ++k)
    EXPECT_NE(std::find(a.begin(), a.end(), tok::letter(static_cast<Option>(k))), a.end());
  EXPECT_EQ(a.back(), vocab().id("answer:"));
}

TEST(Prompt, GroundingClause) {
  PromptSpec spec;
  spec.caption = {vocab().id("team")};
  const TokenSeq with = render_prompt(spec, vocab());
  const TokenSeq clause = {vocab().id("locate"), vocab().id("manipulated"), vocab().id("face")};
  EXPECT_NE(std::search(with.begin(), with.end(), clause.begin(), clause.end()), with.end());
  spec.include_grounding_clause = false;
  const TokenSeq without = render_prompt(spec, vocab());
  EXPECT_EQ(std::search(without.begin(), without.end(), clause.begin(), clause.end()), without.end());
}

TEST(Prompt, CaptionChangeOnlyTouchesCaptionSpan) {
  PromptSpec s1, s2;
  s1.caption = {vocab().id("team"), vocab().id("city"), vocab().id("storm")};
  s2.caption = {vocab().id("team"), vocab().id("film"), vocab().id("storm")};
  const TokenSeq a = render_prompt(s1, vocab()), b = render_prompt(s2, vocab());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_caption = i >= kPromptCaptionOffset && i < kPromptCaptionOffset + s1.caption.size();
    if (!in_caption) {
      EXPECT_EQ(a[i], b[i]) << i;
    }
  }
  EXPECT_NE(a[kPromptCaptionOffset + 1], b[kPromptCaptionOffset + 1]);
}

TEST(Prompt, EmptyCaptionRejected) {
  EXPECT_THROW(render_prompt(PromptSpec{}, vocab()), std::invalid_argument);
}

TEST(Parse, SpecExamples) {
  const auto a = parse("A");
  ASSERT_TRUE(parsed_ok(a));
  EXPECT_EQ(std::get<StructuredAnswer>(a).option, Option::A);
  EXPECT_FALSE(std::get<StructuredAnswer>(a).box);

  const auto b = parse("B [12,20,45,60]");
  ASSERT_TRUE(parsed_ok(b));
  const auto& ans = std::get<StructuredAnswer>(b);
  EXPECT_EQ(ans.option, Option::B);
  ASSERT_TRUE(ans.box);
  const BBox box = ans.box->to_box();
  EXPECT_DOUBLE_EQ(box.x1(), 0.125);
  EXPECT_DOUBLE_EQ(box.y1(), 0.205);
  EXPECT_DOUBLE_EQ(box.x2(), 0.455);
  EXPECT_DOUBLE_EQ(box.y2(), 0.605);

  EXPECT_EQ(error_of(parse("D [1,2,3,4]")), FormatErrorKind::BoxWithoutFace);
  EXPECT_EQ(error_of(parse("B [45,20,12,60]")), FormatErrorKind::BadCoordinates);
}

TEST(Parse, ErrorKinds) {
  EXPECT_EQ(error_of(parse("")), FormatErrorKind::MissingOption);
  EXPECT_EQ(error_of(parse("[1,2,3,4]")), FormatErrorKind::MissingOption);
  EXPECT_EQ(error_of(parse("B [1,2,3")), FormatErrorKind::Truncated);
  EXPECT_EQ(error_of(parse("B [1,2,3,100]")), FormatErrorKind::BadCoordinates);
  EXPECT_EQ(error_of(parse("B [01,2,3,4]")), FormatErrorKind::BadCoordinates);
  EXPECT_EQ(error_of(parse("B [1;2,3,4]")), FormatErrorKind::BadCoordinates);
  EXPECT_EQ(error_of(parse("A B")), FormatErrorKind::ExtraneousTokens);
  EXPECT_EQ(error_of(parse("A none")), FormatErrorKind::ExtraneousTokens);
  EXPECT_EQ(error_of(parse("J", AnswerMode::Dgm4)), FormatErrorKind::Truncated);
  EXPECT_EQ(error_of(parse("J [", AnswerMode::Dgm4)), FormatErrorKind::Truncated);
  EXPECT_EQ(error_of(parse("J 7", AnswerMode::Dgm4)), FormatErrorKind::ExtraneousTokens);
}

TEST(Parse, TrailingEosAccepted) {
  TokenSeq t = toks("C [10,10,30,30]");
  t.push_back(tok::kEos);
  EXPECT_TRUE(parsed_ok(parse_answer(t, AnswerMode::Base, vocab())));
  t.push_back(tok::kEos);
  EXPECT_FALSE(parsed_ok(parse_answer(t, AnswerMode::Base, vocab())));
}

TEST(Parse, Dgm4Words) {
  const auto r = parse("J none", AnswerMode::Dgm4);
  ASSERT_TRUE(parsed_ok(r));
  ASSERT_TRUE(std::get<StructuredAnswer>(r).fake_words);
  EXPECT_TRUE(std::get<StructuredAnswer>(r).fake_words->empty());

  const auto w = parse("F [10,10,30,30] reportedly secretly", AnswerMode::Dgm4);
  ASSERT_TRUE(parsed_ok(w));
  const auto& fw = *std::get<StructuredAnswer>(w).fake_words;
  EXPECT_EQ(fw, (TokenSeq{vocab().id("reportedly"), vocab().id("secretly")}));
}

TEST(Serialize, SpecExamples) {
  StructuredAnswer a;
  EXPECT_EQ(serialize_answer(a), TokenSeq{tok::letter(Option::A)});

  StructuredAnswer f{Option::F, BinBox{{10, 10, 30, 30}}, std::nullopt};
  EXPECT_EQ(serialize_answer(f), toks("F [10,10,30,30]"));
  EXPECT_EQ(answer_to_text(f, vocab()), "F [10,10,30,30]");

  StructuredAnswer j{Option::J, std::nullopt, std::vector<TokenId>{}};
  EXPECT_EQ(serialize_answer(j), (TokenSeq{tok::letter(Option::J), tok::kNone}));
  EXPECT_EQ(answer_to_text(j, vocab()), "J none");
}

TEST(Serialize, ExhaustiveRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> bin(0, 99);
  for (std::size_t k = 0; k < kNumOptions; ++k) {
    const auto opt = static_cast<Option>(k);
    for (int trial = 0; trial < 50; ++trial) {
      StructuredAnswer a;
      a.option = opt;
      if (is_face_class(classes_of(opt).img) && trial % 2 == 0) {
        BinBox b;
        do b.bins = {bin(rng), bin(rng), bin(rng), bin(rng)};
        while (!b.valid());
        a.box = b;
      }
      const auto r = parse_answer(serialize_answer(a), AnswerMode::Base, vocab());
      ASSERT_TRUE(parsed_ok(r));
      EXPECT_EQ(std::get<StructuredAnswer>(r), a);
      EXPECT_EQ(tokenize_answer_text(answer_to_text(a, vocab()), vocab()), serialize_answer(a));
    }
  }
}

TEST(FormatReward, AgreesWithParse) {
  EXPECT_EQ(format_reward(toks("B [12,20,45,60]"), AnswerMode::Base, vocab()), 1);
  EXPECT_EQ(format_reward(TokenSeq{}, AnswerMode::Base, vocab()), 0);
  EXPECT_EQ(format_reward(toks("B [45,20,12,60]"), AnswerMode::Base, vocab()), 0);
}

TEST(Fuzz, RandomSequencesNeverCrash) {
  std::mt19937_64 rng(17);
  // Bias toward grammar tokens so deep parser states are exercised.
  std::uniform_int_distribution<int> small(0, 30);
  std::uniform_int_distribution<int> any(0, static_cast<int>(vocab().size()) - 1);
  std::uniform_int_distribution<int> len(0, 64);
  int ok = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    TokenSeq t(static_cast<std::size_t>(len(rng)));
    for (auto& x : t) x = trial % 2 ? small(rng) : any(rng);
    for (AnswerMode m : {AnswerMode::Base, AnswerMode::Dgm4}) {
      const ParseResult r = parse_answer(t, m, vocab());
      EXPECT_EQ(format_reward(t, m, vocab()), parsed_ok(r) ? 1 : 0);
      ok += parsed_ok(r);
    }
  }
  EXPECT_GE(ok, 0);
}

TEST(TextRendering, UnknownWordsBecomePad) {
  const TokenSeq t = tokenize_answer_text("B bogusword", vocab());
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[1], tok::kPad);
  EXPECT_FALSE(parsed_ok(parse_answer(t, AnswerMode::Dgm4, vocab())));
}
