#pragma once

#include <array>
#include <cctype>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "reform/forensic_types.hpp"

namespace reform {

enum class AnswerMode : std::uint8_t { Base, Dgm4 };

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

struct OptionDescription {
  Option letter;
  ImageClass img;
  TextClass txt;
};

inline std::array<OptionDescription, kNumOptions> default_option_set() {
  std::array<OptionDescription, kNumOptions> out{};
  for (std::size_t i = 0; i < kNumOptions; ++i) {
    const auto opt = static_cast<Option>(i);
    out[i] = {opt, classes_of(opt).img, classes_of(opt).txt};
  }
  return out;
}

struct PromptSpec {
  TokenSeq caption;
  bool include_grounding_clause = true;
  std::array<OptionDescription, kNumOptions> option_set = default_option_set();
};

namespace detail {
inline std::string_view image_desc(ImageClass c) {
  switch (c) {
    case ImageClass::NoManip: return "no";
    case ImageClass::FaceSwap: return "face-swap";
    case ImageClass::FaceAttribute: return "face-attribute";
    case ImageClass::WholeGenerated: return "whole-generated";
    case ImageClass::InpaintedBackground: return "inpainted-background";
  }
  return "no";
}
}  // namespace detail

/// Token realization of the question template: image marker, caption, the
/// ten options as (letter, image description, text description) triples,
/// the optional grounding clause and the answer cue.
inline TokenSeq render_prompt(const PromptSpec& spec, const Vocab& vocab) {
  if (spec.caption.empty()) throw std::invalid_argument("render_prompt: caption must be nonempty");
  for (std::size_t i = 0; i < kNumOptions; ++i) {
    const auto& d = spec.option_set[i];
    if (d.letter != static_cast<Option>(i) || classes_of(d.letter) != ClassPair{d.img, d.txt})
      throw std::invalid_argument("render_prompt: option set must follow the A..J template order");
  }
  TokenSeq out;
  out.reserve(spec.caption.size() + 40);
  out.push_back(vocab.id("<image>"));
  out.push_back(vocab.id("caption:"));
  out.insert(out.end(), spec.caption.begin(), spec.caption.end());
  out.push_back(vocab.id("question:"));
  for (const auto& d : spec.option_set) {
    out.push_back(tok::letter(d.letter));
    out.push_back(vocab.id(detail::image_desc(d.img)));
    out.push_back(vocab.id(d.txt == TextClass::NoManip ? "no" : "fully-rewritten"));
  }
  if (spec.include_grounding_clause) {
    out.push_back(vocab.id("locate"));
    out.push_back(vocab.id("manipulated"));
    out.push_back(vocab.id("face"));
  }
  out.push_back(vocab.id("answer:"));
  return out;
}

/// Offset of the caption span inside a rendered prompt.
inline constexpr std::size_t kPromptCaptionOffset = 2;

// ---------------------------------------------------------------------------
// Structured answers
// ---------------------------------------------------------------------------

struct StructuredAnswer {
  Option option = Option::A;
  std::optional<BinBox> box;
  /// Engaged only in dgm4 mode; an engaged empty list is the literal NONE.
  std::optional<std::vector<TokenId>> fake_words;

  friend bool operator==(const StructuredAnswer&, const StructuredAnswer&) = default;
};

enum class FormatErrorKind : std::uint8_t { MissingOption, BadCoordinates, ExtraneousTokens, BoxWithoutFace, Truncated };

inline std::string_view to_string(FormatErrorKind k) noexcept {
  switch (k) {
    case FormatErrorKind::MissingOption: return "missing_option";
    case FormatErrorKind::BadCoordinates: return "bad_coordinates";
    case FormatErrorKind::ExtraneousTokens: return "extraneous_tokens";
    case FormatErrorKind::BoxWithoutFace: return "box_without_face";
    case FormatErrorKind::Truncated: return "truncated";
  }
  return "truncated";
}

struct FormatError {
  FormatErrorKind kind;
  std::size_t position;
  friend bool operator==(const FormatError&, const FormatError&) = default;
};

using ParseResult = std::variant<StructuredAnswer, FormatError>;

inline bool parsed_ok(const ParseResult& r) noexcept { return std::holds_alternative<StructuredAnswer>(r); }

/// Strict parser for `<letter> [ "[" b "," b "," b "," b "]" ] [words | none]`.
/// A single trailing EOS is accepted and ignored.
inline ParseResult parse_answer(std::span<const TokenId> raw, AnswerMode mode, const Vocab& vocab) {
  std::size_t n = raw.size();
  if (n > 0 && raw[n - 1] == tok::kEos) --n;
  std::size_t pos = 0;
  auto at_end = [&] { return pos >= n; };

  if (at_end() || !tok::is_letter(raw[pos])) return FormatError{FormatErrorKind::MissingOption, pos};
  StructuredAnswer ans;
  ans.option = tok::option_of_letter(raw[pos++]);

  if (!at_end() && raw[pos] == tok::kOpenBracket) {
    const std::size_t box_start = pos;
    ++pos;
    BinBox bb;
    for (int c = 0; c < 4; ++c) {
      if (at_end()) return FormatError{FormatErrorKind::Truncated, pos};
      if (!tok::is_digit(raw[pos])) return FormatError{FormatErrorKind::BadCoordinates, pos};
      int value = tok::digit_value(raw[pos++]);
      if (!at_end() && tok::is_digit(raw[pos])) {
        if (value == 0) return FormatError{FormatErrorKind::BadCoordinates, pos};  // leading zero
        value = value * 10 + tok::digit_value(raw[pos++]);
        if (!at_end() && tok::is_digit(raw[pos])) return FormatError{FormatErrorKind::BadCoordinates, pos};
      }
      bb.bins[static_cast<std::size_t>(c)] = value;
      if (at_end()) return FormatError{FormatErrorKind::Truncated, pos};
      const TokenId expect = c < 3 ? tok::kComma : tok::kCloseBracket;
      if (raw[pos] != expect) return FormatError{FormatErrorKind::BadCoordinates, pos};
      ++pos;
    }
    if (!bb.valid()) return FormatError{FormatErrorKind::BadCoordinates, box_start};
    if (!is_face_class(classes_of(ans.option).img)) return FormatError{FormatErrorKind::BoxWithoutFace, box_start};
    ans.box = bb;
  }

  if (mode == AnswerMode::Dgm4) {
    if (at_end()) return FormatError{FormatErrorKind::Truncated, pos};
    if (raw[pos] == tok::kNone) {
      ++pos;
      ans.fake_words = std::vector<TokenId>{};
    } else {
      std::vector<TokenId> words;
      while (!at_end() && vocab.is_caption_word(raw[pos])) words.push_back(raw[pos++]);
      if (words.empty()) return FormatError{FormatErrorKind::ExtraneousTokens, pos};
      ans.fake_words = std::move(words);
    }
  }

  if (!at_end()) return FormatError{FormatErrorKind::ExtraneousTokens, pos};
  return ans;
}

/// Canonical token form; parse_answer(serialize_answer(a)) == a.
inline TokenSeq serialize_answer(const StructuredAnswer& ans) {
  TokenSeq out{tok::letter(ans.option)};
  if (ans.box) {
    out.push_back(tok::kOpenBracket);
    for (std::size_t c = 0; c < 4; ++c) {
      const int b = ans.box->bins[c];
      if (b >= 10) out.push_back(tok::digit(b / 10));
      out.push_back(tok::digit(b % 10));
      out.push_back(c < 3 ? tok::kComma : tok::kCloseBracket);
    }
  }
  if (ans.fake_words) {
    if (ans.fake_words->empty())
      out.push_back(tok::kNone);
    else
      out.insert(out.end(), ans.fake_words->begin(), ans.fake_words->end());
  }
  return out;
}

inline int format_reward(std::span<const TokenId> raw, AnswerMode mode, const Vocab& vocab) {
  return parsed_ok(parse_answer(raw, mode, vocab)) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Canonical text rendering (reports, predictions files)
// ---------------------------------------------------------------------------

inline std::string answer_to_text(const StructuredAnswer& ans, const Vocab& vocab) {
  std::string s(1, letter_of(ans.option));
  if (ans.box) {
    s += " [";
    for (std::size_t c = 0; c < 4; ++c) {
      s += std::to_string(ans.box->bins[c]);
      s += c < 3 ? "," : "]";
    }
  }
  if (ans.fake_words) {
    if (ans.fake_words->empty()) {
      s += " none";
    } else {
      for (TokenId w : *ans.fake_words) s += " " + vocab.surface(w);
    }
  }
  return s;
}

/// Inverse of the text rendering at the token level. Unknown words map to
/// PAD so the grammar rejects them instead of the tokenizer throwing.
inline TokenSeq tokenize_answer_text(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '[') {
      out.push_back(tok::kOpenBracket), ++i;
    } else if (c == ']') {
      out.push_back(tok::kCloseBracket), ++i;
    } else if (c == ',') {
      out.push_back(tok::kComma), ++i;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      out.push_back(tok::digit(c - '0')), ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != '[' &&
             text[j] != ']' && text[j] != ',')
        ++j;
      const std::string_view word = text.substr(i, j - i);
      if (word.size() == 1 && word[0] >= 'A' && word[0] <= 'J')
        out.push_back(tok::kLetterA + (word[0] - 'A'));
      else
        out.push_back(vocab.find(word).value_or(tok::kPad));
      i = j;
    }
  }
  return out;
}

}  // namespace reform
