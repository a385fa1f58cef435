#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace reform {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Thrown for malformed files, schema violations and vocabulary mismatches.
class FormatFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Label taxonomy
// ---------------------------------------------------------------------------

enum class ImageClass : std::uint8_t { NoManip, FaceSwap, FaceAttribute, WholeGenerated, InpaintedBackground };
enum class TextClass : std::uint8_t { NoManip, FullyRewritten };
enum class Binary : std::uint8_t { Real, Fake };
enum class Option : std::uint8_t { A, B, C, D, E, F, G, H, I, J };

inline constexpr std::size_t kNumImageClasses = 5;
inline constexpr std::size_t kNumTextClasses = 2;
inline constexpr std::size_t kNumOptions = 10;

inline constexpr std::array<ImageClass, kNumImageClasses> kAllImageClasses = {
    ImageClass::NoManip, ImageClass::FaceSwap, ImageClass::FaceAttribute, ImageClass::WholeGenerated,
    ImageClass::InpaintedBackground};

struct ClassPair {
  ImageClass img = ImageClass::NoManip;
  TextClass txt = TextClass::NoManip;
  friend bool operator==(const ClassPair&, const ClassPair&) = default;
};

namespace detail {
// Row order follows the A..J option list of the prompt template.
inline constexpr std::array<ClassPair, kNumOptions> kOptionTable = {{
    {ImageClass::NoManip, TextClass::NoManip},
    {ImageClass::FaceSwap, TextClass::NoManip},
    {ImageClass::FaceAttribute, TextClass::NoManip},
    {ImageClass::WholeGenerated, TextClass::NoManip},
    {ImageClass::InpaintedBackground, TextClass::NoManip},
    {ImageClass::FaceSwap, TextClass::FullyRewritten},
    {ImageClass::FaceAttribute, TextClass::FullyRewritten},
    {ImageClass::WholeGenerated, TextClass::FullyRewritten},
    {ImageClass::InpaintedBackground, TextClass::FullyRewritten},
    {ImageClass::NoManip, TextClass::FullyRewritten},
}};
}  // namespace detail

constexpr Option option_of(ImageClass img, TextClass txt) noexcept {
  for (std::size_t i = 0; i < kNumOptions; ++i)
    if (detail::kOptionTable[i].img == img && detail::kOptionTable[i].txt == txt) return static_cast<Option>(i);
  return Option::A;  // unreachable: the table covers the full product
}

constexpr ClassPair classes_of(Option opt) noexcept { return detail::kOptionTable[static_cast<std::size_t>(opt)]; }

constexpr Binary binary_of(Option opt) noexcept { return opt == Option::A ? Binary::Real : Binary::Fake; }

constexpr char letter_of(Option opt) noexcept { return static_cast<char>('A' + static_cast<int>(opt)); }

inline std::optional<Option> option_from_letter(char c) noexcept {
  if (c < 'A' || c > 'J') return std::nullopt;
  return static_cast<Option>(c - 'A');
}

constexpr bool is_face_class(ImageClass c) noexcept {
  return c == ImageClass::FaceSwap || c == ImageClass::FaceAttribute;
}

inline std::string_view to_string(ImageClass c) noexcept {
  switch (c) {
    case ImageClass::NoManip: return "NoManip";
    case ImageClass::FaceSwap: return "FaceSwap";
    case ImageClass::FaceAttribute: return "FaceAttribute";
    case ImageClass::WholeGenerated: return "WholeGenerated";
    case ImageClass::InpaintedBackground: return "InpaintedBackground";
  }
  return "NoManip";
}

inline std::string_view to_string(TextClass c) noexcept {
  return c == TextClass::NoManip ? "NoManip" : "FullyRewritten";
}

inline std::optional<ImageClass> image_class_from_string(std::string_view s) noexcept {
  for (ImageClass c : kAllImageClasses)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

inline std::optional<TextClass> text_class_from_string(std::string_view s) noexcept {
  if (s == "NoManip") return TextClass::NoManip;
  if (s == "FullyRewritten") return TextClass::FullyRewritten;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline constexpr int kCoordBins = 100;

/// Bin index of a normalized coordinate; 1.0 lands in the last bin.
inline int coord_to_bin(double c) noexcept {
  const int k = static_cast<int>(std::floor(c * kCoordBins));
  return std::clamp(k, 0, kCoordBins - 1);
}

inline double bin_center(int k) noexcept { return (k + 0.5) / kCoordBins; }

/// Axis-aligned box in normalized image coordinates. Degenerate or
/// out-of-range boxes are rejected at construction.
class BBox {
 public:
  BBox(double x1, double y1, double x2, double y2) : c_{x1, y1, x2, y2} {
    for (double v : c_)
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw std::invalid_argument("bbox coordinate outside [0,1]");
    if (!(x1 < x2) || !(y1 < y2)) throw std::invalid_argument("degenerate bbox (requires x1<x2 and y1<y2)");
  }

  double x1() const noexcept { return c_[0]; }
  double y1() const noexcept { return c_[1]; }
  double x2() const noexcept { return c_[2]; }
  double y2() const noexcept { return c_[3]; }
  double area() const noexcept { return (c_[2] - c_[0]) * (c_[3] - c_[1]); }
  const std::array<double, 4>& coords() const noexcept { return c_; }

  friend bool operator==(const BBox&, const BBox&) = default;

 private:
  std::array<double, 4> c_;
};

/// Box expressed in coordinate bins, the form emitted as tokens.
struct BinBox {
  std::array<int, 4> bins{};  // x1, y1, x2, y2
  friend bool operator==(const BinBox&, const BinBox&) = default;

  bool valid() const noexcept {
    for (int b : bins)
      if (b < 0 || b >= kCoordBins) return false;
    return bins[0] < bins[2] && bins[1] < bins[3];
  }
  BBox to_box() const { return {bin_center(bins[0]), bin_center(bins[1]), bin_center(bins[2]), bin_center(bins[3])}; }
};

inline BinBox bins_of(const BBox& b) noexcept {
  return {{coord_to_bin(b.x1()), coord_to_bin(b.y1()), coord_to_bin(b.x2()), coord_to_bin(b.y2())}};
}

inline double iou(const BBox& a, const BBox& b) noexcept {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (inter <= 0.0) return 0.0;
  if (a == b) return 1.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

struct SampleLabel {
  ImageClass img = ImageClass::NoManip;
  TextClass txt = TextClass::NoManip;
  std::optional<BBox> box;
  std::vector<int> manip_tokens;  // sorted caption indices

  Binary binary() const noexcept {
    return img == ImageClass::NoManip && txt == TextClass::NoManip ? Binary::Real : Binary::Fake;
  }
  Option option() const noexcept { return option_of(img, txt); }

  /// Empty string when every invariant holds, otherwise a description.
  std::string violation() const {
    if (box.has_value() != is_face_class(img)) return "bbox must be present exactly for face manipulations";
    if (!manip_tokens.empty() && txt != TextClass::FullyRewritten)
      return "manipulated tokens require a rewritten caption";
    if (!std::is_sorted(manip_tokens.begin(), manip_tokens.end()) ||
        std::adjacent_find(manip_tokens.begin(), manip_tokens.end()) != manip_tokens.end())
      return "manipulated token indices must be strictly increasing";
    for (int i : manip_tokens)
      if (i < 0) return "negative manipulated token index";
    return {};
  }

  friend bool operator==(const SampleLabel&, const SampleLabel&) = default;
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

enum class TokenKind : std::uint8_t {
  Special,      // pad bos eos sep none
  Digit,
  Letter,
  Delimiter,
  Prompt,       // template words of the question
  Evidence,     // class-indicative image tokens
  ImageNoise,   // generic image content, including face cells
  CaptionWord,  // generic caption vocabulary
  Rewritten,    // words planted by caption rewriting (incl. fabrication keyword)
  Keyword,      // rationale class keywords
  Filler,       // rationale filler words
  StyleImage,   // per-domain image style
  StyleCaption, // per-domain caption style
};

/// Reserved ids. They are fixed by construction order in Vocab::build.
namespace tok {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kNone = 4;
inline constexpr TokenId kDigit0 = 5;
inline constexpr TokenId kLetterA = 15;
inline constexpr TokenId kOpenBracket = 25;
inline constexpr TokenId kCloseBracket = 26;
inline constexpr TokenId kComma = 27;
inline constexpr TokenId kFirstFree = 28;

constexpr bool is_digit(TokenId t) noexcept { return t >= kDigit0 && t < kDigit0 + 10; }
constexpr bool is_letter(TokenId t) noexcept { return t >= kLetterA && t < kLetterA + 10; }
constexpr int digit_value(TokenId t) noexcept { return t - kDigit0; }
constexpr TokenId digit(int v) noexcept { return kDigit0 + v; }
constexpr TokenId letter(Option o) noexcept { return kLetterA + static_cast<TokenId>(o); }
constexpr Option option_of_letter(TokenId t) noexcept { return static_cast<Option>(t - kLetterA); }
}  // namespace tok

class Vocab {
 public:
  /// The canonical vocabulary for an environment with `n_domains` domains.
  static Vocab build(int n_domains) {
    if (n_domains < 1) throw std::invalid_argument("n_domains must be >= 1");
    Vocab v;
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>", "none"}) v.add(s, TokenKind::Special);
    for (int d = 0; d < 10; ++d) v.add(std::string(1, static_cast<char>('0' + d)), TokenKind::Digit);
    for (int l = 0; l < 10; ++l) v.add(std::string(1, static_cast<char>('A' + l)), TokenKind::Letter);
    v.add("[", TokenKind::Delimiter);
    v.add("]", TokenKind::Delimiter);
    v.add(",", TokenKind::Delimiter);
    for (const char* s : {"<image>", "caption:", "question:", "no", "face-swap", "face-attribute", "whole-generated",
                          "inpainted-background", "fully-rewritten", "locate", "manipulated", "face", "answer:"})
      v.add(s, TokenKind::Prompt);
    for (const char* s : {"ev:swap", "ev:attr", "ev:gen", "ev:inpaint"}) v.add(s, TokenKind::Evidence);
    for (const char* s : {"px:face", "px:sky", "px:road", "px:wall", "px:tree", "px:crowd", "px:desk", "px:car"})
      v.add(s, TokenKind::ImageNoise);
    for (const char* s : {"minister", "city", "team", "crowd", "match", "leader", "police", "market", "visit",
                          "speech", "storm", "film"})
      v.add(s, TokenKind::CaptionWord);
    for (const char* s : {"reportedly", "shocking", "secretly", "unnamed", "insiders", "allegedly"})
      v.add(s, TokenKind::Rewritten);
    for (const char* s : {"blending-seams", "altered-expression", "synthetic-texture", "patched-background",
                          "natural-image", "fabricated-claims", "factual-caption", "consistent"})
      v.add(s, TokenKind::Keyword);
    for (const char* s : {"the", "shows", "evidence", "in", "region", "of", "and", "with", "because", "suggests",
                          "visible", "cues"})
      v.add(s, TokenKind::Filler);
    for (int d = 0; d < n_domains; ++d) {
      for (int k = 0; k < kStylePerDomain; ++k)
        v.add("d" + std::to_string(d) + ":img" + std::to_string(k), TokenKind::StyleImage);
      for (int k = 0; k < kStylePerDomain; ++k)
        v.add("d" + std::to_string(d) + ":w" + std::to_string(k), TokenKind::StyleCaption);
    }
    v.n_domains_ = n_domains;
    return v;
  }

  static constexpr int kStylePerDomain = 4;

  std::size_t size() const noexcept { return surfaces_.size(); }
  int n_domains() const noexcept { return n_domains_; }
  const std::string& surface(TokenId id) const { return surfaces_.at(static_cast<std::size_t>(id)); }
  TokenKind kind(TokenId id) const { return kinds_.at(static_cast<std::size_t>(id)); }
  bool contains(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < size(); }

  TokenId id(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    if (it == index_.end()) throw std::out_of_range("unknown token surface: " + std::string(surface));
    return it->second;
  }
  std::optional<TokenId> find(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<TokenId> of_kind(TokenKind k) const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < kinds_.size(); ++i)
      if (kinds_[i] == k) out.push_back(static_cast<TokenId>(i));
    return out;
  }

  std::vector<TokenId> style_image(int domain) const { return style_pool(domain, "img"); }
  std::vector<TokenId> style_caption(int domain) const { return style_pool(domain, "w"); }

  /// Tokens allowed inside a fake-word list: anything that may occur in a caption.
  bool is_caption_word(TokenId id) const noexcept {
    if (!contains(id)) return false;
    const TokenKind k = kinds_[static_cast<std::size_t>(id)];
    return k == TokenKind::CaptionWord || k == TokenKind::Rewritten || k == TokenKind::StyleCaption;
  }

  /// `id<TAB>surface` per line, ids ascending from 0.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    for (std::size_t i = 0; i < surfaces_.size(); ++i) out << i << '\t' << surfaces_[i] << '\n';
    if (!out) throw std::runtime_error("failed writing vocabulary file: " + path);
  }

  /// Loads a vocabulary file and checks it against the canonical layout, so
  /// a file from a different generator version is rejected.
  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    std::vector<std::string> surfaces;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatFileError(path + ":" + std::to_string(lineno) + ": missing tab");
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(0, tab));
      } catch (const std::exception&) {
        throw FormatFileError(path + ":" + std::to_string(lineno) + ": bad id");
      }
      if (id != surfaces.size())
        throw FormatFileError(path + ":" + std::to_string(lineno) + ": ids must ascend densely from 0");
      surfaces.push_back(line.substr(tab + 1));
    }
    int domains = 0;
    for (const auto& s : surfaces)
      if (s.size() > 5 && s[0] == 'd' && s.find(":img0") != std::string::npos) ++domains;
    if (domains < 1) throw FormatFileError(path + ": no domain style tokens");
    Vocab canonical = build(domains);
    if (canonical.surfaces_ != surfaces) throw FormatFileError(path + ": vocabulary does not match the canonical layout");
    return canonical;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.surfaces_ == b.surfaces_; }

 private:
  void add(std::string surface, TokenKind kind) {
    if (index_.count(surface)) throw std::logic_error("duplicate token surface: " + surface);
    index_.emplace(surface, static_cast<TokenId>(surfaces_.size()));
    surfaces_.push_back(std::move(surface));
    kinds_.push_back(kind);
  }

  std::vector<TokenId> style_pool(int domain, const std::string& tag) const {
    std::vector<TokenId> out;
    for (int k = 0; k < kStylePerDomain; ++k) out.push_back(id("d" + std::to_string(domain) + ":" + tag + std::to_string(k)));
    return out;
  }

  std::vector<std::string> surfaces_;
  std::vector<TokenKind> kinds_;
  std::unordered_map<std::string, TokenId> index_;
  int n_domains_ = 0;
};

}  // namespace reform
