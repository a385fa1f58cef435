#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reform/answer_grammar.hpp"
#include "reform/forensic_types.hpp"
#include "reform/rng.hpp"

namespace reform {

struct EnvConfig {
  std::uint64_t seed = 1;
  int n_domains = 3;
  int image_len = 24;
  int grid_cols = 6;
  int caption_len = 16;
  double evidence_strength = 0.8;
  std::array<double, kNumOptions> class_priors = uniform_priors();
  int rationale_len_min = 20;
  int rationale_len_max = 28;

  static std::array<double, kNumOptions> uniform_priors() {
    std::array<double, kNumOptions> p{};
    p.fill(1.0 / kNumOptions);
    return p;
  }

  int grid_rows() const noexcept { return image_len / grid_cols; }

  void validate() const {
    if (n_domains < 1) throw std::invalid_argument("EnvConfig: n_domains must be >= 1");
    if (image_len < 4 || caption_len < 4) throw std::invalid_argument("EnvConfig: lengths must be >= 4");
    if (grid_cols < 2 || image_len % grid_cols != 0 || grid_rows() < 2)
      throw std::invalid_argument("EnvConfig: image_len must be a multiple of grid_cols with >= 2 rows");
    if (!(evidence_strength > 0.5 && evidence_strength <= 1.0))
      throw std::invalid_argument("EnvConfig: evidence_strength must lie in (0.5, 1]");
    double total = 0.0;
    for (double p : class_priors) {
      if (!(p >= 0.0)) throw std::invalid_argument("EnvConfig: negative class prior");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("EnvConfig: class priors must sum to 1");
    if (rationale_len_min < 4 || rationale_len_max < rationale_len_min)
      throw std::invalid_argument("EnvConfig: bad rationale length range");
  }
};

struct EpisodeSample {
  std::int64_t id = 0;
  int domain = 0;
  TokenSeq image_tokens;
  TokenSeq caption_tokens;
  SampleLabel label;
  TokenSeq rationale;

  friend bool operator==(const EpisodeSample&, const EpisodeSample&) = default;
};

// ---------------------------------------------------------------------------
// Rationales
// ---------------------------------------------------------------------------

namespace detail {
inline std::string_view image_keyword(ImageClass c) {
  switch (c) {
    case ImageClass::NoManip: return "natural-image";
    case ImageClass::FaceSwap: return "blending-seams";
    case ImageClass::FaceAttribute: return "altered-expression";
    case ImageClass::WholeGenerated: return "synthetic-texture";
    case ImageClass::InpaintedBackground: return "patched-background";
  }
  return "natural-image";
}

inline std::optional<std::string_view> image_evidence(ImageClass c) {
  switch (c) {
    case ImageClass::FaceSwap: return "ev:swap";
    case ImageClass::FaceAttribute: return "ev:attr";
    case ImageClass::WholeGenerated: return "ev:gen";
    case ImageClass::InpaintedBackground: return "ev:inpaint";
    default: return std::nullopt;
  }
}
}  // namespace detail

/// Evidence token set implied by a label (what generate() plants).
inline std::vector<TokenId> evidence_for(const SampleLabel& label, const Vocab& vocab) {
  std::vector<TokenId> ev;
  if (auto e = detail::image_evidence(label.img)) ev.push_back(vocab.id(*e));
  if (label.txt == TextClass::FullyRewritten) ev.push_back(vocab.id("reportedly"));
  return ev;
}

/// Templated rationale: a fixed head naming the image keyword and evidence,
/// the text keyword and evidence, a consistency keyword for pristine items,
/// then filler up to a length drawn from the configured range.
inline TokenSeq make_rationale(const SampleLabel& label, std::span<const TokenId> evidence, CounterRng& rng,
                               const EnvConfig& cfg, const Vocab& vocab) {
  const std::vector<TokenId> expected = evidence_for(label, vocab);
  for (TokenId e : evidence) {
    if (vocab.kind(e) == TokenKind::Evidence || e == vocab.id("reportedly")) {
      if (std::find(expected.begin(), expected.end(), e) == expected.end())
        throw std::invalid_argument("make_rationale: evidence inconsistent with label");
    }
  }
  for (TokenId e : expected)
    if (std::find(evidence.begin(), evidence.end(), e) == evidence.end())
      throw std::invalid_argument("make_rationale: label evidence missing from evidence list");

  TokenSeq r{vocab.id("the"), vocab.id("evidence"), vocab.id("shows"), vocab.id(detail::image_keyword(label.img))};
  if (auto e = detail::image_evidence(label.img)) r.push_back(vocab.id(*e));
  r.push_back(vocab.id("and"));
  if (label.txt == TextClass::FullyRewritten) {
    r.push_back(vocab.id("fabricated-claims"));
    r.push_back(vocab.id("reportedly"));
  } else {
    r.push_back(vocab.id("factual-caption"));
  }
  if (label.binary() == Binary::Real) r.push_back(vocab.id("consistent"));

  const int target = rng.between(cfg.rationale_len_min, cfg.rationale_len_max);
  const std::vector<TokenId> fillers = vocab.of_kind(TokenKind::Filler);
  while (static_cast<int>(r.size()) < target) r.push_back(fillers[rng.below(fillers.size())]);
  return r;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {
struct CellRect {
  int c0, r0, c1, r1;  // inclusive
};

inline BBox box_of_cells(const CellRect& rc, int cols, int rows) {
  auto lo = [](int cell, int n) { return (cell * kCoordBins) / n; };
  auto hi = [](int cell, int n) { return ((cell + 1) * kCoordBins + n - 1) / n - 1; };
  return BinBox{{lo(rc.c0, cols), lo(rc.r0, rows), hi(rc.c1, cols), hi(rc.r1, rows)}}.to_box();
}
}  // namespace detail

inline EpisodeSample generate_one(const EnvConfig& cfg, const Vocab& vocab, std::int64_t id) {
  CounterRng rng(cfg.seed, "sample", static_cast<std::uint64_t>(id));
  EpisodeSample s;
  s.id = id;
  s.domain = static_cast<int>(id % cfg.n_domains);
  const auto opt = static_cast<Option>(rng.categorical(cfg.class_priors));
  s.label.img = classes_of(opt).img;
  s.label.txt = classes_of(opt).txt;

  const int cols = cfg.grid_cols;
  const int rows = cfg.grid_rows();
  const auto style_img = vocab.style_image(s.domain);
  const auto style_cap = vocab.style_caption(s.domain);
  std::vector<TokenId> noise;
  for (TokenId t : vocab.of_kind(TokenKind::ImageNoise))
    if (vocab.surface(t) != "px:face") noise.push_back(t);
  const TokenId face = vocab.id("px:face");

  s.image_tokens.resize(static_cast<std::size_t>(cfg.image_len));
  for (auto& t : s.image_tokens)
    t = rng.bernoulli(0.5) ? style_img[rng.below(style_img.size())] : noise[rng.below(noise.size())];

  std::vector<bool> in_face(static_cast<std::size_t>(cfg.image_len), false);
  const bool face_manip = is_face_class(s.label.img);
  if (face_manip || rng.bernoulli(0.5)) {
    const int w = rng.between(1, 2);
    const int h = rng.between(1, 2);
    detail::CellRect rc{};
    rc.c0 = rng.between(0, cols - w);
    rc.r0 = rng.between(0, rows - h);
    rc.c1 = rc.c0 + w - 1;
    rc.r1 = rc.r0 + h - 1;
    std::vector<std::size_t> cells;
    for (int r = rc.r0; r <= rc.r1; ++r)
      for (int c = rc.c0; c <= rc.c1; ++c) cells.push_back(static_cast<std::size_t>(r * cols + c));
    for (std::size_t c : cells) {
      in_face[c] = true;
      s.image_tokens[c] = face;
    }
    if (face_manip) {
      const TokenId ev = vocab.id(*detail::image_evidence(s.label.img));
      bool any = false;
      for (std::size_t c : cells)
        if (rng.bernoulli(cfg.evidence_strength)) s.image_tokens[c] = ev, any = true;
      if (!any) s.image_tokens[cells[rng.below(cells.size())]] = ev;
      s.label.box = detail::box_of_cells(rc, cols, rows);
    }
  }

  std::vector<std::size_t> background;
  for (std::size_t c = 0; c < in_face.size(); ++c)
    if (!in_face[c]) background.push_back(c);

  if (s.label.img == ImageClass::WholeGenerated) {
    const TokenId ev = vocab.id("ev:gen");
    bool any = false;
    for (std::size_t c : background)
      if (rng.bernoulli(0.5 * cfg.evidence_strength)) s.image_tokens[c] = ev, any = true;
    if (!any) s.image_tokens[background[rng.below(background.size())]] = ev;
  } else if (s.label.img == ImageClass::InpaintedBackground) {
    const TokenId ev = vocab.id("ev:inpaint");
    const std::size_t seed_cell = background[rng.below(background.size())];
    std::vector<std::size_t> patch{seed_cell};
    const std::size_t right = seed_cell + 1;
    if (static_cast<int>(right % static_cast<std::size_t>(cols)) != 0 && right < in_face.size() && !in_face[right] &&
        rng.bernoulli(0.5))
      patch.push_back(right);
    bool any = false;
    for (std::size_t c : patch)
      if (rng.bernoulli(cfg.evidence_strength)) s.image_tokens[c] = ev, any = true;
    if (!any) s.image_tokens[seed_cell] = ev;
  }

  const std::vector<TokenId> words = vocab.of_kind(TokenKind::CaptionWord);
  s.caption_tokens.resize(static_cast<std::size_t>(cfg.caption_len));
  for (auto& t : s.caption_tokens)
    t = rng.bernoulli(0.5) ? style_cap[rng.below(style_cap.size())] : words[rng.below(words.size())];
  if (s.label.txt == TextClass::FullyRewritten) {
    const int span = rng.between(2, std::min(4, cfg.caption_len));
    const int start = rng.between(0, cfg.caption_len - span);
    const int key_at = rng.between(0, span - 1);
    std::vector<TokenId> rewritten;
    for (TokenId t : vocab.of_kind(TokenKind::Rewritten))
      if (vocab.surface(t) != "reportedly") rewritten.push_back(t);
    for (int k = 0; k < span; ++k) {
      s.caption_tokens[static_cast<std::size_t>(start + k)] =
          k == key_at ? vocab.id("reportedly") : rewritten[rng.below(rewritten.size())];
      s.label.manip_tokens.push_back(start + k);
    }
  }

  s.rationale = make_rationale(s.label, evidence_for(s.label, vocab), rng, cfg, vocab);
  return s;
}

/// Samples are independent streams keyed by (seed, id), so the list is the
/// same however it is produced; ordering is by id.
inline std::vector<EpisodeSample> generate(const EnvConfig& cfg, const Vocab& vocab, std::size_t n) {
  cfg.validate();
  if (vocab.n_domains() < cfg.n_domains) throw std::invalid_argument("generate: vocabulary lacks domain style tokens");
  std::vector<EpisodeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(cfg, vocab, static_cast<std::int64_t>(i)));
  return out;
}

/// The ground-truth answer a perfect model would emit.
inline StructuredAnswer reference_answer(const EpisodeSample& s, AnswerMode mode) {
  StructuredAnswer a;
  a.option = s.label.option();
  if (s.label.box) a.box = bins_of(*s.label.box);
  if (mode == AnswerMode::Dgm4) {
    std::vector<TokenId> w;
    for (int i : s.label.manip_tokens) w.push_back(s.caption_tokens[static_cast<std::size_t>(i)]);
    a.fake_words = std::move(w);
  }
  return a;
}

inline TokenSeq prompt_tokens(const EpisodeSample& s, const Vocab& vocab) {
  return render_prompt(PromptSpec{s.caption_tokens}, vocab);
}

// ---------------------------------------------------------------------------
// Splits and statistics
// ---------------------------------------------------------------------------

struct DatasetSplits {
  std::vector<EpisodeSample> train, val, test;
};

/// 80/10/10 within each domain, in id order.
inline DatasetSplits split_dataset(const std::vector<EpisodeSample>& samples) {
  std::map<int, std::vector<const EpisodeSample*>> by_domain;
  for (const auto& s : samples) by_domain[s.domain].push_back(&s);
  DatasetSplits out;
  for (auto& [domain, items] : by_domain) {
    const std::size_t n = items.size();
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    for (std::size_t i = 0; i < n; ++i) {
      auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
      dst.push_back(*items[i]);
    }
  }
  auto by_id = [](const EpisodeSample& a, const EpisodeSample& b) { return a.id < b.id; };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.val.begin(), out.val.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

inline std::vector<EpisodeSample> filter_domains(const std::vector<EpisodeSample>& in, std::span<const int> domains) {
  std::vector<EpisodeSample> out;
  for (const auto& s : in)
    if (std::find(domains.begin(), domains.end(), s.domain) != domains.end()) out.push_back(s);
  return out;
}

struct DatasetStats {
  std::array<std::size_t, kNumOptions> class_counts{};
  std::map<std::size_t, std::size_t> rationale_length_hist;
  std::map<std::size_t, std::size_t> answer_length_hist;
  std::size_t total = 0;
};

inline DatasetStats dataset_stats(const std::vector<EpisodeSample>& samples, AnswerMode mode = AnswerMode::Base) {
  if (samples.empty()) throw std::invalid_argument("dataset_stats: empty dataset");
  DatasetStats st;
  for (const auto& s : samples) {
    ++st.class_counts[static_cast<std::size_t>(s.label.option())];
    ++st.rationale_length_hist[s.rationale.size()];
    ++st.answer_length_hist[serialize_answer(reference_answer(s, mode)).size()];
    ++st.total;
  }
  return st;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const EpisodeSample& s) {
  nlohmann::json j;
  j["id"] = s.id;
  j["domain"] = s.domain;
  j["image_tokens"] = s.image_tokens;
  j["caption_tokens"] = s.caption_tokens;
  j["img_class"] = std::string(to_string(s.label.img));
  j["txt_class"] = std::string(to_string(s.label.txt));
  if (s.label.box)
    j["bbox"] = s.label.box->coords();
  else
    j["bbox"] = nullptr;
  j["manip_token_idx"] = s.label.manip_tokens;
  j["rationale_tokens"] = s.rationale;
  j["option"] = std::string(1, letter_of(s.label.option()));
  return j;
}

inline void write_jsonl(const std::vector<EpisodeSample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& s : samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

namespace detail {
inline TokenSeq token_array(const nlohmann::json& j, const char* field, const Vocab& vocab) {
  if (!j.contains(field) || !j[field].is_array()) throw FormatFileError(std::string("missing or non-array field '") + field + "'");
  TokenSeq out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer()) throw FormatFileError(std::string("non-integer token in '") + field + "'");
    const auto id = v.get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw FormatFileError(std::string("vocabulary mismatch: token id out of range in '") + field + "'");
    out.push_back(static_cast<TokenId>(id));
  }
  return out;
}
}  // namespace detail

inline EpisodeSample sample_from_json(const nlohmann::json& j, const Vocab& vocab) {
  for (const char* f : {"id", "domain", "image_tokens", "caption_tokens", "img_class", "txt_class", "bbox",
                        "manip_token_idx", "rationale_tokens", "option"})
    if (!j.contains(f)) throw FormatFileError(std::string("missing field '") + f + "'");
  EpisodeSample s;
  if (!j["id"].is_number_integer() || !j["domain"].is_number_integer()) throw FormatFileError("id/domain must be integers");
  s.id = j["id"].get<std::int64_t>();
  s.domain = j["domain"].get<int>();
  if (s.domain < 0 || s.domain >= vocab.n_domains()) throw FormatFileError("vocabulary mismatch: domain out of range");
  s.image_tokens = detail::token_array(j, "image_tokens", vocab);
  s.caption_tokens = detail::token_array(j, "caption_tokens", vocab);
  s.rationale = detail::token_array(j, "rationale_tokens", vocab);
  if (!j["img_class"].is_string() || !j["txt_class"].is_string()) throw FormatFileError("class fields must be strings");
  auto img = image_class_from_string(j["img_class"].get<std::string>());
  auto txt = text_class_from_string(j["txt_class"].get<std::string>());
  if (!img || !txt) throw FormatFileError("unknown class name");
  s.label.img = *img;
  s.label.txt = *txt;
  if (!j["bbox"].is_null()) {
    if (!j["bbox"].is_array() || j["bbox"].size() != 4) throw FormatFileError("bbox must be null or 4 numbers");
    std::array<double, 4> c{};
    for (std::size_t i = 0; i < 4; ++i) {
      if (!j["bbox"][i].is_number()) throw FormatFileError("bbox must be null or 4 numbers");
      c[i] = j["bbox"][i].get<double>();
    }
    try {
      s.label.box = BBox(c[0], c[1], c[2], c[3]);
    } catch (const std::invalid_argument& e) {
      throw FormatFileError(std::string("invalid bbox: ") + e.what());
    }
  }
  if (!j["manip_token_idx"].is_array()) throw FormatFileError("manip_token_idx must be an array");
  for (const auto& v : j["manip_token_idx"]) {
    if (!v.is_number_integer()) throw FormatFileError("manip_token_idx must hold integers");
    const int i = v.get<int>();
    if (i < 0 || static_cast<std::size_t>(i) >= s.caption_tokens.size())
      throw FormatFileError("manip_token_idx outside the caption");
    s.label.manip_tokens.push_back(i);
  }
  if (auto why = s.label.violation(); !why.empty()) throw FormatFileError("label invariant violated: " + why);
  const auto opt = j["option"];
  if (!opt.is_string() || opt.get<std::string>().size() != 1 ||
      option_from_letter(opt.get<std::string>()[0]) != s.label.option())
    throw FormatFileError("option letter inconsistent with class fields");
  return s;
}

inline std::vector<EpisodeSample> read_jsonl(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<EpisodeSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line), vocab));
    } catch (const nlohmann::json::exception& e) {
      throw FormatFileError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatFileError& e) {
      throw FormatFileError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace reform
