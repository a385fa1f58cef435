#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "reform/checkpoint.hpp"
#include "reform/forensic_types.hpp"
#include "reform/rng.hpp"
#include "reform/tensor.hpp"

namespace reform {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 32;
  int n_reason_tokens = 32;
  int n_heads = 1;
  int encoder_layers = 1;
  int decoder_layers = 1;
  int ffn_width = 128;
  int max_answer_len = 20;
  int max_reason_len = 32;
  int max_image_len = 24;
  int max_text_len = 64;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (n_reason_tokens < 1) throw std::invalid_argument("ModelConfig: n_reason_tokens must be > 0");
    if (encoder_layers < 1 || decoder_layers < 1 || ffn_width < 1)
      throw std::invalid_argument("ModelConfig: layer counts and ffn_width must be positive");
    if (max_answer_len < 1 || max_reason_len < 1 || max_image_len < 1 || max_text_len < 1)
      throw std::invalid_argument("ModelConfig: maximum lengths must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Head : std::uint8_t { Answer, Reason };

/// Parameter groups used by the stage freezing schedule.
enum class ParamGroup : std::uint8_t { Embedding, ReasonBank, Priming, Multimodal, AnswerDecoder, ReasonDecoder };

inline ParamGroup group_of(std::string_view name) {
  auto starts = [&](std::string_view p) { return name.substr(0, p.size()) == p; };
  if (starts("embed.")) return ParamGroup::Embedding;
  if (starts("reason_bank")) return ParamGroup::ReasonBank;
  if (starts("prime.")) return ParamGroup::Priming;
  if (starts("mm.")) return ParamGroup::Multimodal;
  if (starts("dec_a.") || starts("head_a.")) return ParamGroup::AnswerDecoder;
  if (starts("dec_r.") || starts("head_r.")) return ParamGroup::ReasonDecoder;
  throw std::invalid_argument("unknown parameter name: " + std::string(name));
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct LnIdx { std::size_t g, b; };
struct LinIdx { std::size_t w, b; };
struct AttnIdx { LinIdx q, k, v, o; };
struct EncLayerIdx { LnIdx ln1; AttnIdx attn; LnIdx ln2; LinIdx ff1, ff2; };
struct DecLayerIdx { LnIdx ln1; AttnIdx self; LnIdx ln2; AttnIdx cross; LnIdx ln3; LinIdx ff1, ff2; };
struct EncoderIdx { std::vector<EncLayerIdx> layers; LnIdx lnf; };
struct DecoderIdx { std::size_t pos; std::vector<DecLayerIdx> layers; LnIdx lnf; LinIdx out; };

struct Layout {
  std::size_t tok = 0, pos_img = 0, pos_txt = 0, bank = 0;
  EncoderIdx prime, mm;
  DecoderIdx answer, reason;
  const DecoderIdx& decoder(Head h) const noexcept { return h == Head::Answer ? answer : reason; }
};

struct Tensor {
  std::string name;
  Mat value;
  bool frozen = false;
  std::size_t fan_in = 1;
};

struct ModelParams {
  ModelConfig config;
  std::vector<Tensor> tensors;
  Layout layout;

  const Mat& operator[](std::size_t i) const noexcept { return tensors[i].value; }
  Mat& operator[](std::size_t i) noexcept { return tensors[i].value; }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
  }

  /// Marks every tensor of the listed groups trainable and the rest frozen.
  /// The priming encoder is never unfrozen.
  void set_trainable(std::initializer_list<ParamGroup> groups) {
    for (auto& t : tensors) {
      const ParamGroup g = group_of(t.name);
      bool train = false;
      for (ParamGroup x : groups) train = train || x == g;
      t.frozen = g == ParamGroup::Priming || !train;
    }
  }

  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors)
      for (double v : t.value.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        h = (h ^ bits) * 0x100000001b3ULL;
      }
    return h;
  }
};

/// Per-tensor gradient buffers aligned with ModelParams::tensors.
struct Gradients {
  std::vector<Mat> g;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients out;
    out.g.reserve(p.tensors.size());
    for (const auto& t : p.tensors) out.g.emplace_back(t.value.rows, t.value.cols);
    return out;
  }
  void add(const Gradients& o) {
    for (std::size_t i = 0; i < g.size(); ++i) add_inplace(g[i], o.g[i]);
  }
  void scale(double s) {
    for (auto& m : g) scale_inplace(m, s);
  }
  bool all_finite() const noexcept {
    for (const auto& m : g)
      for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace detail {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(ModelParams& p) : p_(p) {}

  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols, std::size_t fan_in) {
    p_.tensors.push_back({name, Mat(rows, cols), false, fan_in});
    return p_.tensors.size() - 1;
  }
  LnIdx ln(const std::string& name, std::size_t d) {
    LnIdx out{add(name + ".g", 1, d, 0), add(name + ".b", 1, d, 0)};
    std::fill(p_.tensors[out.g].value.data.begin(), p_.tensors[out.g].value.data.end(), 1.0);
    return out;
  }
  LinIdx lin(const std::string& name, std::size_t in, std::size_t out) {
    return {add(name + ".w", in, out, in), add(name + ".b", 1, out, 0)};
  }
  AttnIdx attn(const std::string& name, std::size_t d) {
    return {lin(name + ".q", d, d), lin(name + ".k", d, d), lin(name + ".v", d, d), lin(name + ".o", d, d)};
  }
  EncoderIdx encoder(const std::string& name, const ModelConfig& c) {
    EncoderIdx e;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.ffn_width);
    for (int l = 0; l < c.encoder_layers; ++l) {
      const std::string p = name + ".L" + std::to_string(l);
      e.layers.push_back({ln(p + ".ln1", d), attn(p + ".attn", d), ln(p + ".ln2", d), lin(p + ".ff1", d, f),
                          lin(p + ".ff2", f, d)});
    }
    e.lnf = ln(name + ".lnf", d);
    return e;
  }
  DecoderIdx decoder(const std::string& name, const std::string& head, const ModelConfig& c, int max_len) {
    DecoderIdx dd;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.ffn_width);
    dd.pos = add(name + ".pos", static_cast<std::size_t>(max_len), d, d);
    for (int l = 0; l < c.decoder_layers; ++l) {
      const std::string p = name + ".L" + std::to_string(l);
      dd.layers.push_back({ln(p + ".ln1", d), attn(p + ".self", d), ln(p + ".ln2", d), attn(p + ".cross", d),
                           ln(p + ".ln3", d), lin(p + ".ff1", d, f), lin(p + ".ff2", f, d)});
    }
    dd.lnf = ln(name + ".lnf", d);
    dd.out = lin(head, d, static_cast<std::size_t>(c.vocab_size));
    return dd;
  }

 private:
  ModelParams& p_;
};

inline Layout build_layout(ModelParams& p) {
  const ModelConfig& c = p.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  LayoutBuilder b(p);
  Layout L;
  L.tok = b.add("embed.tok", static_cast<std::size_t>(c.vocab_size), d, d);
  L.pos_img = b.add("embed.pos_img", static_cast<std::size_t>(c.max_image_len), d, d);
  L.pos_txt = b.add("embed.pos_txt", static_cast<std::size_t>(c.max_text_len), d, d);
  L.bank = b.add("reason_bank", static_cast<std::size_t>(c.n_reason_tokens), d, d);
  L.prime = b.encoder("prime", c);
  L.mm = b.encoder("mm", c);
  L.answer = b.decoder("dec_a", "head_a", c, c.max_answer_len);
  L.reason = b.decoder("dec_r", "head_r", c, c.max_reason_len);
  return L;
}

}  // namespace detail

/// Deterministic initialization: every weight tensor is U(-g, g) with
/// g = 1/sqrt(fan_in); norms start at identity; biases at zero. The priming
/// encoder is frozen from birth.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.layout = detail::build_layout(p);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& t = p.tensors[i];
    if (t.fan_in > 0) {
      CounterRng rng(seed, "init", i);
      const double g = 1.0 / std::sqrt(static_cast<double>(t.fan_in));
      for (double& v : t.value.data) v = to_f32(rng.uniform(-g, g));
    }
    t.frozen = group_of(t.name) == ParamGroup::Priming;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Primitive layers (forward + backward)
// ---------------------------------------------------------------------------

namespace nn {

inline constexpr double kLnEps = 1e-5;

struct LnCache {
  Mat xhat;
  std::vector<double> inv_std;
};

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache* cache) {
  Mat y(x.rows, x.cols);
  if (cache) {
    cache->xhat = Mat(x.rows, x.cols);
    cache->inv_std.assign(x.rows, 0.0);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += xr[c];
    mean /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    double* yr = y.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xh = (xr[c] - mean) * inv;
      if (cache) cache->xhat(r, c) = xh;
      yr[c] = xh * g.data[c] + b.data[c];
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

inline Mat layer_norm_backward(const Mat& dy, const LnCache& c, const Mat& g, Mat* dg, Mat* db) {
  Mat dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  std::vector<double> dxh(dy.cols);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    const double* dyr = dy.row(r);
    const double* xh = c.xhat.row(r);
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k < dy.cols; ++k) {
      if (dg) dg->data[k] += dyr[k] * xh[k];
      if (db) db->data[k] += dyr[k];
      dxh[k] = dyr[k] * g.data[k];
      m1 += dxh[k];
      m2 += dxh[k] * xh[k];
    }
    m1 /= n;
    m2 /= n;
    double* dxr = dx.row(r);
    for (std::size_t k = 0; k < dy.cols; ++k) dxr[k] = c.inv_std[r] * (dxh[k] - m1 - xh[k] * m2);
  }
  return dx;
}

inline Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  Mat y(x.rows, w.cols);
  for (std::size_t r = 0; r < y.rows; ++r) std::copy(b.data.begin(), b.data.end(), y.row(r));
  gemm_nn(x, w, y, true);
  return y;
}

/// Accumulates dW/db when the slots are non-null; returns dx.
inline Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat* dw, Mat* db) {
  if (dw) gemm_tn(x, dy, *dw, true);
  if (db)
    for (std::size_t r = 0; r < dy.rows; ++r)
      for (std::size_t c = 0; c < dy.cols; ++c) db->data[c] += dy(r, c);
  Mat dx;
  gemm_nt(dy, w, dx);
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) noexcept {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) noexcept {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct AttnCoreCache {
  std::vector<Mat> probs;  // one (queries x keys) matrix per head
};

/// Multi-head scaled dot-product attention on already projected q, k, v.
/// With `causal`, query i only sees keys j <= i + key_offset.
inline Mat attention_core(const Mat& q, const Mat& k, const Mat& v, int heads, bool causal, AttnCoreCache* cache,
                          std::size_t key_offset = 0) {
  const std::size_t d = q.cols;
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat ctx(q.rows, d);
  if (cache) cache->probs.assign(static_cast<std::size_t>(heads), Mat());
  std::vector<double> s(k.rows);
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    Mat* pm = nullptr;
    if (cache) {
      cache->probs[static_cast<std::size_t>(h)] = Mat(q.rows, k.rows);
      pm = &cache->probs[static_cast<std::size_t>(h)];
    }
    for (std::size_t i = 0; i < q.rows; ++i) {
      const std::size_t n_keys = causal ? std::min(k.rows, i + key_offset + 1) : k.rows;
      const double* qi = q.row(i) + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n_keys; ++j) {
        const double* kj = k.row(j) + off;
        double dot = 0.0;
        for (std::size_t p = 0; p < dh; ++p) dot += qi[p] * kj[p];
        s[j] = dot * scale;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n_keys; ++j) {
        s[j] = std::exp(s[j] - mx);
        z += s[j];
      }
      double* ci = ctx.row(i) + off;
      for (std::size_t j = 0; j < n_keys; ++j) {
        const double pj = s[j] / z;
        if (pm) (*pm)(i, j) = pj;
        const double* vj = v.row(j) + off;
        for (std::size_t p = 0; p < dh; ++p) ci[p] += pj * vj[p];
      }
    }
  }
  return ctx;
}

inline void attention_core_backward(const Mat& dctx, const Mat& q, const Mat& k, const Mat& v, int heads,
                                    const AttnCoreCache& c, Mat& dq, Mat& dk, Mat& dv) {
  const std::size_t d = q.cols;
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Mat(q.rows, d);
  dk = Mat(k.rows, d);
  dv = Mat(v.rows, d);
  std::vector<double> dp(k.rows);
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    const Mat& P = c.probs[static_cast<std::size_t>(h)];
    for (std::size_t i = 0; i < q.rows; ++i) {
      const double* dci = dctx.row(i) + off;
      const double* pi = P.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < k.rows; ++j) {
        if (pi[j] == 0.0) {
          dp[j] = 0.0;
          continue;
        }
        const double* vj = v.row(j) + off;
        double* dvj = dv.row(j) + off;
        double acc = 0.0;
        for (std::size_t p = 0; p < dh; ++p) {
          acc += dci[p] * vj[p];
          dvj[p] += pi[j] * dci[p];
        }
        dp[j] = acc;
        dot += acc * pi[j];
      }
      const double* qi = q.row(i) + off;
      double* dqi = dq.row(i) + off;
      for (std::size_t j = 0; j < k.rows; ++j) {
        if (pi[j] == 0.0) continue;
        const double ds = pi[j] * (dp[j] - dot) * scale;
        const double* kj = k.row(j) + off;
        double* dkj = dk.row(j) + off;
        for (std::size_t p = 0; p < dh; ++p) {
          dqi[p] += ds * kj[p];
          dkj[p] += ds * qi[p];
        }
      }
    }
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Encoder / decoder stacks
// ---------------------------------------------------------------------------

namespace detail {

inline Mat* slot(Gradients* g, const ModelParams& p, std::size_t idx) {
  if (!g || p.tensors[idx].frozen) return nullptr;
  return &g->g[idx];
}

struct EncLayerCache {
  Mat x_in;
  nn::LnCache ln1;
  Mat h1, q, k, v;
  nn::AttnCoreCache core;
  Mat ctx, x_mid;
  nn::LnCache ln2;
  Mat h2, a, f;
};

struct EncoderRun {
  std::vector<EncLayerCache> layers;
  Mat pre_final;
  nn::LnCache lnf;
};

inline Mat encoder_forward(const ModelParams& p, const EncoderIdx& e, const Mat& x0, EncoderRun& run) {
  const int heads = p.config.n_heads;
  run.layers.assign(e.layers.size(), {});
  Mat x = x0;
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    const auto& L = e.layers[l];
    auto& c = run.layers[l];
    c.x_in = x;
    c.h1 = nn::layer_norm(x, p[L.ln1.g], p[L.ln1.b], &c.ln1);
    c.q = nn::linear(c.h1, p[L.attn.q.w], p[L.attn.q.b]);
    c.k = nn::linear(c.h1, p[L.attn.k.w], p[L.attn.k.b]);
    c.v = nn::linear(c.h1, p[L.attn.v.w], p[L.attn.v.b]);
    c.ctx = nn::attention_core(c.q, c.k, c.v, heads, false, &c.core);
    c.x_mid = nn::linear(c.ctx, p[L.attn.o.w], p[L.attn.o.b]);
    add_inplace(c.x_mid, c.x_in);
    c.h2 = nn::layer_norm(c.x_mid, p[L.ln2.g], p[L.ln2.b], &c.ln2);
    c.a = nn::linear(c.h2, p[L.ff1.w], p[L.ff1.b]);
    c.f = c.a;
    for (double& v : c.f.data) v = nn::gelu(v);
    x = nn::linear(c.f, p[L.ff2.w], p[L.ff2.b]);
    add_inplace(x, c.x_mid);
  }
  run.pre_final = x;
  return nn::layer_norm(x, p[e.lnf.g], p[e.lnf.b], &run.lnf);
}

inline Mat encoder_backward(const ModelParams& p, const EncoderIdx& e, const EncoderRun& run, const Mat& dout,
                            Gradients* g) {
  const int heads = p.config.n_heads;
  Mat dx = nn::layer_norm_backward(dout, run.lnf, p[e.lnf.g], slot(g, p, e.lnf.g), slot(g, p, e.lnf.b));
  for (std::size_t l = e.layers.size(); l-- > 0;) {
    const auto& L = e.layers[l];
    const auto& c = run.layers[l];
    Mat dmid = dx;
    Mat df = nn::linear_backward(dx, c.f, p[L.ff2.w], slot(g, p, L.ff2.w), slot(g, p, L.ff2.b));
    for (std::size_t i = 0; i < df.data.size(); ++i) df.data[i] *= nn::gelu_grad(c.a.data[i]);
    Mat dh2 = nn::linear_backward(df, c.h2, p[L.ff1.w], slot(g, p, L.ff1.w), slot(g, p, L.ff1.b));
    add_inplace(dmid, nn::layer_norm_backward(dh2, c.ln2, p[L.ln2.g], slot(g, p, L.ln2.g), slot(g, p, L.ln2.b)));
    Mat dctx = nn::linear_backward(dmid, c.ctx, p[L.attn.o.w], slot(g, p, L.attn.o.w), slot(g, p, L.attn.o.b));
    Mat dq, dk, dv;
    nn::attention_core_backward(dctx, c.q, c.k, c.v, heads, c.core, dq, dk, dv);
    Mat dh1 = nn::linear_backward(dq, c.h1, p[L.attn.q.w], slot(g, p, L.attn.q.w), slot(g, p, L.attn.q.b));
    add_inplace(dh1, nn::linear_backward(dk, c.h1, p[L.attn.k.w], slot(g, p, L.attn.k.w), slot(g, p, L.attn.k.b)));
    add_inplace(dh1, nn::linear_backward(dv, c.h1, p[L.attn.v.w], slot(g, p, L.attn.v.w), slot(g, p, L.attn.v.b)));
    dx = nn::layer_norm_backward(dh1, c.ln1, p[L.ln1.g], slot(g, p, L.ln1.g), slot(g, p, L.ln1.b));
    add_inplace(dx, dmid);
  }
  return dx;
}

}  // namespace detail

/// Cross-attention keys/values of every decoder layer, projected once from S_m.
struct MemoryKV {
  std::vector<Mat> k, v;
};

inline MemoryKV memory_kv(const ModelParams& p, Head head, const Mat& s_m) {
  const DecoderIdx& D = p.layout.decoder(head);
  MemoryKV m;
  for (const auto& L : D.layers) {
    m.k.push_back(nn::linear(s_m, p[L.cross.k.w], p[L.cross.k.b]));
    m.v.push_back(nn::linear(s_m, p[L.cross.v.w], p[L.cross.v.b]));
  }
  return m;
}

inline MemoryKV memory_kv_zeros(const MemoryKV& like) {
  MemoryKV z;
  for (const auto& k : like.k) z.k.emplace_back(k.rows, k.cols);
  for (const auto& v : like.v) z.v.emplace_back(v.rows, v.cols);
  return z;
}

/// Backpropagates accumulated cross-attention key/value gradients into S_m.
inline Mat memory_kv_backward(const ModelParams& p, Head head, const Mat& s_m, const MemoryKV& dmem, Gradients* g) {
  const DecoderIdx& D = p.layout.decoder(head);
  Mat ds(s_m.rows, s_m.cols);
  for (std::size_t l = 0; l < D.layers.size(); ++l) {
    const auto& L = D.layers[l];
    using detail::slot;
    add_inplace(ds, nn::linear_backward(dmem.k[l], s_m, p[L.cross.k.w], slot(g, p, L.cross.k.w), slot(g, p, L.cross.k.b)));
    add_inplace(ds, nn::linear_backward(dmem.v[l], s_m, p[L.cross.v.w], slot(g, p, L.cross.v.w), slot(g, p, L.cross.v.b)));
  }
  return ds;
}

struct DecLayerCache {
  Mat x_in;
  nn::LnCache ln1;
  Mat h1, q, k, v;
  nn::AttnCoreCache self_core;
  Mat ctx, x1;
  nn::LnCache ln2;
  Mat h2, q2;
  nn::AttnCoreCache cross_core;
  Mat ctx2, x2;
  nn::LnCache ln3;
  Mat h3, a, f;
};

/// Teacher-forced decoder pass over an input sequence (BOS + shifted target).
struct DecodeRun {
  Head head = Head::Answer;
  TokenSeq input;
  std::vector<DecLayerCache> layers;
  Mat pre_final;
  nn::LnCache lnf;
  Mat hidden;  // final-layer states before the vocabulary projection
  Mat logits;
};

inline DecodeRun decoder_forward(const ModelParams& p, Head head, const MemoryKV& mem, std::span<const TokenId> input) {
  const DecoderIdx& D = p.layout.decoder(head);
  const int heads = p.config.n_heads;
  if (input.empty()) throw std::invalid_argument("decoder_forward: empty input");
  if (input.size() > p[D.pos].rows) throw std::length_error("decoder_forward: sequence exceeds decoder length");
  DecodeRun run;
  run.head = head;
  run.input.assign(input.begin(), input.end());
  const std::size_t T = input.size(), d = static_cast<std::size_t>(p.config.d_model);
  Mat x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    if (input[t] < 0 || input[t] >= p.config.vocab_size) throw std::out_of_range("decoder_forward: token id");
    const double* e = p[p.layout.tok].row(static_cast<std::size_t>(input[t]));
    const double* ps = p[D.pos].row(t);
    for (std::size_t c = 0; c < d; ++c) x(t, c) = e[c] + ps[c];
  }
  run.layers.assign(D.layers.size(), {});
  for (std::size_t l = 0; l < D.layers.size(); ++l) {
    const auto& L = D.layers[l];
    auto& c = run.layers[l];
    c.x_in = x;
    c.h1 = nn::layer_norm(x, p[L.ln1.g], p[L.ln1.b], &c.ln1);
    c.q = nn::linear(c.h1, p[L.self.q.w], p[L.self.q.b]);
    c.k = nn::linear(c.h1, p[L.self.k.w], p[L.self.k.b]);
    c.v = nn::linear(c.h1, p[L.self.v.w], p[L.self.v.b]);
    c.ctx = nn::attention_core(c.q, c.k, c.v, heads, true, &c.self_core);
    c.x1 = nn::linear(c.ctx, p[L.self.o.w], p[L.self.o.b]);
    add_inplace(c.x1, c.x_in);
    c.h2 = nn::layer_norm(c.x1, p[L.ln2.g], p[L.ln2.b], &c.ln2);
    c.q2 = nn::linear(c.h2, p[L.cross.q.w], p[L.cross.q.b]);
    c.ctx2 = nn::attention_core(c.q2, mem.k[l], mem.v[l], heads, false, &c.cross_core);
    c.x2 = nn::linear(c.ctx2, p[L.cross.o.w], p[L.cross.o.b]);
    add_inplace(c.x2, c.x1);
    c.h3 = nn::layer_norm(c.x2, p[L.ln3.g], p[L.ln3.b], &c.ln3);
    c.a = nn::linear(c.h3, p[L.ff1.w], p[L.ff1.b]);
    c.f = c.a;
    for (double& v : c.f.data) v = nn::gelu(v);
    x = nn::linear(c.f, p[L.ff2.w], p[L.ff2.b]);
    add_inplace(x, c.x2);
  }
  run.pre_final = x;
  run.hidden = nn::layer_norm(x, p[D.lnf.g], p[D.lnf.b], &run.lnf);
  run.logits = nn::linear(run.hidden, p[D.out.w], p[D.out.b]);
  return run;
}

/// Backward through one decoder pass. `dlogits` and/or `dhidden` may be
/// empty matrices. Cross-attention K/V gradients accumulate into `dmem`.
inline void decoder_backward(const ModelParams& p, const DecodeRun& run, const MemoryKV& mem, const Mat& dlogits,
                             const Mat& dhidden, MemoryKV& dmem, Gradients* g) {
  using detail::slot;
  const DecoderIdx& D = p.layout.decoder(run.head);
  const int heads = p.config.n_heads;
  Mat dh(run.hidden.rows, run.hidden.cols);
  if (dlogits.size() > 0) add_inplace(dh, nn::linear_backward(dlogits, run.hidden, p[D.out.w], slot(g, p, D.out.w), slot(g, p, D.out.b)));
  if (dhidden.size() > 0) add_inplace(dh, dhidden);
  Mat dx = nn::layer_norm_backward(dh, run.lnf, p[D.lnf.g], slot(g, p, D.lnf.g), slot(g, p, D.lnf.b));
  for (std::size_t l = D.layers.size(); l-- > 0;) {
    const auto& L = D.layers[l];
    const auto& c = run.layers[l];
    Mat dx2 = dx;
    Mat df = nn::linear_backward(dx, c.f, p[L.ff2.w], slot(g, p, L.ff2.w), slot(g, p, L.ff2.b));
    for (std::size_t i = 0; i < df.data.size(); ++i) df.data[i] *= nn::gelu_grad(c.a.data[i]);
    Mat dh3 = nn::linear_backward(df, c.h3, p[L.ff1.w], slot(g, p, L.ff1.w), slot(g, p, L.ff1.b));
    add_inplace(dx2, nn::layer_norm_backward(dh3, c.ln3, p[L.ln3.g], slot(g, p, L.ln3.g), slot(g, p, L.ln3.b)));

    Mat dx1 = dx2;
    Mat dctx2 = nn::linear_backward(dx2, c.ctx2, p[L.cross.o.w], slot(g, p, L.cross.o.w), slot(g, p, L.cross.o.b));
    Mat dq2, dk2, dv2;
    nn::attention_core_backward(dctx2, c.q2, mem.k[l], mem.v[l], heads, c.cross_core, dq2, dk2, dv2);
    add_inplace(dmem.k[l], dk2);
    add_inplace(dmem.v[l], dv2);
    Mat dh2 = nn::linear_backward(dq2, c.h2, p[L.cross.q.w], slot(g, p, L.cross.q.w), slot(g, p, L.cross.q.b));
    add_inplace(dx1, nn::layer_norm_backward(dh2, c.ln2, p[L.ln2.g], slot(g, p, L.ln2.g), slot(g, p, L.ln2.b)));

    Mat dctx = nn::linear_backward(dx1, c.ctx, p[L.self.o.w], slot(g, p, L.self.o.w), slot(g, p, L.self.o.b));
    Mat dq, dk, dv;
    nn::attention_core_backward(dctx, c.q, c.k, c.v, heads, c.self_core, dq, dk, dv);
    Mat dh1 = nn::linear_backward(dq, c.h1, p[L.self.q.w], slot(g, p, L.self.q.w), slot(g, p, L.self.q.b));
    add_inplace(dh1, nn::linear_backward(dk, c.h1, p[L.self.k.w], slot(g, p, L.self.k.w), slot(g, p, L.self.k.b)));
    add_inplace(dh1, nn::linear_backward(dv, c.h1, p[L.self.v.w], slot(g, p, L.self.v.w), slot(g, p, L.self.v.b)));
    dx = nn::layer_norm_backward(dh1, c.ln1, p[L.ln1.g], slot(g, p, L.ln1.g), slot(g, p, L.ln1.b));
    add_inplace(dx, dx1);
  }
  Mat* dtok = slot(g, p, p.layout.tok);
  Mat* dpos = slot(g, p, D.pos);
  for (std::size_t t = 0; t < run.input.size(); ++t) {
    for (std::size_t c = 0; c < dx.cols; ++c) {
      if (dtok) (*dtok)(static_cast<std::size_t>(run.input[t]), c) += dx(t, c);
      if (dpos) (*dpos)(t, c) += dx(t, c);
    }
  }
}

// ---------------------------------------------------------------------------
// Priming + multimodal encoding
// ---------------------------------------------------------------------------

struct EncodeRun {
  TokenSeq image, text;
  Mat s_inp;
  detail::EncoderRun prime;
  Mat primed;  // the reason-token block of the priming output
  Mat s_p;
  detail::EncoderRun mm;
  Mat s_m;
};

namespace detail {
inline void check_inputs(const ModelParams& p, std::span<const TokenId> image, std::span<const TokenId> text) {
  if (image.size() > static_cast<std::size_t>(p.config.max_image_len))
    throw std::length_error("image token sequence exceeds max_image_len");
  if (text.size() > static_cast<std::size_t>(p.config.max_text_len))
    throw std::length_error("text token sequence exceeds max_text_len");
  for (TokenId t : image)
    if (t < 0 || t >= p.config.vocab_size) throw std::out_of_range("image token id outside vocabulary");
  for (TokenId t : text)
    if (t < 0 || t >= p.config.vocab_size) throw std::out_of_range("text token id outside vocabulary");
}

/// [T_i; middle; T_t] with token + modality position embeddings on the outer blocks.
inline Mat assemble(const ModelParams& p, std::span<const TokenId> image, const Mat& middle, std::span<const TokenId> text) {
  const std::size_t d = static_cast<std::size_t>(p.config.d_model);
  Mat x(image.size() + middle.rows + text.size(), d);
  const Mat& tokm = p[p.layout.tok];
  for (std::size_t i = 0; i < image.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) x(i, c) = tokm(static_cast<std::size_t>(image[i]), c) + p[p.layout.pos_img](i, c);
  for (std::size_t r = 0; r < middle.rows; ++r)
    for (std::size_t c = 0; c < d; ++c) x(image.size() + r, c) = middle(r, c);
  const std::size_t off = image.size() + middle.rows;
  for (std::size_t j = 0; j < text.size(); ++j)
    for (std::size_t c = 0; c < d; ++c) x(off + j, c) = tokm(static_cast<std::size_t>(text[j]), c) + p[p.layout.pos_txt](j, c);
  return x;
}

/// Routes the gradient of an assembled sequence into embeddings; returns the middle block.
inline Mat disassemble_grad(const ModelParams& p, std::span<const TokenId> image, std::size_t n_mid,
                            std::span<const TokenId> text, const Mat& dx, Gradients* g) {
  const std::size_t d = dx.cols;
  Mat* dtok = slot(g, p, p.layout.tok);
  Mat* dpi = slot(g, p, p.layout.pos_img);
  Mat* dpt = slot(g, p, p.layout.pos_txt);
  for (std::size_t i = 0; i < image.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) {
      if (dtok) (*dtok)(static_cast<std::size_t>(image[i]), c) += dx(i, c);
      if (dpi) (*dpi)(i, c) += dx(i, c);
    }
  Mat mid(n_mid, d);
  for (std::size_t r = 0; r < n_mid; ++r)
    for (std::size_t c = 0; c < d; ++c) mid(r, c) = dx(image.size() + r, c);
  const std::size_t off = image.size() + n_mid;
  for (std::size_t j = 0; j < text.size(); ++j)
    for (std::size_t c = 0; c < d; ++c) {
      if (dtok) (*dtok)(static_cast<std::size_t>(text[j]), c) += dx(off + j, c);
      if (dpt) (*dpt)(j, c) += dx(off + j, c);
    }
  return mid;
}
}  // namespace detail

/// Runs the frozen priming encoder over [T_i; T_r; T_t] and keeps the
/// reason-token block, then the multimodal encoder over [T_i; T^_r; T_t].
inline EncodeRun encode_forward(const ModelParams& p, std::span<const TokenId> image, std::span<const TokenId> text) {
  detail::check_inputs(p, image, text);
  EncodeRun r;
  r.image.assign(image.begin(), image.end());
  r.text.assign(text.begin(), text.end());
  r.s_inp = detail::assemble(p, image, p[p.layout.bank], text);
  Mat primed_all = detail::encoder_forward(p, p.layout.prime, r.s_inp, r.prime);
  const std::size_t nr = static_cast<std::size_t>(p.config.n_reason_tokens);
  r.primed = Mat(nr, primed_all.cols);
  for (std::size_t i = 0; i < nr; ++i)
    std::copy(primed_all.row(image.size() + i), primed_all.row(image.size() + i) + primed_all.cols, r.primed.row(i));
  r.s_p = detail::assemble(p, image, r.primed, text);
  r.s_m = detail::encoder_forward(p, p.layout.mm, r.s_p, r.mm);
  return r;
}

inline void encode_backward(const ModelParams& p, const EncodeRun& r, const Mat& ds_m, Gradients* g) {
  Mat ds_p = detail::encoder_backward(p, p.layout.mm, r.mm, ds_m, g);
  const std::size_t nr = static_cast<std::size_t>(p.config.n_reason_tokens);
  Mat dprimed = detail::disassemble_grad(p, r.image, nr, r.text, ds_p, g);
  // Only the reason block of the priming output is consumed downstream.
  Mat dprime_out(r.s_inp.rows, r.s_inp.cols);
  for (std::size_t i = 0; i < nr; ++i)
    std::copy(dprimed.row(i), dprimed.row(i) + dprimed.cols, dprime_out.row(r.image.size() + i));
  Mat ds_inp = detail::encoder_backward(p, p.layout.prime, r.prime, dprime_out, g);
  Mat dbank = detail::disassemble_grad(p, r.image, nr, r.text, ds_inp, g);
  if (Mat* gb = detail::slot(g, p, p.layout.bank)) add_inplace(*gb, dbank);
}

/// T^_r only.
inline Mat prime(const ModelParams& p, std::span<const TokenId> image, std::span<const TokenId> text) {
  return encode_forward(p, image, text).primed;
}

/// S_m for an explicit primed block (used to probe sensitivity to T^_r).
inline Mat encode(const ModelParams& p, std::span<const TokenId> image, const Mat& primed, std::span<const TokenId> text) {
  detail::check_inputs(p, image, text);
  if (primed.rows != static_cast<std::size_t>(p.config.n_reason_tokens))
    throw std::length_error("encode: primed block has the wrong number of reason tokens");
  detail::EncoderRun run;
  return detail::encoder_forward(p, p.layout.mm, detail::assemble(p, image, primed, text), run);
}

// ---------------------------------------------------------------------------
// Incremental decoding and sampling
// ---------------------------------------------------------------------------

/// Autoregressive stepper; reproduces decoder_forward one position at a time.
class DecoderStepper {
 public:
  DecoderStepper(const ModelParams& p, Head head, const MemoryKV& mem) : p_(p), head_(head), mem_(mem) {
    const auto& D = p.layout.decoder(head);
    const std::size_t d = static_cast<std::size_t>(p.config.d_model);
    k_.assign(D.layers.size(), Mat(0, d));
    v_.assign(D.layers.size(), Mat(0, d));
  }

  std::size_t position() const noexcept { return pos_; }

  /// Consumes one input token and returns the next-token logits.
  std::vector<double> step(TokenId input) {
    const DecoderIdx& D = p_.layout.decoder(head_);
    const int heads = p_.config.n_heads;
    if (pos_ >= p_[D.pos].rows) throw std::length_error("DecoderStepper: exceeded decoder length");
    const std::size_t d = static_cast<std::size_t>(p_.config.d_model);
    Mat x(1, d);
    for (std::size_t c = 0; c < d; ++c)
      x(0, c) = p_[p_.layout.tok](static_cast<std::size_t>(input), c) + p_[D.pos](pos_, c);
    for (std::size_t l = 0; l < D.layers.size(); ++l) {
      const auto& L = D.layers[l];
      Mat h1 = nn::layer_norm(x, p_[L.ln1.g], p_[L.ln1.b], nullptr);
      Mat q = nn::linear(h1, p_[L.self.q.w], p_[L.self.q.b]);
      append_row(k_[l], nn::linear(h1, p_[L.self.k.w], p_[L.self.k.b]));
      append_row(v_[l], nn::linear(h1, p_[L.self.v.w], p_[L.self.v.b]));
      Mat ctx = nn::attention_core(q, k_[l], v_[l], heads, false, nullptr);
      Mat x1 = nn::linear(ctx, p_[L.self.o.w], p_[L.self.o.b]);
      add_inplace(x1, x);
      Mat h2 = nn::layer_norm(x1, p_[L.ln2.g], p_[L.ln2.b], nullptr);
      Mat q2 = nn::linear(h2, p_[L.cross.q.w], p_[L.cross.q.b]);
      Mat ctx2 = nn::attention_core(q2, mem_.k[l], mem_.v[l], heads, false, nullptr);
      Mat x2 = nn::linear(ctx2, p_[L.cross.o.w], p_[L.cross.o.b]);
      add_inplace(x2, x1);
      Mat h3 = nn::layer_norm(x2, p_[L.ln3.g], p_[L.ln3.b], nullptr);
      Mat f = nn::linear(h3, p_[L.ff1.w], p_[L.ff1.b]);
      for (double& v : f.data) v = nn::gelu(v);
      x = nn::linear(f, p_[L.ff2.w], p_[L.ff2.b]);
      add_inplace(x, x2);
    }
    Mat h = nn::layer_norm(x, p_[D.lnf.g], p_[D.lnf.b], nullptr);
    Mat logits = nn::linear(h, p_[D.out.w], p_[D.out.b]);
    ++pos_;
    return std::move(logits.data);
  }

 private:
  static void append_row(Mat& m, const Mat& row) {
    m.data.insert(m.data.end(), row.data.begin(), row.data.end());
    ++m.rows;
  }

  const ModelParams& p_;
  Head head_;
  const MemoryKV& mem_;
  std::vector<Mat> k_, v_;
  std::size_t pos_ = 0;
};

enum class Termination : std::uint8_t { Eos, MaxLen };

struct RolloutOutput {
  TokenSeq tokens;  // includes the EOS token when terminated by EOS
  std::vector<double> per_step_logprob;
  double total_logprob = 0.0;
  Termination terminated = Termination::MaxLen;
};

inline int max_len_of(const ModelParams& p, Head h) noexcept {
  return h == Head::Answer ? p.config.max_answer_len : p.config.max_reason_len;
}

/// Lowest-id argmax.
inline TokenId argmax_token(std::span<const double> logits) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

/// Logits for the next token after `prefix` (teacher-forced from BOS).
inline std::vector<double> decode_step(const ModelParams& p, Head head, const MemoryKV& mem, std::span<const TokenId> prefix) {
  if (prefix.size() + 1 > static_cast<std::size_t>(max_len_of(p, head)))
    throw std::length_error("decode_step: prefix exceeds head maximum length");
  TokenSeq input{tok::kBos};
  input.insert(input.end(), prefix.begin(), prefix.end());
  DecodeRun run = decoder_forward(p, head, mem, input);
  const auto last = run.logits.row_span(run.logits.rows - 1);
  return {last.begin(), last.end()};
}

/// Samples up to the head's max length. Temperature 0 is greedy; the
/// recorded log-probabilities are always those of the temperature-1 policy.
inline RolloutOutput sample_sequence(const ModelParams& p, Head head, const MemoryKV& mem, double temperature,
                                     CounterRng& rng, int max_len = -1) {
  if (temperature < 0.0) throw std::invalid_argument("sample_sequence: temperature must be >= 0");
  if (max_len < 0) max_len = max_len_of(p, head);
  RolloutOutput out;
  DecoderStepper stepper(p, head, mem);
  TokenId input = tok::kBos;
  for (int t = 0; t < max_len; ++t) {
    const std::vector<double> logits = stepper.step(input);
    const std::vector<double> logp = log_softmax(logits);
    TokenId chosen;
    if (temperature == 0.0) {
      chosen = argmax_token(logits);
    } else {
      std::vector<double> w(logits.size());
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((logits[i] - mx) / temperature);
      chosen = static_cast<TokenId>(rng.categorical(w));
    }
    out.tokens.push_back(chosen);
    out.per_step_logprob.push_back(logp[static_cast<std::size_t>(chosen)]);
    out.total_logprob += logp[static_cast<std::size_t>(chosen)];
    if (chosen == tok::kEos) {
      out.terminated = Termination::Eos;
      break;
    }
    input = chosen;
  }
  return out;
}

inline TokenSeq teacher_input(std::span<const TokenId> target) {
  TokenSeq in{tok::kBos};
  if (!target.empty()) in.insert(in.end(), target.begin(), target.end() - 1);
  return in;
}

/// Per-token log-probabilities of `target` under teacher forcing.
inline std::vector<double> log_prob(const ModelParams& p, Head head, const MemoryKV& mem, std::span<const TokenId> target) {
  if (target.empty()) return {};
  if (target.size() > static_cast<std::size_t>(max_len_of(p, head)))
    throw std::length_error("log_prob: target exceeds head maximum length");
  DecodeRun run = decoder_forward(p, head, mem, teacher_input(target));
  std::vector<double> out(target.size());
  std::vector<double> lp(run.logits.cols);
  for (std::size_t t = 0; t < target.size(); ++t) {
    log_softmax_row(run.logits.row_span(t), lp);
    out[t] = lp[static_cast<std::size_t>(target[t])];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole-model forward cache and backward
// ---------------------------------------------------------------------------

/// Activations of one input with any number of teacher-forced sequences per head.
struct ForwardCache {
  EncodeRun enc;
  MemoryKV mem_answer, mem_reason;
  std::vector<DecodeRun> answers, reasons;
  std::uint64_t params_fingerprint = 0;
};

/// Output-side gradients, aligned with ForwardCache::answers / reasons.
/// Empty matrices mean "no gradient" for that slot.
struct OutputGrads {
  std::vector<Mat> answer_logits, answer_hidden, reason_logits, reason_hidden;
};

inline ForwardCache forward(const ModelParams& p, std::span<const TokenId> image, std::span<const TokenId> text,
                            const std::vector<TokenSeq>& answer_targets, const std::vector<TokenSeq>& reason_targets) {
  ForwardCache c;
  c.params_fingerprint = p.fingerprint();
  c.enc = encode_forward(p, image, text);
  if (!answer_targets.empty()) {
    c.mem_answer = memory_kv(p, Head::Answer, c.enc.s_m);
    for (const auto& t : answer_targets) {
      if (t.size() > static_cast<std::size_t>(p.config.max_answer_len)) throw std::length_error("answer target too long");
      c.answers.push_back(decoder_forward(p, Head::Answer, c.mem_answer, teacher_input(t)));
    }
  }
  if (!reason_targets.empty()) {
    c.mem_reason = memory_kv(p, Head::Reason, c.enc.s_m);
    for (const auto& t : reason_targets) {
      if (t.size() > static_cast<std::size_t>(p.config.max_reason_len)) throw std::length_error("reason target too long");
      c.reasons.push_back(decoder_forward(p, Head::Reason, c.mem_reason, teacher_input(t)));
    }
  }
  return c;
}

/// Accumulates parameter gradients into `g`. Frozen tensors receive nothing.
inline void backward_into(const ModelParams& p, const ForwardCache& c, const OutputGrads& og, Gradients& g) {
  if (c.params_fingerprint != p.fingerprint()) throw std::logic_error("backward: stale forward cache");
  auto at = [](const std::vector<Mat>& v, std::size_t i) -> const Mat& {
    static const Mat kEmpty;
    return i < v.size() ? v[i] : kEmpty;
  };
  Mat ds_m(c.enc.s_m.rows, c.enc.s_m.cols);
  if (!c.answers.empty()) {
    MemoryKV dmem = memory_kv_zeros(c.mem_answer);
    for (std::size_t i = 0; i < c.answers.size(); ++i)
      decoder_backward(p, c.answers[i], c.mem_answer, at(og.answer_logits, i), at(og.answer_hidden, i), dmem, &g);
    add_inplace(ds_m, memory_kv_backward(p, Head::Answer, c.enc.s_m, dmem, &g));
  }
  if (!c.reasons.empty()) {
    MemoryKV dmem = memory_kv_zeros(c.mem_reason);
    for (std::size_t i = 0; i < c.reasons.size(); ++i)
      decoder_backward(p, c.reasons[i], c.mem_reason, at(og.reason_logits, i), at(og.reason_hidden, i), dmem, &g);
    add_inplace(ds_m, memory_kv_backward(p, Head::Reason, c.enc.s_m, dmem, &g));
  }
  encode_backward(p, c.enc, ds_m, &g);
}

inline Gradients backward(const ModelParams& p, const ForwardCache& c, const OutputGrads& og) {
  Gradients g = Gradients::zeros_like(p);
  backward_into(p, c, og, g);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {
inline std::map<std::string, std::string> config_meta(const ModelConfig& c) {
  return {{"vocab_size", std::to_string(c.vocab_size)},       {"d_model", std::to_string(c.d_model)},
          {"n_reason_tokens", std::to_string(c.n_reason_tokens)}, {"n_heads", std::to_string(c.n_heads)},
          {"encoder_layers", std::to_string(c.encoder_layers)}, {"decoder_layers", std::to_string(c.decoder_layers)},
          {"ffn_width", std::to_string(c.ffn_width)},         {"max_answer_len", std::to_string(c.max_answer_len)},
          {"max_reason_len", std::to_string(c.max_reason_len)}, {"max_image_len", std::to_string(c.max_image_len)},
          {"max_text_len", std::to_string(c.max_text_len)}};
}

inline ModelConfig config_from_meta(const std::map<std::string, std::string>& m) {
  auto get = [&](const char* k) {
    auto it = m.find(k);
    if (it == m.end()) throw CheckpointError(CheckpointError::Kind::Format, std::string("checkpoint lacks config key ") + k);
    return std::stoi(it->second);
  };
  ModelConfig c;
  c.vocab_size = get("vocab_size");
  c.d_model = get("d_model");
  c.n_reason_tokens = get("n_reason_tokens");
  c.n_heads = get("n_heads");
  c.encoder_layers = get("encoder_layers");
  c.decoder_layers = get("decoder_layers");
  c.ffn_width = get("ffn_width");
  c.max_answer_len = get("max_answer_len");
  c.max_reason_len = get("max_reason_len");
  c.max_image_len = get("max_image_len");
  c.max_text_len = get("max_text_len");
  return c;
}
}  // namespace detail

struct LoadedCheckpoint {
  ModelParams params;
  std::string stage_tag;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> extra;  // tensors not belonging to the model (e.g. optimizer state)
};

inline void save_checkpoint(const ModelParams& p, const std::string& stage_tag, const std::string& path,
                            const std::map<std::string, std::string>& extra_meta = {},
                            const std::vector<NamedTensor>& extra_tensors = {}) {
  CheckpointData ck;
  ck.stage = stage_tag;
  ck.meta = detail::config_meta(p.config);
  for (const auto& [k, v] : extra_meta) ck.meta["x." + k] = v;
  for (const auto& t : p.tensors) ck.tensors.push_back({t.name, t.value, t.frozen});
  for (const auto& t : extra_tensors) ck.tensors.push_back(t);
  write_checkpoint(path, ck);
}

/// Loads a policy checkpoint. When `expected` is given, the stored
/// configuration must match it (shape mismatch otherwise).
inline LoadedCheckpoint load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  CheckpointData ck = read_checkpoint(path);
  const ModelConfig cfg = detail::config_from_meta(ck.meta);
  if (expected && !(*expected == cfg))
    throw CheckpointError(CheckpointError::Kind::Shape, path + ": checkpoint configuration does not match the model");
  LoadedCheckpoint out;
  out.params.config = cfg;
  out.params.layout = detail::build_layout(out.params);
  out.stage_tag = ck.stage;
  for (const auto& [k, v] : ck.meta)
    if (k.rfind("x.", 0) == 0) out.meta[k.substr(2)] = v;
  std::size_t matched = 0;
  for (auto& t : ck.tensors) {
    auto idx = out.params.index_of(t.name);
    if (!idx) {
      out.extra.push_back(std::move(t));
      continue;
    }
    auto& dst = out.params.tensors[*idx];
    if (!dst.value.same_shape(t.value))
      throw CheckpointError(CheckpointError::Kind::Shape, path + ": shape mismatch for tensor " + t.name);
    dst.value = std::move(t.value);
    dst.frozen = t.frozen;
    ++matched;
  }
  if (matched != out.params.tensors.size())
    throw CheckpointError(CheckpointError::Kind::Shape, path + ": checkpoint is missing model tensors");
  return out;
}

}  // namespace reform
