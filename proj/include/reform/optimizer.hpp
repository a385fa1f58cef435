#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "reform/checkpoint.hpp"
#include "reform/policy_model.hpp"

namespace reform {

/// Linear warm-up from floor to peak, then cosine decay back to floor.
struct LrSchedule {
  double floor = 3e-4;
  double peak = 3e-3;
  long warmup_steps = 100;
  long total_steps = 1000;

  void validate() const {
    if (!(floor >= 0.0 && floor <= peak)) throw std::invalid_argument("learning-rate floor must satisfy 0 <= floor <= peak");
    if (warmup_steps < 0 || total_steps < 1) throw std::invalid_argument("schedule step counts must be positive");
  }

  double at(long step) const noexcept {
    if (step < warmup_steps) return floor + (peak - floor) * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const long span = std::max(1L, total_steps - warmup_steps);
    const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * t));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<Mat> m, v;
  long step = 0;

  static AdamState zeros_like(const ModelParams& p) {
    AdamState s;
    for (const auto& t : p.tensors) {
      s.m.emplace_back(t.value.rows, t.value.cols);
      s.v.emplace_back(t.value.rows, t.value.cols);
    }
    return s;
  }
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One decoupled-weight-decay Adam update at learning rate `lr`. Frozen
/// tensors are skipped. Parameters and moments are rounded to float32 after
/// the update so that a checkpoint captures the exact training state.
inline void adamw_step(ModelParams& p, const Gradients& g, AdamState& s, double lr, const AdamWConfig& cfg = {}) {
  if (g.g.size() != p.tensors.size() || s.m.size() != p.tensors.size())
    throw std::invalid_argument("adamw_step: gradient/state layout mismatch");
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (p.tensors[i].frozen) continue;
    if (!g.g[i].same_shape(p.tensors[i].value)) throw std::invalid_argument("adamw_step: shape mismatch for " + p.tensors[i].name);
    for (double x : g.g[i].data)
      if (!std::isfinite(x)) throw NonFiniteGradient("non-finite gradient in " + p.tensors[i].name);
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (p.tensors[i].frozen) continue;
    auto& w = p.tensors[i].value.data;
    auto& m = s.m[i].data;
    auto& v = s.v[i].data;
    const auto& gd = g.g[i].data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = to_f32(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gd[k]);
      v[k] = to_f32(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gd[k] * gd[k]);
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      w[k] = to_f32(w[k] - lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * w[k]));
    }
  }
}

/// Optimizer state as extra checkpoint tensors.
inline std::vector<NamedTensor> optimizer_tensors(const ModelParams& p, const AdamState& s) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    out.push_back({"opt.m/" + p.tensors[i].name, s.m[i], true});
    out.push_back({"opt.v/" + p.tensors[i].name, s.v[i], true});
  }
  return out;
}

inline AdamState optimizer_from_tensors(const ModelParams& p, const std::vector<NamedTensor>& extra, long step) {
  AdamState s = AdamState::zeros_like(p);
  s.step = step;
  std::size_t found = 0;
  for (const auto& t : extra) {
    const bool is_m = t.name.rfind("opt.m/", 0) == 0;
    const bool is_v = t.name.rfind("opt.v/", 0) == 0;
    if (!is_m && !is_v) continue;
    auto idx = p.index_of(t.name.substr(6));
    if (!idx) throw CheckpointError(CheckpointError::Kind::Format, "optimizer state for unknown tensor " + t.name);
    Mat& dst = is_m ? s.m[*idx] : s.v[*idx];
    if (!dst.same_shape(t.value)) throw CheckpointError(CheckpointError::Kind::Shape, "optimizer state shape mismatch for " + t.name);
    dst = t.value;
    ++found;
  }
  if (found != 2 * p.tensors.size())
    throw CheckpointError(CheckpointError::Kind::Format, "checkpoint lacks complete optimizer state");
  return s;
}

}  // namespace reform
