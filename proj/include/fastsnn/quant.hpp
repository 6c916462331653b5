#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fastsnn/tensor.hpp"

namespace fastsnn {

enum class QuantTarget : std::uint8_t { activation = 0, weight = 1 };

/// Uniform activation quantizer: 2^bits levels k*s/(2^bits-1), k = 0..2^bits-1.
struct QuantSpec {
  int bits = 2;
  float clip_threshold = 1.0f;  // s, learned; always > 0
  QuantTarget target = QuantTarget::activation;

  /// Smallest value s is projected back to after an optimizer step.
  static constexpr float min_threshold = 1e-3f;

  int levels() const { return (1 << bits) - 1; }

  void validate() const {
    if (bits < 1 || bits > 8) throw Error("quant: bits must lie in [1, 8], got " + std::to_string(bits));
    if (!(clip_threshold > 0) || !std::isfinite(clip_threshold))
      throw Error("quant: clip threshold must be a positive finite value");
  }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

namespace detail {

/// Value of quantization level `level` on the grid of step s/levels. The top level maps to s exactly.
inline double level_value(long level, double s, int levels) {
  if (level >= levels) return s;
  return s * static_cast<double>(level) / static_cast<double>(levels);
}

inline double scaled(double x, double s, int levels) { return static_cast<double>(levels) * x / s; }

}  // namespace detail

/// Integer level of x: clip(round((2^b-1) x / s), 0, 2^b-1), rounding half away from zero.
inline long quantize_level(double x, double s, int bits) {
  const int levels = (1 << bits) - 1;
  const double r = std::round(detail::scaled(x, s, levels));
  if (!(r > 0)) return 0;  // also maps NaN to 0
  return r >= levels ? levels : static_cast<long>(r);
}

/// The same level written with a flooring operator and a half-threshold offset, which is how an
/// integrate-and-fire neuron with initial charge theta/2 counts spikes:
/// clip(floor((2^b-1) x / s + 1/2), 0, 2^b-1). The offset is added in extended precision so the
/// sum is exact.
inline long quantize_level_floor_form(double x, double s, int bits) {
  const int levels = (1 << bits) - 1;
  const long double f =
      std::floor(static_cast<long double>(detail::scaled(x, s, levels)) + 0.5L);
  if (!(f > 0)) return 0;
  return f >= levels ? levels : static_cast<long>(f);
}

template <class Real>
Real quantize_value(Real x, double s, int bits) {
  return static_cast<Real>(detail::level_value(quantize_level(x, s, bits), s, (1 << bits) - 1));
}

template <class Real>
BasicTensor<Real> quantize_activation(const BasicTensor<Real>& x, const QuantSpec& spec) {
  spec.validate();
  BasicTensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], spec.clip_threshold, spec.bits);
  return out;
}

template <class Real>
struct QuantGrad {
  BasicTensor<Real> grad_x;
  double grad_s = 0.0;
};

/// Straight-through gradient inside [0, s]; saturated elements (x > s) route their gradient to s.
template <class Real>
void quantize_backward(std::span<const Real> upstream, std::span<const Real> x, double s,
                       std::span<Real> grad_x, double& grad_s) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = static_cast<double>(x[i]);
    if (xi > s) {
      grad_x[i] = Real{0};
      grad_s += static_cast<double>(upstream[i]);
    } else if (xi >= 0) {
      grad_x[i] = upstream[i];
    } else {
      grad_x[i] = Real{0};
    }
  }
}

template <class Real>
QuantGrad<Real> quantize_backward(const BasicTensor<Real>& upstream, const BasicTensor<Real>& x,
                                  const QuantSpec& spec) {
  if (upstream.shape() != x.shape()) throw ShapeError("quantize_backward: shape mismatch");
  QuantGrad<Real> g{BasicTensor<Real>(x.shape()), 0.0};
  quantize_backward<Real>(upstream.span(), x.span(), spec.clip_threshold, g.grad_x.span(), g.grad_s);
  return g;
}

/// Symmetric uniform weight quantization onto 2^bits-1 signed levels spanning [-max|w|, max|w|].
template <class Real>
void quantize_weights_into(std::span<const Real> w, int bits, std::span<Real> out) {
  if (bits < 2) throw Error("quantize_weights: bits must be >= 2");
  double max_abs = 0;
  for (Real v : w) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  if (max_abs == 0) {
    std::copy(w.begin(), w.end(), out.begin());
    return;
  }
  const double per_side = static_cast<double>((1 << (bits - 1)) - 1);
  const double step = max_abs / per_side;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double k = std::round(static_cast<double>(w[i]) / step);
    out[i] = std::abs(k) >= per_side ? static_cast<Real>(std::copysign(max_abs, k))
                                     : static_cast<Real>(k * step);
  }
}

template <class Real>
BasicTensor<Real> quantize_weights(const BasicTensor<Real>& w, int bits) {
  BasicTensor<Real> out(w.shape());
  quantize_weights_into<Real>(w.span(), bits, out.span());
  return out;
}

enum class BaselineMode { max, percentile };

/// Statistical clipping threshold estimated from a batch of activations.
struct BaselineThresholdConfig {
  BaselineMode mode = BaselineMode::max;
  double percentile = 99.9;  // used when mode == percentile, in (0, 100]
};

/// Maximum or nearest-rank percentile of the flattened activations.
template <class Real>
double estimate_baseline_threshold(std::span<const Real> acts, const BaselineThresholdConfig& cfg) {
  if (acts.empty()) throw Error("estimate_baseline_threshold: empty activation batch");
  if (cfg.mode == BaselineMode::max)
    return static_cast<double>(*std::max_element(acts.begin(), acts.end()));
  if (!(cfg.percentile > 0 && cfg.percentile <= 100))
    throw Error("estimate_baseline_threshold: percentile must lie in (0, 100]");
  std::vector<Real> sorted(acts.begin(), acts.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  // nearest rank: ceil(p/100 * n), 1-based; the small slack absorbs p/100 representation error
  auto rank = static_cast<std::size_t>(std::ceil(cfg.percentile / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return static_cast<double>(sorted[rank - 1]);
}

template <class Real>
double estimate_baseline_threshold(const BasicTensor<Real>& acts, const BaselineThresholdConfig& cfg) {
  return estimate_baseline_threshold<Real>(acts.span(), cfg);
}

}  // namespace fastsnn
