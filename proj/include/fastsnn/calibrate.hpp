#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "fastsnn/forward.hpp"
#include "fastsnn/network.hpp"
#include "fastsnn/quant.hpp"
#include "fastsnn/spiking.hpp"

namespace fastsnn {

/// Firing-threshold source used at conversion time.
enum class ThresholdSource { learned, max, p99, p99_9 };

inline std::string_view threshold_source_name(ThresholdSource s) {
  switch (s) {
    case ThresholdSource::learned: return "learned";
    case ThresholdSource::max: return "max";
    case ThresholdSource::p99: return "p99";
    case ThresholdSource::p99_9: return "p99.9";
  }
  return "?";
}

inline ThresholdSource threshold_source_from_name(std::string_view name) {
  for (auto s : {ThresholdSource::learned, ThresholdSource::max, ThresholdSource::p99, ThresholdSource::p99_9})
    if (threshold_source_name(s) == name) return s;
  throw Error("unknown threshold source '" + std::string(name) + "' (expected learned, max, p99 or p99.9)");
}

/// Rectified pre-quantization activations max(0, x) of every quantized layer for a batch.
inline std::vector<BasicTensor<double>> relu_activations(const NetworkDef& ann, const Tensor& batch) {
  ForwardCache<double> cache;
  forward<double>(ann, batch, false, &cache);
  std::vector<BasicTensor<double>> out;
  for (std::size_t i = 0; i < ann.layers.size(); ++i) {
    if (ann.layers[i].kind() != LayerKind::quant_relu) continue;
    if (i == 0) throw Error("relu_activations: quantized layer cannot be first");
    BasicTensor<double> a = cache.outputs[i - 1];
    for (double& v : a) v = std::max(v, 0.0);
    out.push_back(std::move(a));
  }
  return out;
}

/// Per-layer statistical thresholds (max or nearest-rank percentile over all rectified values of the
/// batch, zeros included). Layers whose statistic is not positive keep their learned threshold.
inline std::vector<double> baseline_thresholds(const NetworkDef& ann, const Tensor& batch, ThresholdSource source) {
  std::vector<double> out;
  const auto acts = relu_activations(ann, batch);
  std::size_t q = 0;
  for (const auto& layer : ann.layers) {
    const auto* p = layer.get<QuantRelu>();
    if (!p) continue;
    double theta = p->quant.clip_threshold;
    if (source != ThresholdSource::learned) {
      BaselineThresholdConfig cfg;
      cfg.mode = source == ThresholdSource::max ? BaselineMode::max : BaselineMode::percentile;
      cfg.percentile = source == ThresholdSource::p99 ? 99.0 : 99.9;
      const double est = estimate_baseline_threshold(acts[q], cfg);
      if (est > 0) theta = est;
    }
    out.push_back(theta);
    ++q;
  }
  return out;
}

/// Replaces every spiking layer's threshold (mu = theta / 2, outgoing weights rescaled).
inline void apply_thresholds(SpikingNetwork& snn, const std::vector<double>& thresholds) {
  if (thresholds.size() + 1 != snn.layers.size())
    throw Error("apply_thresholds: " + std::to_string(thresholds.size()) + " thresholds for " +
                std::to_string(snn.layers.size() - 1) + " spiking layers");
  for (std::size_t l = 0; l < thresholds.size(); ++l) set_threshold(snn, l, thresholds[l]);
}

}  // namespace fastsnn
