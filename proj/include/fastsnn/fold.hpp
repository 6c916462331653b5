#pragma once

#include <cmath>
#include <vector>

#include "fastsnn/network.hpp"
#include "fastsnn/quant.hpp"

namespace fastsnn {

/// Firing threshold that absorbs a batch normalization applied before a threshold theta:
/// BN(x) >= theta  <=>  x >= (theta - beta) / gamma * sqrt(var + eps) + mean   (gamma > 0).
inline double folded_threshold(double theta, double gamma, double beta, double mean, double var, double eps) {
  if (gamma == 0) throw Error("folded_threshold: gamma is zero");
  return (theta - beta) / gamma * std::sqrt(var + eps) + mean;
}

/// Removes every batchnorm layer by scaling the preceding fc/conv layer:
///   W <- W * gamma / sqrt(var + eps),  b <- (b - mean) * gamma / sqrt(var + eps) + beta.
/// Quantized weights are materialized first, so the result always has full-precision weights.
inline NetworkDef fold_batchnorm(const NetworkDef& net) {
  NetworkDef out;
  out.name = net.name;
  out.input_shape = net.input_shape;
  out.seed = net.seed;
  out.weight_bits = 0;
  std::vector<int> remap(net.layers.size(), -1);

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerDef& layer = net.layers[i];
    if (const auto* bn = layer.get<BatchNorm>()) {
      if (out.layers.empty() || i == 0 ||
          (net.layers[i - 1].kind() != LayerKind::fc && net.layers[i - 1].kind() != LayerKind::conv))
        throw Error("fold_batchnorm: batchnorm layer " + std::to_string(i) + " does not follow fc/conv");
      LayerDef& prev = out.layers.back();
      Tensor* w = prev.get<Linear>() ? &prev.get<Linear>()->weight : &prev.get<Conv>()->weight;
      Tensor* b = prev.get<Linear>() ? &prev.get<Linear>()->bias : &prev.get<Conv>()->bias;
      const std::size_t C = bn->gamma.size(), per = w->size() / C;
      for (std::size_t c = 0; c < C; ++c) {
        if (bn->gamma[c] == 0.0f)
          throw Error("fold_batchnorm: gamma is zero in channel " + std::to_string(c) + " of layer " +
                      std::to_string(i) + " (fold is not invertible)");
        const double scale = static_cast<double>(bn->gamma[c]) / std::sqrt(static_cast<double>(bn->running_var[c]) + bn->eps);
        for (std::size_t k = 0; k < per; ++k) (*w)[c * per + k] = static_cast<float>((*w)[c * per + k] * scale);
        (*b)[c] = static_cast<float>((static_cast<double>((*b)[c]) - bn->running_mean[c]) * scale + bn->beta[c]);
      }
      remap[i] = static_cast<int>(out.layers.size()) - 1;
      continue;
    }
    LayerDef copy = layer;
    if (net.weight_bits > 0) {
      if (auto* p = copy.get<Linear>()) p->weight = quantize_weights(p->weight, net.weight_bits);
      if (auto* p = copy.get<Conv>()) p->weight = quantize_weights(p->weight, net.weight_bits);
    }
    if (auto* s = copy.get<AddShortcut>(); s && s->from >= 0) s->from = remap[static_cast<std::size_t>(s->from)];
    copy.in_shape = out.output_shape();
    out.layers.push_back(std::move(copy));
    remap[i] = static_cast<int>(out.layers.size()) - 1;
  }
  out.validate();
  return out;
}

}  // namespace fastsnn
