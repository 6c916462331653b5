#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "fastsnn/tensor.hpp"

namespace fastsnn {

/// Momentum SGD settings. `schedule` holds (epoch, multiplier) pairs: from that epoch on the
/// learning rate is `learning_rate * multiplier`.
struct SgdConfig {
  double learning_rate = 0.04;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::pair<int, double>> schedule;

  void validate() const {
    if (!(learning_rate > 0)) throw Error("sgd: learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw Error("sgd: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw Error("sgd: weight_decay must be >= 0");
  }

  double rate_at(int epoch) const {
    double lr = learning_rate;
    for (const auto& [e, mult] : schedule)
      if (epoch >= e) lr = learning_rate * mult;
    return lr;
  }
};

/// One momentum step over a flat parameter buffer:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// The velocity buffer is resized (zero-filled) on first use.
template <class P, class G, class V>
void sgd_step(std::span<P> params, std::span<const G> grads, std::vector<V>& velocity,
              double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size())
    throw ShapeError("sgd_step: parameter and gradient sizes differ");
  if (velocity.size() != params.size()) velocity.assign(params.size(), V{0});
  const V m = static_cast<V>(momentum), wd = static_cast<V>(weight_decay), rate = static_cast<V>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + static_cast<V>(grads[i]) + wd * static_cast<V>(params[i]);
    params[i] = static_cast<P>(static_cast<V>(params[i]) - rate * velocity[i]);
  }
}

template <class P, class G, class V>
void sgd_step(std::span<P> params, std::span<const G> grads, std::vector<V>& velocity,
              const SgdConfig& cfg, int epoch = 0) {
  sgd_step(params, grads, velocity, cfg.rate_at(epoch), cfg.momentum, cfg.weight_decay);
}

}  // namespace fastsnn
