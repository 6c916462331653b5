#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fastsnn/dataset.hpp"
#include "fastsnn/forward.hpp"
#include "fastsnn/network.hpp"
#include "fastsnn/optim.hpp"

namespace fastsnn {

class TrainingDiverged : public Error {
public:
  using Error::Error;
};

struct TrainConfig {
  SgdConfig sgd;
  int epochs = 60;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;  // shuffling stream
};

struct EpochMetrics {
  int epoch = 0;
  double learning_rate = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_accuracy = 0;
};

struct TrainResult {
  NetworkDef net;
  std::vector<EpochMetrics> history;
};

/// Class predictions in evaluation mode, computed in chunks with double-precision accumulation.
inline std::vector<int> predict(const NetworkDef& net, const Dataset& data, std::size_t chunk = 256) {
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, data.size() - begin);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), begin);
    const auto r = forward<double>(net, data.batch(idx));
    const auto p = argmax_rows(r.logits);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline double accuracy_of(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double evaluate(const NetworkDef& net, const Dataset& data) {
  return accuracy_of(predict(net, data), data.labels);
}

namespace detail {

/// Per-layer optimizer state, mirroring LayerGrad.
struct LayerVelocity {
  std::vector<float> a, b;
};

inline void apply_update(NetworkDef& net, const std::vector<LayerGrad>& grads, std::vector<LayerVelocity>& vel,
                         const SgdConfig& cfg, double lr) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto& layer = net.layers[i];
    const auto& g = grads[i];
    auto& v = vel[i];
    auto step = [&](std::span<float> p, const std::vector<float>& gr, std::vector<float>& vv, double wd) {
      sgd_step<float, float, float>(p, gr, vv, lr, cfg.momentum, wd);
    };
    if (auto* p = layer.get<Linear>()) {
      step(p->weight.span(), g.a, v.a, cfg.weight_decay);
      step(p->bias.span(), g.b, v.b, cfg.weight_decay);
    } else if (auto* p = layer.get<Conv>()) {
      step(p->weight.span(), g.a, v.a, cfg.weight_decay);
      step(p->bias.span(), g.b, v.b, cfg.weight_decay);
    } else if (auto* p = layer.get<BatchNorm>()) {
      step(p->gamma.span(), g.a, v.a, cfg.weight_decay);
      step(p->beta.span(), g.b, v.b, cfg.weight_decay);
    } else if (auto* p = layer.get<QuantRelu>()) {
      // clip threshold: same rate, no weight decay, kept strictly positive
      step(std::span<float>(&p->quant.clip_threshold, 1), g.a, v.a, 0.0);
      p->quant.clip_threshold = std::max(p->quant.clip_threshold, QuantSpec::min_threshold);
    }
  }
}

inline void update_running_stats(NetworkDef& net, const ForwardCache<float>& cache, std::size_t batch) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto* bn = net.layers[i].get<BatchNorm>();
    if (!bn) continue;
    const auto [C, S] = channel_split(net.layers[i].in_shape);
    const double m = static_cast<double>(batch * S);
    const double unbias = m > 1 ? m / (m - 1) : 1.0;
    for (std::size_t c = 0; c < C; ++c) {
      bn->running_mean[c] = static_cast<float>((1 - bn->momentum) * bn->running_mean[c] + bn->momentum * cache.bn_mean[i][c]);
      bn->running_var[c] =
          static_cast<float>((1 - bn->momentum) * bn->running_var[c] + bn->momentum * cache.bn_var[i][c] * unbias);
    }
  }
}

}  // namespace detail

/// Minibatch SGD on softmax cross-entropy. Fully deterministic for a given network, data and seed.
/// `test` may be empty; `on_epoch` is called after every epoch.
inline TrainResult train(NetworkDef net, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.sgd.validate();
  train_set.validate();
  if (train_set.size() == 0) throw Error("train: empty training set");
  if (cfg.batch_size == 0) throw Error("train: batch size must be positive");
  TrainResult result;
  std::vector<detail::LayerVelocity> vel(net.layers.size());
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardCache<float> cache;
  std::vector<int> labels;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.sgd.rate_at(epoch);
    double loss_sum = 0;
    std::size_t hits = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - begin);
      const std::span<const std::size_t> idx(order.data() + begin, n);
      const Tensor x = train_set.batch(idx);
      labels.resize(n);
      for (std::size_t k = 0; k < n; ++k) labels[k] = train_set.labels[idx[k]];

      const auto fr = forward<float>(net, x, true, &cache);
      Tensor dlogits;
      const double loss = cross_entropy(fr.logits, labels, &dlogits);
      if (!std::isfinite(loss))
        throw TrainingDiverged("training diverged: loss is " + std::to_string(loss) + " at epoch " +
                               std::to_string(epoch) + ", sample offset " + std::to_string(begin) +
                               " (learning rate " + std::to_string(lr) + ")");
      loss_sum += loss * static_cast<double>(n);
      const auto pred = argmax_rows(fr.logits);
      for (std::size_t k = 0; k < n; ++k) hits += pred[k] == labels[k];

      const auto grads = backward(net, x, cache, dlogits);
      detail::apply_update(net, grads, vel, cfg.sgd, lr);
      detail::update_running_stats(net, cache, n);
    }
    EpochMetrics m{epoch + 1, lr, loss_sum / static_cast<double>(train_set.size()),
                   static_cast<double>(hits) / static_cast<double>(train_set.size()),
                   test_set.size() ? evaluate(net, test_set) : 0.0};
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.net = std::move(net);
  return result;
}

/// Default desk-scale schedule: divide the rate by 10 at 50% and 75% of training.
inline std::vector<std::pair<int, double>> step_schedule(int epochs) {
  if (epochs < 4) return {};
  return {{epochs / 2, 0.1}, {epochs * 3 / 4, 0.01}};
}

}  // namespace fastsnn
