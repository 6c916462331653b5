#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <vector>

#include "fastsnn/dataset.hpp"
#include "fastsnn/forward.hpp"
#include "fastsnn/optim.hpp"
#include "fastsnn/simulate.hpp"
#include "fastsnn/spiking.hpp"
#include "fastsnn/train.hpp"

namespace fastsnn {

struct FinetuneConfig {
  SgdConfig optimizer{1e-4, 0.9, 0.0, {}};
  int passes = 1;                  // passes over the training data per layer
  std::size_t batch_size = 32;
  std::size_t max_samples = 0;     // 0 = whole dataset
  std::uint64_t seed = 1;          // batch order

  void validate() const {
    optimizer.validate();
    if (passes < 1) throw Error("finetune: passes must be >= 1");
    if (batch_size == 0) throw Error("finetune: batch size must be positive");
  }
};

/// Loss trace of one fine-tuned layer.
struct LayerLossCurve {
  std::size_t layer = 0;                 // zero-based spiking layer index
  std::vector<double> batch_loss;        // per optimizer step
  std::vector<double> pass_mean;         // mean batch loss of each pass

  double first_pass_mean() const { return pass_mean.empty() ? 0.0 : pass_mean.front(); }
  double last_pass_mean() const { return pass_mean.empty() ? 0.0 : pass_mean.back(); }
};

struct FinetuneResult {
  SpikingNetwork snn;
  std::vector<LayerLossCurve> curves;
};

/// Zero-based spiking layers tuned by the layer-wise procedure: all hidden layers except the first.
/// The readout is bypassed (its membrane potential is used directly).
inline std::vector<std::size_t> finetune_layers(const SpikingNetwork& snn) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l + 1 < snn.layers.size(); ++l) out.push_back(l);
  return out;
}

namespace detail {

/// Differentiable stand-in for one spiking layer. Its parameters are the unscaled ANN weights and
/// bias, shared with the spiking layer through `write_back`.
struct Proxy {
  std::size_t layer;
  std::vector<std::vector<double>> weights;  // per projection (empty for identity)
  std::vector<double> bias;
  std::vector<std::vector<double>> weight_vel;
  std::vector<double> bias_vel;

  std::size_t bias_span = 1;  // neurons sharing one bias value (pixels per channel for conv layers)

  Proxy(const SpikingNetwork& snn, std::size_t l) : layer(l) {
    const auto& L = snn.layers[l];
    for (const auto& p : L.projections) {
      weights.push_back(p.kind == ProjectionKind::identity ? std::vector<double>{} : p.original_weights());
      if (p.kind == ProjectionKind::conv) bias_span = L.size() / p.weight_shape[0];
    }
    for (std::size_t i = 0; i < L.size(); i += bias_span) bias.push_back(L.bias[i]);
    weight_vel.resize(weights.size());
  }

  double bias_of(std::size_t neuron) const { return bias[neuron / bias_span]; }

  void write_back(SpikingNetwork& snn) const {
    auto& L = snn.layers[layer];
    for (std::size_t k = 0; k < weights.size(); ++k) {
      auto& p = L.projections[k];
      if (p.kind == ProjectionKind::identity) continue;
      for (std::size_t i = 0; i < weights[k].size(); ++i) p.weights[i] = p.source_scale * weights[k][i];
    }
    for (std::size_t i = 0; i < L.size(); ++i) L.bias[i] = bias_of(i);
  }
};

/// Value carried by the spikes of projection `p` for one sample: source threshold times rate map
/// (the raw input for direct-current projections), average pooled when the projection pools.
inline std::vector<double> proxy_input(const SpikingNetwork& snn, const Projection& p, const SampleResult& r,
                                       std::span<const float> input) {
  std::vector<double> x;
  if (p.source < 0) {
    x.assign(input.begin(), input.end());
  } else {
    x = r.trace.rates(static_cast<std::size_t>(p.source));
    for (double& v : x) v *= p.source_scale;
  }
  if (p.pool != 1) {
    const Shape& s = snn.source_shape(p.source);
    std::vector<double> pooled(s[0] * (s[1] / p.pool) * (s[2] / p.pool));
    avgpool_forward<double>(s, p.pool, x.data(), 1, pooled.data());
    return pooled;
  }
  return x;
}

}  // namespace detail

/// Layer-wise fine-tuning. For every tuned layer l, each batch is simulated up to layer l; a proxy
/// copy of layer l is fed the source firing-rate maps (times their thresholds). The proxy output
/// value is replaced by theta_l * r_l (the spiking layer's rates) while the gradient flows through
/// the proxy's quantizer (straight-through inside [0, theta_l]). The loss is the per-sample sum of
/// squared differences against the quantized ANN activation, averaged over the batch. Updated
/// parameters are written back after every optimizer step.
inline FinetuneResult finetune(const NetworkDef& ann, SpikingNetwork snn, const Dataset& data,
                               const FinetuneConfig& cfg,
                               const std::function<void(const LayerLossCurve&)>& on_layer = {}) {
  cfg.validate();
  snn.validate();
  data.validate();
  const auto probe = forward<double>(ann, data.slice(0, 1).images);
  if (probe.activations.size() + 1 != snn.layers.size())
    throw Error("finetune: ANN has " + std::to_string(probe.activations.size()) + " quantized layers, SNN has " +
                std::to_string(snn.layers.size() - 1) + " spiking layers");
  for (std::size_t l = 0; l + 1 < snn.layers.size(); ++l)
    if (probe.activations[l].row_size() != snn.layers[l].size())
      throw Error("finetune: layer " + std::to_string(l) + " has " + std::to_string(snn.layers[l].size()) +
                  " spiking neurons but the ANN activation has " + std::to_string(probe.activations[l].row_size()));

  const std::size_t n = cfg.max_samples ? std::min(cfg.max_samples, data.size()) : data.size();
  FinetuneResult result;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);

  for (const std::size_t l : finetune_layers(snn)) {
    detail::Proxy proxy(snn, l);
    LayerLossCurve curve;
    curve.layer = l;
    const auto& target = snn.layers[l];
    const std::size_t M = target.size();
    const double theta = target.threshold;

    for (int pass = 0; pass < cfg.passes; ++pass) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      double pass_sum = 0;
      std::size_t steps = 0;
      for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
        const std::size_t B = std::min(cfg.batch_size, n - begin);
        const Tensor x = data.batch(std::span<const std::size_t>(order.data() + begin, B));
        const auto ref = forward<double>(ann, x).activations[l];
        const Simulator sim(snn);

        std::vector<std::vector<double>> gw(proxy.weights.size());
        for (std::size_t k = 0; k < gw.size(); ++k) gw[k].assign(proxy.weights[k].size(), 0.0);
        std::vector<double> gb(proxy.bias.size(), 0.0), pre(M), g(M);
        double loss = 0;
        for (std::size_t b = 0; b < B; ++b) {
          const auto in = x.row(b);
          const auto r = sim.run(in, static_cast<int>(l));
          const auto rate = r.trace.rates(l);
          std::vector<std::vector<double>> inputs;
          for (std::size_t i = 0; i < M; ++i) pre[i] = proxy.bias_of(i);
          for (std::size_t k = 0; k < proxy.weights.size(); ++k) {
            const auto& p = target.projections[k];
            inputs.push_back(detail::proxy_input(snn, p, r, in));
            const auto& xi = inputs.back();
            switch (p.kind) {
              case ProjectionKind::dense:
                kernels::gemm_acc(M, 1, xi.size(), proxy.weights[k].data(), xi.data(), pre.data());
                break;
              case ProjectionKind::conv: {
                const Shape& s = snn.source_shape(p.source);
                const auto geo = kernels::conv_geometry(s[0], s[1], s[2], p.weight_shape[2], p.weight_shape[3],
                                                        p.stride, p.pad);
                std::vector<double> cols(geo.patch() * geo.out_pixels());
                kernels::im2col(geo, xi.data(), cols.data());
                kernels::gemm_acc(p.weight_shape[0], geo.out_pixels(), geo.patch(), proxy.weights[k].data(),
                                  cols.data(), pre.data());
                inputs.back() = std::move(cols);
                break;
              }
              case ProjectionKind::identity:
                for (std::size_t i = 0; i < M; ++i) pre[i] += xi[i];
                break;
            }
          }
          const auto q = ref.row(b);
          for (std::size_t i = 0; i < M; ++i) {
            const double diff = theta * rate[i] - q[i];
            loss += diff * diff;
            g[i] = pre[i] >= 0 && pre[i] <= theta ? 2 * diff / static_cast<double>(B) : 0.0;
            gb[i / proxy.bias_span] += g[i];
          }
          for (std::size_t k = 0; k < proxy.weights.size(); ++k) {
            const auto& p = target.projections[k];
            if (p.kind == ProjectionKind::dense) {
              kernels::gemm_acc(M, inputs[k].size(), 1, g.data(), inputs[k].data(), gw[k].data());
            } else if (p.kind == ProjectionKind::conv) {
              const std::size_t O = p.weight_shape[0], P = M / O, K = inputs[k].size() / P;
              std::vector<double> cols_t(inputs[k].size());
              kernels::transpose(K, P, inputs[k].data(), cols_t.data());
              kernels::gemm_acc(O, K, P, g.data(), cols_t.data(), gw[k].data());
            }
          }
        }
        loss /= static_cast<double>(B);
        if (!std::isfinite(loss))
          throw TrainingDiverged("finetune: loss is " + std::to_string(loss) + " at layer " + std::to_string(l));
        curve.batch_loss.push_back(loss);
        pass_sum += loss;
        ++steps;

        const double lr = cfg.optimizer.rate_at(pass);
        for (std::size_t k = 0; k < proxy.weights.size(); ++k)
          if (!proxy.weights[k].empty())
            sgd_step<double, double, double>(proxy.weights[k], gw[k], proxy.weight_vel[k], lr,
                                             cfg.optimizer.momentum, cfg.optimizer.weight_decay);
        sgd_step<double, double, double>(proxy.bias, gb, proxy.bias_vel, lr, cfg.optimizer.momentum,
                                         cfg.optimizer.weight_decay);
        proxy.write_back(snn);
      }
      curve.pass_mean.push_back(steps ? pass_sum / static_cast<double>(steps) : 0.0);
    }
    if (on_layer) on_layer(curve);
    result.curves.push_back(std::move(curve));
  }
  result.snn = std::move(snn);
  return result;
}

/// Writes loss curves as CSV rows `layer,pass,step,loss` (layer numbers are one-based).
inline void write_loss_csv(std::ostream& os, const std::vector<LayerLossCurve>& curves) {
  os << "layer,pass,step,loss\n";
  for (const auto& c : curves) {
    const std::size_t per_pass = c.pass_mean.empty() ? 0 : c.batch_loss.size() / c.pass_mean.size();
    for (std::size_t i = 0; i < c.batch_loss.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.9g", c.batch_loss[i]);
      os << c.layer + 1 << ',' << (per_pass ? i / per_pass + 1 : 1) << ',' << i + 1 << ',' << buf << '\n';
    }
  }
}

}  // namespace fastsnn
