#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fastsnn/dataset.hpp"
#include "fastsnn/forward.hpp"
#include "fastsnn/network.hpp"
#include "fastsnn/neuron.hpp"
#include "fastsnn/spiking.hpp"

namespace fastsnn {

/// Spikes of one spiking layer over its emission window.
struct LayerTrace {
  std::size_t neurons = 0;
  int window_start = 0;              // global step of the first emitted spike slot
  std::vector<std::int8_t> spikes;   // [T, neurons], values in {-1, 0, +1}
  std::vector<int> counts;           // net (positive - negative) spikes per neuron

  std::int8_t at(int step, std::size_t neuron) const { return spikes[static_cast<std::size_t>(step) * neurons + neuron]; }
};

struct SpikeTrace {
  int time_steps = 0;
  std::vector<LayerTrace> layers;  // spiking layers only (the readout does not spike)

  std::vector<double> rates(std::size_t layer) const {
    const auto& L = layers.at(layer);
    std::vector<double> r(L.neurons);
    for (std::size_t i = 0; i < L.neurons; ++i) r[i] = static_cast<double>(L.counts[i]) / time_steps;
    return r;
  }
};

struct OpCounters {
  std::uint64_t ann_ops = 0;    // sum_l f_in^l * M^l
  std::uint64_t snn_ops = 0;    // sum over emitted spikes (either sign) of the spiking neuron's fan-out
  std::uint64_t input_ops = 0;  // direct-current MACs into first layers (T per input synapse), reported separately

  double ratio() const { return ann_ops == 0 ? 0.0 : static_cast<double>(snn_ops) / static_cast<double>(ann_ops); }

  OpCounters& operator+=(const OpCounters& o) {
    ann_ops += o.ann_ops;
    snn_ops += o.snn_ops;
    input_ops += o.input_ops;
    return *this;
  }
};

struct SampleResult {
  std::vector<double> readout;  // accumulated membrane potential of the readout layer
  SpikeTrace trace;             // counts always; spikes per step filled for every layer
  OpCounters ops;
  std::vector<double> final_potential;  // per spiking layer, concatenated; used for conservation checks
};

/// Clock-driven simulator. Construction prepares scatter-friendly weight layouts; `run` is const and
/// deterministic, so one Simulator can serve many inputs.
class Simulator {
public:
  explicit Simulator(const SpikingNetwork& snn) : snn_(snn) {
    snn_.validate();
    prepared_.resize(snn_.layers.size());
    for (std::size_t l = 0; l < snn_.layers.size(); ++l) {
      const auto& L = snn_.layers[l];
      for (const auto& p : L.projections) prepared_[l].push_back(prepare(p));
    }
    fan_out_.resize(snn_.layers.size());
    for (std::size_t l = 0; l < snn_.layers.size(); ++l)
      if (!snn_.layers[l].readout) fan_out_[l] = fan_out(snn_, static_cast<int>(l));
    ann_ops_ = ann_operation_count(snn_);
  }

  const SpikingNetwork& network() const { return snn_; }
  const std::vector<std::uint32_t>& layer_fan_out(std::size_t l) const { return fan_out_.at(l); }

  /// Simulates one input sample. `last_layer` limits the run to layers [0, last_layer].
  SampleResult run(std::span<const float> input, int last_layer = -1) const {
    if (input.size() != shape_size(snn_.input_shape))
      throw ShapeError("simulate: input has " + std::to_string(input.size()) + " values, expected " +
                       shape_str(snn_.input_shape));
    const int T = snn_.time_steps;
    const std::size_t nl = last_layer < 0 ? snn_.layers.size()
                                          : std::min(snn_.layers.size(), static_cast<std::size_t>(last_layer) + 1);
    SampleResult res;
    res.trace.time_steps = T;
    res.ops.ann_ops = ann_ops_;

    // constant charge from direct-current input projections
    std::vector<std::vector<double>> input_charge(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      const auto& L = snn_.layers[l];
      for (std::size_t k = 0; k < L.projections.size(); ++k) {
        const auto& p = L.projections[k];
        if (p.source != -1) continue;
        if (input_charge[l].empty()) input_charge[l].assign(L.size(), 0.0);
        add_input_charge(p, prepared_[l][k], input, input_charge[l]);
        res.ops.input_ops += static_cast<std::uint64_t>(T) * p.fan_in() * L.size();
      }
    }

    std::vector<std::vector<NeuronState>> state(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      const auto& L = snn_.layers[l];
      state[l].assign(L.size(), NeuronState::charged(L.initial_charge));
      if (!L.readout) {
        res.trace.layers.push_back({L.size(), 0, std::vector<std::int8_t>(static_cast<std::size_t>(T) * L.size(), 0),
                                    std::vector<int>(L.size(), 0)});
      }
    }
    std::vector<double> z;
    auto charge = [&](std::size_t l, int t) {
      const auto& L = snn_.layers[l];
      z.assign(L.bias.begin(), L.bias.end());
      if (!input_charge[l].empty())
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += input_charge[l][i];
      for (std::size_t k = 0; k < L.projections.size(); ++k) {
        const auto& p = L.projections[k];
        if (p.source < 0) continue;
        const auto& src = res.trace.layers[static_cast<std::size_t>(p.source)];
        scatter(p, prepared_[l][k], L.shape, src, t, z);
      }
    };
    auto fire = [&](std::size_t l, int t, std::span<const double> zz) {
      const auto& L = snn_.layers[l];
      auto& tr = res.trace.layers[l];
      const auto& fo = fan_out_[l];
      for (std::size_t i = 0; i < L.size(); ++i) {
        const int s = neuron_step(snn_.neuron, state[l][i], zz.empty() ? 0.0 : zz[i], L.threshold, L.neg_threshold);
        if (s != 0) {
          tr.spikes[static_cast<std::size_t>(t) * L.size() + i] = static_cast<std::int8_t>(s);
          tr.counts[i] += s;
          res.ops.snn_ops += fo[i];
        }
      }
    };

    if (snn_.schedule.mode == ScheduleMode::full_wait) {
      for (std::size_t l = 0; l < nl; ++l) {
        // integrate the complete input window, then fire with no further input
        for (int t = 0; t < T; ++t) {
          charge(l, t);
          for (std::size_t i = 0; i < z.size(); ++i) state[l][i].potential += z[i];
        }
        if (snn_.layers[l].readout) continue;
        res.trace.layers[l].window_start = static_cast<int>(l + 1) * T;
        for (int t = 0; t < T; ++t) fire(l, t, {});
      }
    } else {
      for (int t = 0; t < T; ++t)
        for (std::size_t l = 0; l < nl; ++l) {
          charge(l, t);
          if (snn_.layers[l].readout) {
            for (std::size_t i = 0; i < z.size(); ++i) state[l][i].potential += z[i];
          } else {
            fire(l, t, z);
          }
        }
    }

    if (nl == snn_.layers.size())
      for (const auto& s : state.back()) res.readout.push_back(s.potential);
    for (std::size_t l = 0; l < nl; ++l)
      if (!snn_.layers[l].readout)
        for (const auto& s : state[l]) res.final_potential.push_back(s.potential);
    return res;
  }

private:
  struct Prepared {
    std::vector<double> by_source;       // dense: [in, out]; conv: [C, kh, kw, O]
    std::vector<double> dense_in_order;  // dense [out, in], used for the direct-current input
  };

  static Prepared prepare(const Projection& p) {
    Prepared out;
    if (p.kind == ProjectionKind::dense) {
      const std::size_t O = p.weight_shape[0], I = p.weight_shape[1];
      out.by_source.resize(I * O);
      kernels::transpose(O, I, p.weights.data(), out.by_source.data());
      out.dense_in_order = p.weights;
    } else if (p.kind == ProjectionKind::conv) {
      const std::size_t O = p.weight_shape[0], C = p.weight_shape[1], kh = p.weight_shape[2], kw = p.weight_shape[3];
      out.by_source.resize(p.weights.size());
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < kh; ++y)
            for (std::size_t x = 0; x < kw; ++x)
              out.by_source[((c * kh + y) * kw + x) * O + o] = p.weights[((o * C + c) * kh + y) * kw + x];
    }
    return out;
  }

  /// Maps a source neuron index to the pooled unit it feeds.
  std::size_t pooled_index(const Projection& p, std::size_t j) const {
    if (p.pool == 1) return j;
    const Shape& s = snn_.source_shape(p.source);
    const std::size_t H = s[1], W = s[2], c = j / (H * W), y = (j / W) % H, x = j % W;
    return (c * (H / p.pool) + y / p.pool) * (W / p.pool) + x / p.pool;
  }

  void add_input_charge(const Projection& p, const Prepared& pp, std::span<const float> input,
                        std::vector<double>& acc) const {
    const Shape& s = snn_.input_shape;
    std::vector<double> x(input.begin(), input.end());
    if (p.pool != 1) {
      const Shape pooled{s[0], s[1] / p.pool, s[2] / p.pool};
      std::vector<double> px(shape_size(pooled));
      detail::avgpool_forward<double>(s, p.pool, x.data(), 1, px.data());
      x = std::move(px);
    }
    switch (p.kind) {
      case ProjectionKind::dense: {
        const std::size_t O = p.weight_shape[0], I = p.weight_shape[1];
        for (std::size_t o = 0; o < O; ++o) {
          double a = 0;
          for (std::size_t i = 0; i < I; ++i) a += pp.dense_in_order[o * I + i] * x[i];
          acc[o] += a;
        }
        break;
      }
      case ProjectionKind::conv: {
        const auto g = kernels::conv_geometry(s[0], s[1], s[2], p.weight_shape[2], p.weight_shape[3], p.stride, p.pad);
        std::vector<double> cols(g.patch() * g.out_pixels()), out(p.weight_shape[0] * g.out_pixels(), 0.0);
        kernels::im2col(g, x.data(), cols.data());
        kernels::gemm_acc(p.weight_shape[0], g.out_pixels(), g.patch(), p.weights.data(), cols.data(), out.data());
        for (std::size_t i = 0; i < out.size(); ++i) acc[i] += out[i];
        break;
      }
      case ProjectionKind::identity:
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.weights[0] * x[i];
        break;
    }
  }

  void scatter(const Projection& p, const Prepared& pp, const Shape& target, const LayerTrace& src, int t,
               std::vector<double>& z) const {
    const std::size_t M = src.neurons;
    const std::int8_t* row = src.spikes.data() + static_cast<std::size_t>(t) * M;
    switch (p.kind) {
      case ProjectionKind::dense: {
        const std::size_t O = p.weight_shape[0];
        const double inv_area = 1.0 / static_cast<double>(p.pool * p.pool);
        for (std::size_t j = 0; j < M; ++j) {
          if (row[j] == 0) continue;
          const double sgn = p.pool == 1 ? row[j] : row[j] * inv_area;
          const double* w = pp.by_source.data() + pooled_index(p, j) * O;
          for (std::size_t o = 0; o < O; ++o) z[o] += sgn * w[o];
        }
        break;
      }
      case ProjectionKind::conv: {
        const Shape& s = snn_.source_shape(p.source);
        const std::size_t H = s[1], W = s[2];
        const std::size_t O = p.weight_shape[0], kh = p.weight_shape[2], kw = p.weight_shape[3];
        const std::size_t out_h = target[1], out_w = target[2], P = out_h * out_w;
        for (std::size_t j = 0; j < M; ++j) {
          if (row[j] == 0) continue;
          const double sgn = row[j];
          const std::size_t c = j / (H * W), y = (j / W) % H, x = j % W;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long ny = static_cast<long>(y + p.pad) - static_cast<long>(ky);
            if (ny < 0 || ny % static_cast<long>(p.stride) != 0) continue;
            const std::size_t oy = static_cast<std::size_t>(ny) / p.stride;
            if (oy >= out_h) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long nx = static_cast<long>(x + p.pad) - static_cast<long>(kx);
              if (nx < 0 || nx % static_cast<long>(p.stride) != 0) continue;
              const std::size_t ox = static_cast<std::size_t>(nx) / p.stride;
              if (ox >= out_w) continue;
              const double* w = pp.by_source.data() + ((c * kh + ky) * kw + kx) * O;
              const std::size_t base = oy * out_w + ox;
              for (std::size_t o = 0; o < O; ++o) z[o * P + base] += sgn * w[o];
            }
          }
        }
        break;
      }
      case ProjectionKind::identity:
        for (std::size_t j = 0; j < M; ++j)
          if (row[j] != 0) z[j] += row[j] * p.weights[0];
        break;
    }
  }

  SpikingNetwork snn_;
  std::vector<std::vector<Prepared>> prepared_;
  std::vector<std::vector<std::uint32_t>> fan_out_;
  std::uint64_t ann_ops_ = 0;
};

struct BatchResult {
  BasicTensor<double> readout;  // [B, classes]
  std::vector<int> predictions;
  OpCounters ops;               // summed over the batch
  std::vector<SpikeTrace> traces;  // first `keep_traces` samples
};

inline BatchResult simulate(const Simulator& sim, const Tensor& x, std::size_t keep_traces = 0) {
  const std::size_t B = x.dim(0);
  const std::size_t K = sim.network().layers.back().size();
  BatchResult out{BasicTensor<double>({B, K}), {}, {}, {}};
  for (std::size_t b = 0; b < B; ++b) {
    auto r = sim.run(x.row(b));
    std::copy(r.readout.begin(), r.readout.end(), out.readout.data() + b * K);
    out.ops += r.ops;
    if (b < keep_traces) out.traces.push_back(std::move(r.trace));
  }
  out.predictions = argmax_rows(out.readout);
  return out;
}

inline BatchResult simulate(const SpikingNetwork& snn, const Tensor& x, std::size_t keep_traces = 0) {
  return simulate(Simulator(snn), x, keep_traces);
}

/// Accuracy of the spiking network over a dataset (readout argmax).
inline double snn_accuracy(const SpikingNetwork& snn, const Dataset& data, OpCounters* ops = nullptr) {
  const Simulator sim(snn);
  std::size_t hit = 0;
  OpCounters total;
  std::vector<double> best;
  for (std::size_t b = 0; b < data.size(); ++b) {
    const auto r = sim.run(data.images.row(b));
    std::size_t arg = 0;
    for (std::size_t k = 1; k < r.readout.size(); ++k)
      if (r.readout[k] > r.readout[arg]) arg = k;
    hit += static_cast<int>(arg) == data.labels[b];
    total += r.ops;
  }
  if (ops) *ops = total;
  return data.size() ? static_cast<double>(hit) / static_cast<double>(data.size()) : 0.0;
}

/// Recounts operations from a recorded trace.
inline OpCounters count_ops(const SpikingNetwork& snn, const SpikeTrace& trace) {
  OpCounters ops;
  ops.ann_ops = ann_operation_count(snn);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const auto fo = fan_out(snn, static_cast<int>(l));
    const auto& L = trace.layers[l];
    for (int t = 0; t < trace.time_steps; ++t)
      for (std::size_t i = 0; i < L.neurons; ++i)
        if (L.at(t, i) != 0) ops.snn_ops += fo[i];
  }
  return ops;
}

/// Firing-rate maps N / T of every spiking layer, each shaped [B, ...layer shape].
inline std::vector<BasicTensor<double>> layer_rate_maps(const SpikingNetwork& snn, const Tensor& x) {
  const Simulator sim(snn);
  const std::size_t B = x.dim(0);
  std::vector<BasicTensor<double>> maps;
  for (const auto& L : snn.layers)
    if (!L.readout) maps.emplace_back(detail::batched(B, L.shape));
  for (std::size_t b = 0; b < B; ++b) {
    const auto r = sim.run(x.row(b));
    for (std::size_t l = 0; l < maps.size(); ++l) {
      const auto rates = r.trace.rates(l);
      std::copy(rates.begin(), rates.end(), maps[l].data() + b * rates.size());
    }
  }
  return maps;
}

struct EquivalenceFailure {
  std::size_t layer, neuron, sample;
  double expected, got;
};

struct EquivalenceReport {
  std::vector<double> max_deviation;  // per spiking layer, in rate units
  std::size_t samples = 0;
  std::size_t decision_agreements = 0;
  std::vector<EquivalenceFailure> failures;  // first few only
  double tolerance = 1e-5;

  bool passed() const { return failures.empty() && decision_agreements == samples; }
  double worst() const {
    double w = 0;
    for (double d : max_deviation) w = std::max(w, d);
    return w;
  }
  std::string describe() const {
    std::string s = "max deviation " + std::to_string(worst()) + ", decisions " + std::to_string(decision_agreements) +
                    "/" + std::to_string(samples);
    for (const auto& f : failures)
      s += "; layer " + std::to_string(f.layer) + " neuron " + std::to_string(f.neuron) + " sample " +
           std::to_string(f.sample) + ": expected " + std::to_string(f.expected) + ", got " + std::to_string(f.got);
    return s;
  }
};

/// Compares every spiking layer's rate N/T against Q / s of the quantized ANN, and the readout
/// argmax against the ANN's.
inline EquivalenceReport equivalence_check(const NetworkDef& ann, const SpikingNetwork& snn, const Tensor& inputs,
                                           double tolerance = 1e-5) {
  const auto fr = forward<double>(ann, inputs);
  const auto ann_pred = argmax_rows(fr.logits);
  const Simulator sim(snn);
  EquivalenceReport rep;
  rep.tolerance = tolerance;
  const std::size_t nspk = snn.layers.size() - 1;
  if (fr.activations.size() != nspk)
    throw Error("equivalence_check: ANN has " + std::to_string(fr.activations.size()) +
                " quantized layers but the SNN has " + std::to_string(nspk) + " spiking layers");
  rep.max_deviation.assign(nspk, 0.0);
  for (std::size_t b = 0; b < inputs.dim(0); ++b) {
    const auto r = sim.run(inputs.row(b));
    for (std::size_t l = 0; l < nspk; ++l) {
      const auto rates = r.trace.rates(l);
      const auto act = fr.activations[l].row(b);
      const double s = snn.layers[l].threshold;
      for (std::size_t i = 0; i < rates.size(); ++i) {
        const double expected = act[i] / s;
        const double dev = std::abs(rates[i] - expected);
        rep.max_deviation[l] = std::max(rep.max_deviation[l], dev);
        if (dev > tolerance && rep.failures.size() < 8) rep.failures.push_back({l, i, b, expected, rates[i]});
      }
    }
    std::size_t arg = 0;
    for (std::size_t k = 1; k < r.readout.size(); ++k)
      if (r.readout[k] > r.readout[arg]) arg = k;
    rep.decision_agreements += static_cast<int>(arg) == ann_pred[b];
    ++rep.samples;
  }
  return rep;
}

}  // namespace fastsnn
