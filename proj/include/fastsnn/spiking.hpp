#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fastsnn/network.hpp"
#include "fastsnn/neuron.hpp"
#include "fastsnn/tensor.hpp"

namespace fastsnn {

enum class ScheduleMode : std::uint32_t { full_wait = 0, pipelined = 1 };

/// full_wait: every layer fires only after its inputs' complete T-step trains, total T * L steps.
/// pipelined: all layers advance together every tick, total T steps.
struct Schedule {
  ScheduleMode mode = ScheduleMode::pipelined;
  int total_steps = 0;

  static Schedule make(ScheduleMode mode, int time_steps, int depth) {
    return {mode, mode == ScheduleMode::full_wait ? time_steps * depth : time_steps};
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

enum class ProjectionKind : std::uint32_t { dense = 0, conv = 1, identity = 2 };

/// Synapses from one source population into a spiking layer. Weights are stored already multiplied
/// by `source_scale`, the firing threshold of the source layer (1 for the direct-current input), so
/// every binary spike carries the value of that threshold.
struct Projection {
  ProjectionKind kind = ProjectionKind::dense;
  int source = -1;          // index of the source spiking layer, -1 for the network input
  std::size_t pool = 1;     // average pooling of the source map before the weights (dense only)
  double source_scale = 1.0;
  Shape weight_shape;       // dense [out, in]; conv [O, C, kh, kw]; identity {}
  std::vector<double> weights;
  std::size_t stride = 1, pad = 0;

  /// The unscaled ANN weights these synapses were built from.
  std::vector<double> original_weights() const {
    std::vector<double> w(weights);
    for (double& v : w) v /= source_scale;
    return w;
  }

  /// Nominal fan-in contributed to each target neuron.
  std::size_t fan_in() const {
    switch (kind) {
      case ProjectionKind::dense: return weight_shape.at(1);
      case ProjectionKind::conv: return weight_shape.at(1) * weight_shape.at(2) * weight_shape.at(3);
      case ProjectionKind::identity: return 1;
    }
    return 0;
  }
};

struct SpikingLayer {
  Shape shape;
  std::vector<double> bias;  // constant current injected every step
  double threshold = 1.0;          // theta, positive
  double neg_threshold = -1e-3;    // theta', negative; used by signed neurons
  double initial_charge = 0.5;     // mu
  bool readout = false;            // accumulates membrane potential, never spikes
  std::vector<Projection> projections;
  int ann_layer = -1;              // index of the originating ANN layer

  std::size_t size() const { return shape_size(shape); }
};

struct SpikingNetwork {
  Shape input_shape;
  int bits = 2;
  int time_steps = 3;  // T = 2^bits - 1
  Schedule schedule;
  NeuronModel neuron = NeuronModel::integrate_fire;
  std::vector<SpikingLayer> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  const Shape& source_shape(int source) const {
    return source < 0 ? input_shape : layers.at(static_cast<std::size_t>(source)).shape;
  }

  void validate() const {
    if (time_steps != (1 << bits) - 1)
      throw Error("spiking network: T = " + std::to_string(time_steps) + " is not 2^bits - 1 for bits = " +
                  std::to_string(bits));
    if (schedule != Schedule::make(schedule.mode, time_steps, depth()))
      throw Error("spiking network: schedule total_steps " + std::to_string(schedule.total_steps) +
                  " inconsistent with T = " + std::to_string(time_steps) + " and depth " + std::to_string(depth()));
    if (layers.empty() || !layers.back().readout) throw Error("spiking network: last layer must be the readout");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      if (L.readout && l + 1 != layers.size()) throw Error("spiking network: readout layer must be last");
      if (!(L.threshold > 0)) throw Error("spiking layer " + std::to_string(l) + ": threshold must be > 0");
      if (!(L.neg_threshold < 0)) throw Error("spiking layer " + std::to_string(l) + ": negative threshold must be < 0");
      if (L.bias.size() != L.size()) throw Error("spiking layer " + std::to_string(l) + ": bias length mismatch");
      for (const auto& p : L.projections) {
        if (p.source >= static_cast<int>(l) || p.source < -1)
          throw Error("spiking layer " + std::to_string(l) + ": projection source out of order");
        if (layers.size() > 0 && p.source >= 0 && layers[static_cast<std::size_t>(p.source)].readout)
          throw Error("spiking layer " + std::to_string(l) + ": readout cannot be a source");
        if (p.kind != ProjectionKind::identity && p.weights.size() != shape_size(p.weight_shape))
          throw Error("spiking layer " + std::to_string(l) + ": projection weight length mismatch");
      }
    }
  }
};

namespace detail {

/// Data-flow value while walking the ANN: either a spike source (possibly pooled) or a pending
/// linear combination of projections.
struct FlowValue {
  bool is_source = true;
  int source = -1;
  std::size_t pool = 1;
  Shape shape;
  std::vector<Projection> projections;
  std::vector<double> bias;
};

}  // namespace detail

/// Maps a BN-free quantized ANN onto spiking layers: theta = s, mu = theta / 2, T = 2^b - 1, and the
/// weights leaving each layer are multiplied by its threshold. The classifier becomes the readout.
inline SpikingNetwork convert(const NetworkDef& ann, NeuronModel neuron, ScheduleMode mode,
                              double neg_threshold = -1e-3) {
  ann.validate();
  if (ann.count(LayerKind::batchnorm) > 0) throw Error("convert: network still contains batchnorm layers; fold first");
  if (ann.weight_bits > 0) throw Error("convert: materialize quantized weights first (fold_batchnorm does this)");
  if (!(neg_threshold < 0)) throw Error("convert: negative threshold must be < 0");
  SpikingNetwork snn;
  snn.input_shape = ann.input_shape;
  snn.bits = ann.activation_bits();
  snn.time_steps = (1 << snn.bits) - 1;
  snn.neuron = neuron;

  std::vector<detail::FlowValue> values(ann.layers.size());
  detail::FlowValue cur{true, -1, 1, ann.input_shape, {}, {}};
  auto scale_of = [&](int source) { return source < 0 ? 1.0 : snn.layers[static_cast<std::size_t>(source)].threshold; };
  auto require_source = [&](std::size_t i, const char* what) {
    if (!cur.is_source)
      throw Error("convert: layer " + std::to_string(i) + " (" + what +
                  ") must consume a quantized activation or the input");
  };

  for (std::size_t i = 0; i < ann.layers.size(); ++i) {
    const LayerDef& layer = ann.layers[i];
    if (const auto* p = layer.get<Linear>()) {
      require_source(i, "fc");
      Projection pr{ProjectionKind::dense, cur.source, cur.pool, scale_of(cur.source), p->weight.shape(), {}, 1, 0};
      pr.weights.reserve(p->weight.size());
      for (float w : p->weight) pr.weights.push_back(pr.source_scale * static_cast<double>(w));
      cur = {false, -1, 1, layer.out_shape, {std::move(pr)}, std::vector<double>(p->bias.begin(), p->bias.end())};
    } else if (const auto* p = layer.get<Conv>()) {
      require_source(i, "conv");
      if (cur.pool != 1) throw Error("convert: average pooling before a convolution is not supported");
      Projection pr{ProjectionKind::conv, cur.source, 1, scale_of(cur.source), p->weight.shape(), {}, p->stride, p->pad};
      pr.weights.reserve(p->weight.size());
      for (float w : p->weight) pr.weights.push_back(pr.source_scale * static_cast<double>(w));
      // one bias per output channel, injected into every pixel of that channel
      const std::size_t pixels = shape_size(layer.out_shape) / p->bias.size();
      std::vector<double> bias;
      bias.reserve(shape_size(layer.out_shape));
      for (float b : p->bias) bias.insert(bias.end(), pixels, static_cast<double>(b));
      cur = {false, -1, 1, layer.out_shape, {std::move(pr)}, std::move(bias)};
    } else if (const auto* p = layer.get<AvgPool>()) {
      require_source(i, "avgpool");
      cur.pool *= p->size;
      cur.shape = layer.out_shape;
    } else if (const auto* p = layer.get<AddShortcut>()) {
      if (cur.is_source) throw Error("convert: shortcut at layer " + std::to_string(i) + " must follow fc/conv");
      const detail::FlowValue& other = p->from < 0 ? detail::FlowValue{true, -1, 1, ann.input_shape, {}, {}}
                                                   : values[static_cast<std::size_t>(p->from)];
      if (!other.is_source || other.pool != 1)
        throw Error("convert: shortcut at layer " + std::to_string(i) + " must originate from a quantized activation");
      cur.projections.push_back(
          {ProjectionKind::identity, other.source, 1, scale_of(other.source), {}, {scale_of(other.source)}, 1, 0});
    } else if (const auto* p = layer.get<QuantRelu>()) {
      if (cur.is_source) throw Error("convert: quantized activation at layer " + std::to_string(i) + " must follow fc/conv");
      SpikingLayer sl;
      sl.shape = layer.out_shape;
      sl.bias = std::move(cur.bias);
      sl.threshold = p->quant.clip_threshold;
      sl.initial_charge = sl.threshold / 2;
      sl.neg_threshold = neg_threshold;
      sl.projections = std::move(cur.projections);
      sl.ann_layer = static_cast<int>(i);
      snn.layers.push_back(std::move(sl));
      cur = {true, static_cast<int>(snn.layers.size()) - 1, 1, layer.out_shape, {}, {}};
    } else if (layer.kind() == LayerKind::plain_relu) {
      throw Error("convert: unquantized ReLU at layer " + std::to_string(i) + " has no exact spiking equivalent");
    }
    values[i] = cur;
  }
  if (cur.is_source) throw Error("convert: network must end with an unquantized fc/conv classifier");
  SpikingLayer readout;
  readout.shape = cur.shape;
  readout.bias = std::move(cur.bias);
  readout.initial_charge = 0.0;
  readout.neg_threshold = neg_threshold;
  readout.readout = true;
  readout.projections = std::move(cur.projections);
  readout.ann_layer = static_cast<int>(ann.layers.size()) - 1;
  snn.layers.push_back(std::move(readout));
  snn.schedule = Schedule::make(mode, snn.time_steps, snn.depth());
  snn.validate();
  return snn;
}

/// Returns a copy with a different neuron model and/or schedule.
inline SpikingNetwork with_dynamics(SpikingNetwork snn, NeuronModel neuron, ScheduleMode mode) {
  snn.neuron = neuron;
  snn.schedule = Schedule::make(mode, snn.time_steps, snn.depth());
  return snn;
}

/// Replaces the threshold of spiking layer `layer` (e.g. with a statistical estimate), keeping
/// mu = theta / 2 and rescaling every outgoing projection to the new threshold.
inline void set_threshold(SpikingNetwork& snn, std::size_t layer, double theta) {
  if (!(theta > 0)) throw Error("set_threshold: threshold must be > 0");
  auto& L = snn.layers.at(layer);
  if (L.readout) throw Error("set_threshold: readout layer has no threshold");
  L.threshold = theta;
  L.initial_charge = theta / 2;
  for (auto& consumer : snn.layers)
    for (auto& p : consumer.projections)
      if (p.source == static_cast<int>(layer)) {
        for (double& w : p.weights) w = w / p.source_scale * theta;
        p.source_scale = theta;
      }
}

/// Per-neuron fan-out of spiking layer `layer`: number of synapses its spikes drive.
inline std::vector<std::uint32_t> fan_out(const SpikingNetwork& snn, int layer) {
  const Shape& shape = snn.source_shape(layer);
  std::vector<std::uint32_t> out(shape_size(shape), 0);
  for (const auto& consumer : snn.layers)
    for (const auto& p : consumer.projections) {
      if (p.source != layer) continue;
      switch (p.kind) {
        case ProjectionKind::dense:
          for (auto& f : out) f += static_cast<std::uint32_t>(p.weight_shape[0]);
          break;
        case ProjectionKind::identity:
          for (auto& f : out) f += 1;
          break;
        case ProjectionKind::conv: {
          const std::size_t C = shape[0], H = shape[1], W = shape[2];
          const std::size_t O = p.weight_shape[0], kh = p.weight_shape[2], kw = p.weight_shape[3];
          const std::size_t oh = consumer.shape[1], ow = consumer.shape[2];
          auto taps = [&](std::size_t pos, std::size_t k, std::size_t outn) {
            std::size_t n = 0;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const long num = static_cast<long>(pos + p.pad) - static_cast<long>(kk);
              if (num < 0 || num % static_cast<long>(p.stride) != 0) continue;
              if (static_cast<std::size_t>(num) / p.stride < outn) ++n;
            }
            return n;
          };
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              const auto f = static_cast<std::uint32_t>(O * taps(y, kh, oh) * taps(x, kw, ow));
              for (std::size_t c = 0; c < C; ++c) out[(c * H + y) * W + x] += f;
            }
          break;
        }
      }
    }
  return out;
}

/// Multiply-accumulate count of the equivalent ANN: sum over weight layers of fan-in * neurons.
inline std::uint64_t ann_operation_count(const SpikingNetwork& snn) {
  std::uint64_t ops = 0;
  for (const auto& L : snn.layers) {
    std::uint64_t fan_in = 0;
    for (const auto& p : L.projections) fan_in += p.fan_in();
    ops += fan_in * L.size();
  }
  return ops;
}

}  // namespace fastsnn
