#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "fastsnn/quant.hpp"
#include "fastsnn/tensor.hpp"

namespace fastsnn {

// Layer parameter blocks. Weight layouts: fc [out, in]; conv [O, C, kh, kw].
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct Conv {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct BatchNorm {
  Tensor gamma, beta, running_mean, running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;
};

struct QuantRelu {
  QuantSpec quant;
};

/// Adds the output of an earlier layer (`from`, or the network input when -1) to the running value.
struct AddShortcut {
  int from = -1;
};

/// Non-overlapping average pooling with kernel = stride = size.
struct AvgPool {
  std::size_t size = 2;
};

struct PlainRelu {};

using LayerParams = std::variant<Linear, Conv, BatchNorm, QuantRelu, AddShortcut, AvgPool, PlainRelu>;

enum class LayerKind : std::uint32_t { fc, conv, batchnorm, quant_relu, add_shortcut, avgpool, plain_relu };

inline std::string_view kind_name(LayerKind k) {
  constexpr std::string_view names[] = {"fc",           "conv",    "batchnorm", "quant_relu",
                                        "add_shortcut", "avgpool", "plain_relu"};
  return names[static_cast<std::size_t>(k)];
}

inline std::optional<LayerKind> kind_from_name(std::string_view name) {
  for (std::uint32_t k = 0; k <= static_cast<std::uint32_t>(LayerKind::plain_relu); ++k)
    if (kind_name(static_cast<LayerKind>(k)) == name) return static_cast<LayerKind>(k);
  return std::nullopt;
}

struct LayerDef {
  LayerParams params;
  Shape in_shape;   // per sample
  Shape out_shape;  // per sample

  LayerKind kind() const { return static_cast<LayerKind>(params.index()); }
  template <class P>
  P* get() { return std::get_if<P>(&params); }
  template <class P>
  const P* get() const { return std::get_if<P>(&params); }
};

struct NetworkDef {
  std::string name;
  Shape input_shape;  // per sample, e.g. {1, 28, 28}
  std::vector<LayerDef> layers;
  int weight_bits = 0;  // 0: full-precision weights
  std::uint64_t seed = 0;

  const Shape& output_shape() const { return layers.empty() ? input_shape : layers.back().out_shape; }
  std::size_t num_classes() const { return shape_size(output_shape()); }

  std::size_t count(LayerKind k) const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.kind() == k;
    return n;
  }

  /// Number of spiking-convertible layers: every quantized activation plus the readout layer.
  int depth() const { return static_cast<int>(count(LayerKind::quant_relu)) + 1; }

  /// Common activation bit-width; throws when quantized layers disagree or none exist.
  int activation_bits() const {
    std::optional<int> bits;
    for (const auto& l : layers)
      if (const auto* q = l.get<QuantRelu>()) {
        if (bits && *bits != q->quant.bits)
          throw Error("network mixes activation bit-widths " + std::to_string(*bits) + " and " +
                      std::to_string(q->quant.bits));
        bits = q->quant.bits;
      }
    if (!bits) throw Error("network has no quantized activation layers");
    return *bits;
  }

  const Shape& shape_before(int index) const {
    return index < 0 ? input_shape : layers.at(static_cast<std::size_t>(index)).out_shape;
  }

  void validate() const;
};

namespace detail {

inline Shape infer_out_shape(const LayerParams& p, const Shape& in, const NetworkDef& net, std::size_t index) {
  auto fail = [&](const std::string& what) -> Shape {
    throw ShapeError("layer " + std::to_string(index) + " (" +
                     std::string(kind_name(static_cast<LayerKind>(p.index()))) + "): " + what);
  };
  return std::visit(
      [&](const auto& v) -> Shape {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Linear>) {
          if (v.weight.rank() != 2 || v.weight.dim(1) != shape_size(in) || v.bias.size() != v.weight.dim(0))
            return fail("weight " + shape_str(v.weight.shape()) + " incompatible with input " + shape_str(in));
          return {v.weight.dim(0)};
        } else if constexpr (std::is_same_v<T, Conv>) {
          if (in.size() != 3 || v.weight.rank() != 4 || v.weight.dim(1) != in[0] || v.bias.size() != v.weight.dim(0))
            return fail("kernel " + shape_str(v.weight.shape()) + " incompatible with input " + shape_str(in));
          const auto g = kernels::conv_geometry(in[0], in[1], in[2], v.weight.dim(2), v.weight.dim(3), v.stride, v.pad);
          return {v.weight.dim(0), g.out_h, g.out_w};
        } else if constexpr (std::is_same_v<T, BatchNorm>) {
          const std::size_t c = in.empty() ? 0 : in[0];
          if (v.gamma.size() != c || v.beta.size() != c || v.running_mean.size() != c || v.running_var.size() != c)
            return fail("parameter length does not match channel count " + std::to_string(c));
          if (!(v.eps > 0)) return fail("eps must be > 0");
          for (float var : v.running_var)
            if (!(var >= 0)) return fail("running variance must be >= 0");
          return in;
        } else if constexpr (std::is_same_v<T, QuantRelu>) {
          v.quant.validate();
          return in;
        } else if constexpr (std::is_same_v<T, AddShortcut>) {
          if (v.from < -1 || v.from >= static_cast<int>(index)) return fail("shortcut source out of range");
          if (net.shape_before(v.from) != in)
            return fail("shortcut shape " + shape_str(net.shape_before(v.from)) + " differs from " + shape_str(in));
          return in;
        } else if constexpr (std::is_same_v<T, AvgPool>) {
          if (in.size() != 3 || v.size == 0 || in[1] % v.size != 0 || in[2] % v.size != 0)
            return fail("pool size " + std::to_string(v.size) + " does not tile input " + shape_str(in));
          return {in[0], in[1] / v.size, in[2] / v.size};
        } else {
          return in;
        }
      },
      p);
}

}  // namespace detail

inline void NetworkDef::validate() const {
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_shape != cur)
      throw ShapeError("layer " + std::to_string(i) + " expects input " + shape_str(l.in_shape) + " but receives " +
                       shape_str(cur));
    const Shape out = detail::infer_out_shape(l.params, cur, *this, i);
    if (out != l.out_shape)
      throw ShapeError("layer " + std::to_string(i) + " declares output " + shape_str(l.out_shape) +
                       " but computes " + shape_str(out));
    cur = out;
  }
}

/// Incremental network construction with shape inference and He fan-in initialization.
class NetworkBuilder {
public:
  NetworkBuilder(std::string name, Shape input_shape, std::uint64_t seed) : rng_(seed) {
    net_.name = std::move(name);
    net_.input_shape = std::move(input_shape);
    net_.seed = seed;
  }

  /// Index of the most recently added layer (-1 before any layer).
  int last() const { return static_cast<int>(net_.layers.size()) - 1; }
  const Shape& current_shape() const { return net_.output_shape(); }

  NetworkBuilder& fc(std::size_t out) {
    const std::size_t in = shape_size(current_shape());
    Linear p{he_init({out, in}, in), Tensor({out})};
    return push(std::move(p));
  }

  NetworkBuilder& conv(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t pad) {
    const Shape& in = current_shape();
    if (in.size() != 3) throw ShapeError("conv requires a CxHxW input, got " + shape_str(in));
    const std::size_t fan_in = in[0] * kernel * kernel;
    Conv p{he_init({out_channels, in[0], kernel, kernel}, fan_in), Tensor({out_channels}), stride, pad};
    return push(std::move(p));
  }

  NetworkBuilder& batchnorm() {
    const std::size_t c = current_shape().at(0);
    BatchNorm p{Tensor({c}, 1.0f), Tensor({c}), Tensor({c}), Tensor({c}, 1.0f)};
    return push(std::move(p));
  }

  NetworkBuilder& quant_relu(int bits, float s = 1.0f) { return push(QuantRelu{QuantSpec{bits, s}}); }
  NetworkBuilder& relu() { return push(PlainRelu{}); }
  NetworkBuilder& avgpool(std::size_t size) { return push(AvgPool{size}); }
  NetworkBuilder& add_shortcut(int from) { return push(AddShortcut{from}); }
  NetworkBuilder& weight_bits(int bits) {
    net_.weight_bits = bits;
    return *this;
  }

  NetworkDef build() {
    net_.validate();
    return net_;
  }

private:
  Tensor he_init(Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : t) v = dist(rng_);
    return t;
  }

  NetworkBuilder& push(LayerParams p) {
    LayerDef l{std::move(p), current_shape(), {}};
    l.out_shape = detail::infer_out_shape(l.params, l.in_shape, net_, net_.layers.size());
    net_.layers.push_back(std::move(l));
    return *this;
  }

  NetworkDef net_;
  Rng rng_;
};

// Shipped desk-scale architectures, all for 1x28x28 inputs and 10 classes.

inline NetworkDef make_mlp3(int bits, std::uint64_t seed) {
  return NetworkBuilder("mlp3", {1, 28, 28}, seed).fc(256).quant_relu(bits).fc(256).quant_relu(bits).fc(10).build();
}

inline NetworkDef make_convnet5(int bits, std::uint64_t seed) {
  return NetworkBuilder("convnet5", {1, 28, 28}, seed)
      .conv(16, 4, 2, 1).batchnorm().quant_relu(bits)
      .conv(32, 3, 1, 1).batchnorm().quant_relu(bits)
      .avgpool(2)
      .fc(128).quant_relu(bits)
      .fc(10)
      .build();
}

/// Ten weight layers: a stem convolution, four two-convolution residual blocks, and a classifier.
inline NetworkDef make_resnet10(int bits, std::uint64_t seed, std::size_t width = 8) {
  NetworkBuilder b("resnet10", {1, 28, 28}, seed);
  b.conv(width, 4, 2, 1).batchnorm().quant_relu(bits);
  for (int block = 0; block < 4; ++block) {
    const int block_input = b.last();
    b.conv(width, 3, 1, 1).batchnorm().quant_relu(bits);
    b.conv(width, 3, 1, 1).batchnorm().add_shortcut(block_input).quant_relu(bits);
  }
  b.avgpool(7).fc(10);
  return b.build();
}

inline NetworkDef make_architecture(std::string_view arch, int bits, std::uint64_t seed) {
  if (bits < 1 || bits > 8) throw Error("bits must lie in [1, 8], got " + std::to_string(bits));
  if (arch == "mlp3") return make_mlp3(bits, seed);
  if (arch == "convnet5") return make_convnet5(bits, seed);
  if (arch == "resnet10") return make_resnet10(bits, seed);
  throw Error("unknown architecture '" + std::string(arch) + "' (expected mlp3, convnet5 or resnet10)");
}

}  // namespace fastsnn
