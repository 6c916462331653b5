#pragma once

// Independent reference implementations used by the tests. They share no code with the library
// beyond the data containers.

#include <cmath>
#include <random>
#include <vector>

#include "fastsnn/fastsnn.hpp"

namespace oracle {

using fastsnn::Rng;
using fastsnn::Shape;
using fastsnn::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(shape);
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t) v = u(rng);
  return t;
}

/// C = A B by the textbook triple loop, accumulated in long double.
inline std::vector<long double> matmul(const Tensor& a, const Tensor& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<long double> c(M * N, 0.0L);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k) c[i * N + j] += static_cast<long double>(a.at(i, k)) * b.at(k, j);
  return c;
}

/// Direct six-loop cross-correlation over one C x H x W image.
inline std::vector<long double> conv2d(const std::vector<double>& in, std::size_t C, std::size_t H, std::size_t W,
                                       const std::vector<double>& k, std::size_t O, std::size_t kh, std::size_t kw,
                                       std::size_t stride, std::size_t pad, std::size_t& oh, std::size_t& ow) {
  oh = (H + 2 * pad - kh) / stride + 1;
  ow = (W + 2 * pad - kw) / stride + 1;
  std::vector<long double> out(O * oh * ow, 0.0L);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              out[(o * oh + y) * ow + x] += static_cast<long double>(k[((o * C + c) * kh + i) * kw + j]) *
                                            in[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
            }
  return out;
}

/// Nearest level of {k s / L : k = 0..L} by exhaustive search; ties resolve to the upper level.
inline long nearest_level(long double x, long double s, int bits) {
  const long L = (1L << bits) - 1;
  long best = 0;
  long double best_d = std::fabs(x);
  for (long k = 1; k <= L; ++k) {
    const long double d = std::fabs(x - k * s / L);
    if (d <= best_d) best = k, best_d = d;
  }
  return best;
}

/// Quantized activations of every quant_relu layer for one sample, computed with direct loops in
/// long double. Supports fc, conv, batchnorm (running statistics), quant_relu, plain relu,
/// avgpool and shortcut layers. Returns the logits through `logits`.
inline std::vector<std::vector<long double>> network_forward(const fastsnn::NetworkDef& net,
                                                             std::span<const float> sample,
                                                             std::vector<long double>* logits = nullptr) {
  using namespace fastsnn;
  std::vector<std::vector<long double>> outputs;
  std::vector<long double> cur(sample.begin(), sample.end());
  const std::vector<long double> input = cur;
  std::vector<std::vector<long double>> levels;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    const Shape& in = layer.in_shape;
    std::vector<long double> next;
    if (const auto* p = layer.get<Linear>()) {
      Tensor w = net.weight_bits > 0 ? quantize_weights(p->weight, net.weight_bits) : p->weight;
      const std::size_t O = w.dim(0), I = w.dim(1);
      next.assign(O, 0.0L);
      for (std::size_t o = 0; o < O; ++o) {
        long double acc = p->bias[o];
        for (std::size_t k = 0; k < I; ++k) acc += static_cast<long double>(w.at(o, k)) * cur[k];
        next[o] = acc;
      }
    } else if (const auto* p = layer.get<Conv>()) {
      Tensor w = net.weight_bits > 0 ? quantize_weights(p->weight, net.weight_bits) : p->weight;
      std::vector<double> img(cur.begin(), cur.end()), k(w.begin(), w.end());
      // keep long double precision: split the image into a high and low double part
      std::vector<double> lo(cur.size());
      for (std::size_t j = 0; j < cur.size(); ++j) lo[j] = static_cast<double>(cur[j] - static_cast<long double>(img[j]));
      std::size_t oh = 0, ow = 0;
      auto hi_part = conv2d(img, in[0], in[1], in[2], k, w.dim(0), w.dim(2), w.dim(3), p->stride, p->pad, oh, ow);
      auto lo_part = conv2d(lo, in[0], in[1], in[2], k, w.dim(0), w.dim(2), w.dim(3), p->stride, p->pad, oh, ow);
      next.resize(hi_part.size());
      for (std::size_t j = 0; j < next.size(); ++j) next[j] = hi_part[j] + lo_part[j] + p->bias[j / (oh * ow)];
    } else if (const auto* p = layer.get<BatchNorm>()) {
      next = cur;
      const std::size_t C = in[0], S = cur.size() / C;
      for (std::size_t c = 0; c < C; ++c) {
        const long double inv = 1.0L / std::sqrt(static_cast<long double>(p->running_var[c]) + p->eps);
        for (std::size_t j = 0; j < S; ++j)
          next[c * S + j] = (cur[c * S + j] - p->running_mean[c]) * inv * p->gamma[c] + p->beta[c];
      }
    } else if (const auto* p = layer.get<QuantRelu>()) {
      next.resize(cur.size());
      std::vector<long double> lv(cur.size());
      const long double s = p->quant.clip_threshold;
      const long L = (1L << p->quant.bits) - 1;
      for (std::size_t j = 0; j < cur.size(); ++j) {
        const long k = nearest_level(std::clamp(cur[j], 0.0L, s), s, p->quant.bits);
        lv[j] = static_cast<long double>(k);
        next[j] = k == L ? s : k * s / L;
      }
      levels.push_back(std::move(lv));
    } else if (const auto* p = layer.get<AddShortcut>()) {
      const auto& other = p->from < 0 ? input : outputs[static_cast<std::size_t>(p->from)];
      next = cur;
      for (std::size_t j = 0; j < next.size(); ++j) next[j] += other[j];
    } else if (const auto* p = layer.get<AvgPool>()) {
      const std::size_t C = in[0], H = in[1], W = in[2], k = p->size, oh = H / k, ow = W / k;
      next.assign(C * oh * ow, 0.0L);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) next[(c * oh + y / k) * ow + x / k] += cur[(c * H + y) * W + x];
      for (auto& v : next) v /= static_cast<long double>(k * k);
    } else {
      next = cur;
      for (auto& v : next) v = std::max(v, 0.0L);
    }
    outputs.push_back(next);
    cur = std::move(next);
  }
  if (logits) *logits = cur;
  return levels;
}

/// Random BN-free quantized network: 1 to 5 hidden quantized layers (fc or conv, optionally with
/// residual shortcuts and average pooling) followed by an fc classifier.
inline fastsnn::NetworkDef random_network(Rng& rng, int bits, int hidden_layers) {
  using namespace fastsnn;
  std::uniform_int_distribution<int> coin(0, 1), width(3, 12), channels(2, 4);
  std::uniform_real_distribution<float> thr(0.4f, 2.0f), bias(-0.3f, 0.3f);
  const bool convolutional = coin(rng) == 1;
  NetworkBuilder b(convolutional ? "random-conv" : "random-fc",
                   convolutional ? Shape{2, 6, 6} : Shape{static_cast<std::size_t>(width(rng))}, rng());
  int last_quant = -2;
  Shape last_quant_shape;
  for (int l = 0; l < hidden_layers; ++l) {
    const bool residual = l > 0 && coin(rng) == 1;
    if (convolutional) {
      const std::size_t out = residual ? b.current_shape()[0] : static_cast<std::size_t>(channels(rng));
      b.conv(out, 3, 1, 1);
    } else {
      const std::size_t out = residual ? shape_size(b.current_shape()) : static_cast<std::size_t>(width(rng));
      b.fc(out);
    }
    if (residual && last_quant_shape == b.current_shape()) b.add_shortcut(last_quant);
    b.quant_relu(bits);
    last_quant = b.last();
    last_quant_shape = b.current_shape();
  }
  if (convolutional && coin(rng) == 1) b.avgpool(2);
  b.fc(static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 6)(rng)));
  NetworkDef net = b.build();
  for (auto& layer : net.layers) {
    if (auto* q = layer.get<QuantRelu>()) q->quant.clip_threshold = thr(rng);
    if (auto* p = layer.get<Linear>())
      for (auto& v : p->bias) v = bias(rng);
    if (auto* p = layer.get<Conv>())
      for (auto& v : p->bias) v = bias(rng);
  }
  return net;
}

/// Random input batch for a network, uniform in [-1.5, 2.5].
inline Tensor random_inputs(const fastsnn::NetworkDef& net, std::size_t n, Rng& rng) {
  Shape s{n};
  s.insert(s.end(), net.input_shape.begin(), net.input_shape.end());
  return random_tensor(s, rng, -1.5f, 2.5f);
}

}  // namespace oracle
