#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "fastsnn/network.hpp"
#include "fastsnn/quant.hpp"
#include "fastsnn/tensor.hpp"

namespace fastsnn {

/// Logits plus the post-quantizer activation of every quant_relu layer, in network order.
template <class Real>
struct ForwardResult {
  BasicTensor<Real> logits;                     // [B, classes]
  std::vector<BasicTensor<Real>> activations;  // [B, ...layer shape], one per quant_relu
};

/// Intermediate values retained for the backward pass.
template <class Real>
struct ForwardCache {
  std::vector<BasicTensor<Real>> outputs;        // per layer, [B, ...out_shape]
  std::vector<std::vector<float>> eff_weights;   // quantized weights, when the net quantizes them
  std::vector<std::vector<Real>> bn_mean, bn_var, bn_inv_std;  // batch statistics per BN layer
  std::vector<BasicTensor<Real>> bn_xhat;
};

namespace detail {

inline Shape batched(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

/// Channel count and per-channel spatial size of a per-sample shape (fc features are channels).
inline std::pair<std::size_t, std::size_t> channel_split(const Shape& s) {
  const std::size_t c = s.at(0);
  return {c, shape_size(s) / c};
}

template <class Real>
void fc_forward(std::span<const float> w, std::span<const float> bias, std::size_t out_f, std::size_t in_f,
                const Real* in, std::size_t batch, Real* out) {
  std::vector<Real> wt(in_f * out_f);
  for (std::size_t o = 0; o < out_f; ++o)
    for (std::size_t i = 0; i < in_f; ++i) wt[i * out_f + o] = static_cast<Real>(w[o * in_f + i]);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_f; ++o) out[b * out_f + o] = static_cast<Real>(bias[o]);
  kernels::gemm_acc(batch, out_f, in_f, in, wt.data(), out);
}

template <class Real>
void conv_forward(std::span<const float> w, std::span<const float> bias, const kernels::ConvGeometry& g,
                  std::size_t out_c, const Real* in, std::size_t batch, Real* out) {
  std::vector<Real> wr(w.begin(), w.end());
  std::vector<Real> cols(g.patch() * g.out_pixels());
  const std::size_t in_sz = g.channels * g.height * g.width, out_sz = out_c * g.out_pixels();
  for (std::size_t b = 0; b < batch; ++b) {
    kernels::im2col(g, in + b * in_sz, cols.data());
    Real* o = out + b * out_sz;
    for (std::size_t c = 0; c < out_c; ++c)
      std::fill(o + c * g.out_pixels(), o + (c + 1) * g.out_pixels(), static_cast<Real>(bias[c]));
    kernels::gemm_acc(out_c, g.out_pixels(), g.patch(), wr.data(), cols.data(), o);
  }
}

inline kernels::ConvGeometry geometry_of(const Conv& c, const Shape& in) {
  return kernels::conv_geometry(in[0], in[1], in[2], c.weight.dim(2), c.weight.dim(3), c.stride, c.pad);
}

template <class Real>
void avgpool_forward(const Shape& in_shape, std::size_t k, const Real* in, std::size_t batch, Real* out) {
  const std::size_t C = in_shape[0], H = in_shape[1], W = in_shape[2], oh = H / k, ow = W / k;
  const Real inv = Real{1} / static_cast<Real>(k * k);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          Real acc{0};
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx)
              acc += in[((b * C + c) * H + y * k + dy) * W + x * k + dx];
          out[((b * C + c) * oh + y) * ow + x] = acc * inv;
        }
}

}  // namespace detail

/// Runs the network on a batch [B, ...input_shape]. Training mode normalizes with batch
/// statistics (and fills `cache`); evaluation mode uses BN running statistics.
template <class Real>
ForwardResult<Real> forward(const NetworkDef& net, const Tensor& x, bool training = false,
                            ForwardCache<Real>* cache = nullptr) {
  if (x.rank() < 1 || x.row_size() != shape_size(net.input_shape) ||
      Shape(x.shape().begin() + 1, x.shape().end()) != net.input_shape)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match network input " +
                     shape_str(net.input_shape));
  const std::size_t B = x.dim(0);
  const std::size_t n = net.layers.size();
  ForwardCache<Real> local;
  ForwardCache<Real>& c = cache ? *cache : local;
  c.outputs.assign(n, {});
  c.eff_weights.assign(n, {});
  c.bn_mean.assign(n, {});
  c.bn_var.assign(n, {});
  c.bn_inv_std.assign(n, {});
  c.bn_xhat.assign(n, {});
  const BasicTensor<Real> input = BasicTensor<Real>::cast(x);

  ForwardResult<Real> result;
  for (std::size_t i = 0; i < n; ++i) {
    const LayerDef& layer = net.layers[i];
    const BasicTensor<Real>& in = i == 0 ? input : c.outputs[i - 1];
    BasicTensor<Real> out(detail::batched(B, layer.out_shape));

    auto weights_of = [&](const Tensor& w) -> std::span<const float> {
      if (net.weight_bits == 0) return w.span();
      c.eff_weights[i].resize(w.size());
      quantize_weights_into<float>(w.span(), net.weight_bits, c.eff_weights[i]);
      return c.eff_weights[i];
    };

    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Linear>) {
            detail::fc_forward(weights_of(p.weight), p.bias.span(), p.weight.dim(0), p.weight.dim(1), in.data(), B,
                               out.data());
          } else if constexpr (std::is_same_v<T, Conv>) {
            detail::conv_forward(weights_of(p.weight), p.bias.span(), detail::geometry_of(p, layer.in_shape),
                                 p.weight.dim(0), in.data(), B, out.data());
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            const auto [C, S] = detail::channel_split(layer.in_shape);
            std::vector<Real> mean(C), var(C);
            if (training) {
              const double m = static_cast<double>(B * S);
              for (std::size_t ch = 0; ch < C; ++ch) {
                double sum = 0, sq = 0;
                for (std::size_t b = 0; b < B; ++b)
                  for (std::size_t s = 0; s < S; ++s) sum += in[(b * C + ch) * S + s];
                const double mu = sum / m;
                for (std::size_t b = 0; b < B; ++b)
                  for (std::size_t s = 0; s < S; ++s) {
                    const double d = in[(b * C + ch) * S + s] - mu;
                    sq += d * d;
                  }
                mean[ch] = static_cast<Real>(mu);
                var[ch] = static_cast<Real>(sq / m);
              }
            } else {
              for (std::size_t ch = 0; ch < C; ++ch) {
                mean[ch] = p.running_mean[ch];
                var[ch] = p.running_var[ch];
              }
            }
            std::vector<Real> inv_std(C);
            for (std::size_t ch = 0; ch < C; ++ch)
              inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(var[ch]) + p.eps));
            BasicTensor<Real> xhat(out.shape());
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t ch = 0; ch < C; ++ch)
                for (std::size_t s = 0; s < S; ++s) {
                  const std::size_t idx = (b * C + ch) * S + s;
                  xhat[idx] = (in[idx] - mean[ch]) * inv_std[ch];
                  out[idx] = xhat[idx] * static_cast<Real>(p.gamma[ch]) + static_cast<Real>(p.beta[ch]);
                }
            if (training) {
              c.bn_mean[i] = std::move(mean);
              c.bn_var[i] = std::move(var);
              c.bn_inv_std[i] = std::move(inv_std);
              c.bn_xhat[i] = std::move(xhat);
            }
          } else if constexpr (std::is_same_v<T, QuantRelu>) {
            for (std::size_t k = 0; k < in.size(); ++k)
              out[k] = quantize_value(in[k], p.quant.clip_threshold, p.quant.bits);
          } else if constexpr (std::is_same_v<T, AddShortcut>) {
            const BasicTensor<Real>& other = p.from < 0 ? input : c.outputs[static_cast<std::size_t>(p.from)];
            for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] + other[k];
          } else if constexpr (std::is_same_v<T, AvgPool>) {
            detail::avgpool_forward(layer.in_shape, p.size, in.data(), B, out.data());
          } else {
            for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > Real{0} ? in[k] : Real{0};
          }
        },
        layer.params);

    if (layer.kind() == LayerKind::quant_relu) result.activations.push_back(out);
    c.outputs[i] = std::move(out);
  }
  result.logits = n == 0 ? input : c.outputs.back();
  result.logits.reshape({B, net.num_classes()});
  return result;
}

/// Parameter gradients for one layer: `a` is weight / gamma / clip threshold, `b` is bias / beta.
struct LayerGrad {
  std::vector<float> a, b;
};

/// Backpropagates dL/dlogits through a training-mode forward pass. Quantizers use the
/// straight-through rule of quantize_backward; quantized weights pass their gradient to the
/// latent full-precision weights.
inline std::vector<LayerGrad> backward(const NetworkDef& net, const Tensor& x, const ForwardCache<float>& c,
                                       const Tensor& dlogits) {
  const std::size_t n = net.layers.size();
  const std::size_t B = x.dim(0);
  std::vector<LayerGrad> grads(n);
  std::vector<Tensor> gout(n);
  for (std::size_t i = 0; i < n; ++i) gout[i] = Tensor(detail::batched(B, net.layers[i].out_shape));
  if (n == 0) return grads;
  std::copy(dlogits.begin(), dlogits.end(), gout.back().begin());

  for (std::size_t ii = n; ii-- > 0;) {
    const LayerDef& layer = net.layers[ii];
    const Tensor& in = ii == 0 ? x : c.outputs[ii - 1];
    const Tensor& g = gout[ii];
    const bool need_input_grad = ii > 0;
    Tensor gin_local;
    Tensor* gin = need_input_grad ? &gout[ii - 1] : &gin_local;
    if (!need_input_grad) gin_local = Tensor(in.shape());
    LayerGrad& lg = grads[ii];

    auto weights_of = [&](const Tensor& w) -> std::span<const float> {
      return net.weight_bits == 0 ? w.span() : std::span<const float>(c.eff_weights[ii]);
    };

    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Linear>) {
            const std::size_t O = p.weight.dim(0), I = p.weight.dim(1);
            lg.a.assign(O * I, 0.0f);
            lg.b.assign(O, 0.0f);
            std::vector<float> gt(O * B);
            kernels::transpose(B, O, g.data(), gt.data());
            kernels::gemm_acc(O, I, B, gt.data(), in.data(), lg.a.data());
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t o = 0; o < O; ++o) lg.b[o] += g[b * O + o];
            if (need_input_grad) kernels::gemm_acc(B, I, O, g.data(), weights_of(p.weight).data(), gin->data());
          } else if constexpr (std::is_same_v<T, Conv>) {
            const auto geo = detail::geometry_of(p, layer.in_shape);
            const std::size_t O = p.weight.dim(0), K = geo.patch(), P = geo.out_pixels();
            const std::size_t in_sz = shape_size(layer.in_shape);
            lg.a.assign(O * K, 0.0f);
            lg.b.assign(O, 0.0f);
            const auto w = weights_of(p.weight);
            std::vector<float> wt(K * O);
            kernels::transpose(O, K, w.data(), wt.data());
            std::vector<float> cols(K * P), cols_t(P * K), dcols(K * P);
            for (std::size_t b = 0; b < B; ++b) {
              const float* gb = g.data() + b * O * P;
              kernels::im2col(geo, in.data() + b * in_sz, cols.data());
              kernels::transpose(K, P, cols.data(), cols_t.data());
              kernels::gemm_acc(O, K, P, gb, cols_t.data(), lg.a.data());
              for (std::size_t o = 0; o < O; ++o)
                for (std::size_t px = 0; px < P; ++px) lg.b[o] += gb[o * P + px];
              if (need_input_grad) {
                std::fill(dcols.begin(), dcols.end(), 0.0f);
                kernels::gemm_acc(K, P, O, wt.data(), gb, dcols.data());
                kernels::col2im_acc(geo, dcols.data(), gin->data() + b * in_sz);
              }
            }
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            const auto [C, S] = detail::channel_split(layer.in_shape);
            lg.a.assign(C, 0.0f);
            lg.b.assign(C, 0.0f);
            const Tensor& xhat = c.bn_xhat[ii];
            const double m = static_cast<double>(B * S);
            for (std::size_t ch = 0; ch < C; ++ch) {
              double sum_g = 0, sum_gx = 0;
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) {
                  const std::size_t idx = (b * C + ch) * S + s;
                  sum_g += g[idx];
                  sum_gx += static_cast<double>(g[idx]) * xhat[idx];
                }
              lg.a[ch] = static_cast<float>(sum_gx);
              lg.b[ch] = static_cast<float>(sum_g);
              if (!need_input_grad) continue;
              const double k = p.gamma[ch] * c.bn_inv_std[ii][ch] / m;
              for (std::size_t b = 0; b < B; ++b)
                for (std::size_t s = 0; s < S; ++s) {
                  const std::size_t idx = (b * C + ch) * S + s;
                  (*gin)[idx] += static_cast<float>(k * (m * g[idx] - sum_g - xhat[idx] * sum_gx));
                }
            }
          } else if constexpr (std::is_same_v<T, QuantRelu>) {
            Tensor gx(in.shape());
            double gs = 0;
            quantize_backward<float>(g.span(), in.span(), p.quant.clip_threshold, gx.span(), gs);
            lg.a = {static_cast<float>(gs)};
            if (need_input_grad)
              for (std::size_t k = 0; k < gx.size(); ++k) (*gin)[k] += gx[k];
          } else if constexpr (std::is_same_v<T, AddShortcut>) {
            if (need_input_grad)
              for (std::size_t k = 0; k < g.size(); ++k) (*gin)[k] += g[k];
            if (p.from >= 0) {
              Tensor& dst = gout[static_cast<std::size_t>(p.from)];
              for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
            }
          } else if constexpr (std::is_same_v<T, AvgPool>) {
            if (!need_input_grad) return;
            const auto& s = layer.in_shape;
            const std::size_t C = s[0], H = s[1], W = s[2], k = p.size, oh = H / k, ow = W / k;
            const float inv = 1.0f / static_cast<float>(k * k);
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t ch = 0; ch < C; ++ch)
                for (std::size_t y = 0; y < H; ++y)
                  for (std::size_t xx = 0; xx < W; ++xx)
                    (*gin)[((b * C + ch) * H + y) * W + xx] += g[((b * C + ch) * oh + y / k) * ow + xx / k] * inv;
          } else {
            if (need_input_grad)
              for (std::size_t k = 0; k < g.size(); ++k) (*gin)[k] += in[k] > 0 ? g[k] : 0.0f;
          }
        },
        layer.params);
  }
  return grads;
}

/// Mean softmax cross-entropy over the batch; writes dL/dlogits into `dlogits` when non-null.
template <class Real>
double cross_entropy(const BasicTensor<Real>& logits, std::span<const int> labels, Tensor* dlogits = nullptr) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw ShapeError("cross_entropy: label count differs from batch size");
  if (dlogits) *dlogits = Tensor({B, K});
  double loss = 0;
  std::vector<double> p(K);
  for (std::size_t b = 0; b < B; ++b) {
    double mx = logits[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[b * K + k]));
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += (p[k] = std::exp(logits[b * K + k] - mx));
    const auto y = static_cast<std::size_t>(labels[b]);
    loss += -(logits[b * K + y] - mx - std::log(z));
    if (dlogits)
      for (std::size_t k = 0; k < K; ++k)
        (*dlogits)[b * K + k] = static_cast<float>((p[k] / z - (k == y ? 1.0 : 0.0)) / static_cast<double>(B));
  }
  return loss / static_cast<double>(B);
}

template <class Real>
std::vector<int> argmax_rows(const BasicTensor<Real>& logits) {
  const std::size_t B = logits.dim(0), K = logits.row_size();
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[b * K + k] > logits[b * K + best]) best = k;
    out[b] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fastsnn
