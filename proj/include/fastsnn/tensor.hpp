#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastsnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

using Rng = std::mt19937_64;

/// Dense row-major tensor. The element count always equals the product of the shape.
template <class T>
class BasicTensor {
public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  template <class U>
  static BasicTensor cast(const BasicTensor<U>& other) {
    return BasicTensor(other.shape(), std::vector<T>(other.begin(), other.end()));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
  }

  /// Number of elements per leading-dimension entry (per sample for batched tensors).
  std::size_t row_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }
  std::span<T> row(std::size_t i) { return std::span<T>(data_).subspan(i * row_size(), row_size()); }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * row_size(), row_size());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

namespace kernels {

/// C[M×N] += A[M×K] · B[K×N], all row-major. The loop order is fixed (i, k, j) so the
/// accumulation order of every output element is k = 0..K-1 regardless of build flags.
/// Zero entries of A are skipped, which does not change any result.
template <class TA, class TB, class TC>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const TA* a, const TB* b, TC* c) {
  for (std::size_t i = 0; i < M; ++i) {
    TC* crow = c + i * N;
    const TA* arow = a + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const TC av = static_cast<TC>(arow[k]);
      if (av == TC{0}) continue;
      const TB* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * static_cast<TC>(brow[j]);
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                                  std::size_t kw, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const auto span_h = static_cast<long>(h + 2 * pad) - static_cast<long>(kh);
  const auto span_w = static_cast<long>(w + 2 * pad) - static_cast<long>(kw);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 ||
      span_w % static_cast<long>(stride) != 0)
    throw ShapeError("conv2d: output size is not a positive integer for input " +
                     std::to_string(h) + "x" + std::to_string(w) + ", kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw) + ", stride " +
                     std::to_string(stride) + ", pad " + std::to_string(pad));
  return {c, h, w, kh, kw, stride, pad, static_cast<std::size_t>(span_h) / stride + 1,
          static_cast<std::size_t>(span_w) / stride + 1};
}

/// cols[patch × out_pixels] from one C×H×W image.
template <class TI, class TC>
void im2col(const ConvGeometry& g, const TI* img, TC* cols) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        TC* dst = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) &&
                                x < static_cast<long>(g.width);
            dst[oy * g.out_w + ox] =
                inside ? static_cast<TC>(img[(c * g.height + y) * g.width + x]) : TC{0};
          }
        }
      }
}

/// Adjoint of im2col: accumulates cols back into an image gradient.
template <class T>
void col2im_acc(const ConvGeometry& g, const T* cols, T* img) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* src = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            img[(c * g.height + y) * g.width + x] += src[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace kernels

/// Matrix product of two rank-2 tensors.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  BasicTensor<T> out({a.dim(0), b.dim(1)});
  kernels::gemm_acc(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), out.data());
  return out;
}

/// Cross-correlation of a C×H×W input with an O×C×kh×kw kernel (no kernel flip).
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      std::size_t stride, std::size_t pad) {
  if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.dim(0))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(input.shape()) + " and " +
                     shape_str(kernel.shape()));
  const auto g = kernels::conv_geometry(input.dim(0), input.dim(1), input.dim(2), kernel.dim(2),
                                        kernel.dim(3), stride, pad);
  std::vector<T> cols(g.patch() * g.out_pixels());
  kernels::im2col(g, input.data(), cols.data());
  BasicTensor<T> out({kernel.dim(0), g.out_h, g.out_w});
  kernels::gemm_acc(kernel.dim(0), g.out_pixels(), g.patch(), kernel.data(), cols.data(),
                    out.data());
  return out;
}

}  // namespace fastsnn
