#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fastsnn/tensor.hpp"

namespace fastsnn {

struct Dataset {
  Tensor images;            // [N, C, H, W], normalized
  std::vector<int> labels;  // N
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  void validate() const {
    if (images.rank() < 2 || images.dim(0) != labels.size())
      throw Error("dataset '" + split + "': " + std::to_string(images.rank() ? images.dim(0) : 0) + " images but " +
                  std::to_string(labels.size()) + " labels");
  }

  /// Gathers the given sample indices into a contiguous batch.
  Tensor batch(std::span<const std::size_t> idx) const {
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor out(s);
    const std::size_t row = images.row_size();
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(images.data() + idx[i] * row, row, out.data() + i * row);
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t count) const {
    count = std::min(count, size() - std::min(begin, size()));
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    return {batch(idx), std::vector<int>(labels.begin() + static_cast<long>(begin),
                                         labels.begin() + static_cast<long>(begin + count)),
            split};
  }
};

struct Normalization {
  double mean = 0.1307;
  double stddev = 0.3081;
};

// ---------------------------------------------------------------------------------------------
// IDX files: big-endian u32 magic (0x00000803 images, 0x00000801 labels), u32 dimensions, u8 data.

class IdxError : public Error {
public:
  IdxError(const std::string& path, std::size_t offset, const std::string& what)
      : Error(path + ": " + what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

private:
  std::size_t offset_;
};

constexpr std::uint32_t idx_images_magic = 0x00000803;
constexpr std::uint32_t idx_labels_magic = 0x00000801;

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& buf, std::size_t off, const std::string& path) {
  if (off + 4 > buf.size()) throw IdxError(path, buf.size(), "truncated header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
         std::uint32_t{buf[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) buf.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  const std::string p = path.string();
  const std::uint32_t magic = detail::be32(buf, 0, p);
  if (magic != idx_images_magic) throw IdxError(p, 0, "bad image magic " + std::to_string(magic));
  IdxImages img{detail::be32(buf, 4, p), detail::be32(buf, 8, p), detail::be32(buf, 12, p), {}};
  const std::size_t need = 16 + std::size_t{img.count} * img.rows * img.cols;
  if (buf.size() < need)
    throw IdxError(p, buf.size(), "truncated pixel data (expected " + std::to_string(need) + " bytes)");
  if (buf.size() > need) throw IdxError(p, need, "trailing bytes after pixel data");
  img.pixels.assign(buf.begin() + 16, buf.end());
  return img;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  const std::string p = path.string();
  const std::uint32_t magic = detail::be32(buf, 0, p);
  if (magic != idx_labels_magic) throw IdxError(p, 0, "bad label magic " + std::to_string(magic));
  const std::uint32_t count = detail::be32(buf, 4, p);
  const std::size_t need = 8 + std::size_t{count};
  if (buf.size() < need)
    throw IdxError(p, buf.size(), "truncated label data (expected " + std::to_string(need) + " bytes)");
  if (buf.size() > need) throw IdxError(p, need, "trailing bytes after label data");
  return {buf.begin() + 8, buf.end()};
}

inline void write_idx_images(const std::filesystem::path& path, const IdxImages& img) {
  std::vector<std::uint8_t> buf;
  detail::put_be32(buf, idx_images_magic);
  detail::put_be32(buf, img.count);
  detail::put_be32(buf, img.rows);
  detail::put_be32(buf, img.cols);
  buf.insert(buf.end(), img.pixels.begin(), img.pixels.end());
  detail::write_file(path, buf);
}

inline void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> buf;
  detail::put_be32(buf, idx_labels_magic);
  detail::put_be32(buf, static_cast<std::uint32_t>(labels.size()));
  buf.insert(buf.end(), labels.begin(), labels.end());
  detail::write_file(path, buf);
}

inline Dataset to_dataset(const IdxImages& img, const std::vector<std::uint8_t>& labels, const Normalization& norm,
                          std::string split) {
  if (img.count != labels.size())
    throw Error("dataset '" + split + "': image file holds " + std::to_string(img.count) +
                " images but label file holds " + std::to_string(labels.size()) + " labels");
  Dataset ds{Tensor({img.count, 1, img.rows, img.cols}), std::vector<int>(labels.begin(), labels.end()),
             std::move(split)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    ds.images[i] = static_cast<float>((img.pixels[i] / 255.0 - norm.mean) / norm.stddev);
  return ds;
}

inline Dataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                          const Normalization& norm = {}, std::string split = "train") {
  return to_dataset(read_idx_images(images), read_idx_labels(labels), norm, std::move(split));
}

/// Standard file names inside a dataset directory.
struct IdxLayout {
  static constexpr std::array<const char*, 4> files = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                                        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
};

struct TrainTestSplit {
  Dataset train, test;
};

inline TrainTestSplit load_idx_dir(const std::filesystem::path& dir, const Normalization& norm = {}) {
  std::string missing;
  for (const char* f : IdxLayout::files)
    if (!std::filesystem::exists(dir / f)) missing += std::string(missing.empty() ? "" : ", ") + f;
  if (!missing.empty())
    throw Error("dataset directory '" + dir.string() + "' is missing: " + missing +
                " (expected train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, "
                "t10k-labels-idx1-ubyte)");
  return {ingest_idx(dir / IdxLayout::files[0], dir / IdxLayout::files[1], norm, "train"),
          ingest_idx(dir / IdxLayout::files[2], dir / IdxLayout::files[3], norm, "test")};
}

// ---------------------------------------------------------------------------------------------
// Synthetic handwriting-like digits: each class is a fixed set of pen strokes; samples jitter
// stroke endpoints, shift, rescale intensity, add pixel noise and a faint distractor class.

struct SyntheticConfig {
  std::uint64_t seed = 1;
  std::size_t train_count = 6000;
  std::size_t test_count = 2000;
  std::size_t classes = 10;
  std::size_t size = 28;
  int strokes = 3;
  double endpoint_jitter = 1.1;  // px
  int max_shift = 1;             // px
  double thickness = 1.8;        // gaussian pen width, px
  double pixel_noise = 0.2;
  double distractor = 0.25;      // peak intensity of the other-class overlay
};

struct IdxPair {
  IdxImages images;
  std::vector<std::uint8_t> labels;
};

struct SyntheticIdx {
  IdxPair train, test;
};

namespace detail {

struct Stroke {
  double x0, y0, x1, y1;
};

inline void render_stroke(std::vector<double>& img, std::size_t size, const Stroke& s, double thickness, double amp) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0, len2 = dx * dx + dy * dy + 1e-12;
  const double inv2s2 = 1.0 / (2 * thickness * thickness);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) - s.x0, py = static_cast<double>(y) - s.y0;
      const double t = std::clamp((px * dx + py * dy) / len2, 0.0, 1.0);
      const double ex = px - t * dx, ey = py - t * dy;
      img[y * size + x] = std::max(img[y * size + x], amp * std::exp(-(ex * ex + ey * ey) * inv2s2));
    }
}

}  // namespace detail

inline SyntheticIdx generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes < 2 || cfg.classes > 256) throw Error("synthetic: classes must lie in [2, 256]");
  Rng proto_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 17);
  const double lo = 6.0, hi = static_cast<double>(cfg.size) - 7.0;
  std::uniform_real_distribution<double> coord(lo, hi);
  std::vector<std::vector<detail::Stroke>> protos(cfg.classes);
  for (auto& p : protos)
    for (int k = 0; k < cfg.strokes; ++k) p.push_back({coord(proto_rng), coord(proto_rng), coord(proto_rng), coord(proto_rng)});

  auto make = [&](std::size_t count, std::uint64_t stream) {
    Rng rng(cfg.seed * 1000003ULL + stream);
    std::normal_distribution<double> jitter(0.0, cfg.endpoint_jitter), noise(0.0, cfg.pixel_noise);
    std::uniform_int_distribution<int> shift(-cfg.max_shift, cfg.max_shift);
    std::uniform_int_distribution<std::size_t> cls(0, cfg.classes - 1);
    std::uniform_real_distribution<double> amp(0.7, 1.1), unit(0.0, 1.0);
    IdxPair out;
    out.images = {static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(cfg.size),
                  static_cast<std::uint32_t>(cfg.size), {}};
    out.images.pixels.reserve(count * cfg.size * cfg.size);
    std::vector<double> img(cfg.size * cfg.size);
    for (std::size_t n = 0; n < count; ++n) {
      const std::size_t c = cls(rng);
      std::fill(img.begin(), img.end(), 0.0);
      const double sx = shift(rng), sy = shift(rng), a = amp(rng);
      for (const auto& s : protos[c])
        detail::render_stroke(img, cfg.size,
                              {s.x0 + sx + jitter(rng), s.y0 + sy + jitter(rng), s.x1 + sx + jitter(rng),
                               s.y1 + sy + jitter(rng)},
                              cfg.thickness, a);
      std::size_t other = cls(rng);
      if (other == c) other = (other + 1) % cfg.classes;
      const double da = cfg.distractor * unit(rng);
      for (const auto& s : protos[other])
        detail::render_stroke(img, cfg.size,
                              {s.x0 + jitter(rng), s.y0 + jitter(rng), s.x1 + jitter(rng), s.y1 + jitter(rng)},
                              cfg.thickness, da);
      for (double v : img) {
        const double pix = std::clamp(v + noise(rng), 0.0, 1.0);
        out.images.pixels.push_back(static_cast<std::uint8_t>(std::lround(pix * 255.0)));
      }
      out.labels.push_back(static_cast<std::uint8_t>(c));
    }
    return out;
  };
  return {make(cfg.train_count, 1), make(cfg.test_count, 2)};
}

inline TrainTestSplit synthetic_dataset(const SyntheticConfig& cfg, const Normalization& norm = {}) {
  const auto raw = generate_synthetic(cfg);
  return {to_dataset(raw.train.images, raw.train.labels, norm, "train"),
          to_dataset(raw.test.images, raw.test.labels, norm, "test")};
}

inline void write_synthetic(const std::filesystem::path& dir, const SyntheticConfig& cfg) {
  std::filesystem::create_directories(dir);
  const auto raw = generate_synthetic(cfg);
  write_idx_images(dir / IdxLayout::files[0], raw.train.images);
  write_idx_labels(dir / IdxLayout::files[1], raw.train.labels);
  write_idx_images(dir / IdxLayout::files[2], raw.test.images);
  write_idx_labels(dir / IdxLayout::files[3], raw.test.labels);
}

}  // namespace fastsnn
