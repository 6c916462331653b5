#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fastsnn/network.hpp"
#include "fastsnn/spiking.hpp"

namespace fastsnn {

static_assert(std::endian::native == std::endian::little, "model files are written in host order (little-endian)");

/// Raised for malformed model files; `offset` is the byte position where decoding failed.
class FormatError : public Error {
public:
  FormatError(const std::string& path, std::size_t at, const std::string& what)
      : Error(path + ": " + what + " at byte offset " + std::to_string(at)), offset(at) {}
  std::size_t offset;
};

inline constexpr std::uint32_t model_format_version = 1;

namespace io {

class Writer {
public:
  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void i32(std::int32_t v) { pod(v); }
  void f32(float v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) u64(d);
  }
  void magic(const char (&m)[5]) { buf_.insert(buf_.end(), m, m + 4); }
  template <class T>
  void array(std::span<const T> v) {
    u64(v.size());
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size_bytes());
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    array<float>(t.span());
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
public:
  Reader(std::vector<std::uint8_t> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

  [[noreturn]] void fail(const std::string& what) const { fail_at(pos_, what); }
  [[noreturn]] void fail_at(std::size_t at, const std::string& what) const { throw FormatError(path_, at, what); }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

  template <class T>
  T pod() {
    need(sizeof(T), "value");
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int32_t i32() { return pod<std::int32_t>(); }
  float f32() { return pod<float>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const auto n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Shape shape() {
    const auto rank = u32();
    if (rank > 8) fail("implausible tensor rank " + std::to_string(rank));
    Shape s(rank);
    for (auto& d : s) d = static_cast<std::size_t>(u64());
    return s;
  }
  void magic(const char (&m)[5]) {
    need(4, "magic");
    if (std::memcmp(buf_.data() + pos_, m, 4) != 0)
      fail("bad magic (expected '" + std::string(m, 4) + "')");
    pos_ += 4;
  }
  template <class T>
  std::vector<T> array() {
    const auto n = u64();
    if (n > (buf_.size() - pos_) / sizeof(T)) fail("truncated array of " + std::to_string(n) + " values");
    std::vector<T> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  Tensor tensor() {
    const std::size_t at = pos_;
    Shape s = shape();
    auto data = array<float>();
    if (data.size() != shape_size(s)) {
      pos_ = at;
      fail("tensor of shape " + shape_str(s) + " holds " + std::to_string(data.size()) + " values");
    }
    return Tensor(std::move(s), std::move(data));
  }

private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) fail(std::string("truncated file while reading ") + what);
  }

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spill(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline void header(Writer& w, const char (&m)[5], std::size_t count) {
  w.magic(m);
  w.u32(model_format_version);
  w.u32(static_cast<std::uint32_t>(count));
}

inline std::uint32_t header(Reader& r, const char (&m)[5]) {
  r.magic(m);
  const std::size_t at = r.offset();
  if (const auto v = r.u32(); v != model_format_version) {
    r.fail_at(at, "unsupported format version " + std::to_string(v) + " (expected " +
           std::to_string(model_format_version) + ")");
  }
  return r.u32();
}

}  // namespace io

// ---------------------------------------------------------------------------------------------
// Quantized ANN container ("QANN"). Layout is documented in docs/file_formats.md.

inline std::vector<std::uint8_t> encode_network(const NetworkDef& net) {
  io::Writer w;
  io::header(w, "QANN", net.layers.size());
  w.str(net.name);
  w.shape(net.input_shape);
  w.i32(net.weight_bits);
  w.u64(net.seed);
  for (const auto& layer : net.layers) {
    w.str(kind_name(layer.kind()));
    w.shape(layer.in_shape);
    w.shape(layer.out_shape);
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Linear>) {
            w.tensor(p.weight);
            w.tensor(p.bias);
          } else if constexpr (std::is_same_v<T, Conv>) {
            w.tensor(p.weight);
            w.tensor(p.bias);
            w.u64(p.stride);
            w.u64(p.pad);
          } else if constexpr (std::is_same_v<T, BatchNorm>) {
            w.tensor(p.gamma);
            w.tensor(p.beta);
            w.tensor(p.running_mean);
            w.tensor(p.running_var);
            w.f32(p.eps);
            w.f32(p.momentum);
          } else if constexpr (std::is_same_v<T, QuantRelu>) {
            w.i32(p.quant.bits);
            w.f32(p.quant.clip_threshold);
            w.u32(static_cast<std::uint32_t>(p.quant.target));
          } else if constexpr (std::is_same_v<T, AddShortcut>) {
            w.i32(p.from);
          } else if constexpr (std::is_same_v<T, AvgPool>) {
            w.u64(p.size);
          }
        },
        layer.params);
  }
  return w.bytes();
}

inline NetworkDef decode_network(std::vector<std::uint8_t> bytes, const std::string& path = "<memory>") {
  io::Reader r(std::move(bytes), path);
  const auto count = io::header(r, "QANN");
  NetworkDef net;
  net.name = r.str();
  net.input_shape = r.shape();
  net.weight_bits = r.i32();
  net.seed = r.u64();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::string name = r.str();
    const auto kind = kind_from_name(name);
    if (!kind) throw FormatError(path, at, "unknown layer kind '" + name + "'");
    LayerDef layer;
    layer.in_shape = r.shape();
    layer.out_shape = r.shape();
    switch (*kind) {
      case LayerKind::fc: {
        Linear p;
        p.weight = r.tensor();
        p.bias = r.tensor();
        layer.params = std::move(p);
        break;
      }
      case LayerKind::conv: {
        Conv p;
        p.weight = r.tensor();
        p.bias = r.tensor();
        p.stride = r.u64();
        p.pad = r.u64();
        layer.params = std::move(p);
        break;
      }
      case LayerKind::batchnorm: {
        BatchNorm p;
        p.gamma = r.tensor();
        p.beta = r.tensor();
        p.running_mean = r.tensor();
        p.running_var = r.tensor();
        p.eps = r.f32();
        p.momentum = r.f32();
        layer.params = std::move(p);
        break;
      }
      case LayerKind::quant_relu: {
        QuantRelu p;
        p.quant.bits = r.i32();
        p.quant.clip_threshold = r.f32();
        const auto target = r.u32();
        if (target > 1) r.fail("invalid quantizer target " + std::to_string(target));
        p.quant.target = static_cast<QuantTarget>(target);
        layer.params = p;
        break;
      }
      case LayerKind::add_shortcut: layer.params = AddShortcut{r.i32()}; break;
      case LayerKind::avgpool: layer.params = AvgPool{static_cast<std::size_t>(r.u64())}; break;
      case LayerKind::plain_relu: layer.params = PlainRelu{}; break;
    }
    net.layers.push_back(std::move(layer));
  }
  if (!r.at_end()) r.fail("trailing bytes after last layer");
  try {
    net.validate();
  } catch (const Error& e) {
    throw FormatError(path, r.offset(), std::string("inconsistent network: ") + e.what());
  }
  return net;
}

inline void save(const NetworkDef& net, const std::filesystem::path& path) { io::spill(path, encode_network(net)); }

inline NetworkDef load_network(const std::filesystem::path& path) {
  return decode_network(io::slurp(path), path.string());
}

// ---------------------------------------------------------------------------------------------
// Spiking network container ("QSNN").

inline std::vector<std::uint8_t> encode_spiking(const SpikingNetwork& snn) {
  io::Writer w;
  io::header(w, "QSNN", snn.layers.size());
  w.shape(snn.input_shape);
  w.i32(snn.bits);
  w.u32(static_cast<std::uint32_t>(snn.neuron));
  for (const auto& L : snn.layers) {
    w.shape(L.shape);
    w.f64(L.threshold);
    w.f64(L.neg_threshold);
    w.f64(L.initial_charge);
    w.i32(snn.time_steps);
    w.u32(static_cast<std::uint32_t>(snn.schedule.mode));
    w.i32(snn.schedule.total_steps);
    w.u32(L.readout ? 1 : 0);
    w.i32(L.ann_layer);
    w.array<double>(L.bias);
    w.u32(static_cast<std::uint32_t>(L.projections.size()));
    for (const auto& p : L.projections) {
      w.u32(static_cast<std::uint32_t>(p.kind));
      w.i32(p.source);
      w.u64(p.pool);
      w.u64(p.stride);
      w.u64(p.pad);
      w.f64(p.source_scale);
      w.shape(p.weight_shape);
      w.array<double>(p.weights);
    }
  }
  return w.bytes();
}

inline SpikingNetwork decode_spiking(std::vector<std::uint8_t> bytes, const std::string& path = "<memory>") {
  io::Reader r(std::move(bytes), path);
  const auto count = io::header(r, "QSNN");
  SpikingNetwork snn;
  snn.input_shape = r.shape();
  snn.bits = r.i32();
  if (snn.bits < 1 || snn.bits > 8) r.fail("bit-width " + std::to_string(snn.bits) + " outside [1, 8]");
  snn.time_steps = (1 << snn.bits) - 1;
  const auto neuron = r.u32();
  if (neuron > 1) r.fail("unknown neuron model " + std::to_string(neuron));
  snn.neuron = static_cast<NeuronModel>(neuron);
  for (std::uint32_t i = 0; i < count; ++i) {
    SpikingLayer L;
    L.shape = r.shape();
    L.threshold = r.f64();
    L.neg_threshold = r.f64();
    L.initial_charge = r.f64();
    if (const auto T = r.i32(); T != snn.time_steps)
      r.fail("layer time steps " + std::to_string(T) + " differ from 2^bits - 1 = " + std::to_string(snn.time_steps));
    const auto mode = r.u32();
    if (mode > 1) r.fail("unknown schedule mode " + std::to_string(mode));
    snn.schedule.mode = static_cast<ScheduleMode>(mode);
    snn.schedule.total_steps = r.i32();
    L.readout = r.u32() != 0;
    L.ann_layer = r.i32();
    L.bias = r.array<double>();
    const auto np = r.u32();
    for (std::uint32_t k = 0; k < np; ++k) {
      Projection p;
      const auto kind = r.u32();
      if (kind > 2) r.fail("unknown projection kind " + std::to_string(kind));
      p.kind = static_cast<ProjectionKind>(kind);
      p.source = r.i32();
      p.pool = r.u64();
      p.stride = r.u64();
      p.pad = r.u64();
      p.source_scale = r.f64();
      p.weight_shape = r.shape();
      p.weights = r.array<double>();
      L.projections.push_back(std::move(p));
    }
    snn.layers.push_back(std::move(L));
  }
  if (!r.at_end()) r.fail("trailing bytes after last layer");
  try {
    snn.validate();
  } catch (const Error& e) {
    throw FormatError(path, r.offset(), std::string("inconsistent spiking network: ") + e.what());
  }
  return snn;
}

inline void save(const SpikingNetwork& snn, const std::filesystem::path& path) {
  io::spill(path, encode_spiking(snn));
}

inline SpikingNetwork load_spiking(const std::filesystem::path& path) {
  return decode_spiking(io::slurp(path), path.string());
}

/// Reads the 4-byte magic of a model file: "QANN", "QSNN", or empty when unrecognized.
inline std::string model_kind(const std::filesystem::path& path) {
  const auto bytes = io::slurp(path);
  if (bytes.size() < 4) return {};
  std::string m(bytes.begin(), bytes.begin() + 4);
  return m == "QANN" || m == "QSNN" ? m : std::string{};
}

}  // namespace fastsnn
