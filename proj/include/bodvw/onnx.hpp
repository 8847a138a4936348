#pragma once

// Minimal ONNX reader and executor: enough of the protobuf wire format and of
// the operator set to run a VGG-style convolutional base in float32.
//
// Tensors are NCHW with batch 1. Weight payloads stay as views into the model
// buffer until an operator actually needs them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "bodvw/binary_io.hpp"
#include "bodvw/error.hpp"

namespace bodvw::onnx {

// ---------------------------------------------------------------------------
// Protobuf wire format

enum class WireType : std::uint8_t { kVarint = 0, kFixed64 = 1, kBytes = 2, kFixed32 = 5 };

class WireReader {
 public:
  explicit WireReader(std::span<const std::uint8_t> data) : data_(data) {}

  [[nodiscard]] bool done() const { return pos_ >= data_.size(); }

  /// Reads the next field key: (field number, wire type).
  std::pair<std::uint32_t, WireType> key() {
    const auto k = varint();
    const auto wt = static_cast<std::uint8_t>(k & 7);
    if (wt != 0 && wt != 1 && wt != 2 && wt != 5) throw FormatError("onnx: unsupported wire type");
    return {static_cast<std::uint32_t>(k >> 3), static_cast<WireType>(wt)};
  }

  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      if (pos_ >= data_.size()) throw FormatError("onnx: truncated varint");
      const auto b = data_[pos_++];
      v |= static_cast<std::uint64_t>(b & 0x7F) << shift;
      if ((b & 0x80) == 0) return v;
    }
    throw FormatError("onnx: varint too long");
  }

  std::span<const std::uint8_t> bytes() {
    const auto n = varint();
    if (n > data_.size() - pos_) throw FormatError("onnx: truncated field");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::string string() {
    auto b = bytes();
    return {b.begin(), b.end()};
  }

  std::uint32_t fixed32() {
    if (data_.size() - pos_ < 4) throw FormatError("onnx: truncated fixed32");
    std::uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::uint64_t fixed64() {
    if (data_.size() - pos_ < 8) throw FormatError("onnx: truncated fixed64");
    std::uint64_t v;
    std::memcpy(&v, data_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }

  float float32() {
    const auto bits = fixed32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  void skip(WireType wt) {
    switch (wt) {
      case WireType::kVarint: varint(); break;
      case WireType::kFixed64: fixed64(); break;
      case WireType::kBytes: bytes(); break;
      case WireType::kFixed32: fixed32(); break;
    }
  }

  /// Repeated int64 that may be packed or unpacked.
  void repeated_int64(WireType wt, std::vector<std::int64_t>& out) {
    if (wt == WireType::kBytes) {
      WireReader packed(bytes());
      while (!packed.done()) out.push_back(static_cast<std::int64_t>(packed.varint()));
    } else {
      out.push_back(static_cast<std::int64_t>(varint()));
    }
  }

  void repeated_float(WireType wt, std::vector<float>& out) {
    if (wt == WireType::kBytes) {
      WireReader packed(bytes());
      while (!packed.done()) out.push_back(packed.float32());
    } else {
      out.push_back(float32());
    }
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Model structures

inline constexpr std::int32_t kFloat = 1;

/// Dense float tensor used during execution.
struct Tensor {
  std::vector<std::int64_t> dims;
  std::vector<float> data;

  [[nodiscard]] std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
};

/// Initializer as stored in the file; payload decoded on demand.
struct TensorProto {
  std::string name;
  std::vector<std::int64_t> dims;
  std::int32_t data_type = 0;
  std::span<const std::uint8_t> raw_data;
  std::vector<float> float_data;
  bool external = false;

  [[nodiscard]] Tensor materialize() const {
    if (external) throw InferenceError("onnx: external tensor data is not supported ('" + name + "')");
    if (data_type != kFloat) throw InferenceError("onnx: tensor '" + name + "' is not float32");
    Tensor t;
    t.dims = dims;
    const auto n = t.numel();
    if (!raw_data.empty()) {
      if (raw_data.size() != n * 4) throw FormatError("onnx: tensor '" + name + "' size mismatch");
      t.data.resize(n);
      std::memcpy(t.data.data(), raw_data.data(), raw_data.size());
    } else {
      if (float_data.size() != n) throw FormatError("onnx: tensor '" + name + "' size mismatch");
      t.data = float_data;
    }
    return t;
  }
};

struct Attribute {
  std::string name;
  std::int64_t i = 0;
  float f = 0.0f;
  std::string s;
  std::vector<std::int64_t> ints;
  std::vector<float> floats;
  std::optional<TensorProto> t;
};

struct Node {
  std::string name;
  std::string op_type;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, Attribute> attributes;

  [[nodiscard]] const Attribute* attr(const std::string& key) const {
    auto it = attributes.find(key);
    return it == attributes.end() ? nullptr : &it->second;
  }
  [[nodiscard]] std::int64_t attr_int(const std::string& key, std::int64_t fallback) const {
    const auto* a = attr(key);
    return a ? a->i : fallback;
  }
  [[nodiscard]] std::vector<std::int64_t> attr_ints(const std::string& key,
                                                    std::vector<std::int64_t> fallback) const {
    const auto* a = attr(key);
    return a ? a->ints : fallback;
  }
  [[nodiscard]] std::string attr_string(const std::string& key, std::string fallback) const {
    const auto* a = attr(key);
    return a ? a->s : fallback;
  }
};

struct ValueInfo {
  std::string name;
  std::vector<std::int64_t> dims;  // -1 for symbolic dimensions
};

struct Graph {
  std::string name;
  std::vector<Node> nodes;
  std::unordered_map<std::string, TensorProto> initializers;
  std::vector<ValueInfo> inputs;
  std::vector<ValueInfo> outputs;
};

struct Model {
  std::int64_t ir_version = 0;
  std::vector<std::pair<std::string, std::int64_t>> opsets;
  Graph graph;
  /// Backing buffer that TensorProto::raw_data views point into.
  std::shared_ptr<const std::vector<std::uint8_t>> buffer;
};

namespace detail {

inline TensorProto parse_tensor(std::span<const std::uint8_t> data) {
  TensorProto t;
  WireReader r(data);
  while (!r.done()) {
    auto [field, wt] = r.key();
    switch (field) {
      case 1: r.repeated_int64(wt, t.dims); break;
      case 2: t.data_type = static_cast<std::int32_t>(r.varint()); break;
      case 4: r.repeated_float(wt, t.float_data); break;
      case 8: t.name = r.string(); break;
      case 9: t.raw_data = r.bytes(); break;
      case 14: t.external = r.varint() == 1; break;
      default: r.skip(wt);
    }
  }
  return t;
}

inline Attribute parse_attribute(std::span<const std::uint8_t> data) {
  Attribute a;
  WireReader r(data);
  while (!r.done()) {
    auto [field, wt] = r.key();
    switch (field) {
      case 1: a.name = r.string(); break;
      case 2: a.f = r.float32(); break;
      case 3: a.i = static_cast<std::int64_t>(r.varint()); break;
      case 4: a.s = r.string(); break;
      case 5: a.t = parse_tensor(r.bytes()); break;
      case 7: r.repeated_float(wt, a.floats); break;
      case 8: r.repeated_int64(wt, a.ints); break;
      default: r.skip(wt);
    }
  }
  return a;
}

inline Node parse_node(std::span<const std::uint8_t> data) {
  Node n;
  WireReader r(data);
  while (!r.done()) {
    auto [field, wt] = r.key();
    switch (field) {
      case 1: n.inputs.push_back(r.string()); break;
      case 2: n.outputs.push_back(r.string()); break;
      case 3: n.name = r.string(); break;
      case 4: n.op_type = r.string(); break;
      case 5: {
        auto a = parse_attribute(r.bytes());
        n.attributes[a.name] = std::move(a);
        break;
      }
      default: r.skip(wt);
    }
  }
  return n;
}

// ValueInfoProto.type -> TypeProto.tensor_type -> shape -> dim*
inline ValueInfo parse_value_info(std::span<const std::uint8_t> data) {
  ValueInfo v;
  WireReader r(data);
  while (!r.done()) {
    auto [field, wt] = r.key();
    if (field == 1) {
      v.name = r.string();
    } else if (field == 2) {
      WireReader type(r.bytes());
      while (!type.done()) {
        auto [tf, twt] = type.key();
        if (tf != 1) {
          type.skip(twt);
          continue;
        }
        WireReader tensor(type.bytes());
        while (!tensor.done()) {
          auto [sf, swt] = tensor.key();
          if (sf != 2) {
            tensor.skip(swt);
            continue;
          }
          WireReader shape(tensor.bytes());
          while (!shape.done()) {
            auto [df, dwt] = shape.key();
            if (df != 1) {
              shape.skip(dwt);
              continue;
            }
            WireReader dim(shape.bytes());
            std::int64_t value = -1;
            while (!dim.done()) {
              auto [vf, vwt] = dim.key();
              if (vf == 1) value = static_cast<std::int64_t>(dim.varint());
              else dim.skip(vwt);
            }
            v.dims.push_back(value);
          }
        }
      }
    } else {
      r.skip(wt);
    }
  }
  return v;
}

inline Graph parse_graph(std::span<const std::uint8_t> data) {
  Graph g;
  WireReader r(data);
  while (!r.done()) {
    auto [field, wt] = r.key();
    switch (field) {
      case 1: g.nodes.push_back(parse_node(r.bytes())); break;
      case 2: g.name = r.string(); break;
      case 5: {
        auto t = parse_tensor(r.bytes());
        auto name = t.name;
        g.initializers.emplace(std::move(name), std::move(t));
        break;
      }
      case 11: g.inputs.push_back(parse_value_info(r.bytes())); break;
      case 12: g.outputs.push_back(parse_value_info(r.bytes())); break;
      default: r.skip(wt);
    }
  }
  return g;
}

}  // namespace detail

inline Model parse_model(std::shared_ptr<const std::vector<std::uint8_t>> buffer) {
  Model m;
  m.buffer = std::move(buffer);
  WireReader r(*m.buffer);
  bool has_graph = false;
  while (!r.done()) {
    auto [field, wt] = r.key();
    switch (field) {
      case 1: m.ir_version = static_cast<std::int64_t>(r.varint()); break;
      case 7:
        m.graph = detail::parse_graph(r.bytes());
        has_graph = true;
        break;
      case 8: {
        WireReader op(r.bytes());
        std::string domain;
        std::int64_t version = 0;
        while (!op.done()) {
          auto [of, owt] = op.key();
          if (of == 1) domain = op.string();
          else if (of == 2) version = static_cast<std::int64_t>(op.varint());
          else op.skip(owt);
        }
        m.opsets.emplace_back(domain, version);
        break;
      }
      default: r.skip(wt);
    }
  }
  if (!has_graph || m.graph.nodes.empty()) throw FormatError("onnx: model has no graph");
  return m;
}

inline Model load_model(const std::string& path) {
  auto buffer = std::make_shared<const std::vector<std::uint8_t>>(io::read_file(path));
  try {
    return parse_model(std::move(buffer));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Operators

namespace ops {

struct Padding {
  std::int64_t top = 0, left = 0, bottom = 0, right = 0;
};

inline Padding resolve_padding(const Node& node, std::int64_t in_h, std::int64_t in_w,
                               std::int64_t k_h, std::int64_t k_w, std::int64_t s_h,
                               std::int64_t s_w) {
  const auto auto_pad = node.attr_string("auto_pad", "NOTSET");
  Padding p;
  if (auto_pad == "NOTSET") {
    const auto pads = node.attr_ints("pads", {0, 0, 0, 0});
    if (pads.size() != 4) throw InferenceError("onnx: expected 4 pads on node '" + node.name + "'");
    p = {pads[0], pads[1], pads[2], pads[3]};
  } else if (auto_pad == "SAME_UPPER" || auto_pad == "SAME_LOWER") {
    auto split = [&](std::int64_t in, std::int64_t k, std::int64_t s) {
      const std::int64_t out = (in + s - 1) / s;
      const std::int64_t total = std::max<std::int64_t>(0, (out - 1) * s + k - in);
      const std::int64_t small = total / 2;
      return auto_pad == "SAME_UPPER" ? std::pair{small, total - small}
                                      : std::pair{total - small, small};
    };
    auto [t, b] = split(in_h, k_h, s_h);
    auto [l, r] = split(in_w, k_w, s_w);
    p = {t, l, b, r};
  } else if (auto_pad != "VALID") {
    throw InferenceError("onnx: unsupported auto_pad '" + auto_pad + "'");
  }
  return p;
}

inline void require_rank4_batch1(const Tensor& t, const Node& node) {
  if (t.dims.size() != 4 || t.dims[0] != 1)
    throw InferenceError("onnx: node '" + node.name + "' (" + node.op_type +
                         ") expects a rank-4 tensor with batch 1");
}

inline Tensor conv(const Node& node, const Tensor& x, const Tensor& w, const Tensor* bias) {
  require_rank4_batch1(x, node);
  if (node.attr_int("group", 1) != 1) throw InferenceError("onnx: grouped Conv is not supported");
  for (auto d : node.attr_ints("dilations", {1, 1}))
    if (d != 1) throw InferenceError("onnx: dilated Conv is not supported");
  if (w.dims.size() != 4 || w.dims[1] != x.dims[1])
    throw InferenceError("onnx: Conv weight shape mismatch on node '" + node.name + "'");
  const auto c_in = x.dims[1], in_h = x.dims[2], in_w = x.dims[3];
  const auto c_out = w.dims[0], k_h = w.dims[2], k_w = w.dims[3];
  const auto strides = node.attr_ints("strides", {1, 1});
  const auto s_h = strides.at(0), s_w = strides.at(1);
  const auto pad = resolve_padding(node, in_h, in_w, k_h, k_w, s_h, s_w);
  const auto out_h = (in_h + pad.top + pad.bottom - k_h) / s_h + 1;
  const auto out_w = (in_w + pad.left + pad.right - k_w) / s_w + 1;
  if (out_h <= 0 || out_w <= 0) throw InferenceError("onnx: Conv output would be empty");
  if (bias && bias->numel() != static_cast<std::size_t>(c_out))
    throw InferenceError("onnx: Conv bias size mismatch on node '" + node.name + "'");

  Tensor y;
  y.dims = {1, c_out, out_h, out_w};
  y.data.assign(y.numel(), 0.0f);

  const std::int64_t patch = c_in * k_h * k_w;
  const std::int64_t pixels = out_h * out_w;
  // Bound the im2col scratch to ~16 MiB.
  const std::int64_t block = std::max<std::int64_t>(1, (std::int64_t{1} << 22) / patch);
  std::vector<float> cols(static_cast<std::size_t>(std::min(block, pixels) * patch));

  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  // Weight [M, K] row-major is the same memory as a column-major K x M matrix.
  Eigen::Map<const Eigen::MatrixXf> weights(w.data.data(), patch, c_out);

  for (std::int64_t p0 = 0; p0 < pixels; p0 += block) {
    const std::int64_t count = std::min(block, pixels - p0);
    for (std::int64_t p = 0; p < count; ++p) {
      const std::int64_t oh = (p0 + p) / out_w, ow = (p0 + p) % out_w;
      float* col = cols.data() + p * patch;
      for (std::int64_t c = 0; c < c_in; ++c) {
        const float* plane = x.data.data() + c * in_h * in_w;
        for (std::int64_t ky = 0; ky < k_h; ++ky) {
          const std::int64_t iy = oh * s_h - pad.top + ky;
          for (std::int64_t kx = 0; kx < k_w; ++kx) {
            const std::int64_t ix = ow * s_w - pad.left + kx;
            *col++ = (iy >= 0 && iy < in_h && ix >= 0 && ix < in_w) ? plane[iy * in_w + ix] : 0.0f;
          }
        }
      }
    }
    Eigen::Map<const RowMajor> patches(cols.data(), count, patch);
    Eigen::Map<Eigen::MatrixXf, 0, Eigen::OuterStride<>> out(y.data.data() + p0, count, c_out,
                                                              Eigen::OuterStride<>(pixels));
    out.noalias() = patches * weights;
  }
  if (bias) {
    for (std::int64_t m = 0; m < c_out; ++m) {
      float* plane = y.data.data() + m * pixels;
      const float b = bias->data[static_cast<std::size_t>(m)];
      for (std::int64_t p = 0; p < pixels; ++p) plane[p] += b;
    }
  }
  return y;
}

inline Tensor relu(Tensor x) {
  for (auto& v : x.data) v = v > 0.0f ? v : 0.0f;
  return x;
}

inline Tensor max_pool(const Node& node, const Tensor& x) {
  require_rank4_batch1(x, node);
  const auto kernel = node.attr_ints("kernel_shape", {});
  if (kernel.size() != 2) throw InferenceError("onnx: MaxPool needs a 2-D kernel_shape");
  for (auto d : node.attr_ints("dilations", {1, 1}))
    if (d != 1) throw InferenceError("onnx: dilated MaxPool is not supported");
  const auto strides = node.attr_ints("strides", {1, 1});
  const auto channels = x.dims[1], in_h = x.dims[2], in_w = x.dims[3];
  const auto k_h = kernel[0], k_w = kernel[1];
  const auto s_h = strides.at(0), s_w = strides.at(1);
  const auto pad = resolve_padding(node, in_h, in_w, k_h, k_w, s_h, s_w);
  const bool ceil_mode = node.attr_int("ceil_mode", 0) != 0;
  auto out_dim = [&](std::int64_t in, std::int64_t lo, std::int64_t hi, std::int64_t k,
                     std::int64_t s) {
    const auto span = in + lo + hi - k;
    return (ceil_mode ? (span + s - 1) / s : span / s) + 1;
  };
  const auto out_h = out_dim(in_h, pad.top, pad.bottom, k_h, s_h);
  const auto out_w = out_dim(in_w, pad.left, pad.right, k_w, s_w);
  Tensor y;
  y.dims = {1, channels, out_h, out_w};
  y.data.resize(y.numel());
  for (std::int64_t c = 0; c < channels; ++c) {
    const float* plane = x.data.data() + c * in_h * in_w;
    float* out = y.data.data() + c * out_h * out_w;
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        float best = -std::numeric_limits<float>::infinity();
        for (std::int64_t ky = 0; ky < k_h; ++ky) {
          const auto iy = oh * s_h - pad.top + ky;
          if (iy < 0 || iy >= in_h) continue;
          for (std::int64_t kx = 0; kx < k_w; ++kx) {
            const auto ix = ow * s_w - pad.left + kx;
            if (ix < 0 || ix >= in_w) continue;
            best = std::max(best, plane[iy * in_w + ix]);
          }
        }
        out[oh * out_w + ow] = best;
      }
    }
  }
  return y;
}

inline std::vector<std::size_t> strides_of(const std::vector<std::int64_t>& dims) {
  std::vector<std::size_t> s(dims.size(), 1);
  for (std::size_t i = dims.size(); i-- > 1;) s[i - 1] = s[i] * static_cast<std::size_t>(dims[i]);
  return s;
}

inline Tensor transpose(const Node& node, const Tensor& x) {
  const auto rank = x.dims.size();
  auto perm = node.attr_ints("perm", {});
  if (perm.empty())
    for (std::size_t i = 0; i < rank; ++i) perm.push_back(static_cast<std::int64_t>(rank - 1 - i));
  if (perm.size() != rank) throw InferenceError("onnx: Transpose perm rank mismatch");
  Tensor y;
  y.dims.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) y.dims[i] = x.dims[static_cast<std::size_t>(perm[i])];
  y.data.resize(x.numel());
  const auto in_strides = strides_of(x.dims);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < y.data.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[static_cast<std::size_t>(perm[i])];
    y.data[flat] = x.data[src];
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < static_cast<std::size_t>(y.dims[i])) break;
      idx[i] = 0;
    }
  }
  return y;
}

/// Numpy-style broadcasting add where b broadcasts into a's shape.
inline Tensor add(const Node& node, Tensor a, const Tensor& b) {
  const auto rank = a.dims.size();
  if (b.dims.size() > rank) throw InferenceError("onnx: Add broadcast unsupported on '" + node.name + "'");
  std::vector<std::int64_t> bd(rank - b.dims.size(), 1);
  bd.insert(bd.end(), b.dims.begin(), b.dims.end());
  for (std::size_t i = 0; i < rank; ++i)
    if (bd[i] != 1 && bd[i] != a.dims[i])
      throw InferenceError("onnx: Add broadcast unsupported on '" + node.name + "'");
  const auto b_strides = strides_of(bd);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < a.data.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i)
      if (bd[i] != 1) src += idx[i] * b_strides[i];
    a.data[flat] += b.data[src];
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < static_cast<std::size_t>(a.dims[i])) break;
      idx[i] = 0;
    }
  }
  return a;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Execution

/// Runs the subgraph needed to produce `targets` from one graph input.
/// Stateless apart from the model it reads; one instance per worker.
class Executor {
 public:
  explicit Executor(std::shared_ptr<const Model> model) : model_(std::move(model)) {}

  [[nodiscard]] const Model& model() const { return *model_; }

  [[nodiscard]] bool produces(const std::string& name) const {
    const auto& g = model_->graph;
    if (g.initializers.count(name)) return true;
    for (const auto& in : g.inputs)
      if (in.name == name) return true;
    for (const auto& n : g.nodes)
      if (std::find(n.outputs.begin(), n.outputs.end(), name) != n.outputs.end()) return true;
    return false;
  }

  std::map<std::string, Tensor> run(const std::string& input_name, Tensor input,
                                    const std::vector<std::string>& targets) const {
    const auto& g = model_->graph;
    // Producer index for each tensor name.
    std::unordered_map<std::string, std::size_t> producer;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      for (const auto& out : g.nodes[i].outputs) producer[out] = i;

    // Backward closure of the nodes the targets depend on.
    std::vector<bool> needed(g.nodes.size(), false);
    std::vector<std::string> stack(targets.begin(), targets.end());
    std::set<std::string> seen;
    while (!stack.empty()) {
      auto name = stack.back();
      stack.pop_back();
      if (!seen.insert(name).second) continue;
      if (name == input_name || g.initializers.count(name)) continue;
      auto it = producer.find(name);
      if (it == producer.end()) throw InferenceError("onnx: tensor '" + name + "' is not produced by the graph");
      needed[it->second] = true;
      for (const auto& in : g.nodes[it->second].inputs)
        if (!in.empty()) stack.push_back(in);
    }

    // Remaining consumers, so intermediates can be released early.
    std::unordered_map<std::string, std::size_t> uses;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      if (needed[i])
        for (const auto& in : g.nodes[i].inputs) ++uses[in];
    const std::set<std::string> keep(targets.begin(), targets.end());

    std::unordered_map<std::string, Tensor> values;
    values.emplace(input_name, std::move(input));
    auto fetch = [&](const std::string& name) -> const Tensor& {
      auto it = values.find(name);
      if (it != values.end()) return it->second;
      auto init = g.initializers.find(name);
      if (init == g.initializers.end()) throw InferenceError("onnx: missing tensor '" + name + "'");
      return values.emplace(name, init->second.materialize()).first->second;
    };

    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      if (!needed[i]) continue;
      const auto& node = g.nodes[i];
      auto input_at = [&](std::size_t k) -> const Tensor& {
        if (k >= node.inputs.size() || node.inputs[k].empty())
          throw InferenceError("onnx: node '" + node.name + "' is missing input " + std::to_string(k));
        return fetch(node.inputs[k]);
      };
      Tensor out;
      const auto& op = node.op_type;
      if (op == "Conv") {
        const Tensor* bias = node.inputs.size() > 2 && !node.inputs[2].empty() ? &input_at(2) : nullptr;
        out = ops::conv(node, input_at(0), input_at(1), bias);
      } else if (op == "Relu") {
        out = ops::relu(input_at(0));
      } else if (op == "MaxPool") {
        out = ops::max_pool(node, input_at(0));
      } else if (op == "Transpose") {
        out = ops::transpose(node, input_at(0));
      } else if (op == "Identity" || op == "Dropout") {
        out = input_at(0);
      } else if (op == "Add") {
        out = ops::add(node, input_at(0), input_at(1));
      } else if (op == "Constant") {
        const auto* value = node.attr("value");
        if (!value || !value->t) throw InferenceError("onnx: Constant without tensor value");
        out = value->t->materialize();
      } else {
        throw InferenceError("onnx: unsupported operator '" + op + "' (node '" + node.name + "')");
      }
      for (const auto& in : node.inputs) {
        if (in.empty() || keep.count(in)) continue;
        if (--uses[in] == 0) values.erase(in);
      }
      values[node.outputs.at(0)] = std::move(out);
    }

    std::map<std::string, Tensor> result;
    for (const auto& t : targets) result[t] = fetch(t);
    return result;
  }

 private:
  std::shared_ptr<const Model> model_;
};

}  // namespace bodvw::onnx
