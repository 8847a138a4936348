#pragma once

// Pooling-layer taps on a pre-trained VGG16 network and the feature-map cache.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bodvw/binary_io.hpp"
#include "bodvw/error.hpp"
#include "bodvw/hashing.hpp"
#include "bodvw/imageio.hpp"
#include "bodvw/onnx.hpp"

namespace bodvw {

/// One of the five max-pooling layers p_1..p_5 of VGG16.
class PoolingLayerId {
 public:
  constexpr PoolingLayerId() = default;
  constexpr explicit PoolingLayerId(int index) : index_(index) {
    if (index < 1 || index > 5) throw InvalidArgument("pooling layer index must be in 1..5");
  }

  [[nodiscard]] constexpr int index() const { return index_; }
  [[nodiscard]] std::string name() const { return "p_" + std::to_string(index_); }

  /// Accepts "4", "p4" or "p_4".
  static PoolingLayerId parse(const std::string& text) {
    std::string digits = text;
    if (digits.starts_with("p_")) digits.erase(0, 2);
    else if (digits.starts_with("p")) digits.erase(0, 1);
    if (digits.size() != 1 || digits[0] < '1' || digits[0] > '5')
      throw ConfigError("invalid pooling layer '" + text + "' (expected p_1..p_5)");
    return PoolingLayerId(digits[0] - '0');
  }

  constexpr bool operator==(const PoolingLayerId&) const = default;

 private:
  int index_ = 4;
};

inline const std::array<PoolingLayerId, 5> kAllPoolingLayers = {
    PoolingLayerId(1), PoolingLayerId(2), PoolingLayerId(3), PoolingLayerId(4), PoolingLayerId(5)};

struct LayerShape {
  std::size_t height;
  std::size_t width;
  std::size_t depth;

  constexpr bool operator==(const LayerShape&) const = default;
  [[nodiscard]] constexpr std::size_t positions() const { return height * width; }
};

/// Output shape of pooling layer p_i for a 224x224x3 input.
constexpr LayerShape layer_shape(PoolingLayerId layer) {
  constexpr std::array<LayerShape, 5> kShapes = {{
      {112, 112, 64}, {56, 56, 128}, {28, 28, 256}, {14, 14, 512}, {7, 7, 512}}};
  return kShapes[static_cast<std::size_t>(layer.index() - 1)];
}

/// Inverse of layer_shape; the five shapes are distinct.
inline std::optional<PoolingLayerId> layer_for_shape(const LayerShape& shape) {
  for (auto layer : kAllPoolingLayers)
    if (layer_shape(layer) == shape) return layer;
  return std::nullopt;
}

/// H x W x L activations in row-major (h, w, l) order.
struct FeatureMap {
  PoolingLayerId layer;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t depth = 0;
  std::vector<float> values;
  std::string provenance;

  FeatureMap() = default;
  FeatureMap(PoolingLayerId l, std::string prov = {}) : layer(l), provenance(std::move(prov)) {
    const auto s = layer_shape(l);
    height = s.height;
    width = s.width;
    depth = s.depth;
    values.assign(height * width * depth, 0.0f);
  }

  float& at(std::size_t h, std::size_t w, std::size_t l) { return values[(h * width + w) * depth + l]; }
  [[nodiscard]] float at(std::size_t h, std::size_t w, std::size_t l) const {
    return values[(h * width + w) * depth + l];
  }

  bool operator==(const FeatureMap&) const = default;
};

/// Throws if the map's shape disagrees with its layer or holds invalid values.
inline void validate_feature_map(const FeatureMap& map) {
  const auto expected = layer_shape(map.layer);
  if (LayerShape{map.height, map.width, map.depth} != expected)
    throw InvalidArgument("feature map shape does not match layer " + map.layer.name());
  if (map.values.size() != map.height * map.width * map.depth)
    throw InvalidArgument("feature map buffer size mismatch");
  for (float v : map.values)
    if (!std::isfinite(v) || v < 0.0f)
      throw InvalidArgument("feature map values must be finite and non-negative");
}

// ---------------------------------------------------------------------------
// Model adapter

/// Per-layer tensor-name overrides; empty entries use the built-in table.
using TapOverrides = std::array<std::string, 5>;

/// Exported tensor names tried for p_i, in order. Covers Keras-style exports,
/// tf2onnx suffixes and the gluon names of the ONNX model zoo.
inline std::vector<std::string> tap_candidates(PoolingLayerId layer) {
  const auto i = std::to_string(layer.index());
  const auto zoo = std::to_string(layer.index() - 1);
  return {"block" + i + "_pool", "block" + i + "_pool/MaxPool:0",
          "vgg16/block" + i + "_pool/MaxPool:0", "vgg0_pool" + zoo + "_fwd", "pool" + i};
}

enum class InputLayout { kNchw, kNhwc };

/// Immutable, shareable view of a loaded VGG16 interchange model.
class Vgg16Model {
 public:
  static std::shared_ptr<const Vgg16Model> load(const std::string& path, TapOverrides overrides = {}) {
    if (!std::filesystem::exists(path)) throw IoError("model file not found: " + path);
    auto buffer = std::make_shared<const std::vector<std::uint8_t>>(io::read_file(path));
    auto hash = hashing::sha256_hex(*buffer);
    onnx::Model model;
    try {
      model = onnx::parse_model(buffer);
    } catch (const FormatError& e) {
      throw FormatError(path + ": " + e.what());
    }
    return std::shared_ptr<const Vgg16Model>(
        new Vgg16Model(std::make_shared<const onnx::Model>(std::move(model)), std::move(hash),
                       std::move(overrides)));
  }

  [[nodiscard]] const std::string& hash() const { return hash_; }
  [[nodiscard]] const std::string& input_name() const { return input_name_; }
  [[nodiscard]] InputLayout layout() const { return layout_; }
  [[nodiscard]] const std::shared_ptr<const onnx::Model>& graph() const { return model_; }

  /// Tensor name tapped for the layer; throws CompatibilityError if absent.
  [[nodiscard]] std::string tap_name(PoolingLayerId layer) const {
    const auto& g = model_->graph;
    auto produced = [&](const std::string& name) {
      for (const auto& n : g.nodes)
        for (const auto& out : n.outputs)
          if (out == name) return true;
      return false;
    };
    const auto& override_name = overrides_[static_cast<std::size_t>(layer.index() - 1)];
    if (!override_name.empty()) {
      if (!produced(override_name))
        throw CompatibilityError("configured tap '" + override_name + "' for " + layer.name() +
                                 " is not produced by the model");
      return override_name;
    }
    for (const auto& candidate : tap_candidates(layer))
      if (produced(candidate)) return candidate;
    // Fall back to the i-th MaxPool node in graph order.
    int seen = 0;
    for (const auto& n : g.nodes)
      if (n.op_type == "MaxPool" && ++seen == layer.index()) return n.outputs.at(0);
    throw CompatibilityError("model has no output for pooling layer " + layer.name());
  }

 private:
  Vgg16Model(std::shared_ptr<const onnx::Model> model, std::string hash, TapOverrides overrides)
      : model_(std::move(model)), hash_(std::move(hash)), overrides_(std::move(overrides)) {
    const auto& g = model_->graph;
    for (const auto& in : g.inputs) {
      if (g.initializers.count(in.name)) continue;
      if (!input_name_.empty()) throw CompatibilityError("model has more than one data input");
      input_name_ = in.name;
      if (in.dims.size() != 4) throw CompatibilityError("model input must be rank 4");
      if (in.dims[1] == 3) layout_ = InputLayout::kNchw;
      else if (in.dims[3] == 3) layout_ = InputLayout::kNhwc;
      else throw CompatibilityError("model input must have 3 channels");
      for (auto d : in.dims)
        if (d > 0 && d != 1 && d != 3 && d != static_cast<std::int64_t>(kInputSize))
          throw CompatibilityError("model input is not 224x224x3");
    }
    if (input_name_.empty()) throw CompatibilityError("model has no data input");
  }

  std::shared_ptr<const onnx::Model> model_;
  std::string hash_;
  TapOverrides overrides_;
  std::string input_name_;
  InputLayout layout_ = InputLayout::kNchw;
};

/// Per-worker inference session. Not for concurrent use; create one per thread.
class InferenceSession {
 public:
  explicit InferenceSession(std::shared_ptr<const Vgg16Model> model)
      : model_(std::move(model)), executor_(model_->graph()) {}

  [[nodiscard]] const Vgg16Model& model() const { return *model_; }

  FeatureMap extract(const ModelInput& input, PoolingLayerId layer) const {
    const auto tap = model_->tap_name(layer);
    onnx::Tensor x;
    constexpr auto n = static_cast<std::int64_t>(kInputSize);
    x.data.resize(input.tensor.size());
    if (model_->layout() == InputLayout::kNhwc) {
      x.dims = {1, n, n, 3};
      x.data = input.tensor;
    } else {
      x.dims = {1, 3, n, n};
      for (std::size_t h = 0; h < kInputSize; ++h)
        for (std::size_t w = 0; w < kInputSize; ++w)
          for (std::size_t c = 0; c < 3; ++c)
            x.data[(c * kInputSize + h) * kInputSize + w] = input.at(h, w, c);
    }
    auto outputs = executor_.run(model_->input_name(), std::move(x), {tap});
    const auto& y = outputs.at(tap);

    const auto shape = layer_shape(layer);
    if (y.dims.size() != 4 || y.dims[0] != 1)
      throw CompatibilityError("tap '" + tap + "' is not a rank-4 batch-1 tensor");
    const auto d1 = static_cast<std::size_t>(y.dims[1]), d2 = static_cast<std::size_t>(y.dims[2]),
               d3 = static_cast<std::size_t>(y.dims[3]);
    FeatureMap map(layer, input.provenance);
    if (d1 == shape.depth && d2 == shape.height && d3 == shape.width) {
      for (std::size_t l = 0; l < shape.depth; ++l)
        for (std::size_t h = 0; h < shape.height; ++h)
          for (std::size_t w = 0; w < shape.width; ++w)
            map.at(h, w, l) = y.data[(l * shape.height + h) * shape.width + w];
    } else if (d1 == shape.height && d2 == shape.width && d3 == shape.depth) {
      map.values = y.data;
    } else {
      throw CompatibilityError("tap '" + tap + "' has shape [" + std::to_string(d1) + "," +
                               std::to_string(d2) + "," + std::to_string(d3) +
                               "], expected the " + layer.name() + " shape");
    }
    for (float v : map.values)
      if (!std::isfinite(v)) throw InferenceError("non-finite activation at tap '" + tap + "'");
    return map;
  }

 private:
  std::shared_ptr<const Vgg16Model> model_;
  onnx::Executor executor_;
};

inline FeatureMap extract_feature_map(const ModelInput& input, PoolingLayerId layer,
                                      const std::shared_ptr<const Vgg16Model>& model) {
  return InferenceSession(model).extract(input, layer);
}

// ---------------------------------------------------------------------------
// Feature-map cache file
//
//   "BDVWFMAP" | u32 version=1 | u32 H | u32 W | u32 L | H*W*L f32 (h, w, l) |
//   u32 length + UTF-8 provenance

inline constexpr char kFeatureMapMagic[8] = {'B', 'D', 'V', 'W', 'F', 'M', 'A', 'P'};
inline constexpr std::uint32_t kFeatureMapVersion = 1;

inline std::vector<std::uint8_t> encode_feature_map(const FeatureMap& map) {
  io::ByteWriter w;
  w.put_raw({kFeatureMapMagic, 8});
  w.put<std::uint32_t>(kFeatureMapVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.depth));
  w.put_array<float>(map.values);
  w.put_string(map.provenance);
  return w.bytes();
}

inline FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  if (r.get_raw(8) != std::string_view(kFeatureMapMagic, 8))
    throw FormatError(what + ": not a feature-map file (bad magic)");
  if (const auto v = r.get<std::uint32_t>(); v != kFeatureMapVersion)
    throw FormatError(what + ": unsupported feature-map version " + std::to_string(v));
  LayerShape shape{r.get<std::uint32_t>(), r.get<std::uint32_t>(), r.get<std::uint32_t>()};
  const auto layer = layer_for_shape(shape);
  if (!layer) throw FormatError(what + ": shape does not match any pooling layer");
  FeatureMap map(*layer);
  r.get_array<float>(map.values);
  map.provenance = r.get_string();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return map;
}

inline void save_feature_map(const FeatureMap& map, const std::string& path) {
  io::write_file(path, encode_feature_map(map));
}

inline FeatureMap load_feature_map(const std::string& path) {
  return decode_feature_map(io::read_file(path), path);
}

/// Key over everything the extracted activations depend on.
inline std::string feature_cache_key(const std::string& image_path, const std::string& content_hash,
                                     PoolingLayerId layer, const std::string& model_hash,
                                     const std::string& preprocess_tag = kPreprocessTag) {
  return hashing::sha256_hex(image_path + '\n' + content_hash + '\n' + layer.name() + '\n' +
                             model_hash + '\n' + preprocess_tag);
}

class FeatureCache {
 public:
  explicit FeatureCache(std::string dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  [[nodiscard]] std::string path_for(const std::string& key) const {
    return (std::filesystem::path(dir_) / (key + ".fmap")).string();
  }

  /// Cached map if present and well-formed for the layer; nullopt otherwise.
  [[nodiscard]] std::optional<FeatureMap> lookup(const std::string& key, PoolingLayerId layer) const {
    const auto path = path_for(key);
    if (!std::filesystem::exists(path)) return std::nullopt;
    try {
      auto map = load_feature_map(path);
      if (map.layer != layer) return std::nullopt;
      return map;
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  void store(const std::string& key, const FeatureMap& map) const { save_feature_map(map, path_for(key)); }

  [[nodiscard]] const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
};

}  // namespace bodvw
