#pragma once

// Per-position deep feature vectors and their normalizations.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "bodvw/cnn_adapter.hpp"
#include "bodvw/error.hpp"

namespace bodvw {

/// Denominator guard in x / (||x|| + eps), shared by every normalization step.
inline constexpr double kNormEpsilon = 0.00000008;

enum class FeatureNorm { kRaw, kL2PerVector, kL1PerVector };

inline const char* to_string(FeatureNorm n) {
  switch (n) {
    case FeatureNorm::kRaw: return "raw";
    case FeatureNorm::kL2PerVector: return "l2_per_vector";
    case FeatureNorm::kL1PerVector: return "l1_per_vector";
  }
  return "?";
}

/// The H*W depth vectors of one image, row-major over (h, w).
struct DeepFeatureSet {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // count * dim
  FeatureNorm norm = FeatureNorm::kRaw;
  PoolingLayerId layer;
  std::string provenance;

  [[nodiscard]] std::span<const double> vector(std::size_t i) const {
    return {values.data() + i * dim, dim};
  }
  [[nodiscard]] std::span<double> vector(std::size_t i) { return {values.data() + i * dim, dim}; }
};

inline DeepFeatureSet unroll(const FeatureMap& map) {
  DeepFeatureSet set;
  set.count = map.height * map.width;
  set.dim = map.depth;
  set.layer = map.layer;
  set.provenance = map.provenance;
  set.values.assign(map.values.begin(), map.values.end());
  return set;
}

/// Inverse of unroll for raw sets.
inline FeatureMap reroll(const DeepFeatureSet& set) {
  if (set.norm != FeatureNorm::kRaw) throw InvalidArgument("reroll expects a raw feature set");
  FeatureMap map(set.layer, set.provenance);
  if (set.count != map.height * map.width || set.dim != map.depth)
    throw InvalidArgument("feature set shape does not match its layer");
  for (std::size_t i = 0; i < set.values.size(); ++i) map.values[i] = static_cast<float>(set.values[i]);
  return map;
}

namespace detail {

template <typename Norm>
DeepFeatureSet normalize_each(DeepFeatureSet set, FeatureNorm tag, Norm&& norm) {
  if (set.norm != FeatureNorm::kRaw)
    throw InvalidArgument(std::string("feature set is already normalized (") + to_string(set.norm) + ")");
  for (std::size_t i = 0; i < set.count; ++i) {
    auto x = set.vector(i);
    const double denom = norm(x) + kNormEpsilon;
    for (auto& v : x) v /= denom;
  }
  set.norm = tag;
  return set;
}

}  // namespace detail

inline double l2_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline double l1_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += std::abs(v);
  return s;
}

/// x_i <- x_i / (||x_i||_2 + eps) for every position.
inline DeepFeatureSet l2_normalize_each(DeepFeatureSet set) {
  return detail::normalize_each(std::move(set), FeatureNorm::kL2PerVector,
                                [](std::span<const double> x) { return l2_norm(x); });
}

/// x_i <- x_i / (||x_i||_1 + eps); the baseline's per-vector treatment.
inline DeepFeatureSet l1_normalize_each(DeepFeatureSet set) {
  return detail::normalize_each(std::move(set), FeatureNorm::kL1PerVector,
                                [](std::span<const double> x) { return l1_norm(x); });
}

}  // namespace bodvw
