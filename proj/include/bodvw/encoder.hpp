#pragma once

// Bag-of-visual-words histograms and the two pipeline variants.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "bodvw/binary_io.hpp"
#include "bodvw/codebook.hpp"
#include "bodvw/deepfeatures.hpp"
#include "bodvw/error.hpp"
#include "bodvw/imageio.hpp"

namespace bodvw {

enum class HistogramNorm { kCounts, kL2, kL1 };

inline const char* to_string(HistogramNorm n) {
  switch (n) {
    case HistogramNorm::kCounts: return "counts";
    case HistogramNorm::kL2: return "l2";
    case HistogramNorm::kL1: return "l1";
  }
  return "?";
}

struct BoVWVector {
  std::vector<double> weights;
  HistogramNorm norm = HistogramNorm::kCounts;
  std::string codebook_hash;
  std::string provenance;
};

struct EncodeOptions {
  /// When set, the codebook's hash must equal this value.
  std::optional<std::string> expected_codebook_hash;
};

/// w_j = number of vectors whose nearest centroid is j.
inline BoVWVector encode_counts(const DeepFeatureSet& set, const Codebook& book,
                                const EncodeOptions& options = {}) {
  if (set.dim != book.dim)
    throw InvalidArgument("encode: feature dimension " + std::to_string(set.dim) +
                          " does not match codebook dimension " + std::to_string(book.dim));
  if (set.norm != book.norm)
    throw CompatibilityError(std::string("encode: features are ") + to_string(set.norm) +
                             " but the codebook was trained on " + to_string(book.norm));
  if (options.expected_codebook_hash && *options.expected_codebook_hash != book.hash)
    throw CompatibilityError("encode: codebook hash mismatch");
  std::vector<std::size_t> counts(book.k, 0);
  for (std::size_t i = 0; i < set.count; ++i) ++counts[nearest_centroid(set.vector(i), book.centroids, book.k).index];
  BoVWVector out;
  out.weights.assign(counts.begin(), counts.end());
  out.codebook_hash = book.hash;
  out.provenance = set.provenance;
  return out;
}

namespace detail {

inline BoVWVector finalize(BoVWVector hist, HistogramNorm tag, double norm) {
  if (hist.norm != HistogramNorm::kCounts)
    throw InvalidArgument(std::string("histogram is already normalized (") + to_string(hist.norm) + ")");
  const double denom = norm + kNormEpsilon;
  for (auto& w : hist.weights) w /= denom;
  hist.norm = tag;
  return hist;
}

}  // namespace detail

inline BoVWVector finalize_l2(BoVWVector hist) {
  const double norm = l2_norm(hist.weights);
  return detail::finalize(std::move(hist), HistogramNorm::kL2, norm);
}

inline BoVWVector finalize_l1(BoVWVector hist) {
  double sum = 0.0;
  for (double w : hist.weights) sum += w;
  return detail::finalize(std::move(hist), HistogramNorm::kL1, sum);
}

// ---------------------------------------------------------------------------
// Variants

/// kBoDVW: raw maps, L2 per vector, L2 histogram.
/// kDcfBoVW: L1 per vector, L1 histogram (the baseline).
enum class Variant { kBoDVW, kDcfBoVW };

inline const char* to_string(Variant v) { return v == Variant::kBoDVW ? "bodvw" : "dcf_bovw"; }

inline Variant parse_variant(const std::string& text) {
  if (text == "bodvw") return Variant::kBoDVW;
  if (text == "dcf_bovw") return Variant::kDcfBoVW;
  throw ConfigError("unknown variant '" + text + "' (expected bodvw or dcf_bovw)");
}

inline FeatureNorm feature_norm_for(Variant v) {
  return v == Variant::kBoDVW ? FeatureNorm::kL2PerVector : FeatureNorm::kL1PerVector;
}

/// Unroll and apply the variant's per-vector normalization.
inline DeepFeatureSet deep_features(const FeatureMap& map, Variant v) {
  auto raw = unroll(map);
  return v == Variant::kBoDVW ? l2_normalize_each(std::move(raw)) : l1_normalize_each(std::move(raw));
}

/// Count histogram followed by the variant's final normalization.
inline BoVWVector encode_features(const DeepFeatureSet& set, const Codebook& book, Variant v,
                                  const EncodeOptions& options = {}) {
  auto counts = encode_counts(set, book, options);
  return v == Variant::kBoDVW ? finalize_l2(std::move(counts)) : finalize_l1(std::move(counts));
}

inline BoVWVector encode_image(const FeatureMap& map, const Codebook& book, Variant v,
                               const EncodeOptions& options = {}) {
  return encode_features(deep_features(map, v), book, v, options);
}

// ---------------------------------------------------------------------------
// Feature CSV: header "path,label,w_1,...,w_k"

struct FeatureRow {
  std::string path;
  std::string label;
  std::vector<double> weights;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string feature_csv(const std::vector<FeatureRow>& rows) {
  if (rows.empty()) throw InvalidArgument("feature export: no rows");
  const auto k = rows.front().weights.size();
  std::string out = "path,label";
  for (std::size_t j = 1; j <= k; ++j) out += ",w_" + std::to_string(j);
  out += '\n';
  for (const auto& r : rows) {
    if (r.weights.size() != k) throw InvalidArgument("feature export: ragged rows");
    out += detail::csv_field(r.path) + "," + detail::csv_field(r.label);
    for (double w : r.weights) out += "," + format_double(w);
    out += '\n';
  }
  return out;
}

inline void write_feature_csv(const std::string& path, const std::vector<FeatureRow>& rows) {
  io::write_text_file(path, feature_csv(rows));
}

inline std::vector<FeatureRow> read_feature_csv(const std::string& path) {
  const auto lines = detail::text_lines(io::read_text_file(path));
  std::vector<FeatureRow> rows;
  std::size_t k = 0;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    auto fields = detail::split_csv_line(lines[n], n + 1);
    if (k == 0) {
      if (fields.size() < 3 || fields[0] != "path" || fields[1] != "label")
        throw ConfigError(path + ": expected header 'path,label,w_1..w_k'");
      k = fields.size() - 2;
      continue;
    }
    if (fields.size() != k + 2) throw ConfigError(path + ": wrong field count on line " + std::to_string(n + 1));
    FeatureRow row{fields[0], fields[1], {}};
    row.weights.reserve(k);
    for (std::size_t j = 2; j < fields.size(); ++j) {
      try {
        std::size_t used = 0;
        row.weights.push_back(std::stod(fields[j], &used));
        if (used != fields[j].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError(path + ": bad number on line " + std::to_string(n + 1));
      }
    }
    rows.push_back(std::move(row));
  }
  if (k == 0) throw ConfigError(path + ": missing header");
  return rows;
}

}  // namespace bodvw
