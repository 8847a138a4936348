#pragma once

// Visual-word dictionary: k-means over deep features and exact nearest-centroid
// assignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bodvw/binary_io.hpp"
#include "bodvw/deepfeatures.hpp"
#include "bodvw/error.hpp"
#include "bodvw/hashing.hpp"
#include "bodvw/parallel.hpp"

namespace bodvw {

struct KMeansConfig {
  std::size_t k = 400;
  std::size_t max_iterations = 300;
  double rel_tolerance = 1e-4;
  std::size_t n_restarts = 3;
  std::uint64_t seed = 0;
  std::string init = "kmeanspp";
  /// "hartigan": after Lloyd converges, move single points while that lowers
  /// the inertia, then resume Lloyd. "none": plain Lloyd.
  std::string refine = "hartigan";

  void validate() const {
    if (k < 2) throw ConfigError("k-means: k must be >= 2");
    if (max_iterations < 1) throw ConfigError("k-means: max_iterations must be >= 1");
    if (!(rel_tolerance >= 0.0)) throw ConfigError("k-means: rel_tolerance must be >= 0");
    if (n_restarts < 1) throw ConfigError("k-means: n_restarts must be >= 1");
    if (init != "kmeanspp") throw ConfigError("k-means: unsupported init '" + init + "'");
    if (refine != "hartigan" && refine != "none")
      throw ConfigError("k-means: refine must be 'hartigan' or 'none', got '" + refine + "'");
  }

  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "k=" << k << ";max_iterations=" << max_iterations << ";rel_tolerance=" << rel_tolerance
       << ";n_restarts=" << n_restarts << ";seed=" << seed << ";init=" << init << ";refine=" << refine;
    return os.str();
  }
};

struct Codebook {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k * dim, row-major
  PoolingLayerId layer;
  FeatureNorm norm = FeatureNorm::kL2PerVector;  // normalization of the training features
  std::uint64_t seed = 0;
  double inertia = 0.0;
  std::uint32_t iterations_run = 0;
  std::string config_hash;

  /// Content hash of the serialized codebook; filled by train/load.
  std::string hash;
  /// Provenance of the images whose features built the pool. Not persisted.
  std::vector<std::string> sources;

  [[nodiscard]] std::span<const double> centroid(std::size_t j) const {
    return {centroids.data() + j * dim, dim};
  }

  /// Field equality over the persisted state.
  [[nodiscard]] bool same_fields(const Codebook& o) const {
    return k == o.k && dim == o.dim && centroids == o.centroids && layer == o.layer &&
           norm == o.norm && seed == o.seed && inertia == o.inertia &&
           iterations_run == o.iterations_run && config_hash == o.config_hash;
  }
};

// ---------------------------------------------------------------------------
// Distances and assignment

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct NearestCentroid {
  std::size_t index;
  double distance;  // squared Euclidean
};

/// Exact argmin over j of ||x - c_j||^2, ties to the lowest j. Partial sums
/// only grow, so a centroid is abandoned once it strictly exceeds the best.
inline NearestCentroid nearest_centroid(std::span<const double> x, std::span<const double> centroids,
                                        std::size_t k) {
  const std::size_t dim = x.size();
  NearestCentroid best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t j = 0; j < k; ++j) {
    const double* c = centroids.data() + j * dim;
    double s = 0.0;
    std::size_t i = 0;
    for (; i < dim; ++i) {
      const double d = x[i] - c[i];
      s += d * d;
      if ((i & 15) == 15 && s > best.distance) break;
    }
    if (i == dim && s < best.distance) best = {j, s};
  }
  return best;
}

inline std::size_t assign(std::span<const double> x, const Codebook& book) {
  if (x.size() != book.dim)
    throw InvalidArgument("assign: vector dimension " + std::to_string(x.size()) +
                          " does not match codebook dimension " + std::to_string(book.dim));
  return nearest_centroid(x, book.centroids, book.k).index;
}

// ---------------------------------------------------------------------------
// Lloyd's algorithm

struct KMeansResult {
  std::vector<double> centroids;
  std::vector<std::size_t> labels;
  double inertia = 0.0;
  std::size_t iterations = 0;
  /// Inertia after the initial assignment and after every full iteration.
  std::vector<double> inertia_history;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t sample_weighted(std::span<const double> weights, double total, std::mt19937_64& rng) {
  const double target = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (acc > target && weights[i] > 0.0) return i;
  }
  // Rounding left the target past the end; return the last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return 0;
}

// Greedy k-means++: each new centre is the best of several D^2 samples.
inline std::vector<double> kmeanspp_init(std::span<const double> points, std::size_t n, std::size_t dim,
                                         std::size_t k, std::mt19937_64& rng, std::size_t workers) {
  std::vector<double> centroids(k * dim);
  auto point = [&](std::size_t i) { return points.subspan(i * dim, dim); };
  std::vector<bool> chosen(n, false);

  std::size_t first = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
  std::copy_n(point(first).begin(), dim, centroids.begin());
  chosen[first] = true;

  std::vector<double> d2(n);
  parallel_for(n, workers, [&](std::size_t i) { d2[i] = squared_distance(point(i), point(first)); });

  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<double> candidate_d2(n);
  std::vector<double> best_d2(n);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n;
    if (total <= 0.0) {
      // Every point coincides with a centre; take the first unused one.
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
      if (pick == n) pick = 0;
      for (std::size_t i = 0; i < n; ++i) best_d2[i] = std::min(d2[i], squared_distance(point(i), point(pick)));
    } else {
      double best_potential = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t cand = sample_weighted(d2, total, rng);
        parallel_for(n, workers, [&](std::size_t i) {
          candidate_d2[i] = std::min(d2[i], squared_distance(point(i), point(cand)));
        });
        double potential = 0.0;
        for (double v : candidate_d2) potential += v;
        if (potential < best_potential) {
          best_potential = potential;
          pick = cand;
          best_d2.swap(candidate_d2);
        }
      }
    }
    chosen[pick] = true;
    d2.swap(best_d2);
    std::copy_n(point(pick).begin(), dim, centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }
  return centroids;
}

inline double assign_all(std::span<const double> points, std::size_t n, std::size_t dim,
                         std::span<const double> centroids, std::size_t k,
                         std::vector<std::size_t>& labels, std::vector<double>& dists,
                         std::size_t workers) {
  parallel_for(n, workers, [&](std::size_t i) {
    const auto nc = nearest_centroid(points.subspan(i * dim, dim), centroids, k);
    labels[i] = nc.index;
    dists[i] = nc.distance;
  });
  double inertia = 0.0;
  for (double d : dists) inertia += d;
  return inertia;
}

// Mean update in point order, then reseed empty clusters to the point farthest
// from its own (updated) centroid, ties to the lowest point index.
inline void update_centroids(std::span<const double> points, std::size_t n, std::size_t dim,
                             std::vector<double>& centroids, std::size_t k,
                             std::span<const std::size_t> labels) {
  std::vector<double> sums(k * dim, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = labels[i];
    ++counts[j];
    double* s = sums.data() + j * dim;
    const double* x = points.data() + i * dim;
    for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
  }
  bool any_empty = false;
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] == 0) {
      any_empty = true;
      continue;
    }
    for (std::size_t d = 0; d < dim; ++d)
      centroids[j * dim + d] = sums[j * dim + d] / static_cast<double>(counts[j]);
  }
  if (!any_empty) return;

  std::vector<double> own(n);
  for (std::size_t i = 0; i < n; ++i)
    own[i] = squared_distance(points.subspan(i * dim, dim),
                              std::span<const double>(centroids).subspan(labels[i] * dim, dim));
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] != 0) continue;
    std::size_t far = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (own[i] > own[far]) far = i;
    std::copy_n(points.data() + far * dim, dim, centroids.data() + j * dim);
    own[far] = -1.0;  // never pick the same point twice
  }
}

/// One Hartigan sweep over the partition given by `labels`: point i leaves
/// cluster a for b when n_b/(n_b+1) d_b^2 < n_a/(n_a-1) d_a^2, which strictly
/// lowers the inertia. Means are updated after each move. Returns true if any
/// point moved.
inline bool hartigan_pass(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                          std::vector<std::size_t>& labels) {
  std::vector<double> means(k * dim, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++counts[labels[i]];
    for (std::size_t d = 0; d < dim; ++d) means[labels[i] * dim + d] += points[i * dim + d];
  }
  for (std::size_t j = 0; j < k; ++j)
    if (counts[j] > 0)
      for (std::size_t d = 0; d < dim; ++d) means[j * dim + d] /= static_cast<double>(counts[j]);
  auto mean = [&](std::size_t j) { return std::span<const double>(means).subspan(j * dim, dim); };

  bool moved = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = labels[i];
    if (counts[a] <= 1) continue;
    const auto x = points.subspan(i * dim, dim);
    const double na = static_cast<double>(counts[a]);
    const double remove = na / (na - 1.0) * squared_distance(x, mean(a));
    std::size_t best = a;
    double best_add = remove * (1.0 - 1e-12);  // strict gain, immune to rounding cycles
    for (std::size_t b = 0; b < k; ++b) {
      if (b == a) continue;
      const double nb = static_cast<double>(counts[b]);
      const double add = nb / (nb + 1.0) * squared_distance(x, mean(b));
      if (add < best_add) {
        best_add = add;
        best = b;
      }
    }
    if (best == a) continue;
    const double nb = static_cast<double>(counts[best]);
    for (std::size_t d = 0; d < dim; ++d) {
      means[a * dim + d] = (na * means[a * dim + d] - x[d]) / (na - 1.0);
      means[best * dim + d] = (nb * means[best * dim + d] + x[d]) / (nb + 1.0);
    }
    --counts[a];
    ++counts[best];
    labels[i] = best;
    moved = true;
  }
  return moved;
}

}  // namespace detail

/// One k-means run from a given initialization. With `hartigan`, a converged
/// Lloyd state is refined by single-point moves and Lloyd resumes; both steps
/// share the iteration budget and never raise the inertia.
inline KMeansResult lloyd(std::span<const double> points, std::size_t n, std::size_t dim,
                          std::vector<double> centroids, std::size_t k, std::size_t max_iterations,
                          double rel_tolerance, std::size_t workers = 1, bool hartigan = false) {
  KMeansResult r;
  r.labels.resize(n);
  std::vector<double> dists(n);
  double inertia = detail::assign_all(points, n, dim, centroids, k, r.labels, dists, workers);
  r.inertia_history.push_back(inertia);
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    detail::update_centroids(points, n, dim, centroids, k, r.labels);
    const double next = detail::assign_all(points, n, dim, centroids, k, r.labels, dists, workers);
    r.inertia_history.push_back(next);
    r.iterations = it;
    const bool converged = inertia - next <= rel_tolerance * inertia;
    inertia = next;
    if (!converged) continue;
    // The next update recomputes the means of the refined partition.
    if (!hartigan || it == max_iterations || !detail::hartigan_pass(points, n, dim, k, r.labels)) break;
  }
  r.centroids = std::move(centroids);
  r.inertia = inertia;
  return r;
}

/// k-means++ with restarts over a flat point matrix; keeps the lowest-inertia
/// run (earliest on ties). Centroids are rounded to float32, the persisted
/// precision, and labels/inertia are recomputed against the rounded values.
inline KMeansResult kmeans(std::span<const double> points, std::size_t dim, const KMeansConfig& cfg,
                           std::size_t workers = 1) {
  cfg.validate();
  if (dim == 0 || points.size() % dim != 0) throw InvalidArgument("k-means: bad point matrix");
  const std::size_t n = points.size() / dim;
  if (n < cfg.k)
    throw InvalidArgument("k-means: " + std::to_string(n) + " vectors is fewer than k=" + std::to_string(cfg.k));
  for (double v : points)
    if (!std::isfinite(v)) throw InvalidArgument("k-means: non-finite value in input");

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t restart = 0; restart < cfg.n_restarts; ++restart) {
    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (restart + 1)));
    auto init = detail::kmeanspp_init(points, n, dim, cfg.k, rng, workers);
    auto run = lloyd(points, n, dim, std::move(init), cfg.k, cfg.max_iterations, cfg.rel_tolerance, workers,
                     cfg.refine == "hartigan");
    if (run.inertia < best.inertia) best = std::move(run);
  }
  for (auto& c : best.centroids) c = static_cast<double>(static_cast<float>(c));
  std::vector<double> dists(n);
  best.inertia = detail::assign_all(points, n, dim, best.centroids, cfg.k, best.labels, dists, workers);
  return best;
}

// ---------------------------------------------------------------------------
// Codebook file
//
//   "BDVWCDBK" | u32 version=1 | u32 k | u32 L | u64 seed | f64 inertia |
//   u32 iterations | k*L f32 | u32 CRC32 of everything before it
//   followed by the metadata trailer:
//   u32 layer | u32 norm | u32 length + config hash | u32 CRC32 of the trailer

inline constexpr char kCodebookMagic[8] = {'B', 'D', 'V', 'W', 'C', 'D', 'B', 'K'};
inline constexpr std::uint32_t kCodebookVersion = 1;

inline std::vector<std::uint8_t> encode_codebook(const Codebook& book) {
  io::ByteWriter w;
  w.put_raw({kCodebookMagic, 8});
  w.put<std::uint32_t>(kCodebookVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(book.k));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(book.dim));
  w.put<std::uint64_t>(book.seed);
  w.put<double>(book.inertia);
  w.put<std::uint32_t>(book.iterations_run);
  std::vector<float> values(book.centroids.begin(), book.centroids.end());
  w.put_array<float>(values);
  w.put<std::uint32_t>(hashing::crc32(w.bytes()));

  io::ByteWriter trailer;
  trailer.put<std::uint32_t>(static_cast<std::uint32_t>(book.layer.index()));
  trailer.put<std::uint32_t>(static_cast<std::uint32_t>(book.norm));
  trailer.put_string(book.config_hash);
  trailer.put<std::uint32_t>(hashing::crc32(trailer.bytes()));
  w.put_bytes(trailer.bytes());
  return w.bytes();
}

inline std::string codebook_hash(const Codebook& book) {
  return hashing::sha256_hex(encode_codebook(book));
}

inline Codebook decode_codebook(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  if (r.get_raw(8) != std::string_view(kCodebookMagic, 8))
    throw FormatError(what + ": not a codebook file (bad magic)");
  if (const auto v = r.get<std::uint32_t>(); v != kCodebookVersion)
    throw FormatError(what + ": unsupported codebook version " + std::to_string(v));
  Codebook book;
  book.k = r.get<std::uint32_t>();
  book.dim = r.get<std::uint32_t>();
  book.seed = r.get<std::uint64_t>();
  book.inertia = r.get<double>();
  book.iterations_run = r.get<std::uint32_t>();
  if (book.k < 2 || book.dim == 0) throw FormatError(what + ": invalid codebook dimensions");
  if (book.k * book.dim * 4 > r.remaining()) throw FormatError(what + ": truncated file");
  std::vector<float> values(book.k * book.dim);
  r.get_array<float>(values);
  const auto body_end = r.position();
  const auto crc = r.get<std::uint32_t>();
  if (crc != hashing::crc32(bytes.first(body_end))) throw FormatError(what + ": checksum mismatch");
  book.centroids.assign(values.begin(), values.end());

  if (r.remaining() > 0) {
    const auto trailer_start = r.position();
    const auto layer = r.get<std::uint32_t>();
    const auto norm = r.get<std::uint32_t>();
    book.config_hash = r.get_string();
    const auto trailer_end = r.position();
    if (r.get<std::uint32_t>() != hashing::crc32(bytes.subspan(trailer_start, trailer_end - trailer_start)))
      throw FormatError(what + ": metadata checksum mismatch");
    if (layer < 1 || layer > 5 || norm > 2) throw FormatError(what + ": invalid metadata");
    book.layer = PoolingLayerId(static_cast<int>(layer));
    book.norm = static_cast<FeatureNorm>(norm);
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  }
  for (double c : book.centroids)
    if (!std::isfinite(c)) throw FormatError(what + ": non-finite centroid");
  book.hash = hashing::sha256_hex(bytes);
  return book;
}

inline void save_codebook(const Codebook& book, const std::string& path) {
  io::write_file(path, encode_codebook(book));
}

inline Codebook load_codebook(const std::string& path) {
  return decode_codebook(io::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Training

/// Pools every vector of the given (normalized) training sets and runs k-means.
inline Codebook train_codebook(std::span<const DeepFeatureSet> features, const KMeansConfig& cfg,
                               std::size_t workers = 1) {
  cfg.validate();
  if (features.empty()) throw InvalidArgument("train_codebook: no feature sets");
  const auto dim = features.front().dim;
  const auto norm = features.front().norm;
  const auto layer = features.front().layer;
  if (norm == FeatureNorm::kRaw)
    throw InvalidArgument("train_codebook: features must be normalized before clustering");
  std::size_t total = 0;
  for (const auto& f : features) {
    if (f.dim != dim) throw InvalidArgument("train_codebook: dimension mismatch across feature sets");
    if (f.norm != norm) throw InvalidArgument("train_codebook: mixed feature normalizations");
    if (f.layer != layer) throw InvalidArgument("train_codebook: mixed pooling layers");
    total += f.count;
  }
  std::vector<double> pool;
  pool.reserve(total * dim);
  for (const auto& f : features) pool.insert(pool.end(), f.values.begin(), f.values.end());

  auto result = kmeans(pool, dim, cfg, workers);
  Codebook book;
  book.k = cfg.k;
  book.dim = dim;
  book.centroids = std::move(result.centroids);
  book.layer = layer;
  book.norm = norm;
  book.seed = cfg.seed;
  book.inertia = result.inertia;
  book.iterations_run = static_cast<std::uint32_t>(result.iterations);
  book.config_hash = hashing::sha256_hex(cfg.canonical() + ";layer=" + layer.name() + ";norm=" + to_string(norm));
  for (const auto& f : features) book.sources.push_back(f.provenance);
  book.hash = codebook_hash(book);
  return book;
}

}  // namespace bodvw
