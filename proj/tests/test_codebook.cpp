#include <gtest/gtest.h>

#include <random>
#include <set>

#include "bodvw/codebook.hpp"
#include "test_util.hpp"

using namespace bodvw;
using testsupport::TempDir;

namespace {

DeepFeatureSet tagged_set(const std::vector<double>& flat, std::size_t dim, std::string prov = "img") {
  DeepFeatureSet s;
  s.dim = dim;
  s.count = flat.size() / dim;
  s.values = flat;
  s.norm = FeatureNorm::kL2PerVector;
  s.provenance = std::move(prov);
  return s;
}

// Minimum over all assignments of n points to 2 non-empty clusters.
double exhaustive_two_partition(const std::vector<double>& pts, std::size_t dim) {
  const std::size_t n = pts.size() / dim;
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    double total = 0.0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> mean(dim, 0.0);
      int m = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == static_cast<unsigned>(side)) {
          ++m;
          for (std::size_t d = 0; d < dim; ++d) mean[d] += pts[i * dim + d];
        }
      for (auto& v : mean) v /= m;
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == static_cast<unsigned>(side))
          for (std::size_t d = 0; d < dim; ++d) total += (pts[i * dim + d] - mean[d]) * (pts[i * dim + d] - mean[d]);
    }
    best = std::min(best, total);
  }
  return best;
}

Codebook random_book(std::size_t k, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Codebook b;
  b.k = k;
  b.dim = dim;
  b.centroids = testsupport::random_vector(rng, k * dim);
  for (auto& c : b.centroids) c = static_cast<float>(c);
  b.layer = PoolingLayerId(5);
  b.norm = FeatureNorm::kL1PerVector;
  b.seed = seed;
  b.inertia = 12.5;
  b.iterations_run = 9;
  b.config_hash = "abc123";
  return b;
}

}  // namespace

TEST(Assign, ExactCentroidAndTies) {
  Codebook b;
  b.k = 4;
  b.dim = 2;
  b.centroids = {0, 0, 2, 0, 5, 5, 1, 1};
  EXPECT_EQ(assign(std::vector<double>{5, 5}, b), 2u);
  EXPECT_EQ(assign(std::vector<double>{1, 0}, b), 0u);  // equidistant from c_0, c_1 and c_3
  EXPECT_THROW(assign(std::vector<double>{1, 0, 0}, b), InvalidArgument);
}

TEST(Assign, MatchesBruteForceScanIncludingLongVectors) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t dim = trial % 3 == 0 ? 100 : 3, k = 10;
    auto cents = testsupport::random_vector(rng, k * dim);
    if (trial % 5 == 0) std::copy_n(cents.begin(), dim, cents.begin() + 4 * dim);  // duplicate centroid
    const auto x = testsupport::random_vector(rng, dim);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0;
      for (std::size_t i = 0; i < dim; ++i) d += (x[i] - cents[j * dim + i]) * (x[i] - cents[j * dim + i]);
      if (d < best_d) best_d = d, best = j;
    }
    const auto nc = nearest_centroid(x, cents, k);
    EXPECT_EQ(nc.index, best);
    EXPECT_DOUBLE_EQ(nc.distance, best_d);
  }
}

TEST(KMeans, TwoTriadsRecoverTheirMeans) {
  const std::vector<double> pts = {0, 0, 1, 0, 0, 1, 10, 10, 11, 10, 10, 11};
  KMeansConfig cfg;
  cfg.k = 2;
  cfg.seed = 3;
  const auto book = train_codebook(std::vector{tagged_set(pts, 2)}, cfg);
  std::set<std::pair<double, double>> got = {{book.centroids[0], book.centroids[1]},
                                             {book.centroids[2], book.centroids[3]}};
  const double third = static_cast<float>(1.0 / 3.0), ten = static_cast<float>(31.0 / 3.0);
  EXPECT_EQ(got, (std::set<std::pair<double, double>>{{third, third}, {ten, ten}}));
  EXPECT_NEAR(book.inertia, exhaustive_two_partition(pts, 2), 1e-9);
}

TEST(KMeans, HartiganRefinementLeavesALloydLocalMinimum) {
  // {-4.5, -3.3, -1.75} | {-1.09, 0.065, 0.18, 3.19} is a Lloyd fixed point;
  // moving -1.09 to the left cluster is a strict gain.
  const std::vector<double> pts = {-1.09144, -1.75187, -4.49537, 0.178995, -3.2933, 0.064964, 3.18984};
  const std::vector<double> init = {0.064964, -3.2933};
  const auto plain = lloyd(pts, 7, 1, init, 2, 100, 0.0);
  const auto refined = lloyd(pts, 7, 1, init, 2, 100, 0.0, 1, true);
  const double opt = exhaustive_two_partition(pts, 1);
  EXPECT_GT(plain.inertia, opt + 0.4);
  EXPECT_NEAR(refined.inertia, opt, 1e-12);
  EXPECT_EQ(refined.labels, (std::vector<std::size_t>{1, 1, 1, 0, 1, 0, 0}));
  for (std::size_t i = 1; i < refined.inertia_history.size(); ++i)
    EXPECT_LE(refined.inertia_history[i], refined.inertia_history[i - 1]);
  KMeansConfig cfg;
  cfg.refine = "none";
  EXPECT_NO_THROW(cfg.validate());
  cfg.refine = "swap";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(KMeans, PerfectFitWhenKEqualsDistinctPoints) {
  const std::vector<double> pts = {1, 0, 0, 1, 0.5, 0.5, 1, 0, 0, 1};  // 3 distinct of 5
  KMeansConfig cfg;
  cfg.k = 3;
  const auto book = train_codebook(std::vector{tagged_set(pts, 2)}, cfg);
  EXPECT_EQ(book.inertia, 0.0);
  std::set<std::pair<double, double>> got, want = {{1, 0}, {0, 1}, {0.5, 0.5}};
  for (std::size_t j = 0; j < 3; ++j) got.insert({book.centroids[2 * j], book.centroids[2 * j + 1]});
  EXPECT_EQ(got, want);
}

TEST(KMeans, MatchesExhaustiveOptimumAndLloydIsMonotone) {
  std::mt19937_64 rng(2);
  for (int inst = 0; inst < 60; ++inst) {
    const std::size_t n = 3 + rng() % 6, dim = 1 + rng() % 3;
    const auto pts = testsupport::random_vector(rng, n * dim, -5, 5);
    KMeansConfig cfg;
    cfg.k = 2;
    cfg.n_restarts = 8;
    cfg.seed = static_cast<std::uint64_t>(inst);
    const auto r = kmeans(pts, dim, cfg);
    EXPECT_LE(r.inertia, exhaustive_two_partition(pts, dim) * (1 + 1e-9)) << inst;
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1]);
  }
}

TEST(KMeans, LabelsAreFinalAssignmentsAndNoClusterIsEmpty) {
  std::mt19937_64 rng(3);
  const std::size_t dim = 8, n = 500;
  auto pts = testsupport::random_vector(rng, n * dim, 0, 1);
  // Heavy duplication encourages empty clusters during Lloyd.
  for (std::size_t i = 100; i < n; ++i) std::copy_n(pts.begin(), dim, pts.begin() + static_cast<std::ptrdiff_t>(i * dim));
  KMeansConfig cfg;
  cfg.k = 40;
  const auto r = kmeans(pts, dim, cfg);
  std::vector<std::size_t> counts(cfg.k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(r.labels[i], nearest_centroid(std::span(pts).subspan(i * dim, dim), r.centroids, cfg.k).index);
    ++counts[r.labels[i]];
  }
  for (auto c : counts) EXPECT_GT(c, 0u);
}

TEST(KMeans, EmptyClusterReseedsToFarthestPoint) {
  // Centroid 1 owns nothing; point 3 is farthest from its centroid.
  const std::vector<double> pts = {0, 1, 2, 10};
  std::vector<double> cents = {0.0, 100.0};
  const std::vector<std::size_t> labels = {0, 0, 0, 0};
  detail::update_centroids(pts, 4, 1, cents, 2, labels);
  EXPECT_EQ(cents[0], 3.25);
  EXPECT_EQ(cents[1], 10.0);
}

TEST(KMeans, DeterministicAcrossSeedsRunsAndWorkers) {
  std::mt19937_64 rng(4);
  const auto pts = testsupport::random_vector(rng, 3000 * 16, 0, 1);
  KMeansConfig cfg;
  cfg.k = 12;
  cfg.seed = 99;
  const auto a = kmeans(pts, 16, cfg, 1);
  const auto b = kmeans(pts, 16, cfg, 1);
  const auto c = kmeans(pts, 16, cfg, 4);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.centroids, c.centroids);
  EXPECT_EQ(a.inertia, c.inertia);
  cfg.seed = 100;
  EXPECT_NE(kmeans(pts, 16, cfg).centroids, a.centroids);
}

TEST(KMeans, Errors) {
  KMeansConfig cfg;
  cfg.k = 5;
  EXPECT_THROW(kmeans(std::vector<double>(8, 0.0), 2, cfg), InvalidArgument);  // 4 points < k
  std::vector<double> nan(20, 0.0);
  nan[3] = std::nan("");
  EXPECT_THROW(kmeans(nan, 2, cfg), InvalidArgument);
  cfg.k = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n_restarts = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.init = "random";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainCodebook, PoolIsEveryVectorAndSourcesAreRecorded) {
  std::mt19937_64 rng(5);
  std::vector<DeepFeatureSet> sets;
  for (int m = 0; m < 3; ++m) sets.push_back(tagged_set(testsupport::random_vector(rng, 196 * 4, 0, 1), 4, "img" + std::to_string(m)));
  KMeansConfig cfg;
  cfg.k = 6;
  const auto book = train_codebook(sets, cfg);
  EXPECT_EQ(book.sources, (std::vector<std::string>{"img0", "img1", "img2"}));
  // Inertia is over the 196 * m pooled vectors.
  double inertia = 0;
  for (const auto& s : sets)
    for (std::size_t i = 0; i < s.count; ++i) inertia += nearest_centroid(s.vector(i), book.centroids, book.k).distance;
  EXPECT_DOUBLE_EQ(book.inertia, inertia);
  EXPECT_EQ(book.hash, codebook_hash(book));
  EXPECT_EQ(book.hash.size(), 64u);
}

TEST(TrainCodebook, RejectsInconsistentInputs) {
  KMeansConfig cfg;
  cfg.k = 2;
  auto a = tagged_set({1, 0, 0, 1, 1, 1}, 2), b = a;
  b.norm = FeatureNorm::kL1PerVector;
  EXPECT_THROW(train_codebook(std::vector{a, b}, cfg), InvalidArgument);
  b = a;
  b.layer = PoolingLayerId(3);
  EXPECT_THROW(train_codebook(std::vector{a, b}, cfg), InvalidArgument);
  b = tagged_set({1, 0, 0}, 3);
  EXPECT_THROW(train_codebook(std::vector{a, b}, cfg), InvalidArgument);
  a.norm = FeatureNorm::kRaw;
  EXPECT_THROW(train_codebook(std::vector{a}, cfg), InvalidArgument);
}

TEST(CodebookFile, RoundTripIsFieldIdentical) {
  TempDir dir;
  const auto book = random_book(7, 13, 6);
  save_codebook(book, dir.file("c.bin"));
  const auto back = load_codebook(dir.file("c.bin"));
  EXPECT_TRUE(back.same_fields(book));
  EXPECT_EQ(back.hash, codebook_hash(book));
}

TEST(CodebookFile, Float32PersistenceWithinTolerance) {
  auto book = random_book(20, 64, 7);
  std::mt19937_64 rng(8);
  book.centroids = testsupport::random_vector(rng, 20 * 64);  // full double precision
  const auto back = decode_codebook(encode_codebook(book), "mem");
  for (std::size_t i = 0; i < book.centroids.size(); ++i) EXPECT_NEAR(back.centroids[i], book.centroids[i], 1e-6);
}

TEST(CodebookFile, LayoutOfTheFixedPrefix) {
  const auto book = random_book(2, 3, 9);
  const auto bytes = encode_codebook(book);
  const std::size_t body = 8 + 4 + 4 + 4 + 8 + 8 + 4 + 2 * 3 * 4;
  ASSERT_GT(bytes.size(), body + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "BDVWCDBK");
  std::uint32_t u[3];
  std::memcpy(u, bytes.data() + 8, 12);
  EXPECT_EQ(u[0], 1u);
  EXPECT_EQ(u[1], 2u);
  EXPECT_EQ(u[2], 3u);
  std::uint64_t seed;
  std::memcpy(&seed, bytes.data() + 20, 8);
  EXPECT_EQ(seed, 9u);
  double inertia;
  std::memcpy(&inertia, bytes.data() + 28, 8);
  EXPECT_EQ(inertia, 12.5);
  float c0;
  std::memcpy(&c0, bytes.data() + 40, 4);
  EXPECT_EQ(c0, static_cast<float>(book.centroids[0]));
  std::uint32_t crc;
  std::memcpy(&crc, bytes.data() + body, 4);
  EXPECT_EQ(crc, hashing::crc32(std::span(bytes).first(body)));

  // The fixed prefix alone, as written by other tools, still loads.
  const auto prefix_only = decode_codebook(std::span(bytes).first(body + 4), "prefix");
  EXPECT_EQ(prefix_only.centroids, book.centroids);
  EXPECT_EQ(prefix_only.iterations_run, 9u);
}

TEST(CodebookFile, Corruption) {
  const auto good = encode_codebook(random_book(3, 4, 10));
  auto magic = good;
  magic[1] = 'X';
  EXPECT_THROW(decode_codebook(magic, "m"), FormatError);
  auto version = good;
  version[8] = 7;
  EXPECT_THROW(decode_codebook(version, "m"), FormatError);
  auto flipped = good;
  flipped[45] ^= 0x10;
  EXPECT_THROW(decode_codebook(flipped, "m"), FormatError);
  EXPECT_THROW(decode_codebook(std::span(good).first(30), "m"), FormatError);
  auto trailer = good;
  trailer[trailer.size() - 6] ^= 0x01;
  EXPECT_THROW(decode_codebook(trailer, "m"), FormatError);
}
