#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "bodvw/encoder.hpp"
#include "test_util.hpp"

using namespace bodvw;
using testsupport::TempDir;

namespace {

FeatureMap random_map(std::uint64_t seed, PoolingLayerId layer = PoolingLayerId(4)) {
  std::mt19937_64 rng(seed);
  FeatureMap m(layer, "img" + std::to_string(seed));
  for (auto& v : m.values) v = rng() % 3 == 0 ? 0.0f : static_cast<float>(std::uniform_real_distribution<double>(0.0, 4.0)(rng));
  return m;
}

Codebook book_from(const std::vector<double>& centroids, std::size_t dim, FeatureNorm norm) {
  Codebook b;
  b.k = centroids.size() / dim;
  b.dim = dim;
  b.centroids = centroids;
  b.norm = norm;
  b.hash = codebook_hash(b);
  return b;
}

Codebook random_book(std::size_t k, std::uint64_t seed, FeatureNorm norm = FeatureNorm::kL2PerVector) {
  std::mt19937_64 rng(seed);
  return book_from(testsupport::random_vector(rng, k * 512, 0, 0.1), 512, norm);
}

BoVWVector counts_of(std::vector<double> w) {
  BoVWVector v;
  v.weights = std::move(w);
  return v;
}

}  // namespace

TEST(Counts, SumToOneHundredNinetySixForP4) {
  const auto book = random_book(25, 1);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto h = encode_counts(deep_features(random_map(s), Variant::kBoDVW), book);
    EXPECT_EQ(h.norm, HistogramNorm::kCounts);
    EXPECT_EQ(std::accumulate(h.weights.begin(), h.weights.end(), 0.0), 196.0);
    for (double w : h.weights) EXPECT_EQ(w, std::floor(w));
  }
}

TEST(Counts, IdenticalVectorsFillOneBin) {
  FeatureMap map(PoolingLayerId(4));
  for (std::size_t i = 0; i < map.values.size(); i += 512) map.values[i + 3] = 1.0f;
  const auto book = random_book(10, 2);
  const auto h = encode_counts(deep_features(map, Variant::kBoDVW), book);
  EXPECT_EQ(*std::max_element(h.weights.begin(), h.weights.end()), 196.0);
  EXPECT_EQ(std::count(h.weights.begin(), h.weights.end(), 0.0), 9);
}

TEST(Counts, SmallInstanceMatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    DeepFeatureSet set;
    set.count = 5;
    set.dim = 4;
    set.values = testsupport::random_vector(rng, 20);
    set.norm = FeatureNorm::kL2PerVector;
    const auto book = book_from(testsupport::random_vector(rng, 12), 4, FeatureNorm::kL2PerVector);
    std::vector<double> want(3, 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t j = 0; j < 3; ++j) {
        double d = 0;
        for (std::size_t t = 0; t < 4; ++t) d += std::pow(set.values[i * 4 + t] - book.centroids[j * 4 + t], 2);
        if (d < bd) bd = d, best = j;
      }
      ++want[best];
    }
    EXPECT_EQ(encode_counts(set, book).weights, want);
  }
}

TEST(Counts, CompatibilityChecks) {
  const auto set = deep_features(random_map(4), Variant::kBoDVW);
  EXPECT_THROW(encode_counts(set, book_from({0, 1, 1, 0}, 2, FeatureNorm::kL2PerVector)), InvalidArgument);
  EXPECT_THROW(encode_counts(set, random_book(4, 5, FeatureNorm::kL1PerVector)), CompatibilityError);
  const auto book = random_book(4, 5);
  EXPECT_NO_THROW(encode_counts(set, book, {book.hash}));
  EXPECT_THROW(encode_counts(set, book, {std::string("deadbeef")}), CompatibilityError);
}

TEST(Counts, PermutingCentroidsPermutesBins) {
  const auto book = random_book(8, 6);
  auto permuted = book;
  const std::vector<std::size_t> perm = {3, 0, 7, 1, 6, 2, 5, 4};  // new j takes old perm[j]
  for (std::size_t j = 0; j < 8; ++j)
    std::copy_n(book.centroids.begin() + static_cast<std::ptrdiff_t>(perm[j] * 512), 512,
                permuted.centroids.begin() + static_cast<std::ptrdiff_t>(j * 512));
  const auto set = deep_features(random_map(7), Variant::kBoDVW);
  const auto a = encode_counts(set, book), b = encode_counts(set, permuted);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(b.weights[j], a.weights[perm[j]]);
}

TEST(FinalizeL2, HandExamples) {
  auto one_hot = finalize_l2(counts_of({196, 0, 0}));
  EXPECT_EQ(one_hot.norm, HistogramNorm::kL2);
  EXPECT_NEAR(one_hot.weights[0], 1.0, 1e-9);
  EXPECT_EQ(one_hot.weights[1], 0.0);
  const auto tiny = finalize_l2(counts_of({3, 4}));
  EXPECT_NEAR(tiny.weights[0], 0.6, 1e-7);
  EXPECT_NEAR(tiny.weights[1], 0.8, 1e-7);
  const auto uniform = finalize_l2(counts_of(std::vector<double>(400, 1.0)));
  for (double w : uniform.weights) EXPECT_NEAR(w, 1.0 / 20.0, 1e-6);
  EXPECT_THROW(finalize_l2(one_hot), InvalidArgument);
  EXPECT_THROW(finalize_l1(one_hot), InvalidArgument);
}

TEST(FinalizeL1, HandExamples) {
  const auto even = finalize_l1(counts_of({2, 2}));
  EXPECT_NEAR(even.weights[0], 0.5, 1e-7);
  const auto h = finalize_l1(counts_of({1, 3, 0, 0}));
  EXPECT_NEAR(h.weights[0], 0.25, 1e-7);
  EXPECT_NEAR(h.weights[1], 0.75, 1e-7);
  EXPECT_EQ(h.weights[2], 0.0);
  const auto p4 = finalize_l1(counts_of({100, 50, 46}));
  EXPECT_DOUBLE_EQ(p4.weights[0] + p4.weights[1] + p4.weights[2], 196.0 / (196.0 + kNormEpsilon));
  EXPECT_THROW(finalize_l1(p4), InvalidArgument);
}

TEST(Finalize, NormsAndSparsity) {
  const auto book = random_book(30, 8);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto counts = encode_counts(deep_features(random_map(s + 10), Variant::kBoDVW), book);
    const auto l2 = finalize_l2(counts);
    const double n = l2_norm(l2.weights);
    EXPECT_LE(n, 1.0);
    EXPECT_GE(n, 1.0 - 1e-5);
    for (std::size_t j = 0; j < counts.weights.size(); ++j) {
      if (counts.weights[j] == 0.0) {
        EXPECT_EQ(l2.weights[j], 0.0);
      }
    }
  }
}

// The variants differ only in the two normalizations and share the counting step.
TEST(Variants, PipelinesComposeTheDocumentedSteps) {
  const auto map = random_map(20);
  const auto l2_book = random_book(12, 9, FeatureNorm::kL2PerVector);
  const auto l1_book = random_book(12, 9, FeatureNorm::kL1PerVector);
  const auto bodvw = encode_image(map, l2_book, Variant::kBoDVW);
  const auto manual = finalize_l2(encode_counts(l2_normalize_each(unroll(map)), l2_book));
  EXPECT_EQ(bodvw.weights, manual.weights);
  EXPECT_EQ(bodvw.norm, HistogramNorm::kL2);
  const auto dcf = encode_image(map, l1_book, Variant::kDcfBoVW);
  const auto manual_dcf = finalize_l1(encode_counts(l1_normalize_each(unroll(map)), l1_book));
  EXPECT_EQ(dcf.weights, manual_dcf.weights);
  EXPECT_EQ(dcf.norm, HistogramNorm::kL1);
  EXPECT_THROW(encode_image(map, l2_book, Variant::kDcfBoVW), CompatibilityError);
}

TEST(Variants, Names) {
  EXPECT_EQ(parse_variant("bodvw"), Variant::kBoDVW);
  EXPECT_EQ(parse_variant("dcf_bovw"), Variant::kDcfBoVW);
  EXPECT_STREQ(to_string(Variant::kDcfBoVW), "dcf_bovw");
  EXPECT_THROW(parse_variant("BoDVW"), ConfigError);
}

TEST(FeatureCsv, RoundTripIsExact) {
  TempDir dir;
  std::mt19937_64 rng(11);
  std::vector<FeatureRow> rows;
  for (int i = 0; i < 6; ++i)
    rows.push_back({"img/" + std::to_string(i) + (i == 2 ? ",comma.png" : ".png"), i % 2 ? "Covid" : "Normal",
                    testsupport::random_vector(rng, 5, 0, 1)});
  write_feature_csv(dir.file("f.csv"), rows);
  const auto text = io::read_text_file(dir.file("f.csv"));
  EXPECT_TRUE(text.starts_with("path,label,w_1,w_2,w_3,w_4,w_5\n"));
  const auto back = read_feature_csv(dir.file("f.csv"));
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].path, rows[i].path);
    EXPECT_EQ(back[i].label, rows[i].label);
    EXPECT_EQ(back[i].weights, rows[i].weights);
  }
  io::write_text_file(dir.file("bad.csv"), "path,label,w_1\na.png,x,0.5,0.7\n");
  EXPECT_THROW(read_feature_csv(dir.file("bad.csv")), ConfigError);
}
