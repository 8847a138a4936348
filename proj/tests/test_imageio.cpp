#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "bodvw/imageio.hpp"
#include "test_util.hpp"

using namespace bodvw;
using testsupport::TempDir;

namespace {

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

RawImage random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RawImage img(h, w, c);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() & 0xFF);
  return img;
}

}  // namespace

TEST(Manifest, FourCategoriesInSortedOrder) {
  TempDir dir;
  write(dir.file("m.csv"),
        "path,label\na.png,Normal\nb.png,Covid\nc.png,PneumoniaV\nd.png,PneumoniaB\ne.png,Covid\n");
  const auto m = load_manifest(dir.file("m.csv"));
  ASSERT_EQ(m.categories.size(), 4u);
  EXPECT_EQ(m.categories, (std::vector<std::string>{"Covid", "Normal", "PneumoniaB", "PneumoniaV"}));
  EXPECT_EQ(m.entries.size(), 5u);
  EXPECT_EQ(m.entries[0].label, 1u);
  EXPECT_EQ(m.class_counts(), (std::vector<std::size_t>{2, 1, 1, 1}));
}

TEST(Manifest, SidecarFixesCategoryOrder) {
  TempDir dir;
  write(dir.file("m.csv"), "path,label\na.png,b\nb.png,a\n");
  write(dir.file("m.csv.json"), R"({"name": "toy", "categories": ["b", "a"]})");
  const auto m = load_manifest(dir.file("m.csv"));
  EXPECT_EQ(m.name, "toy");
  EXPECT_EQ(m.categories, (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(m.entries[0].label, 0u);
}

TEST(Manifest, EmptyIsAnError) {
  TempDir dir;
  write(dir.file("m.csv"), "path,label\n");
  try {
    load_manifest(dir.file("m.csv"));
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "empty manifest");
  }
}

TEST(Manifest, DuplicatePathIsAnError) {
  TempDir dir;
  write(dir.file("m.csv"), "path,label\na.png,x\nb.png,y\na.png,y\n");
  EXPECT_THROW(load_manifest(dir.file("m.csv")), ConfigError);
}

TEST(Manifest, MalformedRecordsAndHeaders) {
  TempDir dir;
  write(dir.file("a.csv"), "file,class\na.png,x\n");
  EXPECT_THROW(load_manifest(dir.file("a.csv")), ConfigError);
  write(dir.file("b.csv"), "path,label\na.png,x,extra\n");
  EXPECT_THROW(load_manifest(dir.file("b.csv")), ConfigError);
  write(dir.file("c.csv"), "path,label\n\"unterminated,x\n");
  EXPECT_THROW(load_manifest(dir.file("c.csv")), ConfigError);
  EXPECT_THROW(load_manifest(dir.file("missing.csv")), IoError);
}

TEST(Manifest, LabelOutsideSidecarCategories) {
  TempDir dir;
  write(dir.file("m.csv"), "path,label\na.png,x\nb.png,z\n");
  write(dir.file("m.csv.json"), R"({"categories": ["x", "y"]})");
  EXPECT_THROW(load_manifest(dir.file("m.csv")), ConfigError);
}

TEST(Manifest, RoundTripWithQuoting) {
  TempDir dir;
  DatasetManifest m;
  m.name = "rt";
  m.categories = {"z, last", "a \"quoted\""};
  m.entries = {{"img/one,two.png", 0}, {"img/\"three\".png", 1}, {"img/plain.png", 0}};
  save_manifest(m, dir.file("m.csv"));
  const auto back = load_manifest(dir.file("m.csv"));
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.resolve(back.entries[2]), dir.file("img/plain.png"));
}

TEST(Manifest, ValidateRejectsBrokenInvariants) {
  DatasetManifest m;
  m.categories = {"a", "b"};
  m.entries = {{"x.png", 0}};
  EXPECT_THROW(validate_manifest(m), ConfigError);  // category b empty
  m.entries.push_back({"y.png", 2});
  EXPECT_THROW(validate_manifest(m), ConfigError);  // label out of range
}

TEST(Image, GrayPngRoundTrip) {
  TempDir dir;
  const auto img = random_image(1024, 1024, 1, 1);
  save_png(img, dir.file("g.png"));
  const auto back = load_image(dir.file("g.png"));
  EXPECT_EQ(back.height, 1024u);
  EXPECT_EQ(back.width, 1024u);
  EXPECT_EQ(back.channels, 1u);
  EXPECT_EQ(back.data, img.data);
}

TEST(Image, RgbPngRoundTrip) {
  TempDir dir;
  const auto img = random_image(37, 53, 3, 2);
  save_png(img, dir.file("c.png"));
  const auto back = load_image(dir.file("c.png"));
  EXPECT_EQ(back.channels, 3u);
  EXPECT_EQ(back.data, img.data);
}

TEST(Image, RgbJpegDecodes) {
  TempDir dir;
  RawImage img(40, 60, 3);
  for (std::size_t h = 0; h < 40; ++h)
    for (std::size_t w = 0; w < 60; ++w) {
      img.at(h, w, 0) = static_cast<std::uint8_t>(4 * w);
      img.at(h, w, 1) = static_cast<std::uint8_t>(6 * h);
      img.at(h, w, 2) = 90;
    }
  save_jpeg(img, dir.file("c.jpg"), 95);
  const auto back = load_image(dir.file("c.jpg"));
  EXPECT_EQ(back.height, 40u);
  EXPECT_EQ(back.width, 60u);
  EXPECT_EQ(back.channels, 3u);
  double err = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) err += std::abs(int(img.data[i]) - int(back.data[i]));
  EXPECT_LT(err / static_cast<double>(img.data.size()), 4.0);
}

TEST(Image, GrayJpegKeepsOneChannel) {
  TempDir dir;
  save_jpeg(random_image(16, 16, 1, 3), dir.file("g.jpg"));
  EXPECT_EQ(load_image(dir.file("g.jpg")).channels, 1u);
}

TEST(Image, TruncatedFilesAreErrors) {
  TempDir dir;
  save_png(random_image(64, 64, 3, 4), dir.file("a.png"));
  save_jpeg(random_image(64, 64, 3, 5), dir.file("a.jpg"));
  for (const auto* name : {"a.png", "a.jpg"}) {
    const auto bytes = io::read_file(dir.file(name));
    const auto cut = dir.file(std::string("cut_") + name);
    io::write_file(cut, std::span<const std::uint8_t>(bytes.data(), bytes.size() / 2));
    EXPECT_THROW(load_image(cut), FormatError) << name;
  }
}

TEST(Image, UnsupportedAndMissing) {
  TempDir dir;
  write(dir.file("x.gif"), "GIF89a....");
  EXPECT_THROW(load_image(dir.file("x.gif")), FormatError);
  EXPECT_THROW(load_image(dir.file("none.png")), IoError);
  EXPECT_THROW(RawImage(0, 5, 1), InvalidArgument);
}

TEST(Preprocess, ZeroImageGivesNegativeMeans) {
  const auto in = preprocess(RawImage(224, 224, 3, 0));
  for (std::size_t h = 0; h < 224; ++h)
    for (std::size_t w = 0; w < 224; ++w) {
      EXPECT_FLOAT_EQ(in.at(h, w, 0), -103.939f);
      EXPECT_FLOAT_EQ(in.at(h, w, 1), -116.779f);
      EXPECT_FLOAT_EQ(in.at(h, w, 2), -123.68f);
    }
}

TEST(Preprocess, GrayIsReplicatedBeforeMeanSubtraction) {
  const auto in = preprocess(RawImage(300, 200, 1, 128));
  ASSERT_EQ(in.tensor.size(), 224u * 224u * 3u);
  for (std::size_t i = 0; i < in.tensor.size(); i += 3) {
    EXPECT_FLOAT_EQ(in.tensor[i], static_cast<float>(128 - 103.939));
    EXPECT_FLOAT_EQ(in.tensor[i + 1], static_cast<float>(128 - 116.779));
    EXPECT_FLOAT_EQ(in.tensor[i + 2], static_cast<float>(128 - 123.68));
  }
}

TEST(Preprocess, ChannelOrderIsBgr) {
  RawImage img(224, 224, 3);
  for (std::size_t h = 0; h < 224; ++h)
    for (std::size_t w = 0; w < 224; ++w) {
      img.at(h, w, 0) = 200;  // R
      img.at(h, w, 1) = 100;  // G
      img.at(h, w, 2) = 10;   // B
    }
  const auto in = preprocess(img);
  EXPECT_FLOAT_EQ(in.at(5, 7, 0), static_cast<float>(10 - 103.939));
  EXPECT_FLOAT_EQ(in.at(5, 7, 1), static_cast<float>(100 - 116.779));
  EXPECT_FLOAT_EQ(in.at(5, 7, 2), static_cast<float>(200 - 123.68));
}

TEST(Preprocess, IdentityAt224) {
  const auto img = random_image(224, 224, 3, 9);
  const auto in = preprocess(img);
  for (std::size_t h = 0; h < 224; h += 13)
    for (std::size_t w = 0; w < 224; w += 7)
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_FLOAT_EQ(in.at(h, w, c), static_cast<float>(img.at(h, w, 2 - c) - kBgrMeans[c]));
}

// Halving with half-pixel centres samples exactly between pixel pairs, so
// each output is the mean of a 2x2 block.
TEST(Preprocess, HalvingAveragesTwoByTwoBlocks) {
  const auto img = random_image(448, 448, 3, 10);
  const auto in = preprocess(img);
  for (std::size_t h = 0; h < 224; h += 5)
    for (std::size_t w = 0; w < 224; w += 3)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t s = 2 - c;
        const double mean = (img.at(2 * h, 2 * w, s) + img.at(2 * h, 2 * w + 1, s) + img.at(2 * h + 1, 2 * w, s) +
                             img.at(2 * h + 1, 2 * w + 1, s)) / 4.0;
        EXPECT_NEAR(in.at(h, w, c), mean - kBgrMeans[c], 1e-4);
      }
}

TEST(Preprocess, DeterministicAndShapeStable) {
  for (auto [h, w] : {std::pair{1, 1}, {1000, 3}, {225, 224}, {17, 999}}) {
    const auto img = random_image(h, w, 1, 11);
    const auto a = preprocess(img, "p");
    const auto b = preprocess(img, "p");
    EXPECT_EQ(a.tensor.size(), 224u * 224u * 3u);
    EXPECT_EQ(a.tensor, b.tensor);
    EXPECT_EQ(a.provenance, "p");
    for (float v : a.tensor) ASSERT_TRUE(std::isfinite(v));
  }
}
