#include <gtest/gtest.h>

#include <random>

#include "bodvw/onnx.hpp"
#include "onnx_writer.hpp"
#include "test_util.hpp"

using namespace bodvw;
using namespace bodvw::onnx;
using testsupport::Attr;
using testsupport::ModelBuilder;

namespace {

Tensor random_tensor(std::vector<std::int64_t> dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t;
  t.dims = std::move(dims);
  t.data.resize(t.numel());
  for (auto& v : t.data) v = testsupport::uniform(rng, -1.0, 1.0);
  return t;
}

Node make_node(const std::string& op, std::vector<Attr> attrs) {
  // Route through the writer and parser so attribute decoding is covered too.
  ModelBuilder b;
  b.input("x", {1, 1, 1, 1}).output("y", {1, 1, 1, 1}).node({op, {"x"}, {"y"}, std::move(attrs), "n"});
  auto buffer = std::make_shared<const std::vector<std::uint8_t>>();
  const auto bytes = b.serialize();
  buffer = std::make_shared<const std::vector<std::uint8_t>>(bytes.begin(), bytes.end());
  return parse_model(buffer).graph.nodes.at(0);
}

// Direct-loop convolution in double precision.
Tensor naive_conv(const Tensor& x, const Tensor& w, const std::vector<float>& bias, std::int64_t stride,
                  std::int64_t pt, std::int64_t pl, std::int64_t pb, std::int64_t pr) {
  const auto ci = x.dims[1], ih = x.dims[2], iw = x.dims[3], co = w.dims[0], kh = w.dims[2], kw = w.dims[3];
  const auto oh = (ih + pt + pb - kh) / stride + 1, ow = (iw + pl + pr - kw) / stride + 1;
  Tensor y;
  y.dims = {1, co, oh, ow};
  y.data.resize(y.numel());
  for (std::int64_t m = 0; m < co; ++m)
    for (std::int64_t r = 0; r < oh; ++r)
      for (std::int64_t c = 0; c < ow; ++c) {
        double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(m)];
        for (std::int64_t k = 0; k < ci; ++k)
          for (std::int64_t a = 0; a < kh; ++a)
            for (std::int64_t b = 0; b < kw; ++b) {
              const auto yy = r * stride - pt + a, xx = c * stride - pl + b;
              if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
              acc += static_cast<double>(x.data[static_cast<std::size_t>((k * ih + yy) * iw + xx)]) *
                     w.data[static_cast<std::size_t>(((m * ci + k) * kh + a) * kw + b)];
            }
        y.data[static_cast<std::size_t>((m * oh + r) * ow + c)] = static_cast<float>(acc);
      }
  return y;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.dims, b.dims);
  for (std::size_t i = 0; i < a.data.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], tol) << "at " << i;
}

}  // namespace

TEST(Wire, VarintsAndSkipping) {
  testsupport::Proto p;
  p.varint_field(1, 300).varint_field(2, (1ULL << 40) + 5).bytes_field(3, "abc").float_field(4, 1.5f);
  const auto& s = p.str();
  std::vector<std::uint8_t> bytes(s.begin(), s.end());
  WireReader r(bytes);
  auto [f1, t1] = r.key();
  EXPECT_EQ(f1, 1u);
  EXPECT_EQ(r.varint(), 300u);
  r.key();
  EXPECT_EQ(r.varint(), (1ULL << 40) + 5);
  auto [f3, t3] = r.key();
  r.skip(t3);
  auto [f4, t4] = r.key();
  EXPECT_EQ(f4, 4u);
  EXPECT_FLOAT_EQ(r.float32(), 1.5f);
  EXPECT_TRUE(r.done());
  (void)t1;
  (void)f3;
  (void)t4;
}

TEST(Wire, TruncationIsAFormatError) {
  std::vector<std::uint8_t> bytes = {0x0A, 0x05, 'a', 'b'};
  WireReader r(bytes);
  r.key();
  EXPECT_THROW(r.bytes(), FormatError);
  std::vector<std::uint8_t> endless(12, 0xFF);
  WireReader r2(endless);
  EXPECT_THROW(r2.varint(), FormatError);
}

TEST(Ops, ConvMatchesNaiveLoops) {
  struct Case {
    std::int64_t ci, co, h, w, k, stride, pad;
  };
  std::uint64_t seed = 1;
  for (auto c : {Case{3, 4, 9, 11, 3, 1, 1}, Case{5, 2, 8, 8, 3, 2, 0}, Case{2, 7, 6, 5, 1, 1, 0},
                 Case{4, 3, 10, 7, 5, 2, 2}}) {
    const auto x = random_tensor({1, c.ci, c.h, c.w}, seed++);
    const auto w = random_tensor({c.co, c.ci, c.k, c.k}, seed++);
    const auto b = random_tensor({c.co}, seed++);
    auto node = make_node("Conv", {Attr::list("kernel_shape", {c.k, c.k}), Attr::list("strides", {c.stride, c.stride}),
                                   Attr::list("pads", {c.pad, c.pad, c.pad, c.pad})});
    expect_close(ops::conv(node, x, w, &b), naive_conv(x, w, b.data, c.stride, c.pad, c.pad, c.pad, c.pad), 1e-4);
  }
}

TEST(Ops, ConvBlocksLargerThanScratch) {
  // 64 channels * 9 taps with 100x100 pixels forces several im2col blocks.
  const auto x = random_tensor({1, 64, 100, 100}, 5);
  const auto w = random_tensor({8, 64, 3, 3}, 6);
  auto node = make_node("Conv", {Attr::list("kernel_shape", {3, 3}), Attr::list("pads", {1, 1, 1, 1})});
  expect_close(ops::conv(node, x, w, nullptr), naive_conv(x, w, {}, 1, 1, 1, 1, 1), 1e-3);
}

TEST(Ops, SameUpperPadsTheEnd) {
  const auto x = random_tensor({1, 2, 6, 6}, 7);
  const auto w = random_tensor({3, 2, 2, 2}, 8);
  auto node = make_node("Conv", {Attr::list("kernel_shape", {2, 2}), Attr::text("auto_pad", "SAME_UPPER")});
  expect_close(ops::conv(node, x, w, nullptr), naive_conv(x, w, {}, 1, 0, 0, 1, 1), 1e-5);
  auto lower = make_node("Conv", {Attr::list("kernel_shape", {2, 2}), Attr::text("auto_pad", "SAME_LOWER")});
  expect_close(ops::conv(lower, x, w, nullptr), naive_conv(x, w, {}, 1, 1, 1, 0, 0), 1e-5);
}

TEST(Ops, UnsupportedConvVariants) {
  const auto x = random_tensor({1, 2, 4, 4}, 9);
  const auto w = random_tensor({2, 1, 3, 3}, 10);
  auto grouped = make_node("Conv", {Attr::list("kernel_shape", {3, 3}), Attr::integer("group", 2)});
  EXPECT_THROW(ops::conv(grouped, x, w, nullptr), InferenceError);
  auto plain = make_node("Conv", {Attr::list("kernel_shape", {3, 3})});
  EXPECT_THROW(ops::conv(plain, x, w, nullptr), InferenceError);  // channel mismatch
}

TEST(Ops, MaxPoolMatchesBruteForce) {
  const auto x = random_tensor({1, 3, 7, 9}, 11);
  for (bool ceil : {false, true}) {
    auto node = make_node("MaxPool", {Attr::list("kernel_shape", {2, 2}), Attr::list("strides", {2, 2}),
                                      Attr::integer("ceil_mode", ceil ? 1 : 0)});
    const auto y = ops::max_pool(node, x);
    const std::int64_t oh = ceil ? 4 : 3, ow = ceil ? 5 : 4;
    ASSERT_EQ(y.dims, (std::vector<std::int64_t>{1, 3, oh, ow}));
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t r = 0; r < oh; ++r)
        for (std::int64_t q = 0; q < ow; ++q) {
          float best = -1e30f;
          for (std::int64_t a = 2 * r; a < std::min<std::int64_t>(2 * r + 2, 7); ++a)
            for (std::int64_t b = 2 * q; b < std::min<std::int64_t>(2 * q + 2, 9); ++b)
              best = std::max(best, x.data[static_cast<std::size_t>((c * 7 + a) * 9 + b)]);
          EXPECT_EQ(y.data[static_cast<std::size_t>((c * oh + r) * ow + q)], best);
        }
  }
}

TEST(Ops, TransposeAndAdd) {
  const auto x = random_tensor({1, 2, 3, 4}, 12);
  auto t = make_node("Transpose", {Attr::list("perm", {0, 2, 3, 1})});
  const auto y = ops::transpose(t, x);
  ASSERT_EQ(y.dims, (std::vector<std::int64_t>{1, 3, 4, 2}));
  for (int c = 0; c < 2; ++c)
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 4; ++w) EXPECT_EQ(y.data[(h * 4 + w) * 2 + c], x.data[(c * 3 + h) * 4 + w]);

  Tensor b;
  b.dims = {2, 1, 1};
  b.data = {10.0f, -10.0f};
  const auto s = ops::add(make_node("Add", {}), x, b);
  for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_FLOAT_EQ(s.data[i], x.data[i] + (i < 12 ? 10.0f : -10.0f));
  Tensor bad;
  bad.dims = {3};
  bad.data = {1, 2, 3};
  EXPECT_THROW(ops::add(make_node("Add", {}), x, bad), InferenceError);
}

TEST(Executor, SmallGraphWithFloatDataInitializers) {
  for (bool float_data : {false, true}) {
    std::mt19937_64 rng(13);
    testsupport::Init w{"w", {4, 3, 3, 3}, {}}, bias{"b", {4}, {}}, shift{"shift", {4, 1, 1}, {}};
    for (auto* t : {&w, &bias, &shift}) {
      std::size_t n = 1;
      for (auto d : t->dims) n *= static_cast<std::size_t>(d);
      for (std::size_t i = 0; i < n; ++i) t->values.push_back(testsupport::uniform(rng, -1, 1));
    }
    ModelBuilder b;
    b.float_data_inits(float_data)
        .input("img", {1, 6, 6, 3})
        .output("out", {1, 4, 3, 3})
        .init(w)
        .init(bias)
        .init(shift)
        .node({"Transpose", {"img"}, {"nchw"}, {Attr::list("perm", {0, 3, 1, 2})}, ""})
        .node(testsupport::conv3x3("nchw", "w", "b", "c"))
        .node({"Add", {"c", "shift"}, {"c2"}, {}, ""})
        .node({"Relu", {"c2"}, {"r"}, {}, ""})
        .node({"Identity", {"r"}, {"r2"}, {}, ""})
        .node(testsupport::maxpool2x2("r2", "out"))
        .node({"Softmax", {"out"}, {"unused"}, {}, ""});
    const auto s = b.serialize();
    auto model = std::make_shared<const Model>(
        parse_model(std::make_shared<const std::vector<std::uint8_t>>(s.begin(), s.end())));
    EXPECT_EQ(model->ir_version, 7);
    ASSERT_EQ(model->graph.inputs.size(), 1u);
    EXPECT_EQ(model->graph.inputs[0].dims, (std::vector<std::int64_t>{1, 6, 6, 3}));

    const auto img = random_tensor({1, 6, 6, 3}, 14);
    Executor exec(model);
    EXPECT_TRUE(exec.produces("out"));
    EXPECT_FALSE(exec.produces("nope"));
    const auto out = exec.run("img", img, {"out", "c"});

    // Oracle: the same chain with the naive helpers.
    auto nchw = ops::transpose(make_node("Transpose", {Attr::list("perm", {0, 3, 1, 2})}), img);
    Tensor wt{w.dims, w.values};
    auto conv = naive_conv(nchw, wt, bias.values, 1, 1, 1, 1, 1);
    expect_close(out.at("c"), conv, 1e-5);
    for (std::size_t i = 0; i < conv.data.size(); ++i)
      conv.data[i] = std::max(0.0f, conv.data[i] + shift.values[i / 36]);
    const auto pooled = ops::max_pool(make_node("MaxPool", {Attr::list("kernel_shape", {2, 2}), Attr::list("strides", {2, 2})}), conv);
    expect_close(out.at("out"), pooled, 1e-5);
    // The unsupported Softmax is outside the needed subgraph.
    EXPECT_THROW(exec.run("img", img, {"unused"}), InferenceError);
    EXPECT_THROW(exec.run("img", img, {"missing"}), InferenceError);
  }
}

TEST(Model, CorruptBytesAreRejected) {
  const auto s = testsupport::vgg16_fixture({1, true, false});
  std::vector<std::uint8_t> cut(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(s.size() / 3));
  EXPECT_THROW(parse_model(std::make_shared<const std::vector<std::uint8_t>>(cut)), FormatError);
  std::vector<std::uint8_t> junk = {0xFF, 0xFF, 0xFF, 0xFF};
  EXPECT_THROW(parse_model(std::make_shared<const std::vector<std::uint8_t>>(junk)), FormatError);
}
