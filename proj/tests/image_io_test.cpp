#include <fstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "gem/image_io.hpp"
#include "oracles.hpp"

using gem::Tensor;
using oracle::TempDir;

namespace {

void write_raw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

}  // namespace

TEST(Pixmap, WhitePixel) {
  TempDir dir;
  write_raw(dir / "w.ppm", std::string("P6\n1 1\n255\n") + "\xff\xff\xff");
  const auto img = gem::read_pixmap(dir / "w.ppm");
  EXPECT_EQ(img.pixels.shape(), (gem::Shape{1, 1, 3}));
  for (float v : img.pixels.storage()) EXPECT_EQ(v, 1.0f);
  EXPECT_EQ(img.source_id, "w");
}

TEST(Pixmap, BlackThenWhite) {
  TempDir dir;
  write_raw(dir / "bw.ppm", std::string("P6\n2 1\n255\n", 11) + std::string("\0\0\0\xff\xff\xff", 6));
  const auto img = gem::read_pixmap(dir / "bw.ppm");
  EXPECT_EQ(img.height(), 1u);
  EXPECT_EQ(img.width(), 2u);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(img.pixels(0, 0, c), 0.0f);
    EXPECT_EQ(img.pixels(0, 1, c), 1.0f);
  }
}

TEST(Pixmap, HeaderCommentsAccepted) {
  TempDir dir;
  write_raw(dir / "c.ppm", std::string("P6\n# made by hand\n1 # width\n1\n255\n") + std::string("\x80\x00\xff", 3));
  const auto img = gem::read_pixmap(dir / "c.ppm");
  EXPECT_FLOAT_EQ(img.pixels(0, 0, 0), 128.0f / 255.0f);
}

TEST(Pixmap, RoundTripWithinQuantization) {
  TempDir dir;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor px({5, 7, 3});
  for (auto& v : px.storage()) v = u(rng);
  gem::write_pixmap(dir / "r.ppm", px);
  const auto img = gem::read_pixmap(dir / "r.ppm");
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_LE(std::abs(img.pixels[i] - px[i]), 0.5f / 255.0f + 1e-6f);
  // Quantized values survive exactly.
  gem::write_pixmap(dir / "r2.ppm", img.pixels);
  EXPECT_EQ(gem::read_pixmap(dir / "r2.ppm").pixels, img.pixels);
}

TEST(Pixmap, Errors) {
  TempDir dir;
  write_raw(dir / "magic.ppm", "P3\n1 1\n255\n0 0 0\n");
  EXPECT_THROW(gem::read_pixmap(dir / "magic.ppm"), gem::FormatError);
  write_raw(dir / "hdr.ppm", "P6\nx 1\n255\n");
  EXPECT_THROW(gem::read_pixmap(dir / "hdr.ppm"), gem::FormatError);
  write_raw(dir / "max.ppm", "P6\n1 1\n65535\n\0\0\0\0\0\0");
  EXPECT_THROW(gem::read_pixmap(dir / "max.ppm"), gem::FormatError);
  write_raw(dir / "short.ppm", "P6\n2 2\n255\nabc");
  EXPECT_THROW(gem::read_pixmap(dir / "short.ppm"), gem::FormatError);
  EXPECT_THROW(gem::read_pixmap(dir / "absent.ppm"), gem::FormatError);
}

TEST(LabelMap, RoundTrip16Bit) {
  TempDir dir;
  gem::LabelImage lab{2, 3, {0, 1, 2, 300, 65535, 7}};
  gem::write_pgm16(dir / "l.pgm16", lab);
  const auto back = gem::read_pgm16(dir / "l.pgm16");
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.values, lab.values);
  EXPECT_EQ(back.at(1, 0), 300);
}

TEST(LabelMap, BigEndianSamples) {
  TempDir dir;
  gem::write_pgm16(dir / "l.pgm16", {1, 1, {0x0102}});
  const std::string bytes = oracle::slurp(dir / "l.pgm16");
  EXPECT_EQ(bytes.substr(bytes.size() - 2), std::string("\x01\x02", 2));
}

TEST(LabelMap, EightBitGraymapAccepted) {
  TempDir dir;
  write_raw(dir / "l.pgm", std::string("P5\n2 1\n255\n") + "\x03\x05");
  const auto lab = gem::read_pgm16(dir / "l.pgm");
  EXPECT_EQ(lab.values, (std::vector<std::uint16_t>{3, 5}));
}

TEST(Points, ParsesLineWithSpacedClassName) {
  const auto p = gem::parse_point_line("img_01 traffic light 0.25 0.75 1");
  EXPECT_EQ(p.image_id, "img_01");
  EXPECT_EQ(p.class_name, "traffic light");
  EXPECT_DOUBLE_EQ(p.x_rel, 0.25);
  EXPECT_DOUBLE_EQ(p.y_rel, 0.75);
  EXPECT_TRUE(p.positive);
}

TEST(Points, RejectsMalformedLines) {
  EXPECT_THROW(gem::parse_point_line("img cat 0.5 0.5"), gem::FormatError);
  EXPECT_THROW(gem::parse_point_line("img cat a 0.5 1"), gem::FormatError);
  EXPECT_THROW(gem::parse_point_line("img cat 0.5 0.5 2"), gem::FormatError);
  EXPECT_THROW(gem::parse_point_line("img cat 1.5 0.5 1"), gem::FormatError);
}

TEST(Points, FileSkipsBlankAndCommentLines) {
  TempDir dir;
  fixture::write_lines(dir / "points.txt", {"# header", "a cat 0.1 0.2 1", "", "b dog 0.3 0.4 0"});
  const auto pts = gem::read_points(dir / "points.txt");
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[1].class_name, "dog");
  EXPECT_FALSE(pts[1].positive);
}

TEST(Preprocess, SizeArithmetic) {
  EXPECT_EQ(gem::preprocess_size(448, 448, 448), (std::pair<std::size_t, std::size_t>{448, 448}));
  EXPECT_EQ(gem::preprocess_size(896, 448, 448), (std::pair<std::size_t, std::size_t>{896, 448}));
  EXPECT_EQ(gem::preprocess_size(100, 200, 448), (std::pair<std::size_t, std::size_t>{448, 896}));
  const auto [h, w] = gem::preprocess_size(333, 500, 448);
  EXPECT_EQ(h, 448u);
  EXPECT_NEAR(static_cast<double>(w), 500.0 * 448.0 / 333.0, 1.0);
}

TEST(Preprocess, NoResizeAtTargetOnlyNormalizes) {
  gem::PreprocessSpec spec;
  spec.shorter_side = 4;
  const gem::ImageRecord img{fixture::random_pixels(4, 6, 1), "x"};
  const Tensor out = gem::preprocess(img, spec);
  ASSERT_EQ(out.shape(), img.pixels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = i % 3;
    EXPECT_NEAR(out[i], (img.pixels[i] - spec.channel_mean[c]) / spec.channel_std[c], 1e-6);
  }
}

TEST(Preprocess, ResizesShorterSide) {
  gem::PreprocessSpec spec;
  spec.shorter_side = 16;
  const gem::ImageRecord img{fixture::random_pixels(5, 10, 2), "x"};
  const Tensor out = gem::preprocess(img, spec);
  EXPECT_EQ(out.shape(), (gem::Shape{16, 32, 3}));
}

TEST(Preprocess, MeanImageGoesToZero) {
  gem::PreprocessSpec spec;
  spec.shorter_side = 6;
  Tensor px({3, 5, 3});
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = spec.channel_mean[i % 3];
  const Tensor out = gem::preprocess({px, "mean"}, spec);
  double sums[3] = {0, 0, 0};
  for (std::size_t i = 0; i < out.size(); ++i) sums[i % 3] += out[i];
  for (double s : sums) EXPECT_NEAR(s / (out.size() / 3), 0.0, 1e-6);
}

TEST(ReadLines, TrimsAndSkipsEmpty) {
  TempDir dir;
  std::ofstream(dir / "c.txt") << "cat\r\n\ndog \npotted plant\n";
  EXPECT_EQ(gem::read_lines(dir / "c.txt"), (std::vector<std::string>{"cat", "dog", "potted plant"}));
}
