// SPDX-License-Identifier: Apache-2.0
#include <zlib.h>

#include <fstream>

#include "helpers.hpp"

using namespace dm_test;

namespace {

std::uint32_t be32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v = (v << 8) | static_cast<unsigned char>(s[at + b]);
  return v;
}

}  // namespace

TEST(Png, ChunksAndPixelsDecode) {
  const std::vector<std::uint8_t> rgb{255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30};
  const std::string png = plot::encode_png(2, 2, rgb);
  ASSERT_EQ(png.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  std::size_t at = 8;
  std::string idat;
  std::vector<std::string> types;
  while (at < png.size()) {
    const std::uint32_t len = be32(png, at);
    const std::string type = png.substr(at + 4, 4), data = png.substr(at + 8, len);
    const auto crc = static_cast<std::uint32_t>(
        crc32(crc32(0, reinterpret_cast<const Bytef*>(type.data()), 4), reinterpret_cast<const Bytef*>(data.data()),
              static_cast<uInt>(len)));
    EXPECT_EQ(be32(png, at + 8 + len), crc) << type;
    types.push_back(type);
    if (type == "IHDR") {
      EXPECT_EQ(be32(data, 0), 2u);
      EXPECT_EQ(be32(data, 4), 2u);
    }
    if (type == "IDAT") idat += data;
    at += 12 + len;
  }
  EXPECT_EQ(types, (std::vector<std::string>{"IHDR", "IDAT", "IEND"}));
  std::string raw(2 * (1 + 6), '\0');
  uLongf n = raw.size();
  ASSERT_EQ(uncompress(reinterpret_cast<Bytef*>(raw.data()), &n, reinterpret_cast<const Bytef*>(idat.data()),
                       static_cast<uLong>(idat.size())),
            Z_OK);
  EXPECT_EQ(static_cast<unsigned char>(raw[1]), 255);
  EXPECT_EQ(static_cast<unsigned char>(raw[7 + 1 + 3]), 10);
  EXPECT_THROW(plot::encode_png(2, 2, {1, 2, 3}), ShapeError);
}

TEST(Png, DepthPreviewHasImageSize) {
  const auto s = dataio::generate_scene(3, dataio::DomainTag::indoor_like);
  const auto png = plot::depth_preview_png(s.depth);
  EXPECT_EQ(be32(png, 16), 64u);
  EXPECT_EQ(be32(png, 20), 64u);
}

TEST(Svg, HistogramChartLabelsEveryMode) {
  const auto samples = dataio::generate_many(5, dataio::DomainTag::outdoor_like, 3);
  std::vector<std::pair<std::string, preprocess::Histogram>> h;
  for (auto m : {preprocess::TargetMode::depth, preprocess::TargetMode::sqrt_disparity})
    h.emplace_back(preprocess::to_string(m), preprocess::target_histogram(samples, m, 16));
  const auto svg = plot::histogram_chart(h, "targets <train>");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("depth (H="), std::string::npos);
  EXPECT_NE(svg.find("sqrt_disparity (H="), std::string::npos);
  EXPECT_NE(svg.find("&lt;train&gt;"), std::string::npos);
  EXPECT_EQ(svg.substr(svg.size() - 7), "</svg>\n");
}

TEST(Svg, LossCurveReadsRunLogs) {
  TempDir dir("plot");
  write_text_file(dir / "run.log", std::string(training::kRunLogHeader) + "\n1,2,1,1,0,0\n2,1.5,0.8,0.7,0,0\n");
  const auto curves = plot::read_loss_curves(dir / "run.log");
  ASSERT_EQ(curves.size(), 3u);  // all-zero columns are dropped
  EXPECT_EQ(curves[1].label, "loss_latent");
  EXPECT_EQ(curves[0].y, (std::vector<double>{2, 1.5}));
  EXPECT_NE(plot::loss_curve_chart(dir / "run.log").find("polyline"), std::string::npos);

  write_text_file(dir / "empty.log", std::string(training::kRunLogHeader) + "\n");
  EXPECT_THROW(plot::read_loss_curves(dir / "empty.log"), DegenerateError);
  write_text_file(dir / "other.csv", "a,b\n1,2\n");
  EXPECT_THROW(plot::read_loss_curves(dir / "other.csv"), ParseError);
  write_text_file(dir / "short.log", std::string(training::kRunLogHeader) + "\n1,2\n");
  EXPECT_THROW(plot::read_loss_curves(dir / "short.log"), ParseError);
}

TEST(Svg, AblationTableChartAndJson) {
  training::AblationTable t{"preprocess", {"mode", "val.abs_rel"}, {{"depth", "9.1"}, {"sqrt_disp", "7.2"}}, {}};
  const auto svg = plot::table_chart(t);
  EXPECT_NE(svg.find("sqrt_disp"), std::string::npos);
  EXPECT_DOUBLE_EQ(t.value("sqrt_disp", "val.abs_rel"), 7.2);
  const auto back = training::AblationTable::from_json(t.to_json());
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_EQ(back.columns, t.columns);
  EXPECT_NE(t.markdown().find("| depth | 9.1 |"), std::string::npos);
  training::AblationTable empty{"x", {"a"}, {}, {}};
  EXPECT_THROW(plot::table_chart(empty), DegenerateError);
  EXPECT_THROW(t.value("disparity", "val.abs_rel"), ConfigError);
}
