#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "doamo/model_io.hpp"
#include "doamo/viz.hpp"
#include "test_support.hpp"

namespace doamo {
namespace {

using Rgb = std::array<std::uint8_t, 3>;

TEST(Colormap, Stops) {
  EXPECT_EQ(viz::colormap(0.0), (Rgb{0, 0, 128}));
  EXPECT_EQ(viz::colormap(0.125), (Rgb{0, 0, 255}));
  EXPECT_EQ(viz::colormap(0.375), (Rgb{0, 255, 255}));
  EXPECT_EQ(viz::colormap(0.5), (Rgb{128, 255, 128}));
  EXPECT_EQ(viz::colormap(0.625), (Rgb{255, 255, 0}));
  EXPECT_EQ(viz::colormap(0.875), (Rgb{255, 0, 0}));
  EXPECT_EQ(viz::colormap(1.0), (Rgb{128, 0, 0}));
  EXPECT_EQ(viz::colormap(-3.0), viz::colormap(0.0));
  EXPECT_EQ(viz::colormap(7.0), viz::colormap(1.0));
  EXPECT_EQ(viz::colormap(std::nan("")), viz::colormap(0.0));
}

TEST(Normalize, DegenerateAndRange) {
  const Tensor zero({4, 4});
  const Tensor nz = viz::normalize_minmax(zero);
  for (double v : nz.storage()) EXPECT_EQ(v, 0.0);
  const Tensor flat({3, 3}, 2.5);
  const Tensor nf = viz::normalize_minmax(flat);
  for (double v : nf.storage()) EXPECT_EQ(v, 0.0);
  Rng rng(1);
  const Tensor t = testing::random_tensor({5, 7}, rng, -3.0, 4.0);
  const Tensor n = viz::normalize_minmax(t);
  const auto [lo, hi] = std::minmax_element(n.storage().begin(), n.storage().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
}

TEST(GradCamMap, OneChannelByHand) {
  const Tensor a({1, 2, 2}, {1.0, -2.0, 3.0, 0.0});
  const Tensor g({1, 2, 2}, {0.2, 0.4, 0.6, 0.8});  // mean 0.5
  const Tensor m = viz::grad_cam_map(a, g);
  EXPECT_EQ(m.storage(), (std::vector<double>{0.5, 0.0, 1.5, 0.0}));
  const Tensor neg({1, 2, 2}, -1.0);  // negative weight flips, ReLU clips
  EXPECT_EQ(viz::grad_cam_map(a, neg).storage(), (std::vector<double>{0.0, 2.0, 0.0, 0.0}));
}

TEST(GradCamMap, TwoChannelsByHand) {
  const Tensor a({2, 1, 2}, {1.0, 2.0, 3.0, -1.0});
  const Tensor g({2, 1, 2}, {1.0, 1.0, -0.5, 0.5});  // weights 1 and 0
  EXPECT_EQ(viz::grad_cam_map(a, g).storage(), (std::vector<double>{1.0, 2.0}));
  EXPECT_THROW(viz::grad_cam_map(a, Tensor({1, 1, 2})), std::invalid_argument);
}

TEST(GradCam, ZeroHeadsGiveZeroMap) {
  detector::Detector model(detector::DetectorConfig{}, 2);
  testing::zero_all_params(model.store());
  Rng rng(3);
  const auto res = viz::grad_cam(model, testing::random_tensor({3, 64, 64}, rng));
  for (double v : res.raw.storage()) EXPECT_EQ(v, 0.0);
  for (double v : res.map.storage()) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, MapInUnitRangeAndDeterministic) {
  detector::Detector model(detector::DetectorConfig{}, 5);
  Rng rng(4);
  const Tensor img = testing::random_tensor({3, 64, 64}, rng);
  const auto a = viz::grad_cam(model, img);
  const auto b = viz::grad_cam(model, img);
  ASSERT_EQ(a.map.shape(), (Shape{64, 64}));
  EXPECT_EQ(a.raw.shape(), (Shape{8, 8}));
  for (double v : a.map.storage()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(a.map.storage(), b.map.storage());
  EXPECT_EQ(a.anchor, b.anchor);
  EXPECT_GT(a.score, 0.0);
  for (const auto& [name, p] : model.store().params()) EXPECT_FALSE(p->has_grad()) << name;
}

detector::DetectorConfig doam_config() {
  detector::DetectorConfig c;
  c.use_doam = true;
  return c;
}

TEST(Attention, ZeroWeightsGiveUniformMidHeatmap) {
  detector::Detector model(doam_config(), 6);
  testing::zero_all_params(model.store());
  Rng rng(7);
  const auto maps = viz::attention_maps(model, testing::random_tensor({3, 64, 64}, rng));
  for (double v : maps.attention.storage()) EXPECT_EQ(v, 0.5);
  const Image8 heat = viz::heatmap(maps.attention);
  EXPECT_EQ(heat.width, 64);
  EXPECT_EQ(heat.height, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      EXPECT_EQ((Rgb{heat.at(y, x, 0), heat.at(y, x, 1), heat.at(y, x, 2)}), (Rgb{128, 255, 128}));
    }
  }
  detector::Detector plain(detector::DetectorConfig{}, 6);
  EXPECT_THROW(viz::attention_maps(plain, Tensor({3, 64, 64})), std::invalid_argument);
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Attention, OverlayIsByteIdenticalAndInputSized) {
  detector::Detector model(doam_config(), 8);
  Rng rng(9);
  const Tensor img = testing::random_tensor({3, 64, 64}, rng);
  const Image8 base = from_tensor(img);
  testing::TempDir dir("viz");
  for (const char* name : {"a.png", "b.png"}) {
    const auto maps = viz::attention_maps(model, img);
    const Image8 over = viz::overlay(base, maps.attention);
    EXPECT_EQ(over.width, base.width);
    EXPECT_EQ(over.height, base.height);
    write_png(dir.path() / name, over);
  }
  EXPECT_EQ(file_bytes(dir.path() / "a.png"), file_bytes(dir.path() / "b.png"));
  EXPECT_THROW(viz::overlay(base, Tensor({1, 32, 32})), std::invalid_argument);
}

TEST(Overlay, BlendsLuminanceAndColor) {
  Image8 base{1, 1, 3, {100, 100, 100}};
  const Image8 out = viz::overlay(base, Tensor({1, 1}, 1.0), 0.5);
  EXPECT_EQ(out.pixels, (std::vector<std::uint8_t>{114, 50, 50}));  // (128+100)/2, 100/2
  const Image8 g = viz::gray(Tensor({1, 2}, {0.0, 1.0}));
  EXPECT_EQ(g.pixels, (std::vector<std::uint8_t>{0, 255}));
}

TEST(ModelIo, ConfigRoundTrip) {
  detector::DetectorConfig c = doam_config();
  c.widths = {8, 16, 16, 32, 32};
  c.doam.scales = {4, 8};
  c.doam.eg_channels = 6;
  const auto back = detector::decode_config(detector::encode_config(c));
  EXPECT_EQ(back.widths, c.widths);
  EXPECT_EQ(back.doam.scales, c.doam.scales);
  EXPECT_EQ(back.doam.eg_channels, 6);
  EXPECT_TRUE(back.use_doam);
  EXPECT_EQ(back.heads.size(), c.heads.size());
  EXPECT_EQ(back.heads[1].scale, 0.5);
  EXPECT_EQ(detector::encode_config(back).storage(), detector::encode_config(c).storage());
  Tensor bad = detector::encode_config(c);
  bad[0] = 7.0;
  EXPECT_THROW(detector::decode_config(bad), std::runtime_error);
}

TEST(ModelIo, CheckpointRoundTrip) {
  detector::Detector model(doam_config(), 10);
  testing::TempDir dir("ckpt");
  detector::save_checkpoint(dir.path() / "m.ckpt", model);
  detector::Detector back = detector::load_checkpoint(dir.path() / "m.ckpt");
  EXPECT_EQ(serialize_archive(detector::to_archive(back)), serialize_archive(detector::to_archive(model)));
  Rng rng(11);
  const Var x = constant(testing::random_tensor({1, 3, 64, 64}, rng));
  EXPECT_EQ(model.forward(x, false).conf->value.storage(), back.forward(x, false).conf->value.storage());
  ArrayArchive no_meta = model.store().state();
  EXPECT_THROW(detector::from_archive(no_meta), std::runtime_error);
}

TEST(ModelIo, ApplyKeys) {
  detector::DetectorConfig c;
  detector::apply_model_keys(c, KeyValues::parse("use_doam = true\nwidths = 8,16,16,32,32\ndoam_scales=3, 6\n"));
  EXPECT_TRUE(c.use_doam);
  EXPECT_EQ(c.widths, (std::vector<int>{8, 16, 16, 32, 32}));
  EXPECT_EQ(c.doam.scales, (std::vector<int>{3, 6}));
  EXPECT_THROW(detector::apply_model_keys(c, KeyValues::parse("widths = 8,x\n")), std::runtime_error);
}

}  // namespace
}  // namespace doamo
