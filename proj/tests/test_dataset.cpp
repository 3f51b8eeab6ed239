#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "doamo/dataset.hpp"
#include "doamo/image_io.hpp"
#include "test_support.hpp"

namespace doamo {
namespace {

using namespace data;
namespace fs = std::filesystem;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << s;
}

void write_blank_png(const fs::path& p, int w, int h) {
  fs::create_directories(p.parent_path());
  Image8 img{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3, 200)};
  write_png(p, img);
}

TEST(ImageIo, PngRoundTripIsExact) {
  TempDir dir("png");
  Rng rng(1);
  Image8 img{7, 5, 3, {}};
  for (int i = 0; i < 7 * 5 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng() % 256));
  write_png(dir.path() / "a.png", img);
  Image8 back = read_image(dir.path() / "a.png");
  EXPECT_EQ(back.width, 7);
  EXPECT_EQ(back.height, 5);
  EXPECT_EQ(back.channels, 3);
  EXPECT_EQ(back.pixels, img.pixels);
  ImageSize s = image_dimensions(dir.path() / "a.png");
  EXPECT_EQ(s.width, 7);
  EXPECT_EQ(s.height, 5);
}

TEST(ImageIo, TensorConversionRoundTrip) {
  Image8 img{3, 2, 1, {0, 17, 255, 128, 64, 1}};
  EXPECT_EQ(from_tensor(to_tensor(img)).pixels, img.pixels);
  EXPECT_DOUBLE_EQ(to_tensor(img).at(0, 0, 2), 1.0);
}

TEST(ImageIo, RejectsUnknownFormat) {
  TempDir dir("fmt");
  write_text(dir.path() / "x.png", "not an image");
  EXPECT_THROW(read_image(dir.path() / "x.png"), std::runtime_error);
}

TEST(ImageIo, ResizeConstantAndIdentity) {
  Tensor t({2, 5, 7}, 0.25);
  Tensor r = resize_bilinear(t, 3, 11);
  EXPECT_EQ(r.shape(), (Shape{2, 3, 11}));
  EXPECT_NEAR(r.min(), 0.25, 1e-15);
  EXPECT_NEAR(r.max(), 0.25, 1e-15);
  Rng rng(2);
  Tensor u = testing::random_tensor({1, 4, 4}, rng);
  EXPECT_EQ(max_abs_diff(resize_bilinear(u, 4, 4), u), 0.0);
}

TEST(Annotations, ParseAndFormatRoundTrip) {
  const auto& cls = kOpixrayClasses;
  Annotation a = parse_annotation_line("FO 10 12.5 40 60", 100, 80, cls, "t");
  EXPECT_EQ(a.category, "FO");
  EXPECT_EQ(a.box, (Box{10, 12.5, 40, 60}));
  EXPECT_FALSE(a.occlusion.has_value());
  Annotation b = parse_annotation_line("MU 0 0 100 80 0.3125", 100, 80, cls, "t");
  ASSERT_TRUE(b.occlusion.has_value());
  EXPECT_EQ(*b.occlusion, 0.3125);
  for (const Annotation& x : {a, b}) {
    EXPECT_EQ(parse_annotation_line(format_annotation_line(x), 100, 80, cls, "t"), x);
  }
}

TEST(Annotations, RejectsInvalidLines) {
  const auto& cls = kOpixrayClasses;
  try {
    parse_annotation_line("FO 10 10 5 20", 100, 100, cls, "a.txt:3");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("a.txt:3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("x2 <= x1"), std::string::npos);
  }
  EXPECT_THROW(parse_annotation_line("FO 10 20 15 20", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("XX 1 1 5 5", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("FO 1 1 5", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("FO 1 1 5 abc", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("FO 1 1 101 5", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("FO -1 1 10 5", 100, 100, cls, ""), std::runtime_error);
  EXPECT_THROW(parse_annotation_line("FO 1 1 10 5 1.5", 100, 100, cls, ""), std::runtime_error);
}

TEST(LoadDataset, ParsesRecordsAndEmptyAnnotationFiles) {
  TempDir dir("load");
  const fs::path root = dir.path();
  write_blank_png(root / "train/images/a.png", 40, 30);
  write_blank_png(root / "train/images/b.png", 40, 30);
  write_text(root / "train/annotations/a.txt", "FO 1 2 10 20\n\nSC 5 5 39 29 0.25\n");
  write_text(root / "train/annotations/b.txt", "");
  Dataset ds = load_dataset(root, "train");
  ASSERT_EQ(ds.records.size(), 2u);
  EXPECT_EQ(ds.classes, kOpixrayClasses);
  EXPECT_EQ(ds.records[0].image_id, "a");
  EXPECT_EQ(ds.records[0].annotations.size(), 2u);
  EXPECT_TRUE(ds.records[1].annotations.empty());
  EXPECT_EQ(ds.records[0].level, OcclusionLevel::kUnknown);
  EXPECT_EQ(ds.manifest.images, 2u);
  EXPECT_EQ(ds.manifest.categories.at("FO"), 1u);
  EXPECT_EQ(ds.manifest.categories.at("SC"), 1u);
  EXPECT_EQ(ds.manifest.width, 40);
  EXPECT_EQ(ds.manifest.height, 30);
  EXPECT_TRUE(ds.manifest.levels.empty());
}

TEST(LoadDataset, ReportsFileAndLineOnErrors) {
  TempDir dir("bad");
  const fs::path root = dir.path();
  write_blank_png(root / "test/images/a.png", 20, 20);
  EXPECT_THROW(load_dataset(root, "test"), std::runtime_error);  // annotation file missing
  write_text(root / "test/annotations/a.txt", "ST 1 1 5 5\nFO 10 10 5 20\n");
  try {
    load_dataset(root, "test");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("a.txt:2"), std::string::npos) << e.what();
  }
  write_text(root / "test/annotations/a.txt", "ST 1 1 25 5\n");
  EXPECT_THROW(load_dataset(root, "test"), std::runtime_error);  // out of bounds
  EXPECT_THROW(load_dataset(root, "nope"), std::runtime_error);
}

TEST(LoadDataset, LevelsFromSubsetDirectories) {
  TempDir dir("levels");
  const fs::path root = dir.path();
  write_text(root / "classes.txt", "a\nb\n");
  write_blank_png(root / "test/OL1/images/x.png", 10, 10);
  write_text(root / "test/OL1/annotations/x.txt", "a 1 1 5 5\nb 2 2 6 6\n");
  write_blank_png(root / "test/OL3/images/y.png", 10, 10);
  write_text(root / "test/OL3/annotations/y.txt", "b 1 1 5 5\n");
  Dataset ds = load_dataset(root, "test");
  EXPECT_EQ(ds.classes, (std::vector<std::string>{"a", "b"}));
  ASSERT_EQ(ds.records.size(), 2u);
  EXPECT_EQ(ds.records[0].level, OcclusionLevel::kOL1);
  EXPECT_EQ(ds.records[1].level, OcclusionLevel::kOL3);
  EXPECT_EQ(ds.manifest.levels.at("OL1"), 1u);
  EXPECT_EQ(ds.manifest.levels.at("OL3"), 1u);
  EXPECT_EQ(ds.manifest.level_categories.at("OL1").at("b"), 1u);
}

TEST(LoadDataset, WriteThenLoadReproducesRecords) {
  TempDir dir("rt");
  const fs::path root = dir.path();
  Rng rng(4);
  std::vector<ImageRecord> written;
  for (int i = 0; i < 6; ++i) {
    ImageRecord r;
    r.image_id = "img" + std::to_string(i);
    r.width = 50;
    r.height = 40;
    r.image_path = root / "train/images" / (r.image_id + ".png");
    write_blank_png(r.image_path, 50, 40);
    for (int k = 0; k < i % 3; ++k) {
      std::uniform_real_distribution<double> u(0, 20);
      const double x = u(rng), y = u(rng);
      Annotation a{kOpixrayClasses[(i + k) % 5], {x, y, x + 1 + u(rng), y + 1 + u(rng) / 2}, {}};
      if (k == 1) a.occlusion = u(rng) / 20;
      r.annotations.push_back(a);
    }
    write_annotations(root / "train/annotations", r);
    written.push_back(r);
  }
  Dataset ds = load_dataset(root, "train");
  ASSERT_EQ(ds.records.size(), written.size());
  for (std::size_t i = 0; i < written.size(); ++i) {
    EXPECT_EQ(ds.records[i].image_id, written[i].image_id);
    EXPECT_EQ(ds.records[i].annotations, written[i].annotations);
  }
}

DatasetManifest manifest_from_expectation(const std::string& split, const Expectation& e) {
  DatasetManifest m;
  m.split = split;
  for (const auto& [key, n] : e) {
    if (key == "images") {
      m.images = n;
    } else if (key.rfind("category.", 0) == 0) {
      m.categories[key.substr(9)] = n;
    } else if (key.find(".category.") != std::string::npos) {
      const auto dot = key.find(".category.");
      m.level_categories[key.substr(6, dot - 6)][key.substr(dot + 10)] = n;
    } else {
      m.levels[key.substr(6)] = n;
    }
  }
  return m;
}

TEST(ValidateDistribution, OpixrayCountsHaveNoMismatch) {
  for (const std::string name : {"train", "test", "total"}) {
    const Expectation e = opixray_preset(name);
    EXPECT_TRUE(validate_distribution(manifest_from_expectation(name, e), e).ok()) << name;
  }
}

TEST(ValidateDistribution, PresetArithmetic) {
  const Expectation tr = opixray_train_preset(), te = opixray_test_preset(),
                    to = opixray_total_preset();
  EXPECT_EQ(tr.at("images") + te.at("images"), to.at("images"));
  EXPECT_EQ(to.at("images"), 8885u);
  for (const std::string& c : kOpixrayClasses) {
    EXPECT_EQ(tr.at("category." + c) + te.at("category." + c), to.at("category." + c)) << c;
    std::size_t by_level = 0;
    for (const std::string& l : kLevelNames) by_level += te.at("level." + l + ".category." + c);
    EXPECT_EQ(by_level, te.at("category." + c)) << c;
  }
  EXPECT_EQ(te.at("level.OL1") + te.at("level.OL2") + te.at("level.OL3"), te.at("images"));
  EXPECT_EQ(te.at("images"), 1776u);
  // Item totals exceed image totals: some images hold several items.
  std::size_t items = 0;
  for (const std::string& c : kOpixrayClasses) items += tr.at("category." + c);
  EXPECT_EQ(items, 7139u);
  EXPECT_GT(items, tr.at("images"));
}

TEST(ValidateDistribution, MergedSplitsMatchTotalPreset) {
  DatasetManifest tr = manifest_from_expectation("train", opixray_train_preset());
  DatasetManifest te = manifest_from_expectation("test", opixray_test_preset());
  DatasetManifest all = merge_manifests("total", tr, te);
  EXPECT_TRUE(validate_distribution(all, opixray_total_preset()).ok());
}

TEST(ValidateDistribution, SinglePerturbationGivesOneMismatch) {
  const Expectation e = opixray_test_preset();
  DatasetManifest m = manifest_from_expectation("test", e);
  m.categories["SC"] += 1;
  ValidationReport r = validate_distribution(m, e);
  ASSERT_EQ(r.mismatches.size(), 1u);
  EXPECT_EQ(r.mismatches[0].key, "category.SC");
  EXPECT_EQ(r.mismatches[0].expected, 369u);
  EXPECT_EQ(r.mismatches[0].actual, 370u);
  EXPECT_FALSE(r.to_json()["ok"].get<bool>());
}

TEST(ValidateDistribution, ManifestJsonRoundTrip) {
  DatasetManifest m = manifest_from_expectation("test", opixray_test_preset());
  m.width = 1225;
  m.height = 954;
  DatasetManifest back = DatasetManifest::from_json(nlohmann::json::parse(m.to_json().dump()));
  EXPECT_EQ(back.counts(), m.counts());
  EXPECT_EQ(back.width, 1225);
}

Mask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  Mask m{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.data[static_cast<std::size_t>(y) * w + x] = 1;
  return m;
}

TEST(OcclusionFraction, HandCases) {
  Mask target = rect_mask(20, 20, 5, 5, 15, 15);
  EXPECT_EQ(occlusion_fraction(target, {}), 0.0);
  EXPECT_EQ(occlusion_fraction(target, {target}), 1.0);
  // 10x10 target, 10x5 occluder over half of it.
  EXPECT_EQ(occlusion_fraction(target, {rect_mask(20, 20, 5, 5, 15, 10)}), 0.5);
  // Overlapping occluders count each pixel once.
  EXPECT_EQ(occlusion_fraction(target, {rect_mask(20, 20, 5, 5, 15, 10),
                                        rect_mask(20, 20, 5, 8, 15, 10)}),
            0.5);
  EXPECT_EQ(level_for_fraction(0.0), OcclusionLevel::kOL1);
  EXPECT_EQ(level_for_fraction(0.1), OcclusionLevel::kOL2);
  EXPECT_EQ(level_for_fraction(0.499), OcclusionLevel::kOL2);
  EXPECT_EQ(level_for_fraction(0.5), OcclusionLevel::kOL3);
  EXPECT_EQ(level_for_fraction(1.0), OcclusionLevel::kOL3);
}

TEST(Synthetic, ZeroDensityIsAllLevelOne) {
  SyntheticConfig cfg;
  cfg.occlusion_density = 0.0;
  for (int i = 0; i < 50; ++i) {
    SyntheticSample s = render_synthetic(cfg, 3, "test", i);
    EXPECT_EQ(*s.target.occlusion, 0.0);
    EXPECT_EQ(level_for_fraction(*s.target.occlusion), OcclusionLevel::kOL1);
  }
}

TEST(Synthetic, SamplesAreValidAndVaried) {
  SyntheticConfig cfg;
  std::array<int, 4> levels{};
  std::array<int, 5> labels{};
  for (int i = 0; i < 300; ++i) {
    SyntheticSample s = render_synthetic(cfg, 5, "train", i);
    EXPECT_TRUE(s.target.box.valid());
    EXPECT_GE(s.target.box.x1, 0);
    EXPECT_LE(s.target.box.x2, cfg.image_size);
    EXPECT_GE(s.image.min(), 0.0);
    EXPECT_LE(s.image.max(), 1.0);
    EXPECT_EQ(s.target.category, kSyntheticClasses[s.label]);
    ++levels[static_cast<int>(level_for_fraction(*s.target.occlusion))];
    ++labels[s.label];
  }
  for (int l = 1; l <= 3; ++l) EXPECT_GT(levels[l], 20) << "level " << l;
  for (int c = 0; c < 5; ++c) EXPECT_GT(labels[c], 30) << "class " << c;
}

TEST(Synthetic, RejectsUnsatisfiableConfig) {
  SyntheticConfig cfg;
  cfg.target_max = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.num_classes = 6;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.occlusion_density = -0.1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Synthetic, GeneratedDatasetLoadsAndLevelsAgreeWithFraction) {
  TempDir dir("gen");
  SyntheticConfig cfg;
  cfg.train_images = 12;
  cfg.test_images = 30;
  generate_synthetic(cfg, 9, dir.path());
  Dataset tr = load_dataset(dir.path(), "train");
  Dataset te = load_dataset(dir.path(), "test");
  EXPECT_EQ(tr.records.size(), 12u);
  EXPECT_EQ(te.records.size(), 30u);
  EXPECT_EQ(tr.classes, kSyntheticClasses);
  std::size_t level_sum = 0;
  for (const auto& [l, n] : te.manifest.levels) level_sum += n;
  EXPECT_EQ(level_sum, te.manifest.images);
  for (const ImageRecord& r : te.records) {
    ASSERT_EQ(r.annotations.size(), 1u);
    ASSERT_TRUE(r.annotations[0].occlusion.has_value());
    EXPECT_EQ(level_for_fraction(*r.annotations[0].occlusion, cfg.thresholds), r.level);
  }
  // The on-disk manifest agrees with the loaded one.
  auto j = nlohmann::json::parse(slurp(dir.path() / "test/manifest.json"));
  EXPECT_EQ(DatasetManifest::from_json(j).counts(), te.manifest.counts());
}

TEST(Synthetic, FixedSeedIsByteIdentical) {
  TempDir a("gena"), b("genb");
  SyntheticConfig cfg;
  cfg.train_images = 8;
  cfg.test_images = 8;
  generate_synthetic(cfg, 21, a.path());
  generate_synthetic(cfg, 21, b.path());
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path());
    ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 30u);
  TempDir c("genc");
  generate_synthetic(cfg, 22, c.path());
  EXPECT_NE(slurp(a.path() / "train/images/train_000000.png"),
            slurp(c.path() / "train/images/train_000000.png"));
}

}  // namespace
}  // namespace doamo
