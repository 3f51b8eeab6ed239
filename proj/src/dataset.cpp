#include "doamo/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "doamo/image_io.hpp"

namespace fs = std::filesystem;

namespace doamo::data {

std::string level_name(OcclusionLevel level) {
  switch (level) {
    case OcclusionLevel::kOL1: return "OL1";
    case OcclusionLevel::kOL2: return "OL2";
    case OcclusionLevel::kOL3: return "OL3";
    default: return "unknown";
  }
}

std::map<std::string, std::size_t> DatasetManifest::counts() const {
  std::map<std::string, std::size_t> out{{"images", images}};
  for (const auto& [c, n] : categories) out["category." + c] = n;
  for (const auto& [l, n] : levels) out["level." + l] = n;
  for (const auto& [l, cats] : level_categories) {
    for (const auto& [c, n] : cats) out["level." + l + ".category." + c] = n;
  }
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"split", split},   {"images", images},          {"categories", categories},
          {"levels", levels}, {"level_categories", level_categories},
          {"width", width},   {"height", height}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.split = j.at("split").get<std::string>();
  m.images = j.at("images").get<std::size_t>();
  m.categories = j.value("categories", decltype(m.categories){});
  m.levels = j.value("levels", decltype(m.levels){});
  m.level_categories = j.value("level_categories", decltype(m.level_categories){});
  m.width = j.value("width", 0);
  m.height = j.value("height", 0);
  return m;
}

DatasetManifest compute_manifest(const std::string& split, const std::vector<ImageRecord>& records) {
  DatasetManifest m;
  m.split = split;
  m.images = records.size();
  bool first = true;
  for (const ImageRecord& r : records) {
    if (first) {
      m.width = r.width;
      m.height = r.height;
      first = false;
    } else if (m.width != r.width || m.height != r.height) {
      m.width = m.height = 0;
    }
    const bool leveled = r.level != OcclusionLevel::kUnknown;
    const std::string ln = level_name(r.level);
    if (leveled) ++m.levels[ln];
    for (const Annotation& a : r.annotations) {
      ++m.categories[a.category];
      if (leveled) ++m.level_categories[ln][a.category];
    }
  }
  return m;
}

DatasetManifest merge_manifests(const std::string& split, const DatasetManifest& a,
                                const DatasetManifest& b) {
  DatasetManifest m = a;
  m.split = split;
  m.images += b.images;
  for (const auto& [k, n] : b.categories) m.categories[k] += n;
  for (const auto& [k, n] : b.levels) m.levels[k] += n;
  for (const auto& [l, cats] : b.level_categories) {
    for (const auto& [c, n] : cats) m.level_categories[l][c] += n;
  }
  if (a.width != b.width || a.height != b.height) m.width = m.height = 0;
  return m;
}

int Dataset::class_index(const std::string& category) const {
  auto it = std::find(classes.begin(), classes.end(), category);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

Annotation parse_annotation_line(const std::string& line, int width, int height,
                                 const std::vector<std::string>& classes,
                                 const std::string& where) {
  std::istringstream in(line);
  std::vector<std::string> tok;
  for (std::string t; in >> t;) tok.push_back(t);
  if (tok.size() != 5 && tok.size() != 6) {
    throw std::runtime_error(where + ": expected 'category x1 y1 x2 y2 [f]', got '" + line + "'");
  }
  Annotation a;
  a.category = tok[0];
  if (std::find(classes.begin(), classes.end(), a.category) == classes.end()) {
    throw std::runtime_error(where + ": unknown category '" + a.category + "'");
  }
  double v[5] = {};
  for (std::size_t i = 1; i < tok.size(); ++i) {
    const std::string& s = tok[i];
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v[i - 1]);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v[i - 1])) {
      throw std::runtime_error(where + ": bad number '" + s + "'");
    }
  }
  a.box = {v[0], v[1], v[2], v[3]};
  if (a.box.x2 <= a.box.x1) throw std::runtime_error(where + ": x2 <= x1");
  if (a.box.y2 <= a.box.y1) throw std::runtime_error(where + ": y2 <= y1");
  if (a.box.x1 < 0 || a.box.y1 < 0 || a.box.x2 > width || a.box.y2 > height) {
    throw std::runtime_error(where + ": box " + box_str(a.box) + " outside " +
                             std::to_string(width) + "x" + std::to_string(height) + " image");
  }
  if (tok.size() == 6) {
    if (v[4] < 0.0 || v[4] > 1.0) throw std::runtime_error(where + ": occlusion outside [0,1]");
    a.occlusion = v[4];
  }
  return a;
}

std::string format_annotation_line(const Annotation& a) {
  std::string s = a.category + " " + fmt_double(a.box.x1) + " " + fmt_double(a.box.y1) + " " +
                  fmt_double(a.box.x2) + " " + fmt_double(a.box.y2);
  if (a.occlusion) s += " " + fmt_double(*a.occlusion);
  return s;
}

std::vector<std::string> load_classes(const fs::path& root) {
  std::ifstream in(root / "classes.txt");
  if (!in) return kOpixrayClasses;
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ls(line);
    std::string name;
    if (ls >> name) out.push_back(name);
  }
  if (out.empty()) throw std::runtime_error((root / "classes.txt").string() + ": no classes");
  return out;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void read_subset(const fs::path& dir, OcclusionLevel level, const std::vector<std::string>& classes,
                 std::vector<ImageRecord>& out) {
  const fs::path images = dir / "images", annotations = dir / "annotations";
  if (!fs::is_directory(images)) throw std::runtime_error("missing directory " + images.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const fs::path& f : files) {
    ImageRecord r;
    r.image_id = f.stem().string();
    r.image_path = f;
    r.level = level;
    const ImageSize size = image_dimensions(f);
    r.width = size.width;
    r.height = size.height;
    const fs::path ann = annotations / (r.image_id + ".txt");
    std::ifstream in(ann);
    if (!in) throw std::runtime_error("missing annotation file " + ann.string());
    int lineno = 0;
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      r.annotations.push_back(parse_annotation_line(line, r.width, r.height, classes,
                                                    ann.string() + ":" + std::to_string(lineno)));
    }
    out.push_back(std::move(r));
  }
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::string& split) {
  Dataset ds;
  ds.classes = load_classes(root);
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw std::runtime_error("missing split directory " + dir.string());
  bool leveled = false;
  for (int l = 1; l <= 3; ++l) {
    const fs::path sub = dir / kLevelNames[l - 1];
    if (fs::is_directory(sub)) {
      read_subset(sub, static_cast<OcclusionLevel>(l), ds.classes, ds.records);
      leveled = true;
    }
  }
  if (!leveled) read_subset(dir, OcclusionLevel::kUnknown, ds.classes, ds.records);
  std::set<std::string> ids;
  for (const ImageRecord& r : ds.records) {
    if (!ids.insert(r.image_id).second) {
      throw std::runtime_error("duplicate image id '" + r.image_id + "' in split " + split);
    }
  }
  ds.manifest = compute_manifest(split, ds.records);
  return ds;
}

void write_annotations(const fs::path& annotation_dir, const ImageRecord& record) {
  fs::create_directories(annotation_dir);
  std::ofstream out(annotation_dir / (record.image_id + ".txt"), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write annotations for " + record.image_id);
  for (const Annotation& a : record.annotations) out << format_annotation_line(a) << "\n";
}

nlohmann::json ValidationReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const Mismatch& m : mismatches) {
    list.push_back({{"key", m.key}, {"expected", m.expected}, {"actual", m.actual}});
  }
  return {{"ok", ok()}, {"mismatches", list}};
}

ValidationReport validate_distribution(const DatasetManifest& manifest, const Expectation& expected) {
  const auto actual = manifest.counts();
  ValidationReport rep;
  for (const auto& [key, want] : expected) {
    auto it = actual.find(key);
    const std::size_t got = it == actual.end() ? 0 : it->second;
    if (got != want) rep.mismatches.push_back({key, want, got});
  }
  return rep;
}

namespace {

Expectation category_counts(const std::string& prefix, std::array<std::size_t, 5> v) {
  Expectation e;
  for (std::size_t i = 0; i < 5; ++i) e[prefix + "category." + kOpixrayClasses[i]] = v[i];
  return e;
}

void merge_into(Expectation& dst, const Expectation& src) {
  for (const auto& [k, v] : src) dst[k] = v;
}

}  // namespace

Expectation opixray_train_preset() {
  Expectation e = category_counts("", {1589, 809, 1494, 1635, 1612});
  e["images"] = 7109;
  return e;
}

Expectation opixray_test_preset() {
  Expectation e = category_counts("", {404, 235, 369, 343, 430});
  e["images"] = 1776;
  e["level.OL1"] = 922;
  e["level.OL2"] = 548;
  e["level.OL3"] = 306;
  merge_into(e, category_counts("level.OL1.", {206, 88, 160, 214, 255}));
  merge_into(e, category_counts("level.OL2.", {148, 84, 126, 88, 105}));
  merge_into(e, category_counts("level.OL3.", {50, 63, 83, 41, 70}));
  return e;
}

Expectation opixray_total_preset() {
  Expectation e = category_counts("", {1993, 1044, 1863, 1978, 2042});
  e["images"] = 8885;
  return e;
}

Expectation opixray_preset(const std::string& name) {
  if (name == "train") return opixray_train_preset();
  if (name == "test") return opixray_test_preset();
  if (name == "total") return opixray_total_preset();
  throw std::invalid_argument("unknown preset '" + name + "' (train, test, total)");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

double occlusion_fraction(const Mask& target, const std::vector<Mask>& occluders) {
  for (const Mask& o : occluders) {
    if (o.width != target.width || o.height != target.height) {
      throw std::invalid_argument("occlusion_fraction: mask size mismatch");
    }
  }
  std::size_t area = 0, covered = 0;
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    if (!target.data[i]) continue;
    ++area;
    for (const Mask& o : occluders) {
      if (o.data[i]) {
        ++covered;
        break;
      }
    }
  }
  return area == 0 ? 0.0 : static_cast<double>(covered) / area;
}

OcclusionLevel level_for_fraction(double f, const OcclusionThresholds& t) {
  if (f < t.ol2) return OcclusionLevel::kOL1;
  if (f < t.ol3) return OcclusionLevel::kOL2;
  return OcclusionLevel::kOL3;
}

void SyntheticConfig::validate() const {
  if (image_size < 16) throw std::invalid_argument("synthetic: image_size must be >= 16");
  if (num_classes < 1 || num_classes > static_cast<int>(kSyntheticClasses.size())) {
    throw std::invalid_argument("synthetic: num_classes must be in [1, 5]");
  }
  if (train_images < 0 || test_images < 0) {
    throw std::invalid_argument("synthetic: image counts must be >= 0");
  }
  if (occlusion_density < 0 || occlusion_density > 1) {
    throw std::invalid_argument("synthetic: occlusion_density must be in [0, 1]");
  }
  if (max_distractors < 0) throw std::invalid_argument("synthetic: max_distractors must be >= 0");
  if (!(target_min > 0) || target_min > target_max) {
    throw std::invalid_argument("synthetic: need 0 < target_min <= target_max");
  }
  if (target_max > 1.0) {
    throw std::invalid_argument("synthetic: target_max > 1 makes the target larger than the image");
  }
  if (!(thresholds.ol2 > 0) || thresholds.ol2 > thresholds.ol3 || thresholds.ol3 > 1) {
    throw std::invalid_argument("synthetic: need 0 < ol2 <= ol3 <= 1");
  }
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

using Color = std::array<double, 3>;

// Per-class transmission colour; lower values absorb more.
const std::array<Color, 5> kClassColors = {{{0.20, 0.30, 0.75},
                                            {0.85, 0.50, 0.15},
                                            {0.25, 0.65, 0.25},
                                            {0.60, 0.25, 0.65},
                                            {0.15, 0.60, 0.70}}};

struct Layer {
  Mask mask;
  Color color;
  double opacity;
  double stripe;  // texture frequency in cycles per pixel, 0 for flat
  double phase;
};

// Shape membership in local coordinates u, v in [-1, 1].
bool inside_shape(int shape, double u, double v) {
  switch (shape) {
    case 0: return std::abs(u) <= 1 && std::abs(v) <= 0.32;
    case 1: return u * u + v * v <= 1;
    case 2: return v >= -1 && v <= 1 && std::abs(u) <= (v + 1) / 2;
    case 3: return std::abs(u) <= 1 && std::abs(v) <= 1 && (std::abs(u) <= 0.3 || std::abs(v) <= 0.3);
    case 4: {
      const double r = u * u + v * v;
      return r <= 1 && r >= 0.36;
    }
    case 5: return std::abs(u) <= 1 && std::abs(v) <= 1;  // clutter: rectangle
    default: return u * u + v * v <= 1;                   // clutter: ellipse
  }
}

// Rasterises a shape centred at (cx, cy) with half extents (rx, ry),
// rotated by theta, testing pixel centres.
Mask rasterise(int size, int shape, double cx, double cy, double rx, double ry, double theta) {
  Mask m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size, 0)};
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
      if (inside_shape(shape, u, v)) m.data[static_cast<std::size_t>(y) * size + x] = 1;
    }
  }
  return m;
}

std::optional<Box> mask_bounds(const Mask& m) {
  int x1 = m.width, y1 = m.height, x2 = -1, y2 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.data[static_cast<std::size_t>(y) * m.width + x]) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return std::nullopt;
  return Box{double(x1), double(y1), double(x2 + 1), double(y2 + 1)};
}

void composite(Tensor& img, const Layer& l) {
  const int size = l.mask.width;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!l.mask.data[static_cast<std::size_t>(y) * size + x]) continue;
      double tex = 1.0;
      if (l.stripe > 0) tex = 0.8 + 0.2 * std::sin(2 * std::numbers::pi * l.stripe * (x + y) + l.phase);
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) *= 1.0 - l.opacity * tex * (1.0 - l.color[c]);
      }
    }
  }
}

}  // namespace

SyntheticSample render_synthetic(const SyntheticConfig& cfg, std::uint64_t seed,
                                 const std::string& split, int index) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(fnv1a(split) + static_cast<std::uint64_t>(index))));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const int s = cfg.image_size;

  // Bright bag background with low-frequency variation.
  Tensor img({3, s, s});
  const double base = uni(0.88, 0.97);
  const double fx = uni(0.5, 2.0) / s, fy = uni(0.5, 2.0) / s, ph = uni(0, 6.3);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double v = base + 0.03 * std::sin(2 * std::numbers::pi * (fx * x + fy * y) + ph);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = v;
    }

  // Target.
  const int label = static_cast<int>(u01(rng) * cfg.num_classes) % cfg.num_classes;
  Layer target;
  Box box;
  while (true) {
    const double side = uni(cfg.target_min, cfg.target_max) * s;
    const double rx = side / 2, ry = side / 2 * uni(0.75, 1.0);
    const double theta = uni(-0.5, 0.5);
    const double cx = uni(side / 2, s - side / 2), cy = uni(side / 2, s - side / 2);
    target.mask = rasterise(s, label, cx, cy, rx, ry, theta);
    auto b = mask_bounds(target.mask);
    if (b && b->width() >= 2 && b->height() >= 2) {
      box = *b;
      break;
    }
  }
  target.color = kClassColors[label];
  target.opacity = uni(0.75, 0.9);
  target.stripe = 0.08 + 0.04 * label;
  target.phase = uni(0, 6.3);

  // Clutter: each slot present with probability occlusion_density; present
  // items sit above the target half the time and then land on or near it.
  std::vector<Layer> below, above;
  for (int k = 0; k < cfg.max_distractors; ++k) {
    if (u01(rng) >= cfg.occlusion_density) continue;
    const bool on_top = u01(rng) < 0.5;
    const double rx = uni(0.08, 0.22) * s, ry = uni(0.08, 0.22) * s;
    double cx, cy;
    if (on_top) {
      cx = uni(box.x1 - rx, box.x2 + rx);
      cy = uni(box.y1 - ry, box.y2 + ry);
    } else {
      cx = uni(0, s);
      cy = uni(0, s);
    }
    Layer l;
    l.mask = rasterise(s, u01(rng) < 0.5 ? 5 : 6, cx, cy, rx, ry, uni(0, 3.2));
    const double g = uni(0.2, 0.8);
    l.color = {std::clamp(g + uni(-0.15, 0.15), 0.0, 1.0), std::clamp(g + uni(-0.15, 0.15), 0.0, 1.0),
               std::clamp(g + uni(-0.15, 0.15), 0.0, 1.0)};
    l.opacity = uni(0.6, 0.95);
    l.stripe = 0;
    l.phase = 0;
    (on_top ? above : below).push_back(std::move(l));
  }

  for (const Layer& l : below) composite(img, l);
  composite(img, target);
  for (const Layer& l : above) composite(img, l);

  std::vector<Mask> occluders;
  for (const Layer& l : above) occluders.push_back(l.mask);
  SyntheticSample out;
  out.image = std::move(img);
  out.label = label;
  out.target.category = kSyntheticClasses[label];
  out.target.box = box;
  out.target.occlusion = occlusion_fraction(target.mask, occluders);
  return out;
}

void generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed, const fs::path& root) {
  cfg.validate();
  fs::create_directories(root);
  {
    std::ofstream cls(root / "classes.txt", std::ios::binary);
    for (int i = 0; i < cfg.num_classes; ++i) cls << kSyntheticClasses[i] << "\n";
  }
  for (const std::string split : {"train", "test"}) {
    const fs::path dir = root / split;
    fs::remove_all(dir);
    const int count = split == "train" ? cfg.train_images : cfg.test_images;
    const bool by_level = split == "test" && cfg.split_test_by_level;
    if (!by_level) {
      fs::create_directories(dir / "images");
      fs::create_directories(dir / "annotations");
    }
    std::vector<ImageRecord> records;
    for (int i = 0; i < count; ++i) {
      SyntheticSample sample = render_synthetic(cfg, seed, split, i);
      ImageRecord r;
      char id[32];
      std::snprintf(id, sizeof id, "%s_%06d", split.c_str(), i);
      r.image_id = id;
      r.width = r.height = cfg.image_size;
      r.annotations.push_back(sample.target);
      if (by_level) r.level = level_for_fraction(*sample.target.occlusion, cfg.thresholds);
      const fs::path sub = by_level ? dir / level_name(r.level) : dir;
      fs::create_directories(sub / "images");
      r.image_path = sub / "images" / (r.image_id + ".png");
      write_png(r.image_path, from_tensor(sample.image));
      write_annotations(sub / "annotations", r);
      records.push_back(std::move(r));
    }
    if (by_level) {
      // Empty level directories keep the OL1..OL3 layout complete.
      for (const std::string& l : kLevelNames) {
        fs::create_directories(dir / l / "images");
        fs::create_directories(dir / l / "annotations");
      }
    }
    std::ofstream(dir / "manifest.json", std::ios::binary)
        << compute_manifest(split, records).to_json().dump(2) << "\n";
  }
}

}  // namespace doamo::data
