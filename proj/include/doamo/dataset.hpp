#ifndef DOAMO_DATASET_HPP_
#define DOAMO_DATASET_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doamo/box.hpp"
#include "doamo/tensor.hpp"

namespace doamo::data {

// FO, ST, SC, UT, MU: folding, straight, scissor, utility, multi-tool.
inline const std::vector<std::string> kOpixrayClasses = {"FO", "ST", "SC", "UT", "MU"};
inline const std::vector<std::string> kLevelNames = {"OL1", "OL2", "OL3"};

// 0 = unknown.
enum class OcclusionLevel : int { kUnknown = 0, kOL1 = 1, kOL2 = 2, kOL3 = 3 };

std::string level_name(OcclusionLevel level);  // "OL1".."OL3" or "unknown"

struct Annotation {
  std::string category;
  Box box;                          // pixels, x1 < x2 <= width, y1 < y2 <= height
  std::optional<double> occlusion;  // occluded-area fraction when known
  bool operator==(const Annotation&) const = default;
};

struct ImageRecord {
  std::string image_id;  // file stem, unique within a split
  std::filesystem::path image_path;
  int width = 0;
  int height = 0;
  OcclusionLevel level = OcclusionLevel::kUnknown;
  std::vector<Annotation> annotations;
};

struct DatasetManifest {
  std::string split;
  std::size_t images = 0;
  std::map<std::string, std::size_t> categories;  // annotation items per class
  std::map<std::string, std::size_t> levels;      // images per OL subset
  std::map<std::string, std::map<std::string, std::size_t>> level_categories;
  int width = 0;  // common resolution, 0 when mixed
  int height = 0;

  // Flat "key -> count" view: images, category.<C>, level.<L>,
  // level.<L>.category.<C>.
  std::map<std::string, std::size_t> counts() const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

DatasetManifest compute_manifest(const std::string& split, const std::vector<ImageRecord>& records);
// Sums counts; resolution kept only when both agree.
DatasetManifest merge_manifests(const std::string& split, const DatasetManifest& a,
                                const DatasetManifest& b);

struct Dataset {
  std::vector<std::string> classes;
  std::vector<ImageRecord> records;
  DatasetManifest manifest;

  int class_index(const std::string& category) const;  // -1 when unknown
};

// Parses one annotation line "category x1 y1 x2 y2 [f]". Throws with
// `where` prefixed on any violation.
Annotation parse_annotation_line(const std::string& line, int width, int height,
                                 const std::vector<std::string>& classes,
                                 const std::string& where);
std::string format_annotation_line(const Annotation& a);

// Reads root/classes.txt (one name per line) or falls back to the OPIXray
// class list.
std::vector<std::string> load_classes(const std::filesystem::path& root);

// root/<split>/{images,annotations}; when root/<split>/OL1..OL3 exist each
// is read the same way and its records carry that level.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split);

// Writes annotation_dir/<image_id>.txt for one record.
void write_annotations(const std::filesystem::path& annotation_dir, const ImageRecord& record);

struct Mismatch {
  std::string key;
  std::size_t expected = 0;
  std::size_t actual = 0;
};

struct ValidationReport {
  std::vector<Mismatch> mismatches;
  bool ok() const { return mismatches.empty(); }
  nlohmann::json to_json() const;
};

// Expected counts keyed like DatasetManifest::counts(); keys absent from
// the manifest count as 0.
using Expectation = std::map<std::string, std::size_t>;
ValidationReport validate_distribution(const DatasetManifest& manifest, const Expectation& expected);

// OPIXray split counts. Category columns count items, totals count
// images; a few images hold more than one item so the two differ.
Expectation opixray_train_preset();
Expectation opixray_test_preset();
Expectation opixray_total_preset();
// "train", "test" or "total".
Expectation opixray_preset(const std::string& name);

// Pixel mask, row-major.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;
  std::size_t count() const;
};

// |target & (union of occluders)| / |target|; 0 for an empty target.
double occlusion_fraction(const Mask& target, const std::vector<Mask>& occluders);

struct OcclusionThresholds {
  double ol2 = 0.1;  // f >= ol2 -> at least OL2
  double ol3 = 0.5;  // f >= ol3 -> OL3
};
OcclusionLevel level_for_fraction(double f, const OcclusionThresholds& t = {});

struct SyntheticConfig {
  int image_size = 64;
  int num_classes = 5;  // at most 5 distinct shapes
  int train_images = 500;
  int test_images = 100;
  // Probability that each of max_distractors clutter objects is present.
  // 0 gives clean targets.
  double occlusion_density = 0.6;
  int max_distractors = 6;
  // Target bounding-box side as a fraction of the image side.
  double target_min = 0.28;
  double target_max = 0.5;
  OcclusionThresholds thresholds;
  bool split_test_by_level = true;

  void validate() const;
};

inline const std::vector<std::string> kSyntheticClasses = {"bar", "disc", "wedge", "cross",
                                                           "ring"};

struct SyntheticSample {
  Tensor image;  // (3, S, S) in [0, 1]
  Annotation target;
  int label = 0;
};

// One composited image; deterministic in (config, seed, split, index).
SyntheticSample render_synthetic(const SyntheticConfig& config, std::uint64_t seed,
                                 const std::string& split, int index);

// Writes the full on-disk dataset plus classes.txt and manifest JSON per
// split. Output is byte-identical for a fixed (config, seed).
void generate_synthetic(const SyntheticConfig& config, std::uint64_t seed,
                        const std::filesystem::path& root);

}  // namespace doamo::data

#endif  // DOAMO_DATASET_HPP_
