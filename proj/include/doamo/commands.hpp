#ifndef DOAMO_COMMANDS_HPP_
#define DOAMO_COMMANDS_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doamo/config.hpp"
#include "doamo/eval.hpp"
#include "doamo/trainer.hpp"

namespace doamo::cli {

// Flags shared by every command. Flags override config-file keys.
struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> data_root;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> detections;
  std::optional<std::string> strategy;
};

// Every key a config file may hold; anything else is rejected.
const std::set<std::string>& all_config_keys();
// Loads --config (if any) and rejects unknown keys.
KeyValues load_config(const CommandOptions& opts);

// generate-data: writes a synthetic dataset to --out. Requires --seed.
// Keys: image_size, num_classes, train_images, test_images,
// occlusion_density, max_distractors, target_min, target_max,
// ol2_threshold, ol3_threshold.
data::SyntheticConfig synthetic_config(const KeyValues& kv);
nlohmann::json cmd_generate_data(const CommandOptions& opts);

struct TrainResult {
  std::vector<train::EpochReport> epochs;
  std::filesystem::path final_checkpoint;
  nlohmann::json metrics;
};

// train: trains on --data-root/train and writes to --out:
//   epoch_<NNN>.ckpt after every epoch, final.ckpt, train_log.jsonl
//   (EpochReport records) and metrics.json. Requires --seed.
TrainResult cmd_train(const CommandOptions& opts);

// evaluate: scores --detections, or runs --checkpoint over the split named
// by key eval_split (default test). Writes detections.jsonl and eval.json
// to --out when given. Keys: conf_thresh, nms_iou, iou_thresh, max_per_image.
eval::EvalReport cmd_evaluate(const CommandOptions& opts);

// viz-attention / viz-gradcam: per image of split eval_split (at most
// viz_limit images) write <id>_input.png and <id>_edge.png plus
// <id>_attention.png, or <id>_gradcam.png, as heatmap overlays at the
// image's own resolution. Key overlay_alpha (default 0.5).
std::vector<std::filesystem::path> cmd_viz_attention(const CommandOptions& opts);
std::vector<std::filesystem::path> cmd_viz_gradcam(const CommandOptions& opts);

// validate-dataset: manifests of --data-root/{train,test} checked against
// key preset (opixray-train, opixray-test, opixray-total) or, without a
// preset, against each split's stored manifest.json.
nlohmann::json cmd_validate_dataset(const CommandOptions& opts);

// complexity: detector, DOAM and backbone costs for --checkpoint, or for
// the model keys in --config when no checkpoint is given.
nlohmann::json cmd_complexity(const CommandOptions& opts);

}  // namespace doamo::cli

#endif  // DOAMO_COMMANDS_HPP_
