#ifndef DOAMO_MODEL_IO_HPP_
#define DOAMO_MODEL_IO_HPP_

#include <filesystem>
#include <set>
#include <string>

#include "doamo/checkpoint.hpp"
#include "doamo/config.hpp"
#include "doamo/detector.hpp"

namespace doamo::detector {

// A model checkpoint is an array archive holding every parameter and buffer
// plus "meta.model", a float64 vector encoding the DetectorConfig:
//   [1 (format), in_channels, num_classes, image_size, use_doam,
//    n, widths[n], n, (stride, scale)[n], n, aspect_ratios[n],
//    eg_blocks, ma_blocks, eg_channels, ma_channels, use_norm, n, scales[n]]
// Every entry is an integer or a ratio exactly representable in float64.
inline constexpr const char* kMetaKey = "meta.model";

Tensor encode_config(const DetectorConfig& config);
DetectorConfig decode_config(const Tensor& meta);

ArrayArchive to_archive(const Detector& model);
Detector from_archive(const ArrayArchive& archive);

void save_checkpoint(const std::filesystem::path& path, const Detector& model);
Detector load_checkpoint(const std::filesystem::path& path);

// Config keys: use_doam, image_size, widths (comma list), doam_eg_blocks,
// doam_ma_blocks, doam_eg_channels, doam_ma_channels, doam_scales (comma list).
const std::set<std::string>& model_keys();
void apply_model_keys(DetectorConfig& config, const KeyValues& kv);

}  // namespace doamo::detector

#endif  // DOAMO_MODEL_IO_HPP_
