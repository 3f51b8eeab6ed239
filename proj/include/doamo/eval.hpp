#ifndef DOAMO_EVAL_HPP_
#define DOAMO_EVAL_HPP_

#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doamo/box.hpp"
#include "doamo/complexity.hpp"
#include "doamo/dataset.hpp"
#include "doamo/detector.hpp"

namespace doamo::eval {

struct Detection {
  std::string image_id;
  std::string category;
  Box box;  // pixels
  double confidence = 0.0;

  void validate() const;  // valid box, confidence in [0,1]
};

struct GroundTruth {
  std::string image_id;
  Box box;
};

// Single-category VOC average precision with all-points interpolation.
// Detections are ranked by confidence with a stable sort, so equal scores
// keep input order. Each detection claims the highest-IoU unmatched ground
// truth in its image with IoU >= iou_thresh (lower index on IoU ties);
// otherwise it is a false positive. No ground truth: 1 when there are no
// detections either, else 0.
double average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                         double iou_thresh = 0.5);

struct GroupReport {
  std::map<std::string, double> ap;  // categories with at least one ground truth
  double mean_ap = 0.0;              // unweighted mean of `ap`; 0 when empty
  std::map<std::string, std::size_t> num_gt;
  std::map<std::string, std::size_t> num_det;
  std::size_t num_images = 0;
  nlohmann::json to_json() const;
};

struct EvalReport {
  GroupReport overall;
  std::map<std::string, GroupReport> by_level;  // OL1..OL3 present in the dataset
  nlohmann::json to_json() const;
};

GroupReport evaluate_group(std::span<const Detection> dets,
                           std::span<const data::ImageRecord> records,
                           const std::vector<std::string>& classes, double iou_thresh = 0.5);
// Overall report plus one independent report per occlusion level present.
// Detections naming unknown images are rejected.
EvalReport evaluate(std::span<const Detection> dets, const data::Dataset& ds,
                    double iou_thresh = 0.5);

// JSON lines: {"image_id", "category", "box": [x1,y1,x2,y2], "confidence"}.
void write_detections(std::ostream& out, std::span<const Detection> dets);
std::vector<Detection> read_detections(std::istream& in, const std::string& source = "<dets>");

struct InferenceOptions {
  double conf_thresh = 0.01;
  double nms_iou = 0.45;
  int max_per_image = 100;
  int batch_size = 16;
};

// Runs the detector over every record; boxes are mapped back to pixels.
std::vector<Detection> run_inference(detector::Detector& model, const data::Dataset& ds,
                                     const InferenceOptions& opts = {});

struct ComplexityReport {
  std::size_t params = 0;
  double size_mb = 0.0;  // serialized checkpoint bytes / 2^20
  double gflops = 0.0;
  int input_height = 0;
  int input_width = 0;
  nlohmann::json to_json() const;
};

ComplexityReport complexity_report(const std::vector<LayerCost>& layers, int input_height,
                                   int input_width, std::size_t serialized_bytes);
ComplexityReport complexity_report(const detector::Detector& model);

}  // namespace doamo::eval

#endif  // DOAMO_EVAL_HPP_
