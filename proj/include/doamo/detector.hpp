#ifndef DOAMO_DETECTOR_HPP_
#define DOAMO_DETECTOR_HPP_

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "doamo/autograd.hpp"
#include "doamo/box.hpp"
#include "doamo/complexity.hpp"
#include "doamo/doam.hpp"
#include "doamo/nn.hpp"

namespace doamo::detector {

// Center-size anchor in normalised [0,1] image coordinates.
struct Anchor {
  double cx = 0, cy = 0, w = 0, h = 0;
  Box corners() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

// One detection head: which backbone stride it reads and the anchor side
// length as a fraction of the image side.
struct HeadSpec {
  int stride = 8;
  double scale = 0.25;
};

struct DetectorConfig {
  int in_channels = 3;
  int num_classes = 5;
  int image_size = 64;
  // One conv block per entry; a 2x2 max pool sits between consecutive
  // blocks, so block i runs at stride 2^i.
  std::vector<int> widths = {16, 32, 32, 64, 64};
  std::vector<HeadSpec> heads = {{8, 0.25}, {16, 0.5}};
  std::vector<double> aspect_ratios = {1.0, 2.0};  // w / h
  bool use_doam = false;
  doam::DoamConfig doam;

  void validate() const;
  // Channels the backbone sees: C, or C+1 behind DOAM.
  int backbone_in_channels() const { return use_doam ? in_channels + 1 : in_channels; }
  int anchors_per_cell() const { return static_cast<int>(aspect_ratios.size()); }
};

// Rows ordered head by head, then (y, x, aspect ratio).
std::vector<Anchor> build_anchors(const DetectorConfig& config);

struct DetectorOutput {
  Var loc;      // (N, num_anchors, 4) encoded offsets
  Var conf;     // (N, num_anchors, num_classes + 1) logits, column 0 background
  Var feature;  // deepest backbone map feeding every head (Grad-CAM target)
};

class Detector {
 public:
  Detector(DetectorConfig config, std::uint64_t seed);
  Detector(Detector&&) = default;
  Detector& operator=(Detector&&) = default;

  // x is (N, C, S, S) with S = image_size.
  DetectorOutput forward(const Var& x, bool training, doam::DoamTrace* trace = nullptr) const;

  const DetectorConfig& config() const { return config_; }
  const std::vector<Anchor>& anchors() const { return anchors_; }
  ParamStore& store() { return *store_; }
  const ParamStore& store() const { return *store_; }
  const doam::DoamModule* doam() const { return doam_ ? &*doam_ : nullptr; }

  std::size_t num_parameters() const { return store_->num_parameters(); }
  std::size_t doam_parameters() const { return doam_ ? doam_->num_parameters() : 0; }
  std::vector<LayerCost> layer_costs() const;

 private:
  DetectorConfig config_;
  std::unique_ptr<ParamStore> store_;
  std::optional<doam::DoamModule> doam_;
  std::vector<nn::ConvBlock> blocks_;
  std::vector<nn::Conv2d> loc_heads_;
  std::vector<nn::Conv2d> conf_heads_;
  std::vector<int> head_blocks_;  // backbone block index each head reads
  int feature_block_ = 0;
  std::vector<Anchor> anchors_;
};

Detector build_detector(const DetectorConfig& config, std::uint64_t seed);

inline constexpr std::array<double, 2> kVariances = {0.1, 0.2};

std::array<double, 4> encode_box(const Box& gt, const Anchor& a,
                                 std::array<double, 2> var = kVariances);
Box decode_box(const std::array<double, 4>& offsets, const Anchor& a,
               std::array<double, 2> var = kVariances);

// Ground truth for one image; box in normalised coordinates, label in
// [0, num_classes).
struct Target {
  int label = 0;
  Box box;
};

// Index of the target each anchor is assigned to, or -1. An anchor is
// positive when its best IoU is >= threshold; in addition every target
// claims its single best anchor.
std::vector<int> match_anchors(const std::vector<Anchor>& anchors,
                               const std::vector<Target>& targets, double threshold);

struct LossPair {
  double loc = 0.0;
  double conf = 0.0;
  double total() const { return loc + conf; }
};

struct LossOptions {
  double match_iou = 0.5;
  double negative_ratio = 3.0;
  // 0 selects plain cross-entropy; > 0 the focal form.
  double focal_gamma = 0.0;
  std::array<double, 2> variances = kVariances;
};

struct BatchLoss {
  Var total;  // shape (1): sum over images of (loc + conf), divided by N
  std::vector<LossPair> per_image;
};

// loc: smooth-L1 over positive anchors; conf: classification loss over
// positives plus the hardest background anchors (negative_ratio per
// positive, at least negative_ratio when there are none). Both are divided
// by max(num_positives, 1). Malformed target boxes throw.
BatchLoss detection_loss(const DetectorOutput& out, const std::vector<Anchor>& anchors,
                         const std::vector<std::vector<Target>>& targets,
                         const LossOptions& options = {});

struct ScoredBox {
  int label = 0;  // class in [0, num_classes)
  Box box;        // normalised, clipped to [0,1]
  double score = 0.0;
};

// Greedy per-class suppression; input order breaks score ties. Result is
// sorted by score descending.
std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold);

// Per image: softmax scores, decoded boxes, per-class scores above
// conf_thresh, class-wise NMS, at most max_per_image results.
std::vector<std::vector<ScoredBox>> decode_predictions(const DetectorOutput& out,
                                                       const std::vector<Anchor>& anchors,
                                                       double conf_thresh, double nms_iou,
                                                       int max_per_image = 100,
                                                       std::array<double, 2> var = kVariances);

}  // namespace doamo::detector

#endif  // DOAMO_DETECTOR_HPP_
