#include "doamo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "doamo/autograd.hpp"
#include "doamo/checkpoint.hpp"
#include "doamo/trainer.hpp"

namespace doamo::eval {

void Detection::validate() const {
  if (!box.valid()) throw std::invalid_argument("detection on " + image_id + ": invalid box " + box_str(box));
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw std::invalid_argument("detection on " + image_id + ": confidence " +
                                std::to_string(confidence) + " outside [0,1]");
  }
}

double average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                         double iou_thresh) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;

  std::unordered_map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) gt_by_image[gts[g].image_id].push_back(g);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });

  std::vector<bool> matched(gts.size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = dets[order[rank]];
    auto it = gt_by_image.find(d.image_id);
    std::ptrdiff_t best = -1;
    double best_iou = iou_thresh;
    if (it != gt_by_image.end()) {
      for (std::size_t g : it->second) {
        if (matched[g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best = static_cast<std::ptrdiff_t>(g);
          best_iou = v;
        }
      }
    }
    if (best >= 0) {
      matched[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
  }

  // Precision envelope from the right, then area over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

nlohmann::json GroupReport::to_json() const {
  nlohmann::json j;
  j["ap"] = ap;
  j["mAP"] = mean_ap;
  j["num_gt"] = num_gt;
  j["num_det"] = num_det;
  j["num_images"] = num_images;
  return j;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = overall.to_json();
  nlohmann::json levels = nlohmann::json::object();
  for (const auto& [name, rep] : by_level) levels[name] = rep.to_json();
  j["by_level"] = levels;
  return j;
}

GroupReport evaluate_group(std::span<const Detection> dets,
                           std::span<const data::ImageRecord> records,
                           const std::vector<std::string>& classes, double iou_thresh) {
  GroupReport rep;
  rep.num_images = records.size();
  std::set<std::string> images;
  std::map<std::string, std::vector<GroundTruth>> gts;
  for (const data::ImageRecord& r : records) {
    images.insert(r.image_id);
    for (const data::Annotation& a : r.annotations) gts[a.category].push_back({r.image_id, a.box});
  }
  std::map<std::string, std::vector<Detection>> by_cat;
  for (const Detection& d : dets) {
    if (images.count(d.image_id)) by_cat[d.category].push_back(d);
  }
  double sum = 0.0;
  for (const std::string& c : classes) {
    const auto& g = gts[c];
    const auto& d = by_cat[c];
    rep.num_gt[c] = g.size();
    rep.num_det[c] = d.size();
    if (g.empty()) continue;
    rep.ap[c] = average_precision(d, g, iou_thresh);
    sum += rep.ap[c];
  }
  rep.mean_ap = rep.ap.empty() ? 0.0 : sum / static_cast<double>(rep.ap.size());
  return rep;
}

EvalReport evaluate(std::span<const Detection> dets, const data::Dataset& ds, double iou_thresh) {
  std::set<std::string> ids;
  for (const auto& r : ds.records) ids.insert(r.image_id);
  for (const Detection& d : dets) {
    d.validate();
    if (!ids.count(d.image_id)) throw std::invalid_argument("detection for unknown image " + d.image_id);
    if (ds.class_index(d.category) < 0) {
      throw std::invalid_argument("detection with unknown category " + d.category);
    }
  }
  EvalReport rep;
  rep.overall = evaluate_group(dets, ds.records, ds.classes, iou_thresh);
  std::map<data::OcclusionLevel, std::vector<data::ImageRecord>> levels;
  for (const auto& r : ds.records) {
    if (r.level != data::OcclusionLevel::kUnknown) levels[r.level].push_back(r);
  }
  for (const auto& [level, recs] : levels) {
    rep.by_level[data::level_name(level)] = evaluate_group(dets, recs, ds.classes, iou_thresh);
  }
  return rep;
}

void write_detections(std::ostream& out, std::span<const Detection> dets) {
  for (const Detection& d : dets) {
    nlohmann::json j = {{"image_id", d.image_id},
                        {"category", d.category},
                        {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                        {"confidence", d.confidence}};
    out << j.dump() << "\n";
  }
}

std::vector<Detection> read_detections(std::istream& in, const std::string& source) {
  std::vector<Detection> out;
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      Detection d;
      d.image_id = j.at("image_id").get<std::string>();
      d.category = j.at("category").get<std::string>();
      const auto& b = j.at("box");
      if (!b.is_array() || b.size() != 4) throw std::invalid_argument("box must have 4 numbers");
      d.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      d.confidence = j.at("confidence").get<double>();
      d.validate();
      out.push_back(std::move(d));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<Detection> run_inference(detector::Detector& model, const data::Dataset& ds,
                                     const InferenceOptions& opts) {
  NoGradGuard no_grad;
  const train::TrainingSet set = train::make_training_set(ds, model.config().image_size);
  std::vector<Detection> out;
  for (std::size_t start = 0; start < set.size(); start += opts.batch_size) {
    const std::size_t end = std::min(set.size(), start + static_cast<std::size_t>(opts.batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = model.forward(constant(train::make_batch(set, idx)), false);
    const auto boxes = detector::decode_predictions(pred, model.anchors(), opts.conf_thresh,
                                                    opts.nms_iou, opts.max_per_image);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const data::ImageRecord& r = ds.records[start + i];
      for (const detector::ScoredBox& s : boxes[i]) {
        Detection d{r.image_id, ds.classes.at(static_cast<std::size_t>(s.label)),
                    {s.box.x1 * r.width, s.box.y1 * r.height, s.box.x2 * r.width,
                     s.box.y2 * r.height},
                    std::clamp(s.score, 0.0, 1.0)};
        // Clipping can flatten a box against the border; such boxes are dropped.
        if (d.box.valid()) out.push_back(std::move(d));
      }
    }
  }
  return out;
}

nlohmann::json ComplexityReport::to_json() const {
  return {{"params", params},
          {"size_mb", size_mb},
          {"gflops", gflops},
          {"input", {input_height, input_width}}};
}

ComplexityReport complexity_report(const std::vector<LayerCost>& layers, int input_height,
                                   int input_width, std::size_t serialized_bytes) {
  ComplexityReport r;
  r.params = total_params(layers);
  r.gflops = total_flops(layers) / 1e9;
  r.size_mb = static_cast<double>(serialized_bytes) / (1024.0 * 1024.0);
  r.input_height = input_height;
  r.input_width = input_width;
  return r;
}

ComplexityReport complexity_report(const detector::Detector& model) {
  ArrayArchive learned;
  for (const auto& [name, p] : model.store().params()) learned[name] = p->value;
  const int s = model.config().image_size;
  return complexity_report(model.layer_costs(), s, s, serialize_archive(learned).size());
}

}  // namespace doamo::eval
