#include "doamo/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "doamo/doam.hpp"
#include "doamo/model_io.hpp"
#include "doamo/viz.hpp"

namespace doamo::cli {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kSyntheticKeys = {
    "image_size",      "num_classes", "train_images",  "test_images",  "occlusion_density",
    "max_distractors", "target_min",  "target_max",    "ol2_threshold", "ol3_threshold"};
const std::set<std::string> kEvalKeys = {"conf_thresh", "nms_iou", "iou_thresh", "max_per_image",
                                         "eval_split"};
const std::set<std::string> kOtherKeys = {"viz_limit", "overlay_alpha", "preset"};

template <class T>
const T& require(const std::optional<T>& v, const char* flag) {
  if (!v) throw std::invalid_argument(std::string("missing required flag ") + flag);
  return *v;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string epoch_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.ckpt", epoch + 1);
  return buf;
}

eval::InferenceOptions inference_options(const KeyValues& kv) {
  eval::InferenceOptions o;
  o.conf_thresh = kv.get_double("conf_thresh", o.conf_thresh);
  o.nms_iou = kv.get_double("nms_iou", o.nms_iou);
  o.max_per_image = static_cast<int>(kv.get_int("max_per_image", o.max_per_image));
  if (!(o.conf_thresh >= 0.0 && o.conf_thresh <= 1.0)) throw std::invalid_argument("conf_thresh outside [0,1]");
  if (!(o.nms_iou >= 0.0 && o.nms_iou <= 1.0)) throw std::invalid_argument("nms_iou outside [0,1]");
  if (o.max_per_image < 1) throw std::invalid_argument("max_per_image must be >= 1");
  return o;
}

data::Dataset load_split(const CommandOptions& opts, const KeyValues& kv) {
  return data::load_dataset(require(opts.data_root, "--data-root"), kv.get_string("eval_split", "test"));
}

}  // namespace

const std::set<std::string>& all_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = train::TrainConfig::keys();
    k.insert(detector::model_keys().begin(), detector::model_keys().end());
    k.insert(kSyntheticKeys.begin(), kSyntheticKeys.end());
    k.insert(kEvalKeys.begin(), kEvalKeys.end());
    k.insert(kOtherKeys.begin(), kOtherKeys.end());
    return k;
  }();
  return keys;
}

KeyValues load_config(const CommandOptions& opts) {
  if (!opts.config) return KeyValues{};
  KeyValues kv = KeyValues::load(*opts.config);
  const auto unknown = kv.unknown_keys(all_config_keys());
  if (!unknown.empty()) {
    throw std::invalid_argument(opts.config->string() + ": unknown key '" + *unknown.begin() + "'");
  }
  return kv;
}

data::SyntheticConfig synthetic_config(const KeyValues& kv) {
  data::SyntheticConfig c;
  c.image_size = static_cast<int>(kv.get_int("image_size", c.image_size));
  c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes));
  c.train_images = static_cast<int>(kv.get_int("train_images", c.train_images));
  c.test_images = static_cast<int>(kv.get_int("test_images", c.test_images));
  c.occlusion_density = kv.get_double("occlusion_density", c.occlusion_density);
  c.max_distractors = static_cast<int>(kv.get_int("max_distractors", c.max_distractors));
  c.target_min = kv.get_double("target_min", c.target_min);
  c.target_max = kv.get_double("target_max", c.target_max);
  c.thresholds.ol2 = kv.get_double("ol2_threshold", c.thresholds.ol2);
  c.thresholds.ol3 = kv.get_double("ol3_threshold", c.thresholds.ol3);
  c.validate();
  return c;
}

nlohmann::json cmd_generate_data(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  const fs::path out = require(opts.out, "--out");
  const std::uint64_t seed = require(opts.seed, "--seed");
  const data::SyntheticConfig cfg = synthetic_config(kv);
  data::generate_synthetic(cfg, seed, out);
  nlohmann::json j;
  for (const char* split : {"train", "test"}) {
    j[split] = data::load_dataset(out, split).manifest.to_json();
  }
  return j;
}

TrainResult cmd_train(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  const fs::path root = require(opts.data_root, "--data-root");
  const fs::path out = require(opts.out, "--out");
  const std::uint64_t seed = require(opts.seed, "--seed");

  train::TrainConfig tc;
  tc.apply(kv);
  tc.seed = seed;
  if (opts.strategy) tc.strategy = train::parse_strategy(*opts.strategy);
  tc.validate();

  const data::Dataset ds = data::load_dataset(root, "train");
  if (ds.records.empty()) throw std::runtime_error("no training images under " + (root / "train").string());
  detector::DetectorConfig mc;
  mc.num_classes = static_cast<int>(ds.classes.size());
  detector::apply_model_keys(mc, kv);

  detector::Detector model(mc, seed);
  const train::TrainingSet set = train::make_training_set(ds, mc.image_size);
  train::Trainer trainer(model, set, tc);

  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());

  TrainResult res;
  nlohmann::json epochs = nlohmann::json::array();
  for (int e = 0; e < tc.epochs; ++e) {
    train::EpochReport rep = trainer.train_epoch();
    rep.write_jsonl(log);
    detector::save_checkpoint(out / epoch_name(e), model);
    epochs.push_back({{"epoch", rep.epoch},
                      {"mean_batch_loss", rep.mean_batch_loss()},
                      {"threshold", std::isfinite(rep.threshold) ? nlohmann::json(rep.threshold)
                                                                 : nlohmann::json(nullptr)},
                      {"batches", rep.batch_losses.size()},
                      {"replays", rep.replay_count()},
                      {"optimizer_steps", rep.optimizer_steps}});
    res.epochs.push_back(std::move(rep));
  }
  res.final_checkpoint = out / "final.ckpt";
  detector::save_checkpoint(res.final_checkpoint, model);

  res.metrics = {{"strategy", train::strategy_name(tc.strategy)},
                 {"seed", seed},
                 {"use_doam", mc.use_doam},
                 {"train_images", set.size()},
                 {"parameters", model.num_parameters()},
                 {"total_optimizer_steps", trainer.steps()},
                 {"epochs", epochs}};
  write_json(out / "metrics.json", res.metrics);
  return res;
}

eval::EvalReport cmd_evaluate(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  const data::Dataset ds = load_split(opts, kv);
  std::vector<eval::Detection> dets;
  if (opts.detections) {
    std::ifstream in(*opts.detections);
    if (!in) throw std::runtime_error("cannot read " + opts.detections->string());
    dets = eval::read_detections(in, opts.detections->string());
  } else {
    detector::Detector model = detector::load_checkpoint(require(opts.checkpoint, "--checkpoint"));
    if (model.config().num_classes != static_cast<int>(ds.classes.size())) {
      throw std::invalid_argument("checkpoint has " + std::to_string(model.config().num_classes) +
                                  " classes, dataset has " + std::to_string(ds.classes.size()));
    }
    dets = eval::run_inference(model, ds, inference_options(kv));
  }
  const eval::EvalReport rep = eval::evaluate(dets, ds, kv.get_double("iou_thresh", 0.5));
  if (opts.out) {
    fs::create_directories(*opts.out);
    std::ofstream d(*opts.out / "detections.jsonl");
    eval::write_detections(d, dets);
    write_json(*opts.out / "eval.json", rep.to_json());
  }
  return rep;
}

namespace {

struct VizContext {
  data::Dataset ds;
  detector::Detector model;
  std::size_t limit;
  double alpha;
  fs::path out;
};

VizContext viz_context(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  data::Dataset ds = load_split(opts, kv);
  detector::Detector model = detector::load_checkpoint(require(opts.checkpoint, "--checkpoint"));
  const auto limit = kv.get_int("viz_limit", 8);
  if (limit < 1) throw std::invalid_argument("viz_limit must be >= 1");
  const double alpha = kv.get_double("overlay_alpha", 0.5);
  const fs::path out = require(opts.out, "--out");
  fs::create_directories(out);
  return {std::move(ds), std::move(model), static_cast<std::size_t>(limit), alpha, out};
}

// Model-resolution tensor, resized to the source image and reduced to (1, H, W).
Tensor to_source_size(const Tensor& map, const Image8& source) {
  const int s = map.dim(map.rank() - 1);
  Tensor m({1, s, s}, map.storage());
  return resize_bilinear(m, source.height, source.width);
}

// The record's image as the model sees it plus the untouched source.
std::pair<Tensor, Image8> load_for_model(const data::ImageRecord& r, const detector::Detector& model) {
  Image8 src = read_image(r.image_path);
  data::Dataset one;
  one.records = {r};
  one.records[0].annotations.clear();
  const train::TrainingSet set = train::make_training_set(one, model.config().image_size);
  return {set.images[0], std::move(src)};
}

}  // namespace

std::vector<fs::path> cmd_viz_attention(const CommandOptions& opts) {
  VizContext ctx = viz_context(opts);
  if (!ctx.model.doam()) throw std::invalid_argument("checkpoint has no DOAM front-end");
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < std::min(ctx.limit, ctx.ds.records.size()); ++i) {
    const data::ImageRecord& r = ctx.ds.records[i];
    auto [x, src] = load_for_model(r, ctx.model);
    const viz::AttentionMaps maps = viz::attention_maps(ctx.model, x);
    const Tensor e = to_source_size(maps.edge, src);
    double emax = 0.0;
    for (double v : e.storage()) emax = std::max(emax, v);
    Tensor en(e.shape());
    if (emax > 0.0) {
      for (std::size_t k = 0; k < e.numel(); ++k) en[k] = e[k] / emax;
    }
    const std::vector<std::pair<fs::path, Image8>> files = {
        {ctx.out / (r.image_id + "_input.png"), src},
        {ctx.out / (r.image_id + "_edge.png"), viz::gray(en)},
        {ctx.out / (r.image_id + "_attention.png"),
         viz::overlay(src, to_source_size(maps.attention, src), ctx.alpha)}};
    for (const auto& [path, img] : files) {
      write_png(path, img);
      written.push_back(path);
    }
  }
  return written;
}

std::vector<fs::path> cmd_viz_gradcam(const CommandOptions& opts) {
  VizContext ctx = viz_context(opts);
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < std::min(ctx.limit, ctx.ds.records.size()); ++i) {
    const data::ImageRecord& r = ctx.ds.records[i];
    auto [x, src] = load_for_model(r, ctx.model);
    const viz::GradCam cam = viz::grad_cam(ctx.model, x);
    // Resampling can overshoot [0,1] by rounding only; the colormap clamps.
    const std::vector<std::pair<fs::path, Image8>> files = {
        {ctx.out / (r.image_id + "_input.png"), src},
        {ctx.out / (r.image_id + "_gradcam.png"),
         viz::overlay(src, to_source_size(cam.map, src), ctx.alpha)}};
    for (const auto& [path, img] : files) {
      write_png(path, img);
      written.push_back(path);
    }
  }
  return written;
}

nlohmann::json cmd_validate_dataset(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  const fs::path root = require(opts.data_root, "--data-root");
  const std::string preset = kv.get_string("preset", "");
  nlohmann::json out;
  bool ok = true;
  std::optional<data::DatasetManifest> merged;
  for (const char* split : {"train", "test"}) {
    if (!fs::exists(root / split)) continue;
    const data::DatasetManifest m = data::load_dataset(root, split).manifest;
    merged = merged ? data::merge_manifests("total", *merged, m) : m;
    out[split]["manifest"] = m.to_json();
    if (preset.empty()) {
      const fs::path stored = root / split / "manifest.json";
      if (!fs::exists(stored)) continue;
      std::ifstream in(stored);
      const data::DatasetManifest expect =
          data::DatasetManifest::from_json(nlohmann::json::parse(in));
      const data::ValidationReport rep = data::validate_distribution(m, expect.counts());
      out[split]["report"] = rep.to_json();
      ok = ok && rep.ok();
    } else if (preset == "opixray-" + std::string(split)) {
      const data::ValidationReport rep = data::validate_distribution(m, data::opixray_preset(split));
      out[split]["report"] = rep.to_json();
      ok = ok && rep.ok();
    }
  }
  if (!merged) throw std::runtime_error("no train or test split under " + root.string());
  if (preset == "opixray-total") {
    const data::ValidationReport rep = data::validate_distribution(*merged, data::opixray_preset("total"));
    out["total"]["report"] = rep.to_json();
    ok = ok && rep.ok();
  } else if (!preset.empty() && preset != "opixray-train" && preset != "opixray-test") {
    throw std::invalid_argument("unknown preset '" + preset +
                                "' (opixray-train, opixray-test, opixray-total)");
  }
  out["ok"] = ok;
  return out;
}

nlohmann::json cmd_complexity(const CommandOptions& opts) {
  const KeyValues kv = load_config(opts);
  std::optional<detector::Detector> model;
  if (opts.checkpoint) {
    model.emplace(detector::load_checkpoint(*opts.checkpoint));
  } else {
    detector::DetectorConfig c;
    detector::apply_model_keys(c, kv);
    model.emplace(c, opts.seed.value_or(0));
  }
  const eval::ComplexityReport rep = eval::complexity_report(*model);
  const std::size_t doam = model->doam_parameters();
  const std::size_t rest = model->num_parameters() - doam;
  nlohmann::json j = rep.to_json();
  j["doam_params"] = doam;
  j["detector_params_without_doam"] = rest;
  j["doam_to_detector_ratio"] = rest ? static_cast<double>(doam) / static_cast<double>(rest) : 0.0;
  std::size_t backbone = 0;
  for (const auto& [name, p] : model->store().params()) {
    if (name.rfind("backbone.", 0) == 0) backbone += p->value.numel();
  }
  j["backbone_params"] = backbone;
  j["doam_to_backbone_ratio"] = backbone ? static_cast<double>(doam) / static_cast<double>(backbone) : 0.0;
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerCost& l : model->layer_costs()) {
    layers.push_back({{"name", l.name}, {"params", l.params}, {"flops", l.flops}});
  }
  j["layers"] = layers;
  return j;
}

}  // namespace doamo::cli
