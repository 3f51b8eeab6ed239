#include "doamo/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "doamo/losses.hpp"
#include "doamo/ops.hpp"

namespace doamo::detector {

void DetectorConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("detector: in_channels must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("detector: num_classes must be >= 1");
  if (widths.empty()) throw std::invalid_argument("detector: need at least one block");
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("detector: block widths must be >= 1");
  }
  if (heads.empty()) throw std::invalid_argument("detector: need at least one head");
  if (aspect_ratios.empty()) throw std::invalid_argument("detector: need an aspect ratio");
  for (double r : aspect_ratios) {
    if (!(r > 0) || !std::isfinite(r)) throw std::invalid_argument("detector: bad aspect ratio");
  }
  const int deepest = 1 << (widths.size() - 1);
  if (image_size < deepest || image_size % deepest != 0) {
    throw std::invalid_argument("detector: image_size " + std::to_string(image_size) +
                                " must be a multiple of the deepest stride " +
                                std::to_string(deepest));
  }
  for (const HeadSpec& h : heads) {
    if (h.stride < 1 || (h.stride & (h.stride - 1)) != 0 || h.stride > deepest) {
      throw std::invalid_argument("detector: head stride " + std::to_string(h.stride) +
                                  " is not a backbone stride");
    }
    if (!(h.scale > 0) || !std::isfinite(h.scale)) {
      throw std::invalid_argument("detector: head scale must be positive");
    }
  }
  if (use_doam) {
    doam::DoamConfig d = doam;
    d.in_channels = in_channels;
    d.validate_for(image_size, image_size);
  }
}

namespace {

int block_for_stride(int stride) {
  int i = 0;
  while ((1 << i) < stride) ++i;
  return i;
}

}  // namespace

std::vector<Anchor> build_anchors(const DetectorConfig& config) {
  std::vector<Anchor> out;
  for (const HeadSpec& h : config.heads) {
    const int g = config.image_size / h.stride;
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) {
        for (double r : config.aspect_ratios) {
          const double s = std::sqrt(r);
          out.push_back({(x + 0.5) / g, (y + 0.5) / g, h.scale * s, h.scale / s});
        }
      }
    }
  }
  return out;
}

Detector::Detector(DetectorConfig config, std::uint64_t seed)
    : config_(std::move(config)), store_(std::make_unique<ParamStore>()) {
  config_.doam.in_channels = config_.in_channels;
  config_.validate();
  Rng rng(seed);
  if (config_.use_doam) doam_.emplace(*store_, config_.doam, rng, "doam.");
  int in = config_.backbone_in_channels();
  for (std::size_t i = 0; i < config_.widths.size(); ++i) {
    blocks_.emplace_back(*store_, "backbone.block" + std::to_string(i), in, config_.widths[i],
                         rng);
    in = config_.widths[i];
  }
  const int a = config_.anchors_per_cell();
  for (std::size_t i = 0; i < config_.heads.size(); ++i) {
    const int b = block_for_stride(config_.heads[i].stride);
    const int c = config_.widths[b];
    const std::string name = "head" + std::to_string(i);
    loc_heads_.emplace_back(*store_, name + ".loc", c, a * 4, 3, rng);
    conf_heads_.emplace_back(*store_, name + ".conf", c, a * (config_.num_classes + 1), 3, rng);
    head_blocks_.push_back(b);
  }
  feature_block_ = *std::min_element(head_blocks_.begin(), head_blocks_.end());
  anchors_ = build_anchors(config_);
}

DetectorOutput Detector::forward(const Var& x, bool training, doam::DoamTrace* trace) const {
  const Tensor& v = x->value;
  if (v.rank() != 4 || v.dim(1) != config_.in_channels || v.dim(2) != config_.image_size ||
      v.dim(3) != config_.image_size) {
    throw std::invalid_argument("detector: expected (N," + std::to_string(config_.in_channels) +
                                "," + std::to_string(config_.image_size) + "," +
                                std::to_string(config_.image_size) + ") input, got " +
                                shape_str(v.shape()));
  }
  Var h = doam_ ? doam_->forward(x, training, trace) : x;
  std::vector<Var> maps;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (i > 0) h = ops::maxpool2(h);
    h = blocks_[i].forward(h, training);
    maps.push_back(h);
  }
  const int a = config_.anchors_per_cell();
  std::vector<Var> locs, confs;
  for (std::size_t i = 0; i < loc_heads_.size(); ++i) {
    const Var& f = maps[head_blocks_[i]];
    locs.push_back(ops::flatten_head(loc_heads_[i].forward(f), a, 4));
    confs.push_back(ops::flatten_head(conf_heads_[i].forward(f), a, config_.num_classes + 1));
  }
  DetectorOutput out;
  out.loc = locs.size() == 1 ? locs[0] : ops::concat_rows(locs);
  out.conf = confs.size() == 1 ? confs[0] : ops::concat_rows(confs);
  out.feature = maps[feature_block_];
  return out;
}

std::vector<LayerCost> Detector::layer_costs() const {
  std::vector<LayerCost> out;
  if (doam_) {
    for (LayerCost c : doam_->layer_costs(config_.image_size, config_.image_size)) {
      c.name = "doam." + c.name;
      out.push_back(std::move(c));
    }
  }
  int side = config_.image_size;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string base = "backbone.block" + std::to_string(i);
    const auto& conv = blocks_[i].conv();
    if (i > 0) {
      side /= 2;
      out.push_back(elementwise_cost(base + ".pool",
                                     static_cast<std::size_t>(conv.in_channels()) * side * side));
    }
    const std::size_t elems = static_cast<std::size_t>(conv.out_channels()) * side * side;
    out.push_back(conv_cost(base + ".conv", conv.in_channels(), conv.out_channels(), 3, side,
                            side, conv.has_bias()));
    out.push_back(elementwise_cost(base + ".bn", elems, 2 * conv.out_channels()));
    out.push_back(elementwise_cost(base + ".relu", elems));
  }
  for (std::size_t i = 0; i < loc_heads_.size(); ++i) {
    const int s = config_.image_size / config_.heads[i].stride;
    for (const nn::Conv2d* c : {&loc_heads_[i], &conf_heads_[i]}) {
      out.push_back(conv_cost("head" + std::to_string(i) + (c == &loc_heads_[i] ? ".loc" : ".conf"),
                              c->in_channels(), c->out_channels(), 3, s, s, true));
    }
  }
  return out;
}

Detector build_detector(const DetectorConfig& config, std::uint64_t seed) {
  return Detector(config, seed);
}

std::array<double, 4> encode_box(const Box& gt, const Anchor& a, std::array<double, 2> var) {
  const double cx = (gt.x1 + gt.x2) / 2, cy = (gt.y1 + gt.y2) / 2;
  return {(cx - a.cx) / (var[0] * a.w), (cy - a.cy) / (var[0] * a.h),
          std::log(gt.width() / a.w) / var[1], std::log(gt.height() / a.h) / var[1]};
}

Box decode_box(const std::array<double, 4>& o, const Anchor& a, std::array<double, 2> var) {
  const double cx = a.cx + o[0] * var[0] * a.w;
  const double cy = a.cy + o[1] * var[0] * a.h;
  const double w = a.w * std::exp(o[2] * var[1]);
  const double h = a.h * std::exp(o[3] * var[1]);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<int> match_anchors(const std::vector<Anchor>& anchors,
                               const std::vector<Target>& targets, double threshold) {
  const std::size_t na = anchors.size(), nt = targets.size();
  std::vector<int> match(na, -1);
  if (nt == 0) return match;
  std::vector<double> best_iou(na, -1.0);
  std::vector<std::size_t> best_anchor(nt, 0);
  std::vector<double> best_anchor_iou(nt, -1.0);
  for (std::size_t i = 0; i < na; ++i) {
    const Box ab = anchors[i].corners();
    for (std::size_t t = 0; t < nt; ++t) {
      const double o = iou(ab, targets[t].box);
      if (o > best_iou[i]) {
        best_iou[i] = o;
        if (o >= threshold) match[i] = static_cast<int>(t);
      }
      if (o > best_anchor_iou[t]) {
        best_anchor_iou[t] = o;
        best_anchor[t] = i;
      }
    }
  }
  for (std::size_t t = 0; t < nt; ++t) match[best_anchor[t]] = static_cast<int>(t);
  return match;
}

BatchLoss detection_loss(const DetectorOutput& out, const std::vector<Anchor>& anchors,
                         const std::vector<std::vector<Target>>& targets,
                         const LossOptions& options) {
  const Tensor& loc = out.loc->value;
  const Tensor& conf = out.conf->value;
  if (loc.rank() != 3 || conf.rank() != 3 || loc.dim(2) != 4 || loc.dim(0) != conf.dim(0) ||
      loc.dim(1) != conf.dim(1)) {
    throw std::invalid_argument("detection_loss: loc " + shape_str(loc.shape()) + " / conf " +
                                shape_str(conf.shape()) + " malformed");
  }
  const int n = loc.dim(0), na = loc.dim(1), nc = conf.dim(2);
  if (static_cast<std::size_t>(na) != anchors.size()) {
    throw std::invalid_argument("detection_loss: anchor count mismatch");
  }
  if (targets.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("detection_loss: need one target list per image");
  }
  for (const auto& ts : targets) {
    for (const Target& t : ts) {
      if (!t.box.valid()) {
        throw std::invalid_argument("detection_loss: malformed box " + box_str(t.box));
      }
      if (t.label < 0 || t.label >= nc - 1) {
        throw std::invalid_argument("detection_loss: label " + std::to_string(t.label) +
                                    " out of range");
      }
    }
  }

  BatchLoss result;
  Tensor gloc(loc.shape()), gconf(conf.shape());
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    const std::vector<int> match = match_anchors(anchors, targets[b], options.match_iou);
    const double* lrow = loc.data() + static_cast<std::size_t>(b) * na * 4;
    const double* crow = conf.data() + static_cast<std::size_t>(b) * na * nc;
    double* glrow = gloc.data() + static_cast<std::size_t>(b) * na * 4;
    double* gcrow = gconf.data() + static_cast<std::size_t>(b) * na * nc;

    std::vector<int> selected;
    std::vector<std::pair<double, int>> negatives;
    for (int i = 0; i < na; ++i) {
      if (match[i] >= 0) {
        selected.push_back(i);
      } else {
        std::span<const double> z(crow + static_cast<std::size_t>(i) * nc, nc);
        negatives.emplace_back(softmax_cross_entropy(z, 0), i);
      }
    }
    const int num_pos = static_cast<int>(selected.size());
    const double norm = std::max(num_pos, 1);
    const std::size_t num_neg = std::min(
        negatives.size(), static_cast<std::size_t>(options.negative_ratio * norm));
    std::stable_sort(negatives.begin(), negatives.end(),
                     [](const auto& a, const auto& c) { return a.first > c.first; });
    for (std::size_t k = 0; k < num_neg; ++k) selected.push_back(negatives[k].second);

    LossPair lp;
    for (int i = 0; i < na; ++i) {
      if (match[i] < 0) continue;
      const auto g = encode_box(targets[b][match[i]].box, anchors[i], options.variances);
      for (int j = 0; j < 4; ++j) {
        const double r = lrow[i * 4 + j] - g[j];
        lp.loc += smooth_l1(r);
        glrow[i * 4 + j] = smooth_l1_grad(r) / norm / n;
      }
    }
    for (int i : selected) {
      const int label = match[i] >= 0 ? targets[b][match[i]].label + 1 : 0;
      std::span<const double> z(crow + static_cast<std::size_t>(i) * nc, nc);
      const LogitLoss l = softmax_focal(z, label, options.focal_gamma);
      lp.conf += l.value;
      for (int j = 0; j < nc; ++j) gcrow[static_cast<std::size_t>(i) * nc + j] = l.grad[j] / norm / n;
    }
    lp.loc /= norm;
    lp.conf /= norm;
    total += lp.total();
    result.per_image.push_back(lp);
  }
  result.total = make_op(Tensor({1}, total / n), {out.loc, out.conf},
                         [gloc = std::move(gloc), gconf = std::move(gconf)](Node& self) {
                           const double g = self.grad[0];
                           if (self.parents[0]->requires_grad) {
                             self.parents[0]->grad_buffer().add_(gloc, g);
                           }
                           if (self.parents[1]->requires_grad) {
                             self.parents[1]->grad_buffer().add_(gconf, g);
                           }
                         });
  return result;
}

std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<ScoredBox> kept;
  for (const ScoredBox& c : boxes) {
    bool keep = true;
    for (const ScoredBox& k : kept) {
      if (k.label == c.label && iou(k.box, c.box) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(c);
  }
  return kept;
}

std::vector<std::vector<ScoredBox>> decode_predictions(const DetectorOutput& out,
                                                       const std::vector<Anchor>& anchors,
                                                       double conf_thresh, double nms_iou,
                                                       int max_per_image,
                                                       std::array<double, 2> var) {
  const Tensor& loc = out.loc->value;
  const Tensor& conf = out.conf->value;
  const int n = loc.dim(0), na = loc.dim(1), nc = conf.dim(2);
  if (static_cast<std::size_t>(na) != anchors.size()) {
    throw std::invalid_argument("decode_predictions: anchor count mismatch");
  }
  std::vector<std::vector<ScoredBox>> result(n);
  std::vector<double> p(nc);
  for (int b = 0; b < n; ++b) {
    std::vector<ScoredBox> cands;
    for (int i = 0; i < na; ++i) {
      const double* z = conf.data() + (static_cast<std::size_t>(b) * na + i) * nc;
      const double m = *std::max_element(z, z + nc);
      double s = 0.0;
      for (int j = 0; j < nc; ++j) s += (p[j] = std::exp(z[j] - m));
      const double* l = loc.data() + (static_cast<std::size_t>(b) * na + i) * 4;
      std::optional<Box> box;
      for (int j = 1; j < nc; ++j) {
        const double score = p[j] / s;
        if (score <= conf_thresh) continue;
        if (!box) {
          Box d = decode_box({l[0], l[1], l[2], l[3]}, anchors[i], var);
          d = {std::clamp(d.x1, 0.0, 1.0), std::clamp(d.y1, 0.0, 1.0), std::clamp(d.x2, 0.0, 1.0),
               std::clamp(d.y2, 0.0, 1.0)};
          box = d;
        }
        if (!box->valid()) continue;
        cands.push_back({j - 1, *box, score});
      }
    }
    std::vector<ScoredBox> kept = nms(std::move(cands), nms_iou);
    if (max_per_image >= 0 && kept.size() > static_cast<std::size_t>(max_per_image)) {
      kept.resize(max_per_image);
    }
    result[b] = std::move(kept);
  }
  return result;
}

}  // namespace doamo::detector
