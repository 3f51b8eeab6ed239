#include "doamo/viz.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "doamo/autograd.hpp"
#include "doamo/doam.hpp"

namespace doamo::viz {

namespace {

struct Stop {
  double t;
  double r, g, b;
};

constexpr Stop kJet[] = {{0.0, 0, 0, 128},       {0.125, 0, 0, 255}, {0.375, 0, 255, 255},
                         {0.625, 255, 255, 0},   {0.875, 255, 0, 0}, {1.0, 128, 0, 0}};

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Accepts (H, W) or (1, H, W); returns {H, W}.
std::pair<int, int> map_dims(const Tensor& map) {
  if (map.rank() == 2) return {map.dim(0), map.dim(1)};
  if (map.rank() == 3 && map.dim(0) == 1) return {map.dim(1), map.dim(2)};
  throw std::invalid_argument("map must be (H, W) or (1, H, W), got " + shape_str(map.shape()));
}

}  // namespace

std::array<std::uint8_t, 3> colormap(double t) {
  if (std::isnan(t)) t = 0.0;
  t = std::clamp(t, 0.0, 1.0);
  std::size_t i = 1;
  while (i + 1 < std::size(kJet) && t > kJet[i].t) ++i;
  const Stop& a = kJet[i - 1];
  const Stop& b = kJet[i];
  const double u = (t - a.t) / (b.t - a.t);
  return {to_byte(a.r + u * (b.r - a.r)), to_byte(a.g + u * (b.g - a.g)),
          to_byte(a.b + u * (b.b - a.b))};
}

Image8 heatmap(const Tensor& map) {
  const auto [h, w] = map_dims(map);
  Image8 img{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  for (std::size_t i = 0; i < map.numel(); ++i) {
    const auto c = colormap(map[i]);
    std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return img;
}

Image8 gray(const Tensor& map) {
  const auto [h, w] = map_dims(map);
  Image8 img{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (std::size_t i = 0; i < map.numel(); ++i) {
    img.pixels[i] = to_byte(std::clamp(std::isnan(map[i]) ? 0.0 : map[i], 0.0, 1.0) * 255.0);
  }
  return img;
}

Image8 overlay(const Image8& base, const Tensor& map, double alpha) {
  const auto [h, w] = map_dims(map);
  if (base.width != w || base.height != h) {
    throw std::invalid_argument("overlay: base image and map sizes differ");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("overlay: alpha outside [0,1]");
  const Image8 heat = heatmap(map);
  Image8 out{w, h, 3, std::vector<std::uint8_t>(heat.pixels.size())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double lum = base.at(y, x, 0);
      if (base.channels == 3) {
        lum = 0.299 * base.at(y, x, 0) + 0.587 * base.at(y, x, 1) + 0.114 * base.at(y, x, 2);
      }
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = to_byte(alpha * heat.at(y, x, c) + (1.0 - alpha) * lum);
      }
    }
  }
  return out;
}

Tensor normalize_minmax(const Tensor& map) {
  Tensor out(map.shape());
  if (map.numel() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.storage().begin(), map.storage().end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < map.numel(); ++i) out[i] = (map[i] - *lo) / range;
  return out;
}

Tensor grad_cam_map(const Tensor& activation, const Tensor& gradient) {
  if (activation.rank() != 3 || activation.shape() != gradient.shape()) {
    throw std::invalid_argument("grad_cam_map: activation and gradient must be equal (C, H, W)");
  }
  const int c = activation.dim(0), h = activation.dim(1), w = activation.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({h, w});
  for (int ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += gradient[ch * hw + i];
    mean /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) out[i] += mean * activation[ch * hw + i];
  }
  for (double& v : out.storage()) v = std::max(v, 0.0);
  return out;
}

GradCam grad_cam(detector::Detector& model, const Tensor& image) {
  const int s = model.config().image_size;
  if (image.rank() != 3 || image.dim(0) != model.config().in_channels || image.dim(1) != s ||
      image.dim(2) != s) {
    throw std::invalid_argument("grad_cam: image must be (C, S, S) matching the model");
  }
  Tensor batch({1, image.dim(0), s, s}, image.storage());
  const detector::DetectorOutput out = model.forward(constant(std::move(batch)), false);
  const Tensor& logits = out.conf->value;  // (1, A, K+1)
  const int anchors = logits.dim(1), k1 = logits.dim(2);

  GradCam res;
  double best = -1.0;
  std::size_t best_index = 0;
  for (int a = 0; a < anchors; ++a) {
    const double* row = logits.data() + static_cast<std::size_t>(a) * k1;
    const double mx = *std::max_element(row, row + k1);
    double z = 0.0;
    for (int j = 0; j < k1; ++j) z += std::exp(row[j] - mx);
    for (int j = 1; j < k1; ++j) {
      const double p = std::exp(row[j] - mx) / z;
      if (p > best) {
        best = p;
        res.anchor = static_cast<std::size_t>(a);
        res.label = j - 1;
        best_index = static_cast<std::size_t>(a) * k1 + j;
      }
    }
  }
  res.score = best;

  Tensor seed(logits.shape());
  seed[best_index] = 1.0;
  backward(out.conf, seed);
  const Tensor& act = out.feature->value;  // (1, C, h, w)
  Tensor a3({act.dim(1), act.dim(2), act.dim(3)}, act.storage());
  Tensor g3(a3.shape());
  if (out.feature->grad.numel() == a3.numel()) g3.storage() = out.feature->grad.storage();
  model.store().zero_grad();

  res.raw = grad_cam_map(a3, g3);
  Tensor up = resize_bilinear(Tensor({1, res.raw.dim(0), res.raw.dim(1)}, res.raw.storage()), s, s);
  up = normalize_minmax(up);
  res.map = Tensor({s, s}, up.storage());
  return res;
}

AttentionMaps attention_maps(const detector::Detector& model, const Tensor& image) {
  if (!model.doam()) throw std::invalid_argument("model has no DOAM front-end");
  const int s = model.config().image_size;
  if (image.rank() != 3 || image.dim(1) != s || image.dim(2) != s) {
    throw std::invalid_argument("attention_maps: image must be (C, S, S) matching the model");
  }
  NoGradGuard no_grad;
  doam::DoamTrace trace;
  Tensor batch({1, image.dim(0), s, s}, image.storage());
  model.forward(constant(std::move(batch)), false, &trace);
  AttentionMaps maps;
  maps.edge = Tensor({1, s, s}, trace.edges.combined->value.storage());
  maps.attention = Tensor({1, s, s}, trace.m->value.storage());
  return maps;
}

}  // namespace doamo::viz
