#ifndef DOAMO_VIZ_HPP_
#define DOAMO_VIZ_HPP_

#include <array>
#include <cstddef>
#include <cstdint>

#include "doamo/detector.hpp"
#include "doamo/image_io.hpp"
#include "doamo/tensor.hpp"

namespace doamo::viz {

// Fixed piecewise-linear "jet" colormap. Stops at t = 0, 1/8, 3/8, 5/8,
// 7/8, 1: dark blue (0,0,128), blue (0,0,255), cyan (0,255,255), yellow
// (255,255,0), red (255,0,0), dark red (128,0,0). t is clamped to [0,1];
// NaN maps to t = 0. Channels are rounded to nearest.
std::array<std::uint8_t, 3> colormap(double t);

// (H, W) or (1, H, W) maps.
Image8 heatmap(const Tensor& map);                 // RGB, values in [0,1] expected
Image8 gray(const Tensor& map);                    // 1 channel, [0,1] -> [0,255]
// alpha * heatmap(map) + (1 - alpha) * luminance(base); map and base agree in size.
Image8 overlay(const Image8& base, const Tensor& map, double alpha = 0.5);

// (x - min) / (max - min); a constant map (including all zeros) gives zeros.
Tensor normalize_minmax(const Tensor& map);

// ReLU(sum_c w_c A_c) with w_c the spatial mean of gradient channel c.
// activation and gradient are (C, H, W); result is (H, W).
Tensor grad_cam_map(const Tensor& activation, const Tensor& gradient);

struct GradCam {
  Tensor raw;       // (h, w) at feature resolution, before upsampling
  Tensor map;       // (S, S) upsampled to the model input and normalised
  std::size_t anchor = 0;
  int label = 0;    // foreground class in [0, num_classes)
  double score = 0.0;
};

// Target: the logit of the highest-probability foreground (anchor, class)
// pair; gradients are taken at the detector's feature map. Parameter
// gradients are cleared before returning.
GradCam grad_cam(detector::Detector& model, const Tensor& image);

struct AttentionMaps {
  Tensor edge;       // (1, S, S) combined Sobel magnitude E
  Tensor attention;  // (1, S, S) M in (0, 1)
};

// Throws when the model has no DOAM front-end.
AttentionMaps attention_maps(const detector::Detector& model, const Tensor& image);

}  // namespace doamo::viz

#endif  // DOAMO_VIZ_HPP_
