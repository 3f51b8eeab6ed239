#include "doamo/complexity.hpp"

namespace doamo {

LayerCost conv_cost(const std::string& name, int in_channels, int out_channels, int kernel,
                    int out_h, int out_w, bool bias) {
  const double out_px = static_cast<double>(out_h) * out_w;
  LayerCost c;
  c.name = name;
  c.params = static_cast<std::size_t>(kernel) * kernel * in_channels * out_channels +
             (bias ? out_channels : 0);
  c.flops = 2.0 * kernel * kernel * in_channels * out_channels * out_px;
  if (bias) c.flops += out_channels * out_px;
  return c;
}

LayerCost elementwise_cost(const std::string& name, std::size_t out_elements,
                           std::size_t params) {
  return LayerCost{name, params, static_cast<double>(out_elements)};
}

std::size_t total_params(const std::vector<LayerCost>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.params;
  return n;
}

double total_flops(const std::vector<LayerCost>& layers) {
  double f = 0.0;
  for (const auto& l : layers) f += l.flops;
  return f;
}

}  // namespace doamo
