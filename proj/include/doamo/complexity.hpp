#ifndef DOAMO_COMPLEXITY_HPP_
#define DOAMO_COMPLEXITY_HPP_

#include <cstddef>
#include <string>
#include <vector>

namespace doamo {

// Cost of one layer at a fixed input resolution. FLOPs follow the usual
// multiply-add convention: a convolution costs 2*k*k*Cin*Cout per output
// pixel; bias adds, normalisation, activations, pooling and other
// elementwise work cost one FLOP per output element.
struct LayerCost {
  std::string name;
  std::size_t params = 0;
  double flops = 0.0;
};

LayerCost conv_cost(const std::string& name, int in_channels, int out_channels, int kernel,
                    int out_h, int out_w, bool bias);
LayerCost elementwise_cost(const std::string& name, std::size_t out_elements,
                           std::size_t params = 0);

std::size_t total_params(const std::vector<LayerCost>& layers);
double total_flops(const std::vector<LayerCost>& layers);

}  // namespace doamo

#endif  // DOAMO_COMPLEXITY_HPP_
