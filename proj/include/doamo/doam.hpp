#ifndef DOAMO_DOAM_HPP_
#define DOAMO_DOAM_HPP_

#include <array>
#include <span>
#include <string>
#include <vector>

#include "doamo/autograd.hpp"
#include "doamo/complexity.hpp"
#include "doamo/nn.hpp"

namespace doamo::doam {

// Standard Sobel pair, applied as cross-correlation. The "horizontal" image
// is the response to intensity change along x (vertical edges light up).
inline constexpr std::array<double, 9> kSobelHorizontal = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
inline constexpr std::array<double, 9> kSobelVertical = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

// Batched edge maps, each (N, 1, H, W).
struct EdgeMaps {
  Var horizontal;
  Var vertical;
  Var combined;
};

// Single-image edge images, each (1, H, W).
struct EdgeImages {
  Tensor horizontal;
  Tensor vertical;
  Tensor combined;
};

// Throws unless x is (C, H, W) with C >= 1, H, W >= 3 and finite values.
void validate_image(const Tensor& x);

EdgeMaps sobel_edges(const Var& x);
EdgeImages sobel_edges(const Tensor& x);

// (C, H, W) convenience wrapper over ops::region_aggregate.
Tensor region_aggregate(const Tensor& features, int k);

// Softmax(logits)-weighted sum of equally shaped candidates; the mixing rule
// the gate uses once its logits are known.
Tensor gated_mix(std::span<const Tensor> candidates, std::span<const double> logits);

// D = M * concat(x, E) with M broadcast across channels. m is (H, W) or
// (1, H, W); x is (C, H, W); edge is (1, H, W).
Tensor apply_attention(const Tensor& m, const Tensor& x, const Tensor& edge);

struct DoamConfig {
  int in_channels = 3;
  int eg_blocks = 2;     // N1
  int ma_blocks = 2;     // N2
  int eg_channels = 16;  // C_e
  int ma_channels = 16;  // C_r
  std::vector<int> scales = {5, 10, 15};
  bool use_norm = true;

  void validate() const;
  // Also checks every scale fits the given spatial size.
  void validate_for(int height, int width) const;
  int output_channels() const { return in_channels + 1; }
};

// Every intermediate of one forward pass, for tests and visualisation.
struct DoamTrace {
  EdgeMaps edges;
  Var a;       // edge guidance output (N, C_e, H, W)
  Var p;       // concat(x, E) (N, C+1, H, W)
  Var b1;      // material blocks output (N, C_r, H, W)
  std::vector<Var> b2;  // per scale (N, C_r, H, W)
  std::vector<Var> b3;  // per scale (N, 2 C_r, H, W)
  Var gate_scores;      // pre-sigmoid gate values (N, |K|, 1, 1)
  Var gate_weights;     // softmax mixture weights (N, |K|, 1, 1)
  Var b;       // selected material map (N, 2 C_r, H, W)
  Var c;       // fused logits (N, 1, H, W)
  Var m;       // attention map (N, 1, H, W)
  Var d;       // refined map (N, C+1, H, W)
};

// De-occlusion attention module: edge guidance, material awareness with
// multi-scale region aggregation and a gated selection, then a 1x1 fusion
// into a sigmoid attention map that rescales concat(x, E).
//
// Parameter names (prefix omitted): eg.block<i>.conv.{weight,bias},
// eg.block<i>.bn.{gamma,beta,running_mean,running_var}, the same under
// ma.block<i>, ma.gate.{weight,bias}, ag.fuse.{weight,bias}.
class DoamModule {
 public:
  DoamModule(ParamStore& store, DoamConfig config, Rng& rng, const std::string& prefix = "");

  Var edge_guidance(const Var& combined_edges, bool training) const;
  Var material_awareness(const Var& x, const EdgeMaps& edges, bool training,
                         DoamTrace* trace = nullptr) const;
  Var gated_select(const std::vector<Var>& candidates, DoamTrace* trace = nullptr) const;
  // Returns the attention map M; C is recorded in the trace when given.
  Var attention_generate(const Var& a, const Var& b, DoamTrace* trace = nullptr) const;
  static Var apply_attention(const Var& m, const Var& x, const Var& combined_edges);

  // x is (N, C, H, W); returns D of shape (N, C+1, H, W).
  Var forward(const Var& x, bool training, DoamTrace* trace = nullptr) const;

  const DoamConfig& config() const { return config_; }
  std::size_t num_parameters() const;
  std::vector<LayerCost> layer_costs(int height, int width) const;

  const std::vector<nn::ConvBlock>& eg_blocks() const { return eg_; }
  const std::vector<nn::ConvBlock>& ma_blocks() const { return ma_; }
  const nn::Conv2d& gate_conv() const { return gate_; }
  const nn::Conv2d& fuse_conv() const { return fuse_; }

 private:
  DoamConfig config_;
  std::vector<nn::ConvBlock> eg_;
  std::vector<nn::ConvBlock> ma_;
  nn::Conv2d gate_;
  nn::Conv2d fuse_;
};

}  // namespace doamo::doam

#endif  // DOAMO_DOAM_HPP_
