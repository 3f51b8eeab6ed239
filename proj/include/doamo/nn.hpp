#ifndef DOAMO_NN_HPP_
#define DOAMO_NN_HPP_

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "doamo/autograd.hpp"

namespace doamo {

using Rng = std::mt19937_64;

// Named learned arrays plus non-learned buffers (normalisation statistics).
// Names are dotted paths such as "eg.block0.conv.weight"; iteration order is
// lexicographic so every traversal (optimizer, checkpoint) is deterministic.
class ParamStore {
 public:
  Var add_param(const std::string& name, Tensor init);
  Tensor& add_buffer(const std::string& name, Tensor init);

  const std::map<std::string, Var>& params() const { return params_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  std::size_t num_parameters() const;
  void zero_grad();

  // Every array, params and buffers alike, keyed by name.
  std::map<std::string, Tensor> state() const;
  // Overwrites values in place; unknown or missing names and shape
  // mismatches throw.
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  std::map<std::string, Var> params_;
  std::map<std::string, Tensor> buffers_;
};

namespace nn {

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& prefix, int in_channels, int out_channels,
         int kernel, Rng& rng, bool with_bias = true);

  Var forward(const Var& x) const;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return kernel_; }
  bool has_bias() const { return static_cast<bool>(bias_); }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  std::size_t num_parameters() const;

 private:
  int in_ = 0, out_ = 0, kernel_ = 0;
  Var weight_, bias_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& store, const std::string& prefix, int channels);

  Var forward(const Var& x, bool training) const;
  std::size_t num_parameters() const { return 2 * static_cast<std::size_t>(channels_); }

 private:
  int channels_ = 0;
  Var gamma_, beta_;
  Tensor* running_mean_ = nullptr;
  Tensor* running_var_ = nullptr;
};

// 3x3 conv (zero padding 1) -> optional batch norm -> ReLU.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(ParamStore& store, const std::string& prefix, int in_channels, int out_channels,
            Rng& rng, bool use_norm = true);

  Var forward(const Var& x, bool training) const;

  const Conv2d& conv() const { return conv_; }
  bool use_norm() const { return use_norm_; }
  std::size_t num_parameters() const;

 private:
  Conv2d conv_;
  BatchNorm2d norm_;
  bool use_norm_ = true;
};

}  // namespace nn

struct SgdOptions {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// SGD with heavy-ball momentum; weight decay is folded into the gradient.
class Sgd {
 public:
  explicit Sgd(SgdOptions options) : options_(options) {}

  // Applies one update from the accumulated gradients, then clears them.
  void step(ParamStore& store);
  std::int64_t steps() const { return steps_; }
  const SgdOptions& options() const { return options_; }

 private:
  SgdOptions options_;
  std::map<std::string, Tensor> velocity_;
  std::int64_t steps_ = 0;
};

}  // namespace doamo

#endif  // DOAMO_NN_HPP_
