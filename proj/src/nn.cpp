#include "doamo/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "doamo/ops.hpp"

namespace doamo {

Var ParamStore::add_param(const std::string& name, Tensor init) {
  if (params_.count(name) || buffers_.count(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  Var v = leaf(std::move(init), true);
  params_.emplace(name, v);
  return v;
}

Tensor& ParamStore::add_buffer(const std::string& name, Tensor init) {
  if (params_.count(name) || buffers_.count(name)) {
    throw std::invalid_argument("duplicate buffer name: " + name);
  }
  return buffers_.emplace(name, std::move(init)).first->second;
}

std::size_t ParamStore::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p->value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

std::map<std::string, Tensor> ParamStore::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : params_) out.emplace(name, p->value);
  for (const auto& [name, b] : buffers_) out.emplace(name, b);
  return out;
}

void ParamStore::load_state(const std::map<std::string, Tensor>& state) {
  if (state.size() != params_.size() + buffers_.size()) {
    throw std::invalid_argument("checkpoint has " + std::to_string(state.size()) +
                                " arrays, model expects " +
                                std::to_string(params_.size() + buffers_.size()));
  }
  for (const auto& [name, t] : state) {
    Tensor* dst = nullptr;
    if (auto it = params_.find(name); it != params_.end()) {
      dst = &it->second->value;
    } else if (auto jt = buffers_.find(name); jt != buffers_.end()) {
      dst = &jt->second;
    } else {
      throw std::invalid_argument("checkpoint array not in model: " + name);
    }
    if (dst->shape() != t.shape()) {
      throw std::invalid_argument("shape mismatch for " + name + ": checkpoint " +
                                  shape_str(t.shape()) + ", model " + shape_str(dst->shape()));
    }
    *dst = t;
  }
}

namespace nn {

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, int in_channels,
               int out_channels, int kernel, Rng& rng, bool with_bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1) {
    throw std::invalid_argument("Conv2d " + prefix + ": channels and kernel must be >= 1");
  }
  // He-normal initialisation over the fan-in.
  const double stddev = std::sqrt(2.0 / (in_channels * kernel * kernel));
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor w({out_channels, in_channels, kernel, kernel});
  for (double& v : w.storage()) v = dist(rng);
  weight_ = store.add_param(prefix + ".weight", std::move(w));
  if (with_bias) bias_ = store.add_param(prefix + ".bias", Tensor({out_channels}));
}

Var Conv2d::forward(const Var& x) const { return ops::conv2d(x, weight_, bias_, kernel_ / 2); }

std::size_t Conv2d::num_parameters() const {
  return weight_->value.numel() + (bias_ ? bias_->value.numel() : 0);
}

BatchNorm2d::BatchNorm2d(ParamStore& store, const std::string& prefix, int channels)
    : channels_(channels) {
  gamma_ = store.add_param(prefix + ".gamma", Tensor({channels}, 1.0));
  beta_ = store.add_param(prefix + ".beta", Tensor({channels}));
  running_mean_ = &store.add_buffer(prefix + ".running_mean", Tensor({channels}));
  running_var_ = &store.add_buffer(prefix + ".running_var", Tensor({channels}, 1.0));
}

Var BatchNorm2d::forward(const Var& x, bool training) const {
  return ops::batch_norm(x, gamma_, beta_, *running_mean_, *running_var_, training);
}

ConvBlock::ConvBlock(ParamStore& store, const std::string& prefix, int in_channels,
                     int out_channels, Rng& rng, bool use_norm)
    : conv_(store, prefix + ".conv", in_channels, out_channels, 3, rng), use_norm_(use_norm) {
  if (use_norm_) norm_ = BatchNorm2d(store, prefix + ".bn", out_channels);
}

Var ConvBlock::forward(const Var& x, bool training) const {
  Var y = conv_.forward(x);
  if (use_norm_) y = norm_.forward(y, training);
  return ops::relu(y);
}

std::size_t ConvBlock::num_parameters() const {
  return conv_.num_parameters() + (use_norm_ ? norm_.num_parameters() : 0);
}

}  // namespace nn

void Sgd::step(ParamStore& store) {
  for (const auto& [name, p] : store.params()) {
    if (!p->has_grad()) continue;
    Tensor& w = p->value;
    auto [it, inserted] = velocity_.try_emplace(name, Tensor::zeros_like(w));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double g = p->grad[i] + options_.weight_decay * w[i];
      v[i] = options_.momentum * v[i] + g;
      w[i] -= options_.learning_rate * v[i];
    }
  }
  store.zero_grad();
  ++steps_;
}

}  // namespace doamo
