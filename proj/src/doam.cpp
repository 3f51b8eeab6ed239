#include "doamo/doam.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "doamo/ops.hpp"

namespace doamo::doam {

void validate_image(const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument("image must be (C,H,W), got " + shape_str(x.shape()));
  }
  if (x.dim(0) < 1) throw std::invalid_argument("image needs at least one channel");
  if (x.dim(1) < 3 || x.dim(2) < 3) {
    throw std::invalid_argument("image " + shape_str(x.shape()) +
                                " is smaller than the 3x3 Sobel support");
  }
  if (!x.all_finite()) throw std::invalid_argument("image contains non-finite values");
}

EdgeMaps sobel_edges(const Var& x) {
  const Tensor& v = x->value;
  if (v.rank() != 4 || v.dim(2) < 3 || v.dim(3) < 3) {
    throw std::invalid_argument("sobel_edges: need (N,C,H,W) with H,W >= 3, got " +
                                shape_str(v.shape()));
  }
  Var lum = v.dim(1) == 1 ? x : ops::channel_mean(x);
  EdgeMaps e;
  e.horizontal = ops::fixed_conv3x3_reflect(lum, kSobelHorizontal);
  e.vertical = ops::fixed_conv3x3_reflect(lum, kSobelVertical);
  e.combined = ops::magnitude(e.horizontal, e.vertical);
  return e;
}

EdgeImages sobel_edges(const Tensor& x) {
  validate_image(x);
  NoGradGuard guard;
  EdgeMaps e = sobel_edges(constant(x.unsqueezed()));
  return {e.horizontal->value.item(0), e.vertical->value.item(0), e.combined->value.item(0)};
}

Tensor region_aggregate(const Tensor& features, int k) {
  if (features.rank() != 3) {
    throw std::invalid_argument("region_aggregate: expected (C,H,W), got " +
                                shape_str(features.shape()));
  }
  NoGradGuard guard;
  return ops::region_aggregate(constant(features.unsqueezed()), k)->value.item(0);
}

Tensor gated_mix(std::span<const Tensor> candidates, std::span<const double> logits) {
  if (candidates.empty()) throw std::invalid_argument("gated_mix: empty candidate set");
  if (logits.size() != candidates.size()) {
    throw std::invalid_argument("gated_mix: one logit per candidate required");
  }
  for (const Tensor& c : candidates) {
    if (c.shape() != candidates[0].shape()) {
      throw std::invalid_argument("gated_mix: candidate shape mismatch");
    }
  }
  const double zmax = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::exp(logits[i] - zmax));
  Tensor out(candidates[0].shape());
  for (std::size_t i = 0; i < w.size(); ++i) out.add_(candidates[i], w[i] / total);
  return out;
}

Tensor apply_attention(const Tensor& m, const Tensor& x, const Tensor& edge) {
  validate_image(x);
  const int h = x.dim(1), w = x.dim(2);
  if (m.numel() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("apply_attention: map " + shape_str(m.shape()) +
                                " not aligned with image " + shape_str(x.shape()));
  }
  if (edge.shape() != Shape{1, h, w}) {
    throw std::invalid_argument("apply_attention: edge image must be (1,H,W)");
  }
  NoGradGuard guard;
  Var p = ops::concat_channels({constant(x.unsqueezed()), constant(edge.unsqueezed())});
  return ops::scale_by_map(constant(m.reshaped({1, 1, h, w})), p)->value.item(0);
}

void DoamConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("DOAM: in_channels must be >= 1");
  if (eg_blocks < 1 || ma_blocks < 1) {
    throw std::invalid_argument("DOAM: block counts N1, N2 must be >= 1");
  }
  if (eg_channels < 1 || ma_channels < 1) {
    throw std::invalid_argument("DOAM: channel widths must be >= 1");
  }
  if (scales.empty()) throw std::invalid_argument("DOAM: scale set K must be non-empty");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] < 1) throw std::invalid_argument("DOAM: scales must be >= 1");
    if (i > 0 && scales[i] <= scales[i - 1]) {
      throw std::invalid_argument("DOAM: scales must be strictly increasing");
    }
  }
}

void DoamConfig::validate_for(int height, int width) const {
  validate();
  if (height < 3 || width < 3) throw std::invalid_argument("DOAM: input below 3x3");
  if (scales.back() > std::min(height, width)) {
    throw std::invalid_argument("DOAM: scale " + std::to_string(scales.back()) +
                                " exceeds min(H,W)=" + std::to_string(std::min(height, width)));
  }
}

DoamModule::DoamModule(ParamStore& store, DoamConfig config, Rng& rng, const std::string& prefix)
    : config_(std::move(config)) {
  config_.validate();
  const DoamConfig& c = config_;
  for (int i = 0; i < c.eg_blocks; ++i) {
    eg_.emplace_back(store, prefix + "eg.block" + std::to_string(i), i == 0 ? 1 : c.eg_channels,
                     c.eg_channels, rng, c.use_norm);
  }
  for (int i = 0; i < c.ma_blocks; ++i) {
    ma_.emplace_back(store, prefix + "ma.block" + std::to_string(i),
                     i == 0 ? c.in_channels + 1 : c.ma_channels, c.ma_channels, rng, c.use_norm);
  }
  gate_ = nn::Conv2d(store, prefix + "ma.gate", 2 * c.ma_channels, 1, 3, rng);
  fuse_ = nn::Conv2d(store, prefix + "ag.fuse", c.eg_channels + 2 * c.ma_channels, 1, 1, rng);
}

Var DoamModule::edge_guidance(const Var& combined_edges, bool training) const {
  Var a = combined_edges;
  for (const auto& block : eg_) a = block.forward(a, training);
  return a;
}

Var DoamModule::material_awareness(const Var& x, const EdgeMaps& edges, bool training,
                                   DoamTrace* trace) const {
  Var p = ops::concat_channels({x, edges.combined});
  Var b1 = p;
  for (const auto& block : ma_) b1 = block.forward(b1, training);
  std::vector<Var> candidates;
  for (int k : config_.scales) {
    Var b2 = ops::region_aggregate(b1, k);
    Var b3 = ops::concat_channels({b1, b2});
    if (trace) trace->b2.push_back(b2);
    candidates.push_back(b3);
  }
  if (trace) {
    trace->p = p;
    trace->b1 = b1;
    trace->b3 = candidates;
  }
  return gated_select(candidates, trace);
}

Var DoamModule::gated_select(const std::vector<Var>& candidates, DoamTrace* trace) const {
  if (candidates.empty()) throw std::invalid_argument("gated_select: empty candidate set");
  std::vector<Var> scores;
  for (const Var& u : candidates) {
    if (u->value.shape() != candidates[0]->value.shape()) {
      throw std::invalid_argument("gated_select: candidate shapes differ: " +
                                  shape_str(u->value.shape()) + " vs " +
                                  shape_str(candidates[0]->value.shape()));
    }
    scores.push_back(ops::global_mean(gate_.forward(u)));
  }
  Var z = ops::concat_channels(scores);
  Var weights = ops::softmax_channels(ops::sigmoid(z));
  if (trace) {
    trace->gate_scores = z;
    trace->gate_weights = weights;
  }
  return ops::weighted_sum(candidates, weights);
}

Var DoamModule::attention_generate(const Var& a, const Var& b, DoamTrace* trace) const {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3)) {
    throw std::invalid_argument("attention_generate: A " + shape_str(av.shape()) +
                                " and B " + shape_str(bv.shape()) + " not spatially aligned");
  }
  Var c = fuse_.forward(ops::concat_channels({a, b}));
  if (trace) trace->c = c;
  return ops::sigmoid(c);
}

Var DoamModule::apply_attention(const Var& m, const Var& x, const Var& combined_edges) {
  return ops::scale_by_map(m, ops::concat_channels({x, combined_edges}));
}

Var DoamModule::forward(const Var& x, bool training, DoamTrace* trace) const {
  const Tensor& v = x->value;
  if (v.rank() != 4 || v.dim(1) != config_.in_channels) {
    throw std::invalid_argument("DOAM: expected (N," + std::to_string(config_.in_channels) +
                                ",H,W) input, got " + shape_str(v.shape()));
  }
  config_.validate_for(v.dim(2), v.dim(3));
  EdgeMaps edges = sobel_edges(x);
  Var a = edge_guidance(edges.combined, training);
  Var b = material_awareness(x, edges, training, trace);
  Var m = attention_generate(a, b, trace);
  Var d = apply_attention(m, x, edges.combined);
  if (trace) {
    trace->edges = edges;
    trace->a = a;
    trace->b = b;
    trace->m = m;
    trace->d = d;
  }
  return d;
}

std::size_t DoamModule::num_parameters() const {
  std::size_t n = gate_.num_parameters() + fuse_.num_parameters();
  for (const auto& b : eg_) n += b.num_parameters();
  for (const auto& b : ma_) n += b.num_parameters();
  return n;
}

std::vector<LayerCost> DoamModule::layer_costs(int height, int width) const {
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  const DoamConfig& c = config_;
  std::vector<LayerCost> out;
  if (c.in_channels > 1) out.push_back(elementwise_cost("edge.luminance", hw));
  // Sobel kernels are fixed, not learned.
  for (const char* name : {"edge.sobel_h", "edge.sobel_v"}) {
    LayerCost s = conv_cost(name, 1, 1, 3, height, width, false);
    s.params = 0;
    out.push_back(s);
  }
  out.push_back(elementwise_cost("edge.magnitude", hw));
  auto blocks = [&](const std::vector<nn::ConvBlock>& bs, const std::string& name) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      const auto& conv = bs[i].conv();
      const std::string base = name + ".block" + std::to_string(i);
      out.push_back(conv_cost(base + ".conv", conv.in_channels(), conv.out_channels(), 3,
                              height, width, conv.has_bias()));
      if (bs[i].use_norm()) {
        out.push_back(elementwise_cost(base + ".bn", conv.out_channels() * hw,
                                       2 * static_cast<std::size_t>(conv.out_channels())));
      }
      out.push_back(elementwise_cost(base + ".relu", conv.out_channels() * hw));
    }
  };
  blocks(eg_, "eg");
  blocks(ma_, "ma");
  for (int k : c.scales) {
    const std::string base = "ma.ria" + std::to_string(k);
    out.push_back(elementwise_cost(base + ".pool", c.ma_channels * hw));
    LayerCost g = conv_cost(base + ".gate", 2 * c.ma_channels, 1, 3, height, width, true);
    // The gate kernel is shared across scales; count its parameters once.
    if (k != c.scales.front()) g.params = 0;
    out.push_back(g);
    out.push_back(elementwise_cost(base + ".gate_mean", 1));
  }
  out.push_back(elementwise_cost("ma.gate_softmax", c.scales.size()));
  out.push_back(elementwise_cost("ma.mix", 2 * c.ma_channels * hw * c.scales.size()));
  out.push_back(conv_cost("ag.fuse", c.eg_channels + 2 * c.ma_channels, 1, 1, height, width,
                          true));
  out.push_back(elementwise_cost("ag.sigmoid", hw));
  out.push_back(elementwise_cost("ag.apply", (c.in_channels + 1) * hw));
  return out;
}

}  // namespace doamo::doam
