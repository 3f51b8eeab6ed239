#ifndef DOAMO_TESTS_REFERENCE_DOAM_HPP_
#define DOAMO_TESTS_REFERENCE_DOAM_HPP_

// Straight-line single-image evaluation of the attention module, written with
// plain loops and no shared code with the library's graph ops. Used as the
// independent oracle for forward-pass checks.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "doamo/doam.hpp"
#include "doamo/nn.hpp"
#include "doamo/tensor.hpp"

namespace doamo::reference {

inline const Tensor& param(const ParamStore& s, const std::string& name) {
  return s.params().at(name)->value;
}

// Direct zero-padded stride-1 convolution of (Cin,H,W).
inline Tensor conv(const Tensor& x, const Tensor& w, const Tensor* b) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor y({cout, h, wd});
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < wd; ++j) {
        double s = b ? (*b)[o] : 0.0;
        for (int c = 0; c < cin; ++c)
          for (int a = 0; a < k; ++a)
            for (int q = 0; q < k; ++q) {
              const int ii = i + a - pad, jj = j + q - pad;
              if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
              s += w[((static_cast<std::size_t>(o) * cin + c) * k + a) * k + q] * x.at(c, ii, jj);
            }
        y.at(o, i, j) = s;
      }
  return y;
}

// Batch-of-one normalisation using the map's own statistics.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor y(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < hw; ++i) mean += x[ch * hw + i];
    mean /= hw;
    for (int i = 0; i < hw; ++i) var += (x[ch * hw + i] - mean) * (x[ch * hw + i] - mean);
    var /= hw;
    for (int i = 0; i < hw; ++i) {
      y[ch * hw + i] = gamma[ch] * (x[ch * hw + i] - mean) / std::sqrt(var + 1e-5) + beta[ch];
    }
  }
  return y;
}

inline Tensor relu(Tensor x) {
  for (double& v : x.storage()) v = v > 0 ? v : 0.0;
  return x;
}

inline Tensor block(const ParamStore& s, const std::string& prefix, const Tensor& x,
                    bool use_norm) {
  Tensor y = conv(x, param(s, prefix + ".conv.weight"), &param(s, prefix + ".conv.bias"));
  if (use_norm) y = batch_norm_train(y, param(s, prefix + ".bn.gamma"), param(s, prefix + ".bn.beta"));
  return relu(std::move(y));
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.storage().begin(), a.storage().end(), y.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), y.storage().begin() + a.numel());
  return y;
}

struct Edges {
  Tensor h, v, e;
};

inline Edges sobel(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto refl = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  auto lum = [&](int i, int j) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) s += x.at(ch, refl(i, h), refl(j, w));
    return s / c;
  };
  Edges out{Tensor({1, h, w}), Tensor({1, h, w}), Tensor({1, h, w})};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double gx = (lum(i - 1, j + 1) + 2 * lum(i, j + 1) + lum(i + 1, j + 1)) -
                        (lum(i - 1, j - 1) + 2 * lum(i, j - 1) + lum(i + 1, j - 1));
      const double gy = (lum(i + 1, j - 1) + 2 * lum(i + 1, j) + lum(i + 1, j + 1)) -
                        (lum(i - 1, j - 1) + 2 * lum(i - 1, j) + lum(i - 1, j + 1));
      out.h.at(0, i, j) = gx;
      out.v.at(0, i, j) = gy;
      out.e.at(0, i, j) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

// Each pixel averages the clipped k x k tile that contains it.
inline Tensor tile_mean(const Tensor& x, int k) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const int r0 = i - i % k, c0 = j - j % k;
        double s = 0.0;
        int count = 0;
        for (int r = r0; r < std::min(r0 + k, h); ++r)
          for (int q = c0; q < std::min(c0 + k, w); ++q) {
            s += x.at(ch, r, q);
            ++count;
          }
        y.at(ch, i, j) = s / count;
      }
  return y;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Trace {
  Edges edges;
  Tensor a, p, b1;
  std::vector<Tensor> b2, b3;
  std::vector<double> gate_scores, gate_weights;
  Tensor b, c, m, d;
};

inline Trace forward(const ParamStore& s, const doam::DoamConfig& cfg, const Tensor& x) {
  Trace t;
  t.edges = sobel(x);
  t.a = t.edges.e;
  for (int i = 0; i < cfg.eg_blocks; ++i)
    t.a = block(s, "eg.block" + std::to_string(i), t.a, cfg.use_norm);
  t.p = concat(x, t.edges.e);
  t.b1 = t.p;
  for (int i = 0; i < cfg.ma_blocks; ++i)
    t.b1 = block(s, "ma.block" + std::to_string(i), t.b1, cfg.use_norm);
  for (int k : cfg.scales) {
    t.b2.push_back(tile_mean(t.b1, k));
    t.b3.push_back(concat(t.b1, t.b2.back()));
    Tensor g = conv(t.b3.back(), param(s, "ma.gate.weight"), &param(s, "ma.gate.bias"));
    t.gate_scores.push_back(g.sum() / g.numel());
  }
  double total = 0.0;
  for (double z : t.gate_scores) total += std::exp(sigmoid(z));
  t.b = Tensor(t.b3[0].shape());
  for (std::size_t i = 0; i < t.b3.size(); ++i) {
    t.gate_weights.push_back(std::exp(sigmoid(t.gate_scores[i])) / total);
    t.b.add_(t.b3[i], t.gate_weights.back());
  }
  t.c = conv(concat(t.a, t.b), param(s, "ag.fuse.weight"), &param(s, "ag.fuse.bias"));
  t.m = t.c;
  for (double& v : t.m.storage()) v = sigmoid(v);
  t.d = Tensor(t.p.shape());
  const int hw = x.dim(1) * x.dim(2);
  for (int ch = 0; ch < t.p.dim(0); ++ch)
    for (int i = 0; i < hw; ++i) t.d[ch * hw + i] = t.m[i] * t.p[ch * hw + i];
  return t;
}

}  // namespace doamo::reference

#endif  // DOAMO_TESTS_REFERENCE_DOAM_HPP_
