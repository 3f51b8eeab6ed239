#include "doamo/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <memory>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace doamo::ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got " + shape_str(t.shape()));
  }
}

bool wants_grad(const Node& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

// Uninitialised scratch; callers overwrite every element before reading.
std::unique_ptr<double[]> scratch(std::size_t n) { return std::unique_ptr<double[]>(new double[n]); }

// cols is (Cin*k*k, Hout*Wout) for one image.
void im2col(const double* x, int cin, int h, int w, int k, int pad, double* cols) {
  const int ho = h + 2 * pad - k + 1;
  const int wo = w + 2 * pad - k + 1;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        // Output columns [lo, hi) read input columns inside [0, w).
        const int lo = std::clamp(pad - kx, 0, wo), hi = std::clamp(w + pad - kx, lo, wo);
        double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy + ky - pad;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w + (kx - pad);
          std::fill(dst, dst + lo, 0.0);
          std::copy(src + lo, src + hi, dst + lo);
          std::fill(dst + hi, dst + wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* cols, int cin, int h, int w, int k, int pad, double* x) {
  const int ho = h + 2 * pad - k + 1;
  const int wo = w + 2 * pad - k + 1;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        // Output columns [lo, hi) read input columns inside [0, w).
        const int lo = std::clamp(pad - kx, 0, wo), hi = std::clamp(w + pad - kx, lo, wo);
        const double* row =
            cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = x + (static_cast<std::size_t>(c) * h + iy) * w + (kx - pad);
          for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require_rank(xv, 4, "conv2d");
  require_rank(wv, 4, "conv2d weight");
  const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(wv.shape()) +
                                " incompatible with input " + shape_str(xv.shape()));
  }
  if (bias && bias->value.numel() != static_cast<std::size_t>(cout)) {
    throw std::invalid_argument("conv2d: bias size mismatch");
  }
  const int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
  if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: kernel larger than input");
  const int kk = cin * k * k;
  const int hw = ho * wo;
  const bool direct = (k == 1 && pad == 0);

  Tensor out({n, cout, ho, wo});
  ConstMapRM wmat(wv.data(), cout, kk);
  auto cols = scratch(direct ? 0 : static_cast<std::size_t>(kk) * hw);
  for (int b = 0; b < n; ++b) {
    const double* xb = xv.data() + static_cast<std::size_t>(b) * cin * h * w;
    const double* colp = xb;
    if (!direct) {
      im2col(xb, cin, h, w, k, pad, cols.get());
      colp = cols.get();
    }
    MapRM o(out.data() + static_cast<std::size_t>(b) * cout * hw, cout, hw);
    o.noalias() = wmat * ConstMapRM(colp, kk, hw);
    if (bias) {
      for (int c = 0; c < cout; ++c) o.row(c).array() += bias->value[c];
    }
  }

  return make_op(std::move(out), {x, weight, bias}, [=](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    const Tensor& g = self.grad;
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = wants_grad(self, 2);
    ConstMapRM wmat(wv.data(), cout, kk);
    auto cols = scratch(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    auto dcols = scratch(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    for (int b = 0; b < n; ++b) {
      ConstMapRM gout(g.data() + static_cast<std::size_t>(b) * cout * hw, cout, hw);
      const double* xb = xv.data() + static_cast<std::size_t>(b) * cin * h * w;
      if (gw) {
        const double* colp = xb;
        if (!direct) {
          im2col(xb, cin, h, w, k, pad, cols.get());
          colp = cols.get();
        }
        MapRM gwm(self.parents[1]->grad_buffer().data(), cout, kk);
        gwm.noalias() += gout * ConstMapRM(colp, kk, hw).transpose();
      }
      if (gb) {
        Tensor& gbt = self.parents[2]->grad_buffer();
        // Sequential sum: Eigen's vectorised reduction peels by alignment,
        // which makes the rounding depend on the buffer address.
        for (int c = 0; c < cout; ++c) {
          const double* row = g.data() + (static_cast<std::size_t>(b) * cout + c) * hw;
          gbt[c] += std::accumulate(row, row + hw, 0.0);
        }
      }
      if (gx) {
        double* dx = self.parents[0]->grad_buffer().data() +
                     static_cast<std::size_t>(b) * cin * h * w;
        if (direct) {
          MapRM(dx, kk, hw).noalias() += wmat.transpose() * gout;
        } else {
          MapRM dc(dcols.get(), kk, hw);
          dc.noalias() = wmat.transpose() * gout;
          col2im(dcols.get(), cin, h, w, k, pad, dx);
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "batch_norm");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  std::vector<double> mean(c), inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / m;
      double v = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* p = xv.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= m;
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(v + eps);
      const double unbiased = m > 1 ? v * m / (m - 1) : v;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    } else {
      mean[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      const double gm = gamma->value[ch], bt = beta->value[ch];
      for (int i = 0; i < hw; ++i) {
        const double xh = (xv[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [=, xhat = std::move(xhat)](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& gmv = self.parents[1]->value;
    std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          sum_g[ch] += g[off + i];
          sum_gx[ch] += g[off + i] * xhat[off + i];
        }
      }
    }
    if (wants_grad(self, 1)) {
      Tensor& gg = self.parents[1]->grad_buffer();
      for (int ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
    }
    if (wants_grad(self, 2)) {
      Tensor& gb = self.parents[2]->grad_buffer();
      for (int ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
    }
    if (wants_grad(self, 0)) {
      Tensor& gx = self.parents[0]->grad_buffer();
      for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
          const double scale = gmv[ch] * inv_std[ch];
          if (training) {
            const double mg = sum_g[ch] / m, mgx = sum_gx[ch] / m;
            for (int i = 0; i < hw; ++i) {
              gx[off + i] += scale * (g[off + i] - mg - xhat[off + i] * mgx);
            }
          } else {
            for (int i = 0; i < hw; ++i) gx[off + i] += scale * g[off + i];
          }
        }
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] < 0.0 ? 0.0 : x->value[i];  // NaN passes through
  return make_op(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      gx[i] += xv[i] > 0.0 ? self.grad[i] : 0.0;
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x->value[i]));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double s = self.value[i];
      gx[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Var maxpool2(const Var& x) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "maxpool2");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw std::invalid_argument("maxpool2: input smaller than 2x2");
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xx;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + static_cast<std::size_t>(2 * y + dy) * w + 2 * xx + dx;
              if (xv[idx] > xv[best] || std::isnan(xv[idx])) best = idx;  // NaN wins
            }
          }
          argmax[o] = best;
          out[o] = xv[best];
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor& first = xs[0]->value;
  require_rank(first, 4, "concat_channels");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int total = 0;
  for (const Var& v : xs) {
    const Tensor& t = v->value;
    if (t.rank() != 4 || t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw std::invalid_argument("concat_channels: shape mismatch " + shape_str(t.shape()) +
                                  " vs " + shape_str(first.shape()));
    }
    total += t.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({n, total, h, w});
  for (int b = 0; b < n; ++b) {
    double* dst = out.data() + static_cast<std::size_t>(b) * total * hw;
    for (const Var& v : xs) {
      const std::size_t len = v->value.dim(1) * hw;
      const double* src = v->value.data() + b * len;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  return make_op(std::move(out), xs, [n, total, hw](Node& self) {
    for (int b = 0; b < n; ++b) {
      const double* src = self.grad.data() + static_cast<std::size_t>(b) * total * hw;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const std::size_t len = self.parents[i]->value.dim(1) * hw;
        if (wants_grad(self, i)) {
          double* dst = self.parents[i]->grad_buffer().data() + b * len;
          for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
        }
        src += len;
      }
    }
  });
}

Var channel_mean(const Var& x) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "channel_mean");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({n, 1, h, w});
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
      double* dst = out.data() + b * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
  }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= c;
  return make_op(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        double* dst = gx.data() + (static_cast<std::size_t>(b) * c + ch) * hw;
        const double* g = self.grad.data() + b * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += g[i] / c;
      }
    }
  });
}

Var fixed_conv3x3_reflect(const Var& x, const std::array<double, 9>& kernel) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "fixed_conv3x3_reflect");
  if (xv.dim(1) != 1) throw std::invalid_argument("fixed_conv3x3_reflect: expects 1 channel");
  const int n = xv.dim(0), h = xv.dim(2), w = xv.dim(3);
  if (h < 3 || w < 3) {
    throw std::invalid_argument("fixed_conv3x3_reflect: spatial size " + shape_str(xv.shape()) +
                                " below 3x3");
  }
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        // Positive and negative taps are summed apart, so a kernel whose two
        // halves mirror each other (Sobel) gives exactly 0 on a constant image.
        double pos = 0.0, neg = 0.0;
        for (int a = 0; a < 3; ++a) {
          for (int c = 0; c < 3; ++c) {
            const double k = kernel[a * 3 + c];
            const double v = xv.at(b, 0, reflect(i + a - 1, h), reflect(j + c - 1, w));
            if (k > 0.0) pos += k * v;
            if (k < 0.0) neg += -k * v;
          }
        }
        out.at(b, 0, i, j) = pos - neg;
      }
    }
  }
  return make_op(std::move(out), {x}, [kernel, n, h, w](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const double g = self.grad.at(b, 0, i, j);
          for (int a = 0; a < 3; ++a) {
            for (int c = 0; c < 3; ++c) {
              gx.at(b, 0, reflect(i + a - 1, h), reflect(j + c - 1, w)) += kernel[a * 3 + c] * g;
            }
          }
        }
      }
    }
  });
}

Var magnitude(const Var& a, const Var& b, double eps) {
  if (a->value.shape() != b->value.shape()) {
    throw std::invalid_argument("magnitude: shape mismatch");
  }
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = std::sqrt(a->value[i] * a->value[i] + b->value[i] * b->value[i]);
  }
  return make_op(std::move(out), {a, b}, [eps](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const bool ga = wants_grad(self, 0), gb = wants_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double denom = std::sqrt(av[i] * av[i] + bv[i] * bv[i] + eps);
      if (ga) self.parents[0]->grad_buffer()[i] += self.grad[i] * av[i] / denom;
      if (gb) self.parents[1]->grad_buffer()[i] += self.grad[i] * bv[i] / denom;
    }
  });
}

Var region_aggregate(const Var& x, int k) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "region_aggregate");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (k < 1 || k > std::min(h, w)) {
    throw std::invalid_argument("region_aggregate: k=" + std::to_string(k) +
                                " outside [1, min(H,W)=" + std::to_string(std::min(h, w)) + "]");
  }
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int ty = 0; ty < h; ty += k) {
        const int ey = std::min(ty + k, h);
        for (int tx = 0; tx < w; tx += k) {
          const int ex = std::min(tx + k, w);
          double s = 0.0;
          for (int i = ty; i < ey; ++i)
            for (int j = tx; j < ex; ++j) s += xv.at(b, ch, i, j);
          const double mean = s / ((ey - ty) * (ex - tx));
          for (int i = ty; i < ey; ++i)
            for (int j = tx; j < ex; ++j) out.at(b, ch, i, j) = mean;
        }
      }
    }
  }
  return make_op(std::move(out), {x}, [n, c, h, w, k](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        for (int ty = 0; ty < h; ty += k) {
          const int ey = std::min(ty + k, h);
          for (int tx = 0; tx < w; tx += k) {
            const int ex = std::min(tx + k, w);
            double s = 0.0;
            for (int i = ty; i < ey; ++i)
              for (int j = tx; j < ex; ++j) s += self.grad.at(b, ch, i, j);
            const double share = s / ((ey - ty) * (ex - tx));
            for (int i = ty; i < ey; ++i)
              for (int j = tx; j < ex; ++j) gx.at(b, ch, i, j) += share;
          }
        }
      }
    }
  });
}

Var global_mean(const Var& x) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "global_mean");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({n, c, 1, 1});
  for (std::size_t p = 0; p < out.numel(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[p * hw + i];
    out[p] = s / hw;
  }
  return make_op(std::move(out), {x}, [hw](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < self.grad.numel(); ++p) {
      const double g = self.grad[p] / hw;
      for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g;
    }
  });
}

Var softmax_channels(const Var& x) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "softmax_channels");
  const int n = xv.dim(0), k = xv.dim(1);
  if (xv.dim(2) != 1 || xv.dim(3) != 1) {
    throw std::invalid_argument("softmax_channels: expects (N, K, 1, 1)");
  }
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    const double* z = xv.data() + static_cast<std::size_t>(b) * k;
    double* y = out.data() + static_cast<std::size_t>(b) * k;
    const double zmax = *std::max_element(z, z + k);
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += (y[i] = std::exp(z[i] - zmax));
    for (int i = 0; i < k; ++i) y[i] /= s;
  }
  return make_op(std::move(out), {x}, [n, k](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b) {
      const double* y = self.value.data() + static_cast<std::size_t>(b) * k;
      const double* g = self.grad.data() + static_cast<std::size_t>(b) * k;
      double dot = 0.0;
      for (int i = 0; i < k; ++i) dot += g[i] * y[i];
      for (int i = 0; i < k; ++i) gx[static_cast<std::size_t>(b) * k + i] += y[i] * (g[i] - dot);
    }
  });
}

Var weighted_sum(const std::vector<Var>& candidates, const Var& weights) {
  if (candidates.empty()) throw std::invalid_argument("weighted_sum: no candidates");
  const Tensor& first = candidates[0]->value;
  require_rank(first, 4, "weighted_sum");
  const int n = first.dim(0);
  const int k = static_cast<int>(candidates.size());
  if (weights->value.shape() != Shape{n, k, 1, 1}) {
    throw std::invalid_argument("weighted_sum: weights " + shape_str(weights->value.shape()) +
                                " do not match " + std::to_string(k) + " candidates");
  }
  for (const Var& v : candidates) {
    if (v->value.shape() != first.shape()) {
      throw std::invalid_argument("weighted_sum: candidate shape mismatch " +
                                  shape_str(v->value.shape()) + " vs " + shape_str(first.shape()));
    }
  }
  const std::size_t per = first.numel() / n;
  Tensor out(first.shape());
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < k; ++i) {
      const double wgt = weights->value[static_cast<std::size_t>(b) * k + i];
      const double* src = candidates[i]->value.data() + b * per;
      double* dst = out.data() + b * per;
      for (std::size_t j = 0; j < per; ++j) dst[j] += wgt * src[j];
    }
  }
  std::vector<Var> parents = candidates;
  parents.push_back(weights);
  return make_op(std::move(out), std::move(parents), [n, k, per](Node& self) {
    const Tensor& wv = self.parents[k]->value;
    const bool gw = wants_grad(self, k);
    for (int b = 0; b < n; ++b) {
      const double* g = self.grad.data() + b * per;
      for (int i = 0; i < k; ++i) {
        const Node& cand = *self.parents[i];
        if (gw) {
          const double* src = cand.value.data() + b * per;
          double dot = 0.0;
          for (std::size_t j = 0; j < per; ++j) dot += g[j] * src[j];
          self.parents[k]->grad_buffer()[static_cast<std::size_t>(b) * k + i] += dot;
        }
        if (wants_grad(self, i)) {
          const double wgt = wv[static_cast<std::size_t>(b) * k + i];
          double* dst = self.parents[i]->grad_buffer().data() + b * per;
          for (std::size_t j = 0; j < per; ++j) dst[j] += wgt * g[j];
        }
      }
    }
  });
}

Var scale_by_map(const Var& map, const Var& x) {
  const Tensor& mv = map->value;
  const Tensor& xv = x->value;
  require_rank(mv, 4, "scale_by_map");
  require_rank(xv, 4, "scale_by_map");
  if (mv.dim(1) != 1 || mv.dim(0) != xv.dim(0) || mv.dim(2) != xv.dim(2) ||
      mv.dim(3) != xv.dim(3)) {
    throw std::invalid_argument("scale_by_map: map " + shape_str(mv.shape()) +
                                " not aligned with " + shape_str(xv.shape()));
  }
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    const double* m = mv.data() + b * hw;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = m[i] * xv[off + i];
    }
  }
  return make_op(std::move(out), {map, x}, [n, c, hw](Node& self) {
    const Tensor& mv = self.parents[0]->value;
    const Tensor& xv = self.parents[1]->value;
    const bool gm = wants_grad(self, 0), gx = wants_grad(self, 1);
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double g = self.grad[off + i];
          if (gm) self.parents[0]->grad_buffer()[b * hw + i] += g * xv[off + i];
          if (gx) self.parents[1]->grad_buffer()[off + i] += g * mv[b * hw + i];
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  out.add_(b->value);
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (wants_grad(self, i)) self.parents[i]->grad_buffer().add_(self.grad);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a->value.shape() != b->value.shape()) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      const Tensor& other = self.parents[1 - k]->value;
      Tensor& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

Var mul_scalar(const Var& x, double s) {
  Tensor out = x->value;
  for (double& v : out.storage()) v *= s;
  return make_op(std::move(out), {x}, [s](Node& self) {
    self.parents[0]->grad_buffer().add_(self.grad, s);
  });
}

Var sum(const Var& x) {
  Tensor out({1}, x->value.sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& v : gx.storage()) v += g;
  });
}

Var flatten_head(const Var& x, int anchors_per_cell, int row_width) {
  const Tensor& xv = x->value;
  require_rank(xv, 4, "flatten_head");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (c != anchors_per_cell * row_width) {
    throw std::invalid_argument("flatten_head: channel count " + std::to_string(c) +
                                " != anchors * row width");
  }
  const int rows = h * w * anchors_per_cell;
  Tensor out({n, rows, row_width});
  auto src_index = [=](int b, int y, int xx, int a, int r) {
    return ((static_cast<std::size_t>(b) * c + a * row_width + r) * h + y) * w + xx;
  };
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (int a = 0; a < anchors_per_cell; ++a)
          for (int r = 0; r < row_width; ++r) out[o++] = xv[src_index(b, y, xx, a, r)];
  return make_op(std::move(out), {x}, [=](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    std::size_t o = 0;
    for (int b = 0; b < n; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int a = 0; a < anchors_per_cell; ++a)
            for (int r = 0; r < row_width; ++r) gx[src_index(b, y, xx, a, r)] += self.grad[o++];
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Tensor& first = xs[0]->value;
  require_rank(first, 3, "concat_rows");
  const int n = first.dim(0), r = first.dim(2);
  int total = 0;
  for (const Var& v : xs) {
    if (v->value.rank() != 3 || v->value.dim(0) != n || v->value.dim(2) != r) {
      throw std::invalid_argument("concat_rows: shape mismatch");
    }
    total += v->value.dim(1);
  }
  Tensor out({n, total, r});
  double* dst = out.data();
  for (int b = 0; b < n; ++b) {
    for (const Var& v : xs) {
      const std::size_t len = static_cast<std::size_t>(v->value.dim(1)) * r;
      const double* src = v->value.data() + b * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return make_op(std::move(out), xs, [n, r](Node& self) {
    const double* src = self.grad.data();
    for (int b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const std::size_t len = static_cast<std::size_t>(self.parents[i]->value.dim(1)) * r;
        if (wants_grad(self, i)) {
          double* dst = self.parents[i]->grad_buffer().data() + b * len;
          for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
        }
        src += len;
      }
    }
  });
}

}  // namespace doamo::ops
