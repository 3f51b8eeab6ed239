#include "doamo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace doamo {

double smooth_l1(double r) {
  const double a = std::abs(r);
  return a < 1.0 ? 0.5 * r * r : a - 0.5;
}

double smooth_l1_grad(double r) {
  if (r >= 1.0) return 1.0;
  if (r <= -1.0) return -1.0;
  return r;
}

double focal_loss(double p_t, double gamma) {
  if (!(p_t > 0.0) || p_t > 1.0) {
    throw std::invalid_argument("focal_loss: p_t must lie in (0, 1], got " + std::to_string(p_t));
  }
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss: gamma must be >= 0");
  if (p_t == 1.0) return 0.0;
  return -std::pow(1.0 - p_t, gamma) * std::log(p_t);
}

namespace {

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

double softmax_cross_entropy(std::span<const double> logits, int target) {
  return log_sum_exp(logits) - logits[target];
}

LogitLoss softmax_focal(std::span<const double> logits, int target, double gamma) {
  if (target < 0 || target >= static_cast<int>(logits.size())) {
    throw std::out_of_range("softmax_focal: target out of range");
  }
  const double lse = log_sum_exp(logits);
  const double log_pt = logits[target] - lse;
  const double pt = std::exp(log_pt);
  LogitLoss out;
  out.grad.resize(logits.size());
  // d/dz_j of -(1-p)^g log p = dL/dp * p (delta_jt - p_j).
  double dldp_times_p;
  if (gamma == 0.0) {
    out.value = -log_pt;
    dldp_times_p = -1.0;
  } else {
    const double q = 1.0 - pt;
    const double qg = std::pow(q, gamma);
    out.value = -qg * log_pt;
    const double qg1 = q > 0.0 ? std::pow(q, gamma - 1.0) : 0.0;
    dldp_times_p = gamma * qg1 * log_pt * pt - qg;
  }
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double pj = std::exp(logits[j] - lse);
    out.grad[j] = dldp_times_p * ((static_cast<int>(j) == target ? 1.0 : 0.0) - pj);
  }
  return out;
}

}  // namespace doamo
