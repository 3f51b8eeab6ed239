#ifndef DOAMO_TESTS_ORACLES_HPP_
#define DOAMO_TESTS_ORACLES_HPP_

// Brute-force references shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "doamo/doam.hpp"
#include "doamo/eval.hpp"
#include "doamo/ops.hpp"
#include "doamo/trainer.hpp"
#include "test_support.hpp"

namespace doamo::testing {

inline std::vector<std::int64_t> pool_ids(const train::HardSamplePool& pool) {
  std::vector<std::int64_t> ids;
  for (const auto& e : pool.entries()) ids.push_back(e.batch_id);
  return ids;
}

// The best `cap` admissible items of the first n losses, ranked by loss
// (descending for hard, ascending for easy) then arrival, in arrival order.
inline std::vector<std::int64_t> oracle_pool(const std::vector<double>& losses, std::size_t n,
                                             std::size_t cap, double thr, bool hard) {
  std::vector<std::int64_t> adm;
  for (std::size_t i = 0; i < n; ++i) {
    if (hard ? losses[i] > thr : losses[i] < thr) adm.push_back(static_cast<std::int64_t>(i));
  }
  std::stable_sort(adm.begin(), adm.end(), [&](std::int64_t a, std::int64_t b) {
    return hard ? losses[a] > losses[b] : losses[a] < losses[b];
  });
  if (adm.size() > cap) adm.resize(cap);
  std::sort(adm.begin(), adm.end());
  return adm;
}

// Streams of at most 19 losses over 6 integer values, so ties with each
// other and with the threshold are common. Returns the first failing
// "trial t step s" or an empty string.
inline std::string pool_oracle_sweep(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < trials; ++trial) {
    const bool hard = trial % 2 == 0;
    const std::size_t cap = 1 + rng() % 5;
    const std::size_t len = rng() % 20;
    std::vector<double> losses(len);
    for (double& l : losses) l = static_cast<double>(rng() % 6);
    const double thr = static_cast<double>(rng() % 6) - 0.5 * (rng() % 2);
    train::HardSamplePool pool(cap, hard ? train::HardSamplePool::Mode::kHard
                                         : train::HardSamplePool::Mode::kEasy);
    for (std::size_t i = 0; i < len; ++i) {
      pool.offer(static_cast<std::int64_t>(i), {}, losses[i], thr);
      if (pool.size() > cap || pool_ids(pool) != oracle_pool(losses, i + 1, cap, thr, hard)) {
        return "trial " + std::to_string(trial) + " step " + std::to_string(i);
      }
    }
  }
  return "";
}

// Explicit greedy matching, then AP = sum over recall levels l/G of
// (1/G) * max precision among ranks whose TP count reaches l.
inline double oracle_ap(const std::vector<eval::Detection>& dets,
                        const std::vector<eval::GroundTruth>& gts, double thr) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  // Insertion sort by confidence, stable.
  for (std::size_t i = 1; i < order.size(); ++i) {
    for (std::size_t j = i; j > 0 && dets[order[j]].confidence > dets[order[j - 1]].confidence; --j) {
      std::swap(order[j], order[j - 1]);
    }
  }
  std::vector<bool> used(gts.size(), false);
  std::vector<std::size_t> tp_count;
  std::size_t tp = 0;
  for (std::size_t k : order) {
    double best_iou = -1.0;
    std::size_t best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image_id != dets[k].image_id) continue;
      const double v = iou(dets[k].box, gts[g].box);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best < gts.size()) {
      used[best] = true;
      ++tp;
    }
    tp_count.push_back(tp);
  }
  const double G = static_cast<double>(gts.size());
  double ap = 0.0;
  for (std::size_t level = 1; level <= gts.size(); ++level) {
    double best_p = 0.0;
    for (std::size_t r = 0; r < tp_count.size(); ++r) {
      if (tp_count[r] >= level) best_p = std::max(best_p, static_cast<double>(tp_count[r]) / (r + 1));
    }
    ap += best_p / G;
  }
  return ap;
}

struct ApInstance {
  std::vector<eval::Detection> dets;
  std::vector<eval::GroundTruth> gts;
};

// At most 8 detections and 4 ground truths on a coarse grid so IoU ties and
// exact-threshold hits occur; confidences from a small set so score ties occur.
inline ApInstance random_ap_instance(std::mt19937_64& rng) {
  auto grid_box = [&] {
    const double x = static_cast<double>(rng() % 4), y = static_cast<double>(rng() % 4);
    return Box{x, y, x + 1 + rng() % 3, y + 1 + rng() % 3};
  };
  ApInstance in;
  const int ng = static_cast<int>(rng() % 5), nd = static_cast<int>(rng() % 9);
  for (int g = 0; g < ng; ++g) in.gts.push_back({rng() % 2 ? "a" : "b", grid_box()});
  for (int d = 0; d < nd; ++d) {
    in.dets.push_back({rng() % 2 ? "a" : "b", "c", grid_box(), static_cast<double>(rng() % 4) / 4.0});
  }
  return in;
}

// Relative error of analytic against central-difference gradients of
// sum(D * coeff), per parameter group and for the input ("input"). Groups
// whose gradient is analytically zero (biases ahead of train-mode BN) are
// measured against a 1e-3 floor instead of their own noise.
inline std::map<std::string, double> doam_gradient_errors(std::uint64_t seed,
                                                          const doam::DoamConfig& cfg, int h, int w) {
  Rng rng(seed);
  ParamStore store;
  doam::DoamModule m(store, cfg, rng);
  // Zero-initialised biases would put pre-activations exactly on the ReLU kink.
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  for (const auto& [name, p] : store.params()) {
    for (double& v : p->value.storage()) v += jitter(rng);
  }
  Var x = leaf(random_tensor({1, cfg.in_channels, h, w}, rng), true);
  Var coeff = constant(random_tensor({1, cfg.in_channels + 1, h, w}, rng, -1.0, 1.0));
  auto loss = [&] { return ops::sum(ops::mul(m.forward(x, true), coeff)); };
  backward(loss());
  auto scalar = [&] {
    NoGradGuard g;
    return loss()->value[0];
  };
  std::map<std::string, std::pair<double, double>> groups;  // name -> (diff^2, norm^2)
  auto accumulate = [&](const std::string& group, const Tensor& analytic, Tensor& value) {
    const Tensor numeric = numeric_gradient(scalar, value);
    auto& [d2, n2] = groups[group];
    for (std::size_t i = 0; i < numeric.numel(); ++i) {
      d2 += (numeric[i] - analytic[i]) * (numeric[i] - analytic[i]);
      n2 += std::max(numeric[i] * numeric[i], analytic[i] * analytic[i]);
    }
  };
  for (const auto& [name, p] : store.params()) {
    // A parameter the loss never reached has no gradient; report it as a failure.
    const Tensor analytic = p->has_grad() ? Tensor(p->grad) : Tensor(p->value.shape(), std::nan(""));
    accumulate(name, analytic, p->value);
  }
  accumulate("input", Tensor(x->grad), x->value);
  std::map<std::string, double> out;
  for (const auto& [name, dn] : groups) {
    out[name] = std::sqrt(dn.first) / std::max(std::sqrt(dn.second), 1e-3);
  }
  return out;
}

}  // namespace doamo::testing

#endif  // DOAMO_TESTS_ORACLES_HPP_
