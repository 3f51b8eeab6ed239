#ifndef DOAMO_LOSSES_HPP_
#define DOAMO_LOSSES_HPP_

#include <span>
#include <vector>

namespace doamo {

// 0.5 r^2 for |r| < 1, |r| - 0.5 otherwise.
double smooth_l1(double r);
double smooth_l1_grad(double r);

// -(1 - p_t)^gamma * log(p_t). Throws for p_t outside (0, 1] or gamma < 0.
double focal_loss(double p_t, double gamma);

// Per-row classification loss on raw logits and its gradient with respect
// to those logits. gamma = 0 is plain softmax cross-entropy.
struct LogitLoss {
  double value = 0.0;
  std::vector<double> grad;
};
LogitLoss softmax_focal(std::span<const double> logits, int target, double gamma);

// -log softmax(logits)[target], numerically stable.
double softmax_cross_entropy(std::span<const double> logits, int target);

}  // namespace doamo

#endif  // DOAMO_LOSSES_HPP_
