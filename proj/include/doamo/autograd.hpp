#ifndef DOAMO_AUTOGRAD_HPP_
#define DOAMO_AUTOGRAD_HPP_

#include <functional>
#include <memory>
#include <vector>

#include "doamo/tensor.hpp"

namespace doamo {

// One value in a reverse-mode graph. Ops own their parents; parents never
// point back to children, so dropping the root releases the whole graph.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Zero-initialised gradient buffer shaped like value.
  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad = Tensor(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);

// Records an op. When no parent needs a gradient (or grad mode is off) the
// backward closure and parent links are dropped.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Seeds d(root)/d(root) = 1 for every element and runs the graph backwards.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

bool grad_enabled();

// Disables graph recording for its lifetime (inference, metric passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace doamo

#endif  // DOAMO_AUTOGRAD_HPP_
