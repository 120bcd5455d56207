#pragma once

#include <string>
#include <vector>

#include "demt/model.hpp"

namespace demt {

// Softmax cross-entropy over the channel axis, averaged over pixels whose
// integer label is not the ignore value.
Tensor semseg_loss(const Tensor& logits, const Tensor& labels,
                   int64_t ignore_label = 255);

// Mean absolute error over pixels with target > 0.
Tensor depth_l1_loss(const Tensor& pred, const Tensor& target);

// Mean (1 - cosine similarity) over pixels whose target vector is nonzero.
Tensor normal_cosine_loss(const Tensor& pred, const Tensor& target);

Tensor task_loss(const Tensor& pred, const Tensor& target, TaskKind kind);

// Weighted sum of already-reduced scalar task losses.
Tensor total_loss(const std::vector<Tensor>& losses,
                  const std::vector<double>& weights);

struct LossReport {
  std::vector<std::pair<std::string, double>> per_task;
  double total = 0.0;
};

// SGD with classic momentum and decoupled-from-nothing weight decay folded
// into the gradient: v <- mu*v + g + wd*theta; theta <- theta - lr*v.
struct SgdOptimizer {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::vector<Tensor> params;
  std::vector<Tensor> velocity;

  SgdOptimizer(std::vector<Tensor> params_, double lr_, double weight_decay_,
               double momentum_);
  void step();       // applies the update, then clears gradients
  void zero_grad();
};

}  // namespace demt
