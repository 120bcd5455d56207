#pragma once

#include <functional>
#include <string>
#include <vector>

#include "demt/tensor.hpp"

namespace demt {

// One differentiable scenario: forward() rebuilds a scalar loss from the
// current contents of the wrt tensors, which makes it usable both for taped
// backward and for finite-difference probing.
struct GradScenario {
  std::function<Tensor()> forward;
  std::vector<Tensor> wrt;
};

// Runs backward once, then central differences over every element of every
// wrt tensor (or a sampled subset when sample_limit > 0), and returns the
// worst relative error between the two.
double check_gradients(GradScenario scenario, double eps = 1e-5,
                       int64_t sample_limit = 0, uint64_t sample_seed = 0);

struct GradCheckResult {
  std::string op;
  int instances = 0;
  double max_rel_err = 0.0;
};

// Named scenario factory: instance index seeds the RNG that builds it.
struct GradCheckEntry {
  std::string op;
  std::function<GradScenario(uint64_t seed)> make;
  int instances = 20;
  double eps = 1e-5;
  int64_t sample_limit = 0;
};

// The standard suite over every differentiable op (populated in
// gradcheck_suite.cpp). Tolerance for all entries is pinned by callers.
std::vector<GradCheckEntry> standard_gradcheck_suite();
std::vector<GradCheckResult> run_gradcheck_suite(
    const std::vector<GradCheckEntry>& suite, uint64_t seed);

}  // namespace demt
