#include "demt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace demt {

double check_gradients(GradScenario scenario, double eps,
                       int64_t sample_limit, uint64_t sample_seed) {
  for (Tensor& t : scenario.wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = scenario.forward();
    tape.backward(loss);
  }
  const auto eval = [&scenario]() {
    NoGrad guard;
    return scenario.forward().item();
  };

  double worst = 0.0;
  Rng pick(sample_seed ^ 0x5bd1e9955bd1e995ULL);
  for (Tensor& t : scenario.wrt) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<int64_t> indices;
    if (sample_limit > 0 && t.size() > sample_limit) {
      // sample without replacement
      std::vector<int64_t> all(t.size());
      for (int64_t i = 0; i < t.size(); ++i) all[i] = i;
      for (int64_t i = 0; i < sample_limit; ++i) {
        const int64_t j = i + pick.uniform_int(t.size() - i);
        std::swap(all[i], all[j]);
        indices.push_back(all[i]);
      }
    } else {
      for (int64_t i = 0; i < t.size(); ++i) indices.push_back(i);
    }
    std::span<double> d = t.mutable_data();
    for (int64_t i : indices) {
      const double saved = d[i];
      d[i] = saved + eps;
      const double fp = eval();
      d[i] = saved - eps;
      const double fm = eval();
      d[i] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, rel_err(analytic[i], fd));
    }
  }
  return worst;
}

std::vector<GradCheckResult> run_gradcheck_suite(
    const std::vector<GradCheckEntry>& suite, uint64_t seed) {
  std::vector<GradCheckResult> results;
  for (const GradCheckEntry& entry : suite) {
    GradCheckResult r;
    r.op = entry.op;
    r.instances = entry.instances;
    for (int i = 0; i < entry.instances; ++i) {
      const uint64_t s = seed * 1000003ULL + 17ULL * i + 1ULL;
      GradScenario sc = entry.make(s);
      r.max_rel_err = std::max(
          r.max_rel_err,
          check_gradients(std::move(sc), entry.eps, entry.sample_limit, s));
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace demt
