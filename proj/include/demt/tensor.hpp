#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace demt {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Deterministic RNG: mt19937_64 plus hand-pinned mappings to doubles and
// bounded ints, so generated streams never depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  uint64_t next_u64() { return eng_(); }
  double uniform();                // [0,1) with 53-bit resolution
  double uniform(double lo, double hi);
  int64_t uniform_int(int64_t n);  // [0,n), rejection sampled

 private:
  std::mt19937_64 eng_;
};

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data once requires_grad is on
  bool requires_grad = false;
};
}  // namespace detail

// Value handle over shared storage: copies alias the same buffer, ops return
// fresh tensors. Gradients accumulate across backward calls until zeroed.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);  // shape [1]
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int axis) const;
  int64_t size() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;  // value of a single-element tensor
  double at(std::initializer_list<int64_t> index) const;

  // Storage identity; distinct tensors share it only when aliased.
  const void* id() const { return node_.get(); }

 private:
  detail::TensorNode* node() const;
  std::shared_ptr<detail::TensorNode> node_;
};

// Define-by-run tape. Constructing a Tape makes it the active recorder for
// the current thread (strictly nested); ops append backward closures while
// one is active and any input requires grad. backward() replays the closures
// in exact reverse recording order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  std::size_t op_count() const { return ops_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires-grad tensor the recorded ops touched.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> ops_;
  Tape* parent_ = nullptr;
};

// Suppresses recording (and requires-grad propagation) while alive. Used for
// plain evaluation and for finite-difference probes.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// Core differentiable ops. All shapes are checked strictly; there is no
// implicit broadcasting anywhere.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                // rank-2
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor softmax(const Tensor& a, int axis);  // max-subtracted, per slice
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor expand_leading(const Tensor& a, int64_t copies);  // [..] -> [n,..]
Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
Tensor concat_rows(std::span<const Tensor> parts);  // along axis 0
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end);
Tensor concat_last(std::span<const Tensor> parts);  // along last axis
Tensor slice_last(const Tensor& a, int64_t begin, int64_t end);

// Central-difference oracle: perturbs x in place element by element (and
// restores it), evaluating f with recording suppressed. f must read x's
// current contents.
std::vector<double> finite_diff_grad(const std::function<double()>& f,
                                     Tensor x, double eps = 1e-5);

// Relative error with absolute floor 1: |a-b| / max(1,|a|,|b|).
double rel_err(double a, double b);
double max_rel_err(std::span<const double> a, std::span<const double> b);

}  // namespace demt
