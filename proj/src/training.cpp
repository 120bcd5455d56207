#include "demt/training.hpp"

#include <cmath>
#include <stdexcept>

namespace demt {

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

void record_op(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(fn));
}

int64_t integer_label(double v) {
  const int64_t r = std::llround(v);
  if (static_cast<double>(r) != v)
    throw std::invalid_argument("labels must hold integers, found " +
                                std::to_string(v));
  return r;
}

}  // namespace

Tensor semseg_loss(const Tensor& logits, const Tensor& labels,
                   int64_t ignore_label) {
  if (logits.rank() != 4)
    throw std::invalid_argument("semseg loss: [B,H,W,K] logits required");
  const int64_t pixels = logits.size() / logits.dim(3);
  const int64_t classes = logits.dim(3);
  if (labels.size() != pixels)
    throw std::invalid_argument("semseg loss: one label per pixel required");

  int64_t count = 0;
  double acc = 0.0;
  {
    const double* pl = logits.data().data();
    const double* py = labels.data().data();
    for (int64_t p = 0; p < pixels; ++p) {
      const int64_t y = integer_label(py[p]);
      if (y == ignore_label) continue;
      if (y < 0 || y >= classes)
        throw std::invalid_argument("semseg loss: label " +
                                    std::to_string(y) + " out of range");
      const double* row = pl + p * classes;
      double m = row[0];
      for (int64_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
      double sum = 0.0;
      for (int64_t c = 0; c < classes; ++c) sum += std::exp(row[c] - m);
      acc += m + std::log(sum) - row[y];
      ++count;
    }
  }
  if (count == 0)
    throw std::runtime_error("semseg loss: every pixel is ignored");
  Tensor y = Tensor::scalar(acc / count);

  if (wants_grad({&logits})) {
    Tensor tl = logits, ty = labels;
    const int64_t ign = ignore_label;
    record_op(y, [tl, ty, y, pixels, classes, count, ign]() mutable {
      const double g = y.grad()[0] / count;
      const double* pl = tl.data().data();
      const double* py = ty.data().data();
      double* gl = tl.mutable_grad().data();
      for (int64_t p = 0; p < pixels; ++p) {
        const int64_t lab = std::llround(py[p]);
        if (lab == ign) continue;
        const double* row = pl + p * classes;
        double* grow = gl + p * classes;
        double m = row[0];
        for (int64_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
        double sum = 0.0;
        for (int64_t c = 0; c < classes; ++c) sum += std::exp(row[c] - m);
        for (int64_t c = 0; c < classes; ++c) {
          const double soft = std::exp(row[c] - m) / sum;
          grow[c] += g * (soft - (c == lab ? 1.0 : 0.0));
        }
      }
    });
  }
  return y;
}

Tensor depth_l1_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("depth loss: shapes differ (" +
                                shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()) + ")");
  const int64_t n = pred.size();
  int64_t count = 0;
  double acc = 0.0;
  {
    const double* pp = pred.data().data();
    const double* pt = target.data().data();
    for (int64_t i = 0; i < n; ++i) {
      if (!(pt[i] > 0.0)) continue;
      acc += std::abs(pp[i] - pt[i]);
      ++count;
    }
  }
  if (count == 0)
    throw std::runtime_error("depth loss: no pixels with positive depth");
  Tensor y = Tensor::scalar(acc / count);

  if (wants_grad({&pred})) {
    Tensor tp = pred, tt = target;
    record_op(y, [tp, tt, y, n, count]() mutable {
      const double g = y.grad()[0] / count;
      const double* pp = tp.data().data();
      const double* pt = tt.data().data();
      double* gp = tp.mutable_grad().data();
      for (int64_t i = 0; i < n; ++i) {
        if (!(pt[i] > 0.0)) continue;
        const double d = pp[i] - pt[i];
        if (d > 0.0)
          gp[i] += g;
        else if (d < 0.0)
          gp[i] -= g;
      }
    });
  }
  return y;
}

Tensor normal_cosine_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.shape().back() != 3)
    throw std::invalid_argument(
        "normal loss: matching [...,3] fields required");
  const int64_t pixels = pred.size() / 3;
  constexpr double kEps = 1e-12;
  int64_t count = 0;
  double acc = 0.0;
  {
    const double* pp = pred.data().data();
    const double* pt = target.data().data();
    for (int64_t p = 0; p < pixels; ++p) {
      const double* t = pt + p * 3;
      const double tn = std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
      if (tn == 0.0) continue;
      const double* q = pp + p * 3;
      const double s =
          std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + kEps);
      const double dot = (q[0] * t[0] + q[1] * t[1] + q[2] * t[2]) / tn;
      acc += 1.0 - dot / s;
      ++count;
    }
  }
  if (count == 0)
    throw std::runtime_error("normal loss: no pixels with a target normal");
  Tensor y = Tensor::scalar(acc / count);

  if (wants_grad({&pred})) {
    Tensor tp = pred, tt = target;
    record_op(y, [tp, tt, y, pixels, count]() mutable {
      const double g = y.grad()[0] / count;
      const double* pp = tp.data().data();
      const double* pt = tt.data().data();
      double* gp = tp.mutable_grad().data();
      for (int64_t p = 0; p < pixels; ++p) {
        const double* t = pt + p * 3;
        const double tn =
            std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
        if (tn == 0.0) continue;
        const double* q = pp + p * 3;
        const double s2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + kEps;
        const double s = std::sqrt(s2);
        const double dot = (q[0] * t[0] + q[1] * t[1] + q[2] * t[2]) / tn;
        double* grow = gp + p * 3;
        for (int64_t i = 0; i < 3; ++i)
          grow[i] -= g * (t[i] / (tn * s) - dot * q[i] / (s2 * s));
      }
    });
  }
  return y;
}

Tensor task_loss(const Tensor& pred, const Tensor& target, TaskKind kind) {
  switch (kind) {
    case TaskKind::semseg: return semseg_loss(pred, target);
    case TaskKind::depth: return depth_l1_loss(pred, target);
    case TaskKind::normal: return normal_cosine_loss(pred, target);
  }
  throw std::logic_error("bad task kind");
}

Tensor total_loss(const std::vector<Tensor>& losses,
                  const std::vector<double>& weights) {
  if (losses.empty() || losses.size() != weights.size())
    throw std::invalid_argument(
        "total loss: need one weight per task loss");
  Tensor acc = scale(losses[0], weights[0]);
  for (size_t t = 1; t < losses.size(); ++t)
    acc = add(acc, scale(losses[t], weights[t]));
  return acc;
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params_, double lr_,
                           double weight_decay_, double momentum_)
    : lr(lr_), weight_decay(weight_decay_), momentum(momentum_),
      params(std::move(params_)) {
  for (const Tensor& p : params) velocity.push_back(Tensor::zeros(p.shape()));
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad())
      throw std::runtime_error(
          "sgd: parameter has no gradient buffer (index " +
          std::to_string(i) + ")");
    std::span<const double> g = p.grad();
    std::span<double> v = velocity[i].mutable_data();
    std::span<double> d = p.mutable_data();
    for (int64_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j] + weight_decay * d[j];
      d[j] -= lr * v[j];
    }
  }
  zero_grad();
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params)
    if (p.requires_grad()) p.zero_grad();
}

}  // namespace demt
