#include "demt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace demt {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

double Rng::uniform() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t v;
  do {
    v = eng_();
  } while (v >= limit);
  return static_cast<int64_t>(v % un);
}

// ---------------------------------------------------------------- Tensor --

static void check_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (int64_t d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor: extents must be positive, got " +
                                  shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument(
        "tensor: shape " + shape_str(shape) + " wants " +
        std::to_string(numel(shape)) + " values, got " +
        std::to_string(values.size()));
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::zeros(const Shape& shape) {
  check_shape(shape);
  return Tensor(shape, std::vector<double>(numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  check_shape(shape);
  return Tensor(shape, std::vector<double>(numel(shape), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  check_shape(shape);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

detail::TensorNode* Tensor::node() const {
  if (!node_) throw std::runtime_error("tensor: used before initialization");
  return node_.get();
}

const Shape& Tensor::shape() const { return node()->shape; }
int Tensor::rank() const { return static_cast<int>(node()->shape.size()); }

int64_t Tensor::dim(int axis) const {
  const Shape& s = node()->shape;
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("tensor: axis out of range");
  return s[axis];
}

int64_t Tensor::size() const {
  return static_cast<int64_t>(node()->data.size());
}

std::span<const double> Tensor::data() const { return node()->data; }
std::span<double> Tensor::mutable_data() { return node()->data; }

bool Tensor::requires_grad() const {
  return node_ && node_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool on) {
  detail::TensorNode* n = node();
  n->requires_grad = on;
  if (on && n->grad.size() != n->data.size())
    n->grad.assign(n->data.size(), 0.0);
  return *this;
}

std::span<const double> Tensor::grad() const {
  detail::TensorNode* n = node();
  if (!n->requires_grad)
    throw std::runtime_error("tensor: grad requested but requires_grad off");
  return n->grad;
}

std::span<double> Tensor::mutable_grad() {
  detail::TensorNode* n = node();
  if (!n->requires_grad)
    throw std::runtime_error("tensor: grad requested but requires_grad off");
  return n->grad;
}

void Tensor::zero_grad() {
  detail::TensorNode* n = node();
  std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("tensor: item() on non-scalar " +
                                shape_str(shape()));
  return node()->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size())
    throw std::invalid_argument("tensor: at() rank mismatch");
  int64_t flat = 0;
  int axis = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= s[axis])
      throw std::invalid_argument("tensor: at() index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node()->data[flat];
}

// ------------------------------------------------------------------ Tape --

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;
}  // namespace

Tape::Tape() {
  parent_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() {
  g_active_tape = parent_;
}

Tape* Tape::active() {
  return g_no_grad_depth > 0 ? nullptr : g_active_tape;
}

void Tape::record(std::function<void()> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss is not on the tape");
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

// ------------------------------------------------------------------- ops --

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void record_op(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(fn));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: rank-2 operands required");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents differ, " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* brow = pb + kk * n;
        double* orow = po + i * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  if (wants_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    record_op(out, [ta, tb, out, m, k, n]() mutable {
      std::span<const double> go = out.grad();
      if (ta.requires_grad()) {
        std::span<double> ga = ta.mutable_grad();
        const double* pb = tb.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = go.data() + i * n;
            const double* brow = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
      }
      if (tb.requires_grad()) {
        std::span<double> gb = tb.mutable_grad();
        const double* pa = ta.data().data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* grow = go.data() + i * n;
            double* gbrow = gb.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw std::invalid_argument("transpose: rank-2 operand required");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, m, n]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

namespace {

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd) {
  check_same_shape(name, a, b);
  const int64_t n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.mutable_data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  }
  if (wants_grad({&a, &b})) {
    Tensor ta = a, tb = b;
    record_op(out, [ta, tb, out, n, bwd]() mutable {
      std::span<const double> go = out.grad();
      const double* pa = ta.data().data();
      const double* pb = tb.data().data();
      double* ga = ta.requires_grad() ? ta.mutable_grad().data() : nullptr;
      double* gb = tb.requires_grad() ? tb.mutable_grad().data() : nullptr;
      for (int64_t i = 0; i < n; ++i) bwd(go[i], pa[i], pb[i], ga ? ga + i : nullptr, gb ? gb + i : nullptr);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& a, double factor) {
  const int64_t n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = factor * pa[i];
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, n, factor]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += factor * go[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw std::invalid_argument("softmax: axis out of range for " +
                                shape_str(a.shape()));
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= s[i];
  const int64_t n = s[axis];

  Tensor out = Tensor::zeros(s);
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double mx = pa[base];
        for (int64_t i = 1; i < n; ++i)
          mx = std::max(mx, pa[base + i * inner]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          const double e = std::exp(pa[base + i * inner] - mx);
          po[base + i * inner] = e;
          denom += e;
        }
        for (int64_t i = 0; i < n; ++i) po[base + i * inner] /= denom;
      }
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, outer, inner, n]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      std::span<const double> p = out.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < n; ++i)
            dot += p[base + i * inner] * go[base + i * inner];
          for (int64_t i = 0; i < n; ++i)
            ga[base + i * inner] +=
                p[base + i * inner] * (go[base + i * inner] - dot);
        }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  check_shape(shape);
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(a.shape()) + " as " +
                                shape_str(shape));
  Tensor out(shape, std::vector<double>(a.data().begin(), a.data().end()));
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor expand_leading(const Tensor& a, int64_t copies) {
  if (copies <= 0)
    throw std::invalid_argument("expand_leading: copies must be positive");
  Shape os;
  os.reserve(a.rank() + 1);
  os.push_back(copies);
  for (int64_t d : a.shape()) os.push_back(d);
  const int64_t n = a.size();
  Tensor out = Tensor::zeros(os);
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t c = 0; c < copies; ++c)
      std::copy(pa, pa + n, po + c * n);
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, copies, n]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (int64_t c = 0; c < copies; ++c)
        for (int64_t i = 0; i < n; ++i) ga[i] += go[c * n + i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out]() mutable {
      const double g = out.grad()[0];
      std::span<double> ga = ta.mutable_grad();
      for (double& v : ga) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc * inv);
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      std::span<double> ga = ta.mutable_grad();
      for (double& v : ga) v += g;
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_rows: no operands");
  Shape trailing(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t rows = 0;
  for (const Tensor& t : parts) {
    Shape tt(t.shape().begin() + 1, t.shape().end());
    if (tt != trailing)
      throw std::invalid_argument("concat_rows: trailing shape mismatch");
    rows += t.dim(0);
  }
  Shape os;
  os.push_back(rows);
  for (int64_t d : trailing) os.push_back(d);
  Tensor out = Tensor::zeros(os);
  {
    double* po = out.mutable_data().data();
    int64_t off = 0;
    for (const Tensor& t : parts) {
      std::copy(t.data().begin(), t.data().end(), po + off);
      off += t.size();
    }
  }
  bool rec = false;
  if (Tape::active())
    for (const Tensor& t : parts)
      if (t.requires_grad()) rec = true;
  if (rec) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    record_op(out, [held, out]() mutable {
      std::span<const double> go = out.grad();
      int64_t off = 0;
      for (Tensor& t : held) {
        if (t.requires_grad()) {
          std::span<double> g = t.mutable_grad();
          for (int64_t i = 0; i < t.size(); ++i) g[i] += go[off + i];
        }
        off += t.size();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
  const int64_t rows = a.dim(0);
  if (begin < 0 || end > rows || begin >= end)
    throw std::invalid_argument("slice_rows: bad range [" +
                                std::to_string(begin) + "," +
                                std::to_string(end) + ") for " +
                                shape_str(a.shape()));
  const int64_t stride = a.size() / rows;
  Shape os = a.shape();
  os[0] = end - begin;
  Tensor out = Tensor::zeros(os);
  {
    const double* pa = a.data().data() + begin * stride;
    std::copy(pa, pa + (end - begin) * stride, out.mutable_data().data());
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, begin, stride]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i)
        ga[begin * stride + i] += go[i];
    });
  }
  return out;
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_last: no operands");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int64_t channels = 0;
  for (const Tensor& t : parts) {
    Shape tl(t.shape().begin(), t.shape().end() - 1);
    if (tl != lead)
      throw std::invalid_argument("concat_last: leading shape mismatch");
    channels += t.shape().back();
  }
  Shape os = lead;
  os.push_back(channels);
  const int64_t positions = numel(lead);
  Tensor out = Tensor::zeros(os);
  {
    double* po = out.mutable_data().data();
    int64_t off = 0;
    for (const Tensor& t : parts) {
      const int64_t c = t.shape().back();
      const double* pt = t.data().data();
      for (int64_t p = 0; p < positions; ++p)
        std::copy(pt + p * c, pt + (p + 1) * c, po + p * channels + off);
      off += c;
    }
  }
  bool rec = false;
  if (Tape::active())
    for (const Tensor& t : parts)
      if (t.requires_grad()) rec = true;
  if (rec) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    record_op(out, [held, out, positions, channels]() mutable {
      std::span<const double> go = out.grad();
      int64_t off = 0;
      for (Tensor& t : held) {
        const int64_t c = t.shape().back();
        if (t.requires_grad()) {
          std::span<double> g = t.mutable_grad();
          for (int64_t p = 0; p < positions; ++p)
            for (int64_t i = 0; i < c; ++i)
              g[p * c + i] += go[p * channels + off + i];
        }
        off += c;
      }
    });
  }
  return out;
}

Tensor slice_last(const Tensor& a, int64_t begin, int64_t end) {
  const int64_t channels = a.shape().back();
  if (begin < 0 || end > channels || begin >= end)
    throw std::invalid_argument("slice_last: bad range for " +
                                shape_str(a.shape()));
  Shape os = a.shape();
  os.back() = end - begin;
  const int64_t positions = a.size() / channels;
  const int64_t width = end - begin;
  Tensor out = Tensor::zeros(os);
  {
    const double* pa = a.data().data();
    double* po = out.mutable_data().data();
    for (int64_t p = 0; p < positions; ++p)
      std::copy(pa + p * channels + begin, pa + p * channels + end,
                po + p * width);
  }
  if (wants_grad({&a})) {
    Tensor ta = a;
    record_op(out, [ta, out, begin, positions, channels, width]() mutable {
      std::span<double> ga = ta.mutable_grad();
      std::span<const double> go = out.grad();
      for (int64_t p = 0; p < positions; ++p)
        for (int64_t i = 0; i < width; ++i)
          ga[p * channels + begin + i] += go[p * width + i];
    });
  }
  return out;
}

std::vector<double> finite_diff_grad(const std::function<double()>& f,
                                     Tensor x, double eps) {
  NoGrad guard;
  std::span<double> d = x.mutable_data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double saved = d[i];
    d[i] = saved + eps;
    const double fp = f();
    d[i] = saved - eps;
    const double fm = f();
    d[i] = saved;
    out[i] = (fp - fm) / (2.0 * eps);
  }
  return out;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double max_rel_err(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("max_rel_err: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

}  // namespace demt
