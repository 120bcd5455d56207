#include "demt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace demt {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

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

void require_rank4(const char* op, const Tensor& x) {
  if (x.rank() != 4)
    throw std::invalid_argument(std::string(op) + ": [B,H,W,C] input required, got " +
                                shape_str(x.shape()));
}

}  // namespace

LinearParams linear_init(int64_t in, int64_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearParams p;
  p.weight = Tensor::uniform({out, in}, rng, -bound, bound);
  p.bias = Tensor::zeros({out});
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (p.weight.rank() != 2)
    throw std::invalid_argument("linear: weight must be [out,in]");
  const int64_t in = p.weight.dim(1), out_c = p.weight.dim(0);
  if (x.shape().back() != in)
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " does not end in " + std::to_string(in));
  const bool has_bias = p.bias.defined();
  if (has_bias && (p.bias.rank() != 1 || p.bias.dim(0) != out_c))
    throw std::invalid_argument("linear: bias must be [out]");

  Shape os = x.shape();
  os.back() = out_c;
  const int64_t rows = x.size() / in;
  Tensor y = Tensor::zeros(os);
  {
    const double* px = x.data().data();
    const double* pw = p.weight.data().data();
    const double* pb = has_bias ? p.bias.data().data() : nullptr;
    double* py = y.mutable_data().data();
    for (int64_t m = 0; m < rows; ++m) {
      const double* xrow = px + m * in;
      double* yrow = py + m * out_c;
      for (int64_t o = 0; o < out_c; ++o) {
        double acc = pb ? pb[o] : 0.0;
        const double* wrow = pw + o * in;
        for (int64_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
        yrow[o] = acc;
      }
    }
  }
  if (wants_grad({&x, &p.weight, &p.bias})) {
    Tensor tx = x, tw = p.weight, tb = p.bias;
    record_op(y, [tx, tw, tb, y, rows, in, out_c]() mutable {
      std::span<const double> go = y.grad();
      if (tx.requires_grad()) {
        std::span<double> gx = tx.mutable_grad();
        const double* pw = tw.data().data();
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t o = 0; o < out_c; ++o) {
            const double g = go[m * out_c + o];
            const double* wrow = pw + o * in;
            double* gxrow = gx.data() + m * in;
            for (int64_t i = 0; i < in; ++i) gxrow[i] += g * wrow[i];
          }
      }
      if (tw.requires_grad()) {
        std::span<double> gw = tw.mutable_grad();
        const double* px = tx.data().data();
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t o = 0; o < out_c; ++o) {
            const double g = go[m * out_c + o];
            const double* xrow = px + m * in;
            double* gwrow = gw.data() + o * in;
            for (int64_t i = 0; i < in; ++i) gwrow[i] += g * xrow[i];
          }
      }
      if (tb.defined() && tb.requires_grad()) {
        std::span<double> gb = tb.mutable_grad();
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t o = 0; o < out_c; ++o) gb[o] += go[m * out_c + o];
      }
    });
  }
  return y;
}

NormParams layer_norm_init(int64_t channels) {
  NormParams p;
  p.gamma = Tensor::full({channels}, 1.0);
  p.beta = Tensor::zeros({channels});
  return p;
}

NormParams batch_norm_init(int64_t channels) {
  NormParams p = layer_norm_init(channels);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0);
  return p;
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
  const int64_t c = x.shape().back();
  if (p.gamma.size() != c || p.beta.size() != c)
    throw std::invalid_argument("layer_norm: affine params want " +
                                std::to_string(c) + " channels");
  const int64_t rows = x.size() / c;
  const double eps = p.eps;
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> rstd(rows), xhat(x.size());
  {
    const double* px = x.data().data();
    const double* pg = p.gamma.data().data();
    const double* pb = p.beta.data().data();
    double* py = y.mutable_data().data();
    for (int64_t m = 0; m < rows; ++m) {
      const double* row = px + m * c;
      double mu = 0.0;
      for (int64_t i = 0; i < c; ++i) mu += row[i];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t i = 0; i < c; ++i) {
        const double d = row[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[m] = r;
      for (int64_t i = 0; i < c; ++i) {
        const double xh = (row[i] - mu) * r;
        xhat[m * c + i] = xh;
        py[m * c + i] = pg[i] * xh + pb[i];
      }
    }
  }
  if (wants_grad({&x, &p.gamma, &p.beta})) {
    Tensor tx = x, tg = p.gamma, tb = p.beta;
    record_op(y, [tx, tg, tb, y, rows, c, rstd = std::move(rstd),
                  xhat = std::move(xhat)]() mutable {
      std::span<const double> go = y.grad();
      const double* pg = tg.data().data();
      const bool need_x = tx.requires_grad();
      const bool need_g = tg.requires_grad();
      const bool need_b = tb.requires_grad();
      double* gx = need_x ? tx.mutable_grad().data() : nullptr;
      double* gg = need_g ? tg.mutable_grad().data() : nullptr;
      double* gb = need_b ? tb.mutable_grad().data() : nullptr;
      for (int64_t m = 0; m < rows; ++m) {
        const double* grow = go.data() + m * c;
        const double* xh = xhat.data() + m * c;
        if (need_g || need_b)
          for (int64_t i = 0; i < c; ++i) {
            if (gg) gg[i] += grow[i] * xh[i];
            if (gb) gb[i] += grow[i];
          }
        if (need_x) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (int64_t i = 0; i < c; ++i) {
            const double h = grow[i] * pg[i];
            mean_g += h;
            mean_gx += h * xh[i];
          }
          mean_g /= static_cast<double>(c);
          mean_gx /= static_cast<double>(c);
          for (int64_t i = 0; i < c; ++i) {
            const double h = grow[i] * pg[i];
            gx[m * c + i] += rstd[m] * (h - mean_g - xh[i] * mean_gx);
          }
        }
      }
    });
  }
  return y;
}

Tensor batch_norm(const Tensor& x, NormParams& p, RunMode mode) {
  require_rank4("batch_norm", x);
  const int64_t c = x.shape().back();
  if (p.gamma.size() != c || !p.running_mean.defined() ||
      p.running_mean.size() != c)
    throw std::invalid_argument("batch_norm: params want " +
                                std::to_string(c) + " channels");
  const int64_t rows = x.size() / c;
  const double eps = p.eps;

  std::vector<double> mean(c), var(c);
  if (mode == RunMode::train) {
    if (rows < 2)
      throw std::invalid_argument(
          "batch_norm: train mode needs at least 2 positions per channel");
    const double* px = x.data().data();
    for (int64_t m = 0; m < rows; ++m)
      for (int64_t i = 0; i < c; ++i) mean[i] += px[m * c + i];
    for (int64_t i = 0; i < c; ++i) mean[i] /= static_cast<double>(rows);
    for (int64_t m = 0; m < rows; ++m)
      for (int64_t i = 0; i < c; ++i) {
        const double d = px[m * c + i] - mean[i];
        var[i] += d * d;
      }
    for (int64_t i = 0; i < c; ++i) var[i] /= static_cast<double>(rows);
    // running state keeps the biased variance so that frozen-stat eval can
    // reproduce train-mode outputs exactly
    std::span<double> rm = p.running_mean.mutable_data();
    std::span<double> rv = p.running_var.mutable_data();
    const double m1 = 1.0 - p.momentum;
    for (int64_t i = 0; i < c; ++i) {
      rm[i] = m1 * rm[i] + p.momentum * mean[i];
      rv[i] = m1 * rv[i] + p.momentum * var[i];
    }
  } else {
    std::span<const double> rm = p.running_mean.data();
    std::span<const double> rv = p.running_var.data();
    for (int64_t i = 0; i < c; ++i) {
      mean[i] = rm[i];
      var[i] = rv[i];
    }
  }

  std::vector<double> rstd(c);
  for (int64_t i = 0; i < c; ++i) rstd[i] = 1.0 / std::sqrt(var[i] + eps);

  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.size());
  {
    const double* px = x.data().data();
    const double* pg = p.gamma.data().data();
    const double* pb = p.beta.data().data();
    double* py = y.mutable_data().data();
    for (int64_t m = 0; m < rows; ++m)
      for (int64_t i = 0; i < c; ++i) {
        const double xh = (px[m * c + i] - mean[i]) * rstd[i];
        xhat[m * c + i] = xh;
        py[m * c + i] = pg[i] * xh + pb[i];
      }
  }
  if (wants_grad({&x, &p.gamma, &p.beta})) {
    Tensor tx = x, tg = p.gamma, tb = p.beta;
    const bool train = mode == RunMode::train;
    record_op(y, [tx, tg, tb, y, rows, c, train, rstd = std::move(rstd),
                  xhat = std::move(xhat)]() mutable {
      std::span<const double> go = y.grad();
      const double* pg = tg.data().data();
      const bool need_x = tx.requires_grad();
      double* gx = need_x ? tx.mutable_grad().data() : nullptr;
      if (tg.requires_grad() || tb.requires_grad()) {
        double* gg = tg.requires_grad() ? tg.mutable_grad().data() : nullptr;
        double* gb = tb.requires_grad() ? tb.mutable_grad().data() : nullptr;
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t i = 0; i < c; ++i) {
            if (gg) gg[i] += go[m * c + i] * xhat[m * c + i];
            if (gb) gb[i] += go[m * c + i];
          }
      }
      if (need_x && train) {
        std::vector<double> mean_g(c, 0.0), mean_gx(c, 0.0);
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t i = 0; i < c; ++i) {
            const double h = go[m * c + i] * pg[i];
            mean_g[i] += h;
            mean_gx[i] += h * xhat[m * c + i];
          }
        for (int64_t i = 0; i < c; ++i) {
          mean_g[i] /= static_cast<double>(rows);
          mean_gx[i] /= static_cast<double>(rows);
        }
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t i = 0; i < c; ++i) {
            const double h = go[m * c + i] * pg[i];
            gx[m * c + i] +=
                rstd[i] * (h - mean_g[i] - xhat[m * c + i] * mean_gx[i]);
          }
      } else if (need_x) {
        for (int64_t m = 0; m < rows; ++m)
          for (int64_t i = 0; i < c; ++i)
            gx[m * c + i] += go[m * c + i] * pg[i] * rstd[i];
      }
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  const int64_t n = x.size();
  Tensor y = Tensor::zeros(x.shape());
  {
    const double* px = x.data().data();
    double* py = y.mutable_data().data();
    for (int64_t i = 0; i < n; ++i) {
      const double v = px[i];
      py[i] = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    }
  }
  if (wants_grad({&x})) {
    Tensor tx = x;
    record_op(y, [tx, y, n]() mutable {
      std::span<double> gx = tx.mutable_grad();
      std::span<const double> go = y.grad();
      const double* px = tx.data().data();
      for (int64_t i = 0; i < n; ++i) {
        const double v = px[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += go[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

Conv2dParams conv2d_init(int64_t cin, int64_t cout, int64_t k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
  Conv2dParams p;
  p.weight = Tensor::uniform({cout, k, k, cin}, rng, -bound, bound);
  p.bias = Tensor::zeros({cout});
  return p;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  require_rank4("conv2d", x);
  if (p.weight.rank() != 4)
    throw std::invalid_argument("conv2d: weight must be [Cout,k,k,Cin]");
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const int64_t cout = p.weight.dim(0), k = p.weight.dim(1);
  if (p.weight.dim(2) != k)
    throw std::invalid_argument("conv2d: kernel must be square");
  if (k % 2 == 0)
    throw std::invalid_argument("conv2d: kernel extent must be odd");
  if (p.weight.dim(3) != cin)
    throw std::invalid_argument("conv2d: weight wants " +
                                std::to_string(p.weight.dim(3)) +
                                " input channels, image has " +
                                std::to_string(cin));
  const bool has_bias = p.bias.defined();
  const int64_t pad = k / 2;

  Tensor y = Tensor::zeros({b, h, w, cout});
  {
    const double* px = x.data().data();
    const double* pw = p.weight.data().data();
    const double* pb = has_bias ? p.bias.data().data() : nullptr;
    double* py = y.mutable_data().data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          double* orow = py + ((bi * h + i) * w + j) * cout;
          for (int64_t co = 0; co < cout; ++co) {
            double acc = pb ? pb[co] : 0.0;
            for (int64_t ky = 0; ky < k; ++ky) {
              const int64_t iy = i + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t ix = j + kx - pad;
                if (ix < 0 || ix >= w) continue;
                const double* xrow = px + ((bi * h + iy) * w + ix) * cin;
                const double* wrow = pw + ((co * k + ky) * k + kx) * cin;
                for (int64_t ci = 0; ci < cin; ++ci)
                  acc += xrow[ci] * wrow[ci];
              }
            }
            orow[co] = acc;
          }
        }
  }
  if (wants_grad({&x, &p.weight, &p.bias})) {
    Tensor tx = x, tw = p.weight, tb = p.bias;
    record_op(y, [tx, tw, tb, y, b, h, w, cin, cout, k, pad]() mutable {
      std::span<const double> go = y.grad();
      const double* px = tx.data().data();
      const double* pw = tw.data().data();
      double* gx = tx.requires_grad() ? tx.mutable_grad().data() : nullptr;
      double* gw = tw.requires_grad() ? tw.mutable_grad().data() : nullptr;
      double* gb = tb.defined() && tb.requires_grad()
                       ? tb.mutable_grad().data()
                       : nullptr;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j)
            for (int64_t co = 0; co < cout; ++co) {
              const double g = go[((bi * h + i) * w + j) * cout + co];
              if (g == 0.0) continue;
              if (gb) gb[co] += g;
              for (int64_t ky = 0; ky < k; ++ky) {
                const int64_t iy = i + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t ix = j + kx - pad;
                  if (ix < 0 || ix >= w) continue;
                  const int64_t xoff = ((bi * h + iy) * w + ix) * cin;
                  const int64_t woff = ((co * k + ky) * k + kx) * cin;
                  if (gx)
                    for (int64_t ci = 0; ci < cin; ++ci)
                      gx[xoff + ci] += g * pw[woff + ci];
                  if (gw)
                    for (int64_t ci = 0; ci < cin; ++ci)
                      gw[woff + ci] += g * px[xoff + ci];
                }
              }
            }
    });
  }
  return y;
}

Tensor pointwise_conv(const Tensor& x, const LinearParams& p) {
  require_rank4("pointwise_conv", x);
  return linear(x, p);
}

Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
  require_rank4("bilinear_sample", x);
  if (coords.rank() != 5 || coords.shape().back() != 2)
    throw std::invalid_argument(
        "bilinear_sample: coords must be [B,H,W,K,2], got " +
        shape_str(coords.shape()));
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (coords.dim(0) != b || coords.dim(1) != h || coords.dim(2) != w)
    throw std::invalid_argument("bilinear_sample: coords grid " +
                                shape_str(coords.shape()) +
                                " does not match input " +
                                shape_str(x.shape()));
  const int64_t kk = coords.dim(3);
  const int64_t points = b * h * w * kk;

  Tensor y = Tensor::zeros({b, h, w, kk, c});
  const auto run_forward = [&](const double* px, const double* pc,
                               double* py) {
    for (int64_t p = 0; p < points; ++p) {
      const int64_t bi = p / (h * w * kk);
      const double sy = pc[p * 2 + 0];
      const double sx = pc[p * 2 + 1];
      const double fy = std::floor(sy);
      const double fx = std::floor(sx);
      const int64_t y0 = static_cast<int64_t>(fy);
      const int64_t x0 = static_cast<int64_t>(fx);
      const double dy = sy - fy;
      const double dx = sx - fx;
      double* orow = py + p * c;
      const double wgt[4] = {(1.0 - dy) * (1.0 - dx), (1.0 - dy) * dx,
                             dy * (1.0 - dx), dy * dx};
      const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
      const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
      for (int corner = 0; corner < 4; ++corner) {
        if (cy[corner] < 0 || cy[corner] >= h || cx[corner] < 0 ||
            cx[corner] >= w)
          continue;
        const double* xrow =
            px + ((bi * h + cy[corner]) * w + cx[corner]) * c;
        const double wv = wgt[corner];
        for (int64_t ci = 0; ci < c; ++ci) orow[ci] += wv * xrow[ci];
      }
    }
  };
  run_forward(x.data().data(), coords.data().data(),
              y.mutable_data().data());

  if (wants_grad({&x, &coords})) {
    Tensor tx = x, tc = coords;
    record_op(y, [tx, tc, y, b, h, w, c, kk, points]() mutable {
      std::span<const double> go = y.grad();
      const double* px = tx.data().data();
      const double* pc = tc.data().data();
      double* gx = tx.requires_grad() ? tx.mutable_grad().data() : nullptr;
      double* gc = tc.requires_grad() ? tc.mutable_grad().data() : nullptr;
      for (int64_t p = 0; p < points; ++p) {
        const int64_t bi = p / (h * w * kk);
        const double sy = pc[p * 2 + 0];
        const double sx = pc[p * 2 + 1];
        const double fy = std::floor(sy);
        const double fx = std::floor(sx);
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t x0 = static_cast<int64_t>(fx);
        const double dy = sy - fy;
        const double dx = sx - fx;
        const double* grow = go.data() + p * c;
        const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
        const double wgt[4] = {(1.0 - dy) * (1.0 - dx), (1.0 - dy) * dx,
                               dy * (1.0 - dx), dy * dx};
        double acc_dy = 0.0, acc_dx = 0.0;
        for (int corner = 0; corner < 4; ++corner) {
          const bool inside = cy[corner] >= 0 && cy[corner] < h &&
                              cx[corner] >= 0 && cx[corner] < w;
          const double* xrow =
              inside ? px + ((bi * h + cy[corner]) * w + cx[corner]) * c
                     : nullptr;
          if (gx && inside) {
            double* gxrow =
                gx + ((bi * h + cy[corner]) * w + cx[corner]) * c;
            for (int64_t ci = 0; ci < c; ++ci)
              gxrow[ci] += wgt[corner] * grow[ci];
          }
          if (gc) {
            // d(weight)/d(dy), d(weight)/d(dx) per corner
            static const double sgn_y[4] = {-1.0, -1.0, 1.0, 1.0};
            static const double sgn_x[4] = {-1.0, 1.0, -1.0, 1.0};
            const double wy = sgn_y[corner] * (corner % 2 ? dx : 1.0 - dx);
            const double wx = sgn_x[corner] * (corner / 2 ? dy : 1.0 - dy);
            if (inside) {
              double dot = 0.0;
              for (int64_t ci = 0; ci < c; ++ci)
                dot += grow[ci] * xrow[ci];
              acc_dy += wy * dot;
              acc_dx += wx * dot;
            }
          }
        }
        if (gc) {
          gc[p * 2 + 0] += acc_dy;
          gc[p * 2 + 1] += acc_dx;
        }
      }
    });
  }
  return y;
}

Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  require_rank4("upsample_bilinear", x);
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (out_h < h || out_w < w)
    throw std::invalid_argument("upsample_bilinear: target " +
                                std::to_string(out_h) + "x" +
                                std::to_string(out_w) +
                                " would downscale " + shape_str(x.shape()));
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);

  // precompute per-axis source index pairs and weights
  struct Taps {
    std::vector<int64_t> lo, hi;
    std::vector<double> frac;
  };
  const auto make_taps = [](int64_t out_n, int64_t in_n, double sc) {
    Taps t;
    t.lo.resize(out_n);
    t.hi.resize(out_n);
    t.frac.resize(out_n);
    for (int64_t d = 0; d < out_n; ++d) {
      double src = (static_cast<double>(d) + 0.5) * sc - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
      const double f = std::floor(src);
      int64_t lo = static_cast<int64_t>(f);
      double frac = src - f;
      if (lo >= in_n - 1) {
        lo = in_n - 1;
        frac = 0.0;
      }
      t.lo[d] = lo;
      t.hi[d] = std::min(lo + 1, in_n - 1);
      t.frac[d] = frac;
    }
    return t;
  };
  const Taps ty = make_taps(out_h, h, sy);
  const Taps tx = make_taps(out_w, w, sx);

  Tensor y = Tensor::zeros({b, out_h, out_w, c});
  {
    const double* px = x.data().data();
    double* py = y.mutable_data().data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < out_h; ++i)
        for (int64_t j = 0; j < out_w; ++j) {
          const double fy = ty.frac[i], fx = tx.frac[j];
          const double* r00 =
              px + ((bi * h + ty.lo[i]) * w + tx.lo[j]) * c;
          double* orow = py + ((bi * out_h + i) * out_w + j) * c;
          if (fy == 0.0 && fx == 0.0) {  // exact grid hit, copy bitwise
            for (int64_t ci = 0; ci < c; ++ci) orow[ci] = r00[ci];
            continue;
          }
          const double* r01 =
              px + ((bi * h + ty.lo[i]) * w + tx.hi[j]) * c;
          const double* r10 =
              px + ((bi * h + ty.hi[i]) * w + tx.lo[j]) * c;
          const double* r11 =
              px + ((bi * h + ty.hi[i]) * w + tx.hi[j]) * c;
          const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
          const double w10 = fy * (1.0 - fx), w11 = fy * fx;
          for (int64_t ci = 0; ci < c; ++ci)
            orow[ci] = w00 * r00[ci] + w01 * r01[ci] + w10 * r10[ci] +
                       w11 * r11[ci];
        }
  }
  if (wants_grad({&x})) {
    Tensor txx = x;
    record_op(y, [txx, y, b, h, w, c, out_h, out_w, ty, tx]() mutable {
      std::span<const double> go = y.grad();
      std::span<double> gx = txx.mutable_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < out_h; ++i)
          for (int64_t j = 0; j < out_w; ++j) {
            const double fy = ty.frac[i], fx = tx.frac[j];
            const double* grow =
                go.data() + ((bi * out_h + i) * out_w + j) * c;
            const double w00 = (1.0 - fy) * (1.0 - fx);
            const double w01 = (1.0 - fy) * fx;
            const double w10 = fy * (1.0 - fx), w11 = fy * fx;
            double* g00 =
                gx.data() + ((bi * h + ty.lo[i]) * w + tx.lo[j]) * c;
            double* g01 =
                gx.data() + ((bi * h + ty.lo[i]) * w + tx.hi[j]) * c;
            double* g10 =
                gx.data() + ((bi * h + ty.hi[i]) * w + tx.lo[j]) * c;
            double* g11 =
                gx.data() + ((bi * h + ty.hi[i]) * w + tx.hi[j]) * c;
            for (int64_t ci = 0; ci < c; ++ci) {
              const double g = grow[ci];
              g00[ci] += w00 * g;
              g01[ci] += w01 * g;
              g10[ci] += w10 * g;
              g11[ci] += w11 * g;
            }
          }
    });
  }
  return y;
}

Tensor avg_pool(const Tensor& x, int64_t k) {
  require_rank4("avg_pool", x);
  if (k <= 0) throw std::invalid_argument("avg_pool: window must be positive");
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % k != 0 || w % k != 0)
    throw std::invalid_argument("avg_pool: window " + std::to_string(k) +
                                " must divide " + shape_str(x.shape()));
  const int64_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor y = Tensor::zeros({b, oh, ow, c});
  {
    const double* px = x.data().data();
    double* py = y.mutable_data().data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double* orow = py + ((bi * oh + i) * ow + j) * c;
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx) {
              const double* xrow =
                  px + ((bi * h + i * k + ky) * w + j * k + kx) * c;
              for (int64_t ci = 0; ci < c; ++ci) orow[ci] += xrow[ci];
            }
          for (int64_t ci = 0; ci < c; ++ci) orow[ci] *= inv;
        }
  }
  if (wants_grad({&x})) {
    Tensor tx = x;
    record_op(y, [tx, y, b, h, w, c, k, oh, ow, inv]() mutable {
      std::span<const double> go = y.grad();
      std::span<double> gx = tx.mutable_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j) {
            const double* grow = go.data() + ((bi * oh + i) * ow + j) * c;
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                double* gxrow =
                    gx.data() + ((bi * h + i * k + ky) * w + j * k + kx) * c;
                for (int64_t ci = 0; ci < c; ++ci)
                  gxrow[ci] += grow[ci] * inv;
              }
          }
    });
  }
  return y;
}

Tensor l2_normalize_last(const Tensor& x, double eps) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.size() / c;
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> rnorm(rows);
  {
    const double* px = x.data().data();
    double* py = y.mutable_data().data();
    for (int64_t m = 0; m < rows; ++m) {
      const double* row = px + m * c;
      double s = 0.0;
      for (int64_t i = 0; i < c; ++i) s += row[i] * row[i];
      const double r = 1.0 / std::sqrt(s + eps);
      rnorm[m] = r;
      for (int64_t i = 0; i < c; ++i) py[m * c + i] = row[i] * r;
    }
  }
  if (wants_grad({&x})) {
    Tensor tx = x;
    record_op(y, [tx, y, rows, c, rnorm = std::move(rnorm)]() mutable {
      std::span<const double> go = y.grad();
      std::span<double> gx = tx.mutable_grad();
      const double* px = tx.data().data();
      for (int64_t m = 0; m < rows; ++m) {
        const double* row = px + m * c;
        const double* grow = go.data() + m * c;
        const double r = rnorm[m];
        double dot = 0.0;
        for (int64_t i = 0; i < c; ++i) dot += grow[i] * row[i];
        const double r3 = r * r * r;
        for (int64_t i = 0; i < c; ++i)
          gx[m * c + i] += r * grow[i] - r3 * row[i] * dot;
      }
    });
  }
  return y;
}

}  // namespace demt
