#pragma once

#include "demt/tensor.hpp"

namespace demt {

enum class RunMode { train, eval };

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]; leave undefined for no bias
};

// weight ~ uniform(+-1/sqrt(in)), bias zero
LinearParams linear_init(int64_t in, int64_t out, Rng& rng);

// Applies along the last axis: [..., in] -> [..., out].
Tensor linear(const Tensor& x, const LinearParams& p);

struct NormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  // batch-norm running state (biased variance); undefined for layer norm
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

NormParams layer_norm_init(int64_t channels);
NormParams batch_norm_init(int64_t channels);

// Normalizes the last axis per position.
Tensor layer_norm(const Tensor& x, const NormParams& p);

// Normalizes each channel of [B,H,W,C] over batch*spatial. Train mode uses
// batch statistics and updates the running state; eval mode uses the stored
// running state.
Tensor batch_norm(const Tensor& x, NormParams& p, RunMode mode);

// Exact x * Phi(x) with the erf-based normal CDF.
Tensor gelu(const Tensor& x);

struct Conv2dParams {
  Tensor weight;  // [Cout, k, k, Cin]
  Tensor bias;    // [Cout]; leave undefined for no bias
};

Conv2dParams conv2d_init(int64_t cin, int64_t cout, int64_t k, Rng& rng);

// Cross-correlation over [B,H,W,Cin] with odd k, stride 1 and zero padding
// that preserves the spatial extent.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

// 1x1 convolution; exactly a per-pixel linear() over the channel axis.
Tensor pointwise_conv(const Tensor& x, const LinearParams& p);

// Samples x at coords[b,i,j,k] = (y,x) in absolute pixel units, bilinearly
// interpolated; points outside [0,H-1]x[0,W-1] contribute zeros. Output is
// [B,H,W,K,C]. Differentiable in both x and coords.
Tensor bilinear_sample(const Tensor& x, const Tensor& coords);

// align-corners=false resize, upscale only: src = (dst+0.5)*scale - 0.5,
// clamped to the valid range.
Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);

// Non-overlapping kxk average pooling; k must divide both extents.
Tensor avg_pool(const Tensor& x, int64_t k);

// Unit-normalizes the last axis: y = x / sqrt(|x|^2 + eps).
Tensor l2_normalize_last(const Tensor& x, double eps = 1e-12);

}  // namespace demt
