#pragma once

#include <vector>

#include "demt/nn.hpp"

namespace demt {

// One depth step of the mixer: pointwise channel mixing followed by a
// spatially deformable mixing whose sampling offsets are predicted from the
// channel-mixed feature.
struct MixerBlockParams {
  LinearParams mix;  // pointwise channel mixing weight and bias
  NormParams mix_bn;
  Conv2dParams offset_conv;  // 3x3, C' -> 2K, zero-initialized
  Tensor deform_weight;      // [K, C', C'] per-point mixing weights
  NormParams deform_bn;
};

struct DeformableMixerParams {
  NormParams reduce_ln;
  LinearParams reduce;  // C -> C'
  std::vector<MixerBlockParams> blocks;
  int64_t sampling_points = 9;  // K, either 9 (3x3 bases) or 1
};

DeformableMixerParams deformable_mixer_init(int64_t channels,
                                            int64_t reduced, int64_t depth,
                                            int64_t sampling_points,
                                            Rng& rng);

// Per-task feature flattened to tokens, one sequence per image.
struct DeformedFeature {
  Tensor tokens;  // [N, C'] with N = height*width
  int64_t height = 0;
  int64_t width = 0;
};

// Layer norm over channels followed by the C -> C' projection.
Tensor reduce_channels(const Tensor& x, const DeformableMixerParams& p);

// BN(GELU(pointwise(x))); purely per pixel apart from batch statistics.
Tensor channel_mix(const Tensor& x, MixerBlockParams& p, RunMode mode);

// Offset field [B,h,w,K,2] in (dy,dx) pixel units.
Tensor predict_offsets(const Tensor& x, const MixerBlockParams& p);

// Samples K points per location at base+offset and mixes them with the
// [K,C',C'] weight. K=9 uses the 3x3 neighborhood as base positions; K=1
// samples the location itself.
Tensor spatial_deform(const Tensor& x, const Tensor& offsets,
                      const Tensor& deform_weight);

// Full branch on [B,h,w,C]: reduce once, then for each block
// mix -> deform -> BN(GELU(.)) with a residual from the mixed feature.
Tensor deformable_mixer_apply(const Tensor& x, DeformableMixerParams& p,
                              RunMode mode);

// Same, flattened into per-image token sequences.
std::vector<DeformedFeature> deformable_mixer_forward(
    const Tensor& x, DeformableMixerParams& p, RunMode mode);

// Test instrumentation: number of spatial_deform calls on this thread.
int64_t spatial_deform_call_count();
void reset_spatial_deform_call_count();

}  // namespace demt
