#include "demt/deformable_mixer.hpp"

#include <cmath>
#include <stdexcept>

namespace demt {

namespace {

thread_local int64_t g_deform_calls = 0;

void check_points(int64_t k) {
  if (k != 1 && k != 9)
    throw std::invalid_argument(
        "deformable mixer: sampling_points must be 1 or 9, got " +
        std::to_string(k));
}

// (dy,dx) base displacement of sampling point k
void base_displacement(int64_t k, int64_t points, double* dy, double* dx) {
  if (points == 1) {
    *dy = 0.0;
    *dx = 0.0;
  } else {
    *dy = static_cast<double>(k / 3 - 1);
    *dx = static_cast<double>(k % 3 - 1);
  }
}

}  // namespace

DeformableMixerParams deformable_mixer_init(int64_t channels,
                                            int64_t reduced, int64_t depth,
                                            int64_t sampling_points,
                                            Rng& rng) {
  check_points(sampling_points);
  if (depth < 1)
    throw std::invalid_argument("deformable mixer: depth must be >= 1");
  DeformableMixerParams p;
  p.sampling_points = sampling_points;
  p.reduce_ln = layer_norm_init(channels);
  p.reduce = linear_init(channels, reduced, rng);
  for (int64_t d = 0; d < depth; ++d) {
    MixerBlockParams b;
    b.mix = linear_init(reduced, reduced, rng);
    b.mix_bn = batch_norm_init(reduced);
    // zero offsets at init so the block starts as a plain local mixer
    b.offset_conv.weight =
        Tensor::zeros({2 * sampling_points, 3, 3, reduced});
    b.offset_conv.bias = Tensor::zeros({2 * sampling_points});
    const double bound =
        1.0 / std::sqrt(static_cast<double>(sampling_points * reduced));
    b.deform_weight = Tensor::uniform({sampling_points, reduced, reduced},
                                      rng, -bound, bound);
    b.deform_bn = batch_norm_init(reduced);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

Tensor reduce_channels(const Tensor& x, const DeformableMixerParams& p) {
  if (x.rank() != 4)
    throw std::invalid_argument("reduce_channels: [B,h,w,C] input required");
  return linear(layer_norm(x, p.reduce_ln), p.reduce);
}

Tensor channel_mix(const Tensor& x, MixerBlockParams& p, RunMode mode) {
  return batch_norm(gelu(pointwise_conv(x, p.mix)), p.mix_bn, mode);
}

Tensor predict_offsets(const Tensor& x, const MixerBlockParams& p) {
  const int64_t points = p.offset_conv.weight.dim(0) / 2;
  check_points(points);
  Tensor raw = conv2d(x, p.offset_conv);  // [B,h,w,2K]
  return reshape(raw, {x.dim(0), x.dim(1), x.dim(2), points, 2});
}

Tensor spatial_deform(const Tensor& x, const Tensor& offsets,
                      const Tensor& deform_weight) {
  if (x.rank() != 4)
    throw std::invalid_argument("spatial_deform: [B,h,w,C'] input required");
  if (offsets.rank() != 5 || offsets.shape().back() != 2)
    throw std::invalid_argument(
        "spatial_deform: offsets must be [B,h,w,K,2]");
  if (deform_weight.rank() != 3 ||
      deform_weight.dim(1) != deform_weight.dim(2))
    throw std::invalid_argument(
        "spatial_deform: deform weight must be [K,C',C']");
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t points = offsets.dim(3);
  check_points(points);
  if (deform_weight.dim(0) != points || deform_weight.dim(1) != c)
    throw std::invalid_argument(
        "spatial_deform: weight " + shape_str(deform_weight.shape()) +
        " does not match K=" + std::to_string(points) + ", C'=" +
        std::to_string(c));
  ++g_deform_calls;

  // absolute sample positions = location + base displacement + offset
  std::vector<double> base(b * h * w * points * 2);
  {
    std::size_t idx = 0;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
          for (int64_t k = 0; k < points; ++k) {
            double dy, dx;
            base_displacement(k, points, &dy, &dx);
            base[idx++] = static_cast<double>(i) + dy;
            base[idx++] = static_cast<double>(j) + dx;
          }
  }
  Tensor coords =
      add(Tensor({b, h, w, points, 2}, std::move(base)), offsets);
  Tensor sampled = bilinear_sample(x, coords);  // [B,h,w,K,C']
  // mixing over (k, ci) is exactly a matmul against the flattened weight
  Tensor flat = reshape(sampled, {b * h * w, points * c});
  Tensor mixed = matmul(flat, reshape(deform_weight, {points * c, c}));
  return reshape(mixed, {b, h, w, c});
}

Tensor deformable_mixer_apply(const Tensor& x, DeformableMixerParams& p,
                              RunMode mode) {
  Tensor y = reduce_channels(x, p);
  for (MixerBlockParams& block : p.blocks) {
    Tensor mixed = channel_mix(y, block, mode);
    Tensor offsets = predict_offsets(mixed, block);
    Tensor deformed =
        spatial_deform(mixed, offsets, block.deform_weight);
    y = add(mixed, batch_norm(gelu(deformed), block.deform_bn, mode));
  }
  return y;
}

std::vector<DeformedFeature> deformable_mixer_forward(
    const Tensor& x, DeformableMixerParams& p, RunMode mode) {
  Tensor maps = deformable_mixer_apply(x, p, mode);
  const int64_t b = maps.dim(0), h = maps.dim(1), w = maps.dim(2),
                c = maps.dim(3);
  Tensor rows = reshape(maps, {b * h * w, c});
  std::vector<DeformedFeature> out;
  for (int64_t bi = 0; bi < b; ++bi) {
    DeformedFeature f;
    f.tokens = slice_rows(rows, bi * h * w, (bi + 1) * h * w);
    f.height = h;
    f.width = w;
    out.push_back(std::move(f));
  }
  return out;
}

int64_t spatial_deform_call_count() { return g_deform_calls; }
void reset_spatial_deform_call_count() { g_deform_calls = 0; }

}  // namespace demt
