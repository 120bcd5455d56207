#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "demt/tensor.hpp"

namespace demt {

// One rendered scene with mutually consistent per-pixel targets.
struct Sample {
  Tensor image;   // [H,W,3] in [0,1]
  Tensor semseg;  // [H,W] class labels; 255 marks the boundary band
  Tensor depth;   // [H,W] camera depth, always > 0
  Tensor normal;  // [H,W,3] unit surface normals, facing the camera
};

// Orthographic scene of a tilted ground plane plus 2-5 tilted rectangles
// and spheres; class 0 is ground, object classes cycle through
// 1..num_classes-1. All stored values are quantized through f32 so a disk
// round trip is bitwise lossless. Deterministic in the seed.
Sample generate_scene(uint64_t seed, int64_t height, int64_t width,
                      int64_t num_classes);

struct DatasetManifest {
  int64_t count = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t classes = 0;
  std::string split = "train";
  uint64_t seed = 0;
};

struct DataError : std::runtime_error {
  enum class Kind { io, corrupt_header, truncated, manifest_mismatch };
  Kind kind;
  DataError(Kind k, const std::string& what)
      : std::runtime_error(what), kind(k) {}
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

// manifest.txt plus one sample_%06d.dmt file per sample.
void write_dataset(const std::string& dir, const DatasetManifest& manifest,
                   const std::vector<Sample>& samples);
Dataset load_dataset(const std::string& dir);

// Deterministic shuffle for one epoch.
std::vector<int64_t> epoch_permutation(int64_t count, uint64_t shuffle_seed,
                                       int64_t epoch);

struct Batch {
  Tensor image;   // [B,H,W,3]
  Tensor semseg;  // [B,H,W]
  Tensor depth;   // [B,H,W,1]
  Tensor normal;  // [B,H,W,3]
  std::vector<int64_t> indices;
};

Batch make_batch(const Dataset& data, const std::vector<int64_t>& indices);

// Batches covering the epoch permutation; the final short batch is kept.
std::vector<Batch> batch_iter(const Dataset& data, int64_t batch_size,
                              uint64_t shuffle_seed, int64_t epoch);

}  // namespace demt
