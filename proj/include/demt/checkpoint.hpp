#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "demt/model.hpp"
#include "demt/training.hpp"

namespace demt {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

constexpr uint32_t kCheckpointVersion = 1;

// Self-describing training snapshot: the resolved configuration (which also
// carries every seed, so it doubles as the RNG state), the step counter, and
// length-prefixed named f64 tensors covering parameters, norm running
// statistics and optimizer velocities.
struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  std::string config_text;
  uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot shares no storage with the live model (values are copied).
// Velocity tensors are named "velocity.<param name>".
Checkpoint snapshot_checkpoint(const Model& model, const SgdOptimizer& opt,
                               uint64_t step, const std::string& config_text);

// Copies every record back into the model parameters / state and the
// optimizer velocities; names and shapes must match exactly.
void restore_checkpoint(const Checkpoint& ckpt, Model& model,
                        SgdOptimizer& opt);

}  // namespace demt
