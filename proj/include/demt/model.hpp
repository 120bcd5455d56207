#pragma once

#include <array>
#include <string>
#include <vector>

#include "demt/deformable_mixer.hpp"
#include "demt/task_decoder.hpp"

namespace demt {

enum class TaskKind { semseg, depth, normal };

TaskKind task_kind_from_string(const std::string& s);
std::string task_kind_name(TaskKind k);

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::semseg;
  int64_t out_channels = 1;  // semseg: class count; depth: 1; normal: 3
  double loss_weight = 1.0;
  bool higher_better = false;  // metric direction, set by make_task_spec
};

// out_channels: class count for semseg, fixed 1 / 3 for depth / normal.
TaskSpec make_task_spec(const std::string& name, TaskKind kind,
                        int64_t out_channels, double loss_weight);

// Which pieces run after the shared trunk and feature aggregation:
//   baseline  — one shared encoder branch, heads directly on its output
//   dm        — per-task encoder branches, heads on their outputs
//   dm_ti     — adds the task-interaction block; heads on per-task slices
//   dm_ti_tq  — full decoder (interaction + per-task query blocks)
enum class ModelMode { baseline, dm, dm_ti, dm_ti_tq };

ModelMode model_mode_from_string(const std::string& s);
std::string model_mode_name(ModelMode m);

struct ModelConfig {
  std::vector<TaskSpec> tasks;
  int64_t input_h = 64;
  int64_t input_w = 64;
  std::array<int64_t, 4> trunk_widths = {8, 16, 24, 32};
  std::vector<int64_t> scales = {4, 8, 16, 32};  // strides; must include 4
  int64_t reduced_channels = 0;  // C'; 0 derives C/4
  int64_t mixer_depth = 1;
  int64_t sampling_points = 9;
  int64_t heads = 2;
  ModelMode mode = ModelMode::dm_ti_tq;
  uint64_t seed = 1;

  int64_t aggregated_channels() const;  // C = sum of used stage widths
  int64_t reduced() const;              // C' with the C/4 default applied
  void validate() const;
};

struct TrunkParams {
  Conv2dParams conv1a, conv1b;
  NormParams bn1a, bn1b;
  std::array<Conv2dParams, 3> stage_conv;  // stages 2..4
  std::array<NormParams, 3> stage_bn;
};

// Named views of every tensor in the model. `params` are learnable,
// `state` is persistent but not optimized (norm running statistics).
// Tensors are shared with the typed parameter structs, so optimizer and
// checkpoint code can work off this flat list.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> state;

  void add_param(const std::string& name, const Tensor& t);
  void add_state(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;  // params then state
  int64_t param_scalars() const;
};

struct Model {
  ModelConfig config;
  TrunkParams trunk;
  std::vector<DeformableMixerParams> encoders;  // per task; baseline: 1
  TaskDecoderParams decoder;  // registered only in the modes that use it
  std::vector<LinearParams> heads;  // per task, C' -> out_channels
  ParamStore store;
};

Model model_init(const ModelConfig& config);

// Four feature maps at strides 4, 8, 16 and 32.
std::array<Tensor, 4> trunk_forward(const Tensor& image, TrunkParams& p,
                                    RunMode mode);

// Upsample every used stage to the stride-4 grid and concatenate channels
// in stride order.
Tensor aggregate_features(const std::array<Tensor, 4>& stages,
                          const std::vector<int64_t>& scales);

// Pointwise projection to the task's output channels, then x4 bilinear
// upsample back to the input resolution. Normal maps are unit-normalized
// per pixel.
Tensor head_forward(const Tensor& feat, const TaskSpec& spec,
                    const LinearParams& p);

// Predictions per task, each [B, H, W, out_channels].
std::vector<Tensor> model_forward(Model& m, const Tensor& image,
                                  RunMode mode);

}  // namespace demt
