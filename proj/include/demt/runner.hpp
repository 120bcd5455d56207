#pragma once

#include <string>
#include <vector>

#include "demt/checkpoint.hpp"
#include "demt/config.hpp"
#include "demt/data.hpp"
#include "demt/metrics.hpp"
#include "demt/model.hpp"
#include "demt/training.hpp"

namespace demt {

// Architecture and task list from the configuration; spatial extents and
// the semseg class count must agree with the dataset manifest.
ModelConfig model_config_from(const RunConfig& config,
                              const DatasetManifest& manifest);

// Per-task loss weights in task order.
std::vector<double> loss_weights_from(const RunConfig& config,
                                      const std::vector<TaskSpec>& tasks);

// Eval-mode average losses over the whole dataset, sample by sample in
// manifest order.
LossReport evaluate_losses(Model& model, const Dataset& data,
                           const std::vector<double>& weights);

// Formats "final total=<g17> <task>=<g17>..." — the line the trainer logs
// and evaluation reproduces.
std::string loss_line(const std::string& prefix, const LossReport& report);

struct GenOutcome {
  DatasetManifest manifest;
  std::string dir;
};
GenOutcome run_gen(const RunConfig& config);

struct TrainOutcome {
  std::vector<std::string> log_lines;  // per-step lines plus the final line
  LossReport final_losses;             // eval-mode, over the training set
  uint64_t steps = 0;
  std::string final_checkpoint;
};
// Writes <out_dir>/train_log.txt, periodic ckpt_<step>.dmtc files and
// ckpt_final.dmtc. resume, when provided, must hold a snapshot of the same
// architecture; training continues from its step counter.
TrainOutcome run_train(const RunConfig& config, const std::string& out_dir,
                       const Checkpoint* resume);

struct EvalOutcome {
  LossReport losses;
  MetricRecord metrics;
  bool has_delta = false;
  double delta = 0.0;
  std::string report_text;  // losses line + metric report
};
// Rebuilds the model from the config, restores the checkpoint and writes
// <out_dir>/report.txt. single_task_ref may be empty or point to a metric
// report file with single-task reference values.
EvalOutcome run_eval(const RunConfig& config, const Checkpoint& ckpt,
                     const std::string& single_task_ref,
                     const std::string& out_dir);

}  // namespace demt
