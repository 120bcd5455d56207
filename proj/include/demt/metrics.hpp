#pragma once

#include <string>
#include <vector>

#include "demt/tensor.hpp"

namespace demt {

// Index of the largest channel per position; ties go to the lowest index.
Tensor argmax_last(const Tensor& x);

// Mean IoU over the classes present in either map, skipping pixels whose
// ground-truth label equals `ignore`.
double miou(const Tensor& pred_classes, const Tensor& gt,
            int64_t num_classes, int64_t ignore = 255);

// Root mean square error over pixels with gt > 0.
double rmse_depth(const Tensor& pred, const Tensor& gt);

// Mean angle in degrees between the unit-normalized fields, over pixels
// with a nonzero ground-truth vector.
double mean_angular_error(const Tensor& pred, const Tensor& gt);

// metric kinds: "miou" | "rmse" | "merr" | "odsf"
bool metric_higher_better(const std::string& kind);
std::string metric_kind_for_task(const std::string& task_kind);

struct MetricRecord {
  struct Entry {
    std::string task;
    std::string metric;
    double value = 0.0;
    bool higher_better = false;
  };
  std::vector<Entry> entries;
};

// Average signed relative change versus the single-task reference, in
// percent; the sign is flipped for lower-is-better metrics so that
// "better" is always positive.
double delta_m(const MetricRecord& multi, const MetricRecord& single_task);

// Line-oriented text: one `task=<name> metric=<kind> value=<%.6f>` per
// entry, then `delta_m=<%.2f>` when given.
std::string metric_report(const MetricRecord& r,
                          const double* delta = nullptr);

struct ParsedReport {
  MetricRecord record;
  bool has_delta_m = false;
  double delta_m = 0.0;
};

ParsedReport parse_metric_report(const std::string& text);

}  // namespace demt
