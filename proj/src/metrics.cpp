#include "demt/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace demt {

namespace {

constexpr double kDegPerRad = 57.29577951308232087680;

int64_t integer_label(double v, const char* what) {
  const int64_t r = std::llround(v);
  if (static_cast<double>(r) != v)
    throw std::invalid_argument(std::string(what) +
                                " must hold integers, found " +
                                std::to_string(v));
  return r;
}

}  // namespace

Tensor argmax_last(const Tensor& x) {
  if (x.rank() < 1)
    throw std::invalid_argument("argmax: scalar input");
  const int64_t channels = x.shape().back();
  const int64_t rows = x.size() / channels;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor y = Tensor::zeros(out_shape);
  const double* px = x.data().data();
  double* py = y.mutable_data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * channels;
    int64_t best = 0;
    for (int64_t c = 1; c < channels; ++c)
      if (row[c] > row[best]) best = c;
    py[r] = static_cast<double>(best);
  }
  return y;
}

double miou(const Tensor& pred_classes, const Tensor& gt,
            int64_t num_classes, int64_t ignore) {
  if (num_classes < 1)
    throw std::invalid_argument("miou: need at least one class");
  if (pred_classes.shape() != gt.shape())
    throw std::invalid_argument("miou: shapes differ");
  std::vector<int64_t> tp(num_classes, 0), fp(num_classes, 0),
      fn(num_classes, 0);
  const double* pp = pred_classes.data().data();
  const double* pg = gt.data().data();
  for (int64_t i = 0; i < gt.size(); ++i) {
    const int64_t g = integer_label(pg[i], "miou: ground truth");
    if (g == ignore) continue;
    const int64_t p = integer_label(pp[i], "miou: prediction");
    if (g < 0 || g >= num_classes)
      throw std::invalid_argument("miou: ground-truth label " +
                                  std::to_string(g) + " out of range");
    if (p < 0 || p >= num_classes)
      throw std::invalid_argument("miou: predicted label " +
                                  std::to_string(p) + " out of range");
    if (p == g) {
      ++tp[g];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  double sum = 0.0;
  int64_t present = 0;
  for (int64_t c = 0; c < num_classes; ++c) {
    const int64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++present;
  }
  if (present == 0)
    throw std::runtime_error("miou: no labeled pixels");
  return sum / present;
}

double rmse_depth(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw std::invalid_argument("rmse: shapes differ");
  const double* pp = pred.data().data();
  const double* pg = gt.data().data();
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < gt.size(); ++i) {
    if (!(pg[i] > 0.0)) continue;
    const double d = pp[i] - pg[i];
    acc += d * d;
    ++count;
  }
  if (count == 0)
    throw std::runtime_error("rmse: no pixels with positive depth");
  return std::sqrt(acc / count);
}

double mean_angular_error(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || gt.shape().back() != 3)
    throw std::invalid_argument("merr: matching [...,3] fields required");
  const int64_t pixels = gt.size() / 3;
  const double* pp = pred.data().data();
  const double* pg = gt.data().data();
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < pixels; ++p) {
    const double* g = pg + p * 3;
    const double gn = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    if (gn == 0.0) continue;
    const double* q = pp + p * 3;
    const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
    double dot =
        qn == 0.0 ? 0.0 : (q[0] * g[0] + q[1] * g[1] + q[2] * g[2]) / (qn * gn);
    dot = std::min(1.0, std::max(-1.0, dot));
    acc += std::acos(dot) * kDegPerRad;
    ++count;
  }
  if (count == 0)
    throw std::runtime_error("merr: no pixels with a target normal");
  return acc / count;
}

bool metric_higher_better(const std::string& kind) {
  if (kind == "miou" || kind == "odsf") return true;
  if (kind == "rmse" || kind == "merr") return false;
  throw std::invalid_argument("unknown metric kind: " + kind);
}

std::string metric_kind_for_task(const std::string& task_kind) {
  if (task_kind == "semseg") return "miou";
  if (task_kind == "depth") return "rmse";
  if (task_kind == "normal") return "merr";
  throw std::invalid_argument("no metric for task kind: " + task_kind);
}

double delta_m(const MetricRecord& multi, const MetricRecord& single_task) {
  if (multi.entries.empty())
    throw std::invalid_argument("delta_m: empty record");
  if (multi.entries.size() != single_task.entries.size())
    throw std::invalid_argument("delta_m: task sets differ in size");
  double acc = 0.0;
  for (const MetricRecord::Entry& m : multi.entries) {
    const MetricRecord::Entry* ref = nullptr;
    for (const MetricRecord::Entry& s : single_task.entries)
      if (s.task == m.task) ref = &s;
    if (!ref)
      throw std::invalid_argument("delta_m: no reference for task " +
                                  m.task);
    if (ref->metric != m.metric || ref->higher_better != m.higher_better)
      throw std::invalid_argument("delta_m: metric mismatch for task " +
                                  m.task);
    if (ref->value == 0.0)
      throw std::invalid_argument(
          "delta_m: zero reference value for task " + m.task);
    const double rel = (m.value - ref->value) / ref->value;
    acc += m.higher_better ? rel : -rel;
  }
  return acc / multi.entries.size() * 100.0;
}

std::string metric_report(const MetricRecord& r, const double* delta) {
  std::string out;
  char line[160];
  for (const MetricRecord::Entry& e : r.entries) {
    std::snprintf(line, sizeof(line), "task=%s metric=%s value=%.6f\n",
                  e.task.c_str(), e.metric.c_str(), e.value);
    out += line;
  }
  if (delta) {
    std::snprintf(line, sizeof(line), "delta_m=%.2f\n", *delta);
    out += line;
  }
  return out;
}

ParsedReport parse_metric_report(const std::string& text) {
  ParsedReport out;
  std::istringstream in(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("delta_m=", 0) == 0) {
      out.has_delta_m = true;
      out.delta_m = std::stod(line.substr(8));
      continue;
    }
    MetricRecord::Entry e;
    std::istringstream fields(line);
    std::string field;
    bool has_task = false, has_metric = false, has_value = false;
    while (fields >> field) {
      const size_t eq = field.find('=');
      if (eq == std::string::npos) break;
      const std::string key = field.substr(0, eq);
      const std::string value = field.substr(eq + 1);
      if (key == "task") {
        e.task = value;
        has_task = true;
      } else if (key == "metric") {
        e.metric = value;
        has_metric = true;
      } else if (key == "value") {
        e.value = std::stod(value);
        has_value = true;
      }
    }
    if (!has_task || !has_metric || !has_value)
      throw std::invalid_argument("metric report: malformed line " +
                                  std::to_string(lineno) + ": " + line);
    e.higher_better = metric_higher_better(e.metric);
    out.record.entries.push_back(e);
  }
  return out;
}

}  // namespace demt
