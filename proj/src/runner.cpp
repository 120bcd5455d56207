#include "demt/runner.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace demt {
namespace {

namespace fs = std::filesystem;

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int64_t task_channels(TaskKind kind, int64_t classes) {
  switch (kind) {
    case TaskKind::semseg:
      return classes;
    case TaskKind::depth:
      return 1;
    case TaskKind::normal:
      return 3;
  }
  throw std::invalid_argument("unknown task kind");
}

const Tensor& target_for(const Batch& batch, TaskKind kind) {
  switch (kind) {
    case TaskKind::semseg:
      return batch.semseg;
    case TaskKind::depth:
      return batch.depth;
    case TaskKind::normal:
      return batch.normal;
  }
  throw std::invalid_argument("unknown task kind");
}

std::vector<Tensor> batch_losses(Model& model, const Batch& batch,
                                 RunMode mode) {
  std::vector<Tensor> preds = model_forward(model, batch.image, mode);
  std::vector<Tensor> losses;
  for (size_t t = 0; t < model.config.tasks.size(); ++t) {
    const TaskSpec& spec = model.config.tasks[t];
    losses.push_back(task_loss(preds[t], target_for(batch, spec.kind),
                               spec.kind));
  }
  return losses;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text).flush()) {
    throw std::ios_base::failure("cannot write " + path.string());
  }
}

std::string step_line(uint64_t step, const LossReport& report) {
  std::string line = "step=" + std::to_string(step) +
                     " total=" + g17(report.total);
  for (const auto& [name, value] : report.per_task) {
    line += " " + name + "=" + g17(value);
  }
  return line;
}

}  // namespace

ModelConfig model_config_from(const RunConfig& config,
                              const DatasetManifest& manifest) {
  if (manifest.height != config.get_int("data.height") ||
      manifest.width != config.get_int("data.width")) {
    throw ConfigError("dataset is " + std::to_string(manifest.height) + "x" +
                      std::to_string(manifest.width) +
                      " but the config expects " +
                      config.get("data.height") + "x" +
                      config.get("data.width"));
  }
  if (manifest.classes != config.get_int("data.classes")) {
    throw ConfigError("dataset has " + std::to_string(manifest.classes) +
                      " classes but the config expects " +
                      config.get("data.classes"));
  }

  ModelConfig mc;
  std::set<std::string> seen;
  for (const std::string& name : config.get_name_list("model.tasks")) {
    if (!seen.insert(name).second) {
      throw ConfigError("model.tasks lists " + name + " twice");
    }
    const TaskKind kind = task_kind_from_string(name);
    mc.tasks.push_back(make_task_spec(
        name, kind, task_channels(kind, manifest.classes),
        config.get_double("loss." + name)));
  }
  mc.input_h = manifest.height;
  mc.input_w = manifest.width;
  const std::vector<int64_t> widths = config.get_int_list("model.widths");
  if (widths.size() != 4) {
    throw ConfigError("model.widths needs exactly 4 entries");
  }
  for (size_t i = 0; i < 4; ++i) mc.trunk_widths[i] = widths[i];
  mc.scales = config.get_int_list("model.scales");
  mc.reduced_channels = config.get_int("model.reduced_channels");
  mc.mixer_depth = config.get_int("model.depth_d");
  mc.sampling_points = config.get_int("model.points");
  mc.heads = config.get_int("model.heads");
  mc.mode = model_mode_from_string(config.get("model.mode"));
  mc.seed = config.get_u64("model.seed");
  mc.validate();
  return mc;
}

std::vector<double> loss_weights_from(const RunConfig& config,
                                      const std::vector<TaskSpec>& tasks) {
  std::vector<double> weights;
  for (const TaskSpec& spec : tasks) {
    weights.push_back(config.get_double("loss." + spec.name));
  }
  return weights;
}

LossReport evaluate_losses(Model& model, const Dataset& data,
                           const std::vector<double>& weights) {
  if (data.samples.empty()) {
    throw std::invalid_argument("evaluate_losses: empty dataset");
  }
  NoGrad guard;
  const size_t tasks = model.config.tasks.size();
  std::vector<double> sums(tasks, 0.0);
  for (int64_t i = 0; i < static_cast<int64_t>(data.samples.size()); ++i) {
    const Batch batch = make_batch(data, {i});
    const std::vector<Tensor> losses =
        batch_losses(model, batch, RunMode::eval);
    for (size_t t = 0; t < tasks; ++t) sums[t] += losses[t].item();
  }
  LossReport report;
  report.total = 0.0;
  for (size_t t = 0; t < tasks; ++t) {
    const double avg = sums[t] / static_cast<double>(data.samples.size());
    report.per_task.emplace_back(model.config.tasks[t].name, avg);
    report.total += weights[t] * avg;
  }
  return report;
}

std::string loss_line(const std::string& prefix, const LossReport& report) {
  std::string line = prefix + " total=" + g17(report.total);
  for (const auto& [name, value] : report.per_task) {
    line += " " + name + "=" + g17(value);
  }
  return line;
}

GenOutcome run_gen(const RunConfig& config) {
  const int64_t count = config.get_int("data.count");
  if (count < 1) throw ConfigError("data.count must be at least 1");
  const int64_t h = config.get_int("data.height");
  const int64_t w = config.get_int("data.width");
  const int64_t classes = config.get_int("data.classes");
  const uint64_t seed = config.get_u64("data.seed");

  std::vector<Sample> samples;
  samples.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    samples.push_back(
        generate_scene(seed + static_cast<uint64_t>(i), h, w, classes));
  }
  GenOutcome out;
  out.manifest.count = count;
  out.manifest.height = h;
  out.manifest.width = w;
  out.manifest.classes = classes;
  out.manifest.split = config.get("data.split");
  out.manifest.seed = seed;
  out.dir = config.get("data.dir");
  write_dataset(out.dir, out.manifest, samples);
  return out;
}

TrainOutcome run_train(const RunConfig& config, const std::string& out_dir,
                       const Checkpoint* resume) {
  const Dataset data = load_dataset(config.get("data.dir"));
  Model model = model_init(model_config_from(config, data.manifest));
  const std::vector<double> weights =
      loss_weights_from(config, model.config.tasks);

  std::vector<Tensor> params;
  for (auto& [name, t] : model.store.params) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  SgdOptimizer opt(params, config.get_double("train.lr"),
                   config.get_double("train.weight_decay"),
                   config.get_double("train.momentum"));

  uint64_t start = 0;
  if (resume) {
    restore_checkpoint(*resume, model, opt);
    start = resume->step;
  }
  if (config.get_int("train.steps") < 1) {
    throw ConfigError("train.steps must be at least 1");
  }
  const uint64_t steps = std::max(
      start, static_cast<uint64_t>(config.get_int("train.steps")));
  const int64_t batch_size = config.get_int("train.batch_size");
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  const int64_t checkpoint_every = config.get_int("train.checkpoint_every");
  const uint64_t shuffle_seed = config.get_u64("train.shuffle_seed");
  const int64_t count = static_cast<int64_t>(data.samples.size());
  const int64_t steps_per_epoch = (count + batch_size - 1) / batch_size;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::ios_base::failure("cannot create " + out_dir);
  std::ofstream log(fs::path(out_dir) / "train_log.txt");
  if (!log) {
    throw std::ios_base::failure("cannot write " + out_dir + "/train_log.txt");
  }
  const std::string config_text = config.resolved_text();

  TrainOutcome out;
  int64_t cached_epoch = -1;
  std::vector<Batch> batches;
  for (uint64_t k = start + 1; k <= steps; ++k) {
    const int64_t epoch =
        static_cast<int64_t>((k - 1) / static_cast<uint64_t>(steps_per_epoch));
    if (epoch != cached_epoch) {
      batches = batch_iter(data, batch_size, shuffle_seed, epoch);
      cached_epoch = epoch;
    }
    const Batch& batch =
        batches[(k - 1) % static_cast<uint64_t>(steps_per_epoch)];

    LossReport report;
    {
      Tape tape;
      const std::vector<Tensor> losses =
          batch_losses(model, batch, RunMode::train);
      const Tensor total = total_loss(losses, weights);
      report.total = total.item();
      for (size_t t = 0; t < losses.size(); ++t) {
        report.per_task.emplace_back(model.config.tasks[t].name,
                                     losses[t].item());
      }
      tape.backward(total);
    }
    opt.step();

    const std::string line = step_line(k, report);
    out.log_lines.push_back(line);
    log << line << "\n";

    if (checkpoint_every > 0 &&
        k % static_cast<uint64_t>(checkpoint_every) == 0 && k != steps) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06" PRIu64 ".dmtc", k);
      save_checkpoint((fs::path(out_dir) / name).string(),
                      snapshot_checkpoint(model, opt, k, config_text));
    }
  }

  out.steps = steps;
  out.final_losses = evaluate_losses(model, data, weights);
  const std::string final_line = loss_line("final", out.final_losses);
  out.log_lines.push_back(final_line);
  log << final_line << "\n";
  if (!log.flush()) {
    throw std::ios_base::failure("failed writing " + out_dir +
                                 "/train_log.txt");
  }

  out.final_checkpoint = (fs::path(out_dir) / "ckpt_final.dmtc").string();
  save_checkpoint(out.final_checkpoint,
                  snapshot_checkpoint(model, opt, steps, config_text));
  return out;
}

EvalOutcome run_eval(const RunConfig& config, const Checkpoint& ckpt,
                     const std::string& single_task_ref,
                     const std::string& out_dir) {
  const Dataset data = load_dataset(config.get("data.dir"));
  Model model = model_init(model_config_from(config, data.manifest));
  const std::vector<double> weights =
      loss_weights_from(config, model.config.tasks);

  std::vector<Tensor> params;
  for (auto& [name, t] : model.store.params) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  SgdOptimizer opt(params, config.get_double("train.lr"),
                   config.get_double("train.weight_decay"),
                   config.get_double("train.momentum"));
  restore_checkpoint(ckpt, model, opt);

  EvalOutcome out;
  out.losses = evaluate_losses(model, data, weights);

  // Whole-set predictions per task, stacked along the batch axis so micro
  // metrics (the per-class IoU unions in particular) span the dataset.
  NoGrad guard;
  const size_t tasks = model.config.tasks.size();
  std::vector<std::vector<Tensor>> preds(tasks);
  std::vector<int64_t> all(data.samples.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  const Batch full = make_batch(data, all);
  for (int64_t i = 0; i < static_cast<int64_t>(data.samples.size()); ++i) {
    const Batch one = make_batch(data, {i});
    const std::vector<Tensor> p =
        model_forward(model, one.image, RunMode::eval);
    for (size_t t = 0; t < tasks; ++t) preds[t].push_back(p[t]);
  }
  for (size_t t = 0; t < tasks; ++t) {
    const TaskSpec& spec = model.config.tasks[t];
    const Tensor stacked = concat_rows(preds[t]);
    double value = 0.0;
    switch (spec.kind) {
      case TaskKind::semseg:
        value = miou(argmax_last(stacked), full.semseg, data.manifest.classes);
        break;
      case TaskKind::depth:
        value = rmse_depth(stacked, full.depth);
        break;
      case TaskKind::normal:
        value = mean_angular_error(stacked, full.normal);
        break;
    }
    MetricRecord::Entry entry;
    entry.task = spec.name;
    entry.metric = metric_kind_for_task(task_kind_name(spec.kind));
    entry.value = value;
    entry.higher_better = metric_higher_better(entry.metric);
    out.metrics.entries.push_back(entry);
  }

  if (!single_task_ref.empty() && fs::exists(single_task_ref)) {
    std::ifstream in(single_task_ref);
    if (!in) {
      throw std::ios_base::failure("cannot read " + single_task_ref);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    try {
      const ParsedReport ref = parse_metric_report(buf.str());
      out.delta = delta_m(out.metrics, ref.record);
    } catch (const std::invalid_argument& e) {
      throw std::ios_base::failure("single-task ref " + single_task_ref +
                                   ": " + e.what());
    }
    out.has_delta = true;
  }

  out.report_text = loss_line("final", out.losses) + "\n" +
                    metric_report(out.metrics,
                                  out.has_delta ? &out.delta : nullptr);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::ios_base::failure("cannot create " + out_dir);
  write_text(fs::path(out_dir) / "report.txt", out.report_text);
  return out;
}

}  // namespace demt
