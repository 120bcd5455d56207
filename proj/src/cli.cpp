#include "demt/cli.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>
#include <vector>

#include "demt/checkpoint.hpp"
#include "demt/config.hpp"
#include "demt/data.hpp"
#include "demt/gradcheck.hpp"
#include "demt/runner.hpp"

namespace demt {
namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitVerification = 3;

constexpr double kGradTolerance = 1e-4;

struct Args {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string seed;  // raw flag text; validated through the config
  std::string ckpt_path;
  std::string single_task_ref;
};

void print_usage() {
  std::fputs(
      "usage: demt <command> [flags]\n"
      "commands:\n"
      "  gen        generate a synthetic dataset (data.* keys)\n"
      "  train      train a model on a generated dataset\n"
      "  eval       evaluate a checkpoint and write a metric report\n"
      "  gradcheck  finite-difference the whole op suite\n"
      "  inspect    describe a checkpoint file\n"
      "flags:\n"
      "  --config PATH         key = value configuration file\n"
      "  --set key=value       override one config key (repeatable)\n"
      "  --out DIR             output directory\n"
      "  --seed U64            master seed (overrides the seed key)\n"
      "  --ckpt PATH           checkpoint to evaluate / inspect / resume\n"
      "  --single-task-ref PATH  metric report with single-task baselines\n",
      stderr);
}

Args parse_args(int argc, const char* const* argv) {
  if (argc < 2) throw ConfigError("missing command");
  Args args;
  args.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    const std::string flag = argv[i];
    const auto value = [&]() -> std::string {
      if (i + 1 >= argc) throw ConfigError(flag + " needs a value");
      return argv[++i];
    };
    if (flag == "--config") {
      args.config_path = value();
    } else if (flag == "--set") {
      args.sets.push_back(value());
    } else if (flag == "--out") {
      args.out_dir = value();
    } else if (flag == "--seed") {
      args.seed = value();
    } else if (flag == "--ckpt") {
      args.ckpt_path = value();
    } else if (flag == "--single-task-ref") {
      args.single_task_ref = value();
    } else {
      throw ConfigError("unknown flag: " + flag);
    }
  }
  return args;
}

// Layering: defaults < checkpoint config < config file < --set < --seed.
RunConfig build_config(const Args& args, const Checkpoint* ckpt) {
  RunConfig config = default_config();
  if (ckpt) {
    apply_config_text(config, ckpt->config_text, "checkpoint config");
  }
  if (!args.config_path.empty()) {
    apply_config_file(config, args.config_path);
  }
  for (const std::string& s : args.sets) apply_override(config, s);
  if (!args.seed.empty()) {
    config.set("seed", args.seed);
    config.get_u64("seed");  // validate eagerly
  }
  derive_seeds(config);
  return config;
}

void write_resolved(const RunConfig& config, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::ios_base::failure("cannot create " + dir);
  const fs::path path = fs::path(dir) / "resolved_config.txt";
  std::ofstream out(path);
  if (!out || !(out << config.resolved_text()).flush()) {
    throw std::ios_base::failure("cannot write " + path.string());
  }
}

int parallel_width() {
  const char* env = std::getenv("DEMT_THREADS");
  if (!env || !*env) return 1;
  try {
    const int n = std::stoi(env);
    if (n < 1) throw std::invalid_argument(env);
    return n;
  } catch (const std::exception&) {
    throw ConfigError(std::string("DEMT_THREADS must be a positive "
                                  "integer, got: ") +
                      env);
  }
}

int cmd_gen(const Args& args) {
  RunConfig config = build_config(args, nullptr);
  if (!args.out_dir.empty()) config.set("data.dir", args.out_dir);
  const GenOutcome out = run_gen(config);
  write_resolved(config, out.dir);
  std::printf("wrote %lld samples %lldx%lld classes=%lld split=%s to %s\n",
              static_cast<long long>(out.manifest.count),
              static_cast<long long>(out.manifest.height),
              static_cast<long long>(out.manifest.width),
              static_cast<long long>(out.manifest.classes),
              out.manifest.split.c_str(), out.dir.c_str());
  return kExitOk;
}

int cmd_train(const Args& args) {
  Checkpoint resume;
  const bool resuming = !args.ckpt_path.empty();
  if (resuming) resume = load_checkpoint(args.ckpt_path);
  RunConfig config = build_config(args, resuming ? &resume : nullptr);
  const std::string out_dir = args.out_dir.empty() ? "run" : args.out_dir;
  write_resolved(config, out_dir);
  const TrainOutcome out =
      run_train(config, out_dir, resuming ? &resume : nullptr);
  for (const std::string& line : out.log_lines) {
    std::printf("%s\n", line.c_str());
  }
  std::printf("saved %s\n", out.final_checkpoint.c_str());
  return kExitOk;
}

int cmd_eval(const Args& args) {
  if (args.ckpt_path.empty()) throw ConfigError("eval needs --ckpt");
  const Checkpoint ckpt = load_checkpoint(args.ckpt_path);
  RunConfig config = build_config(args, &ckpt);
  const std::string out_dir = args.out_dir.empty() ? "run" : args.out_dir;
  write_resolved(config, out_dir);
  if (!args.single_task_ref.empty() && !fs::exists(args.single_task_ref)) {
    std::fprintf(stderr,
                 "single-task ref %s not found; delta_m omitted\n",
                 args.single_task_ref.c_str());
  }
  const EvalOutcome out =
      run_eval(config, ckpt, args.single_task_ref, out_dir);
  std::fputs(out.report_text.c_str(), stdout);
  return kExitOk;
}

int cmd_gradcheck(const Args& args) {
  RunConfig config = build_config(args, nullptr);
  if (!args.out_dir.empty()) write_resolved(config, args.out_dir);
  const uint64_t seed = config.get_u64("seed");
  const std::vector<GradCheckEntry> suite = standard_gradcheck_suite();

  // Entries are independent, so they can fan out over DEMT_THREADS workers;
  // each entry runs single-threaded and the report order stays fixed.
  std::vector<GradCheckResult> results(suite.size());
  const int width =
      std::min<int>(parallel_width(), static_cast<int>(suite.size()));
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  const auto worker = [&]() {
    try {
      for (size_t i = next.fetch_add(1); i < suite.size();
           i = next.fetch_add(1)) {
        results[i] = run_gradcheck_suite({suite[i]}, seed)[0];
      }
    } catch (...) {
      const std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  };
  if (width <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < width; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  bool all_ok = true;
  for (const GradCheckResult& r : results) {
    const bool ok = r.max_rel_err <= kGradTolerance;
    all_ok = all_ok && ok;
    std::printf("op=%s instances=%d worst_rel_err=%.3e limit=%.0e %s\n",
                r.op.c_str(), r.instances, r.max_rel_err, kGradTolerance,
                ok ? "pass" : "FAIL");
  }
  std::printf(all_ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return all_ok ? kExitOk : kExitVerification;
}

int cmd_inspect(const Args& args) {
  if (args.ckpt_path.empty()) throw ConfigError("inspect needs --ckpt");
  const Checkpoint ckpt = load_checkpoint(args.ckpt_path);
  std::printf("version = %u\nstep = %llu\ntensors = %zu\n", ckpt.version,
              static_cast<unsigned long long>(ckpt.step),
              ckpt.tensors.size());
  std::printf("config:\n");
  std::printf("%s", ckpt.config_text.c_str());
  std::printf("records:\n");
  for (const auto& [name, t] : ckpt.tensors) {
    std::printf("  %s shape=%s values=%lld\n", name.c_str(),
                shape_str(t.shape()).c_str(),
                static_cast<long long>(t.size()));
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  try {
    const Args args = parse_args(argc, argv);
    if (args.command == "gen") return cmd_gen(args);
    if (args.command == "train") return cmd_train(args);
    if (args.command == "eval") return cmd_eval(args);
    if (args.command == "gradcheck") return cmd_gradcheck(args);
    if (args.command == "inspect") return cmd_inspect(args);
    throw ConfigError("unknown command: " + args.command);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    print_usage();
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
}

}  // namespace demt
