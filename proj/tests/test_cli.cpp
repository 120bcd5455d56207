#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "demt/checkpoint.hpp"
#include "demt/config.hpp"
#include "demt/gradcheck.hpp"
#include "demt/metrics.hpp"
#include "demt/runner.hpp"
#include "demt/training.hpp"

using namespace demt;
namespace fs = std::filesystem;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

fs::path fresh_dir(const char* name) {
  fs::path dir = fs::path("cli_test_tmp") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

std::string fixture_path(const char* name) {
  return std::string(DEMT_SOURCE_DIR) + "/tests/fixtures/" + name;
}

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.tasks = {make_task_spec("semseg", TaskKind::semseg, 4, 1.0),
              make_task_spec("depth", TaskKind::depth, 1, 1.0)};
  mc.input_h = 32;
  mc.input_w = 32;
  mc.trunk_widths = {2, 4, 6, 8};
  mc.scales = {4, 8, 16, 32};
  mc.reduced_channels = 4;
  mc.mixer_depth = 1;
  mc.sampling_points = 9;
  mc.heads = 2;
  mc.mode = ModelMode::dm_ti_tq;
  mc.seed = 3;
  return mc;
}

// One taped SGD step on a random image / target pair.
void train_step(Model& m, SgdOptimizer& opt, uint64_t seed) {
  Rng rng(seed);
  Tensor image = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
  std::vector<double> labels(32 * 32);
  for (double& v : labels)
    v = rng.uniform() < 0.1 ? 255.0 : double(rng.uniform_int(4));
  Tensor semseg({1, 32, 32}, std::move(labels));
  Tensor depth = Tensor::uniform({1, 32, 32, 1}, rng, 0.5, 2.0);
  Tape tape;
  std::vector<Tensor> preds = model_forward(m, image, RunMode::train);
  std::vector<Tensor> losses = {task_loss(preds[0], semseg, TaskKind::semseg),
                                task_loss(preds[1], depth, TaskKind::depth)};
  Tensor total = total_loss(losses, {1.0, 1.0});
  tape.backward(total);
  opt.step();
}

}  // namespace

TEST_CASE("configuration defaults resolve and round trip through text") {
  RunConfig a = default_config();
  derive_seeds(a);
  const std::string text = a.resolved_text();

  // Every schema key appears exactly once, sorted.
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  CHECK(lines.size() == 27);
  CHECK(std::is_sorted(lines.begin(), lines.end()));

  RunConfig b = default_config();
  apply_config_text(b, text, "roundtrip");
  CHECK(b.values == a.values);
  CHECK(b.resolved_text() == text);

  CHECK(a.get_int("train.steps") == 200);
  CHECK(a.get_double("train.lr") == doctest::Approx(1e-3));
  CHECK(a.get_double("train.weight_decay") == doctest::Approx(5e-4));
  CHECK(a.get_int("data.count") == 16);
  CHECK(a.get("model.mode") == "dm+ti+tq");
  CHECK(a.get_int_list("model.widths") ==
        std::vector<int64_t>{8, 16, 24, 32});
  CHECK(a.get_name_list("model.tasks") ==
        std::vector<std::string>{"semseg", "depth", "normal"});
}

TEST_CASE("configuration rejects unknown keys and malformed values") {
  RunConfig c = default_config();
  CHECK_THROWS_AS(c.set("bogus.key", "1"), ConfigError);
  CHECK_THROWS_AS(c.get("bogus.key"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "bogus.key=3"), ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "train.steps 50\n", "bad"),
                  ConfigError);
  CHECK_THROWS_AS(apply_config_text(c, "mystery.key = 1\n", "bad"),
                  ConfigError);

  // Malformed text errors carry the source location.
  try {
    apply_config_text(c, "seed = 1\nbroken line\n", "myfile");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("myfile") != std::string::npos);
    CHECK(what.find("2") != std::string::npos);
  }

  c.set("train.steps", "abc");
  CHECK_THROWS_AS(c.get_int("train.steps"), ConfigError);
  c.set("train.lr", "fast");
  CHECK_THROWS_AS(c.get_double("train.lr"), ConfigError);
  c.set("model.widths", "1,2,x,4");
  CHECK_THROWS_AS(c.get_int_list("model.widths"), ConfigError);
  c.set("data.seed", "-5");
  CHECK_THROWS_AS(c.get_u64("data.seed"), ConfigError);

  // Comments and blank lines are fine.
  RunConfig d = default_config();
  apply_config_text(d, "# comment\n\ntrain.steps = 77\n", "ok");
  CHECK(d.get_int("train.steps") == 77);
}

TEST_CASE("seed derivation is deterministic and keeps explicit values") {
  RunConfig a = default_config();
  a.set("seed", "5");
  derive_seeds(a);
  RunConfig b = default_config();
  b.set("seed", "5");
  derive_seeds(b);
  CHECK(a.get_u64("data.seed") == b.get_u64("data.seed"));
  CHECK(a.get_u64("model.seed") == b.get_u64("model.seed"));
  CHECK(a.get_u64("train.shuffle_seed") == b.get_u64("train.shuffle_seed"));

  // The three derived streams are distinct from each other and from the
  // master seed.
  std::set<uint64_t> seen = {a.get_u64("seed"), a.get_u64("data.seed"),
                             a.get_u64("model.seed"),
                             a.get_u64("train.shuffle_seed")};
  CHECK(seen.size() == 4);

  RunConfig c = default_config();
  c.set("seed", "6");
  derive_seeds(c);
  CHECK(c.get_u64("data.seed") != a.get_u64("data.seed"));

  // An explicitly set stream seed survives derivation.
  RunConfig d = default_config();
  d.set("seed", "5");
  d.set("data.seed", "42");
  derive_seeds(d);
  CHECK(d.get_u64("data.seed") == 42);
  CHECK(d.get_u64("model.seed") == a.get_u64("model.seed"));
}

TEST_CASE("checkpoint files survive a bitwise round trip") {
  const fs::path dir = fresh_dir("roundtrip");
  Rng rng(11);
  Checkpoint ckpt;
  ckpt.step = 7;
  ckpt.config_text = "seed = 1\ntrain.steps = 9\n";
  ckpt.tensors.emplace_back("weight", Tensor::uniform({2, 3}, rng, -1.0, 1.0));
  ckpt.tensors.emplace_back("bias", Tensor::uniform({4}, rng, -1.0, 1.0));

  const std::string path = (dir / "a.dmtc").string();
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.version == kCheckpointVersion);
  CHECK(back.step == ckpt.step);
  CHECK(back.config_text == ckpt.config_text);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "weight");
  CHECK(back.tensors[1].first == "bias");
  CHECK(same_values(back.tensors[0].second, ckpt.tensors[0].second));
  CHECK(same_values(back.tensors[1].second, ckpt.tensors[1].second));
  CHECK(back.find("bias") != nullptr);
  CHECK(back.find("nope") == nullptr);

  // Writing the same snapshot twice produces identical bytes.
  const std::string path2 = (dir / "b.dmtc").string();
  save_checkpoint(path2, ckpt);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("checkpoint loader reports corruption precisely") {
  const fs::path dir = fresh_dir("corrupt");
  Rng rng(12);
  Checkpoint ckpt;
  ckpt.config_text = "seed = 1\n";
  ckpt.tensors.emplace_back("w", Tensor::uniform({3}, rng, -1.0, 1.0));
  const std::string path = (dir / "c.dmtc").string();
  save_checkpoint(path, ckpt);
  const std::string good = read_file(path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    try {
      load_checkpoint(path);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("not a checkpoint") !=
            std::string::npos);
    }
  }
  SUBCASE("unsupported version names both versions") {
    std::string bad = good;
    bad[4] = 2;  // little-endian u32 version right after the magic
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    try {
      load_checkpoint(path);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      const std::string what = e.what();
      CHECK(what.find("version 2") != std::string::npos);
      CHECK(what.find("expected 1") != std::string::npos);
    }
  }
  SUBCASE("truncation") {
    std::string bad = good.substr(0, good.size() - 5);
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    try {
      load_checkpoint(path);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    std::string bad = good + "xx";
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    try {
      load_checkpoint(path);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("trailing") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint((dir / "absent.dmtc").string()),
                    CheckpointError);
  }
}

TEST_CASE("model snapshot restores bitwise into a fresh model") {
  const ModelConfig mc = tiny_model_config();
  Model trained = model_init(mc);
  std::vector<Tensor> params;
  for (auto& [name, t] : trained.store.params) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  SgdOptimizer opt(params, 0.01, 5e-4, 0.9);
  train_step(trained, opt, 21);
  train_step(trained, opt, 22);

  const Checkpoint snap = snapshot_checkpoint(trained, opt, 2, "cfg");
  CHECK(snap.step == 2);
  CHECK(snap.tensors.size() ==
        trained.store.params.size() * 2 + trained.store.state.size());

  // The snapshot owns copies: training further must not change it.
  const Tensor* before = snap.find(trained.store.params[0].first);
  REQUIRE(before != nullptr);
  const double frozen = before->data()[0];
  train_step(trained, opt, 23);
  CHECK(snap.find(trained.store.params[0].first)->data()[0] == frozen);

  // Same seed, fresh model: initial params differ from the trained ones,
  // restoring makes every tensor (params, state, velocities) bitwise equal.
  Model fresh = model_init(mc);
  std::vector<Tensor> fresh_params;
  for (auto& [name, t] : fresh.store.params) fresh_params.push_back(t);
  SgdOptimizer fresh_opt(fresh_params, 0.01, 5e-4, 0.9);
  const Checkpoint snap3 = snapshot_checkpoint(trained, opt, 3, "cfg");
  bool any_diff = false;
  for (size_t i = 0; i < fresh.store.params.size(); ++i) {
    if (!same_values(fresh.store.params[i].second,
                     trained.store.params[i].second))
      any_diff = true;
  }
  CHECK(any_diff);
  restore_checkpoint(snap3, fresh, fresh_opt);
  for (size_t i = 0; i < fresh.store.params.size(); ++i) {
    CHECK(same_values(fresh.store.params[i].second,
                      trained.store.params[i].second));
  }
  for (size_t i = 0; i < fresh.store.state.size(); ++i) {
    CHECK(same_values(fresh.store.state[i].second,
                      trained.store.state[i].second));
  }
  for (size_t i = 0; i < fresh_opt.velocity.size(); ++i) {
    CHECK(same_values(fresh_opt.velocity[i], opt.velocity[i]));
  }

  // Identical forward pass after restore.
  Rng rng(31);
  Tensor image = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
  NoGrad guard;
  const std::vector<Tensor> a = model_forward(trained, image, RunMode::eval);
  const std::vector<Tensor> b = model_forward(fresh, image, RunMode::eval);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(same_values(a[i], b[i]));
}

TEST_CASE("restore rejects architecture mismatches") {
  Model m = model_init(tiny_model_config());
  std::vector<Tensor> params;
  for (auto& [name, t] : m.store.params) params.push_back(t);
  SgdOptimizer opt(params, 0.01, 5e-4, 0.9);
  Checkpoint snap = snapshot_checkpoint(m, opt, 1, "cfg");

  SUBCASE("missing record") {
    snap.tensors.pop_back();
    CHECK_THROWS_AS(restore_checkpoint(snap, m, opt), CheckpointError);
  }
  SUBCASE("different widths") {
    ModelConfig other = tiny_model_config();
    other.trunk_widths = {3, 4, 6, 8};
    Model m2 = model_init(other);
    std::vector<Tensor> p2;
    for (auto& [name, t] : m2.store.params) p2.push_back(t);
    SgdOptimizer opt2(p2, 0.01, 5e-4, 0.9);
    CHECK_THROWS_AS(restore_checkpoint(snap, m2, opt2), CheckpointError);
  }
}

TEST_CASE("standard gradient suite covers every differentiable block") {
  const std::vector<GradCheckEntry> suite = standard_gradcheck_suite();
  std::set<std::string> names;
  for (const GradCheckEntry& e : suite) {
    CHECK(names.insert(e.op).second);  // unique
    CHECK(e.instances >= 2);
    CHECK(e.eps > 0.0);
  }
  for (const char* required :
       {"matmul", "softmax", "layer_norm", "batch_norm", "gelu", "conv2d",
        "bilinear_sample", "channel_mix", "predict_offsets", "spatial_deform",
        "deformable_mixer", "attention_apply", "mhsa", "task_interaction",
        "task_query", "task_decoder", "semseg_loss", "depth_l1_loss",
        "normal_cosine_loss", "model"}) {
    CHECK_MESSAGE(names.count(required) == 1, required);
  }

  // Seed moves the sampled instances but never the verdict.
  std::vector<GradCheckEntry> cheap;
  for (const GradCheckEntry& e : suite) {
    if (e.op == "matmul" || e.op == "linear") cheap.push_back(e);
  }
  REQUIRE(cheap.size() == 2);
  const std::vector<GradCheckResult> r1 = run_gradcheck_suite(cheap, 1);
  const std::vector<GradCheckResult> r2 = run_gradcheck_suite(cheap, 1);
  const std::vector<GradCheckResult> r9 = run_gradcheck_suite(cheap, 9);
  for (size_t i = 0; i < cheap.size(); ++i) {
    CHECK(r1[i].max_rel_err == r2[i].max_rel_err);  // deterministic
    CHECK(r1[i].max_rel_err <= 1e-4);
    CHECK(r9[i].max_rel_err <= 1e-4);
  }
  CHECK((r1[0].max_rel_err != r9[0].max_rel_err ||
         r1[1].max_rel_err != r9[1].max_rel_err));
}

namespace {

// Identity copy whose recorded backward flips the gradient sign; stands in
// for a typical hand-derived-gradient bug.
Tensor sign_bugged_copy(const Tensor& x) {
  Tensor out(x.shape(),
             std::vector<double>(x.data().begin(), x.data().end()));
  if (Tape* tape = Tape::active()) {
    if (x.requires_grad()) {
      out.set_requires_grad(true);
      Tensor xin = x;
      tape->record([xin, out]() mutable {
        auto g = out.grad();
        auto gx = xin.mutable_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
      });
    }
  }
  return out;
}

GradScenario sampling_scenario(uint64_t seed, bool bugged) {
  Rng rng(seed);
  Tensor x = Tensor::uniform({1, 3, 3, 2}, rng, -1.0, 1.0);
  std::vector<double> base(3 * 3 * 1 * 2);
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) {
      const double sign_y = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double sign_x = rng.uniform() < 0.5 ? -1.0 : 1.0;
      base[(i * 3 + j) * 2 + 0] = i + sign_y * rng.uniform(0.15, 0.35);
      base[(i * 3 + j) * 2 + 1] = j + sign_x * rng.uniform(0.15, 0.35);
    }
  }
  Tensor coords({1, 3, 3, 1, 2}, std::move(base));
  GradScenario sc;
  sc.forward = [x, coords, bugged]() {
    Tensor c = bugged ? sign_bugged_copy(coords) : coords;
    return sum(bilinear_sample(x, c));
  };
  sc.wrt = {coords};
  return sc;
}

}  // namespace

TEST_CASE("finite differences catch an injected gradient sign bug") {
  // Control: the honest scenario verifies cleanly.
  CHECK(check_gradients(sampling_scenario(40, false), 1e-6) < 1e-6);
  // A sign flip on the sampling-coordinate gradient is far outside any
  // tolerance the suite would accept.
  CHECK(check_gradients(sampling_scenario(40, true), 1e-6) > 1e-2);
}

TEST_CASE("published single-task fixtures give the known deltas") {
  const ParsedReport singles =
      parse_metric_report(read_file(fixture_path("singletask_ref.txt")));
  const ParsedReport baseline =
      parse_metric_report(read_file(fixture_path("multitask_baseline.txt")));
  const ParsedReport full =
      parse_metric_report(read_file(fixture_path("multitask_full.txt")));
  REQUIRE(singles.record.entries.size() == 4);
  REQUIRE(baseline.record.entries.size() == 4);
  REQUIRE(full.record.entries.size() == 4);
  CHECK(!singles.has_delta_m);

  const double base_delta = delta_m(baseline.record, singles.record);
  CHECK(base_delta < 0.0);
  CHECK(std::abs(base_delta - (-1.89)) < 0.01);

  // The strongest configuration improves on the single-task references;
  // recomputing its average relative gain from the per-metric values lands
  // at +2.44, not the +2.37 the original summary table printed.
  const double full_delta = delta_m(full.record, singles.record);
  CHECK(full_delta > 0.0);
  CHECK(std::abs(full_delta - 2.4387) < 0.01);

  // A reference of zero is meaningless for relative change.
  MetricRecord zero = singles.record;
  zero.entries[0].value = 0.0;
  CHECK_THROWS_AS(delta_m(baseline.record, zero), std::invalid_argument);
}
