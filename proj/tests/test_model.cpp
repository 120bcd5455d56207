#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "demt/gradcheck.hpp"
#include "demt/model.hpp"

using namespace demt;

namespace {

Tensor loss_of(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.tasks = {make_task_spec("semseg", TaskKind::semseg, 5, 1.0),
               make_task_spec("depth", TaskKind::depth, 1, 1.0),
               make_task_spec("normal", TaskKind::normal, 3, 10.0)};
  cfg.input_h = 64;
  cfg.input_w = 64;
  cfg.trunk_widths = {4, 8, 12, 16};
  cfg.reduced_channels = 8;
  cfg.heads = 2;
  cfg.seed = 7;
  return cfg;
}

// keeps every predicted sampling offset strictly fractional so gradient
// probes stay inside one bilinear interpolation cell
void nudge_offsets(Model& m, Rng& rng) {
  for (DeformableMixerParams& enc : m.encoders)
    for (MixerBlockParams& b : enc.blocks) {
      Tensor w = b.offset_conv.weight;
      for (double& v : w.mutable_data()) v = rng.uniform(-0.005, 0.005);
      for (double& v : b.offset_conv.bias.mutable_data()) v = 0.5;
    }
}

}  // namespace

TEST_CASE("config channel arithmetic") {
  ModelConfig cfg = small_config();
  cfg.trunk_widths = {8, 16, 24, 32};
  cfg.reduced_channels = 0;
  CHECK(cfg.aggregated_channels() == 80);
  CHECK(cfg.reduced() == 20);
  cfg.scales = {4, 8};
  CHECK(cfg.aggregated_channels() == 24);
  CHECK(cfg.reduced() == 6);
  cfg.reduced_channels = 8;
  CHECK(cfg.reduced() == 8);
  cfg.heads = 2;
  cfg.validate();
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(make_task_spec("s", TaskKind::semseg, 1, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_task_spec("d", TaskKind::depth, 2, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_task_spec("n", TaskKind::normal, 1, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(task_kind_from_string("edges"), std::invalid_argument);
  CHECK(task_kind_from_string("depth") == TaskKind::depth);
  CHECK(model_mode_from_string("dm+ti+tq") == ModelMode::dm_ti_tq);
  CHECK(model_mode_name(ModelMode::dm_ti) == "dm+ti");
  CHECK_THROWS_AS(model_mode_from_string("full"), std::invalid_argument);

  ModelConfig ok = small_config();
  ok.validate();

  ModelConfig c = ok;
  c.input_h = 48;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.scales = {8, 16};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.scales = {};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.scales = {4, 8, 8};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.scales = {4, 6};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.sampling_points = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.heads = 3;  // does not divide C' = 8
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.tasks.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.tasks.push_back(c.tasks[0]);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.tasks[0].loss_weight = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ok;
  c.mixer_depth = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("trunk produces the four pyramid stages") {
  Model m = model_init(small_config());
  Rng rng(70);
  Tensor image = Tensor::uniform({2, 64, 64, 3}, rng, 0.0, 1.0);
  std::array<Tensor, 4> stages =
      trunk_forward(image, m.trunk, RunMode::train);
  CHECK(stages[0].shape() == Shape{2, 16, 16, 4});
  CHECK(stages[1].shape() == Shape{2, 8, 8, 8});
  CHECK(stages[2].shape() == Shape{2, 4, 4, 12});
  CHECK(stages[3].shape() == Shape{2, 2, 2, 16});

  CHECK_THROWS_AS(trunk_forward(Tensor::zeros({1, 48, 64, 3}), m.trunk,
                                RunMode::train),
                  std::invalid_argument);
  CHECK_THROWS_AS(trunk_forward(Tensor::zeros({1, 64, 64, 1}), m.trunk,
                                RunMode::train),
                  std::invalid_argument);

  // gradient reaches the very first convolution
  m.trunk.conv1a.weight.set_requires_grad(true);
  m.trunk.conv1a.weight.zero_grad();
  {
    Tape tape;
    Tensor w = Tensor::uniform({2, 2, 2, 16}, rng, -1.0, 1.0);
    Tensor loss =
        loss_of(trunk_forward(image, m.trunk, RunMode::train)[3], w);
    tape.backward(loss);
  }
  bool any = false;
  for (double g : m.trunk.conv1a.weight.grad())
    if (g != 0.0) any = true;
  CHECK(any);
}

TEST_CASE("feature aggregation concatenates upsampled stages") {
  Model m = model_init(small_config());
  Rng rng(71);
  Tensor image = Tensor::uniform({2, 64, 64, 3}, rng, 0.0, 1.0);
  std::array<Tensor, 4> stages =
      trunk_forward(image, m.trunk, RunMode::train);

  Tensor all = aggregate_features(stages, {4, 8, 16, 32});
  CHECK(all.shape() == Shape{2, 16, 16, 40});

  Tensor two = aggregate_features(stages, {4, 8});
  CHECK(two.shape() == Shape{2, 16, 16, 12});
  // stride-4 block sits first and is passed through untouched
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 16; ++i)
      for (int64_t j = 0; j < 16; ++j)
        for (int64_t c = 0; c < 4; ++c)
          CHECK(two.at({b, i, j, c}) == stages[0].at({b, i, j, c}));

  Tensor only4 = aggregate_features(stages, {4});
  REQUIRE(only4.shape() == stages[0].shape());
  for (int64_t i = 0; i < only4.size(); ++i)
    CHECK(only4.data()[i] == stages[0].data()[i]);

  CHECK_THROWS_AS(aggregate_features(stages, {}), std::invalid_argument);
}

TEST_CASE("task heads project and upsample") {
  Rng rng(72);
  Tensor feat = Tensor::uniform({2, 16, 16, 8}, rng, -1.0, 1.0);

  TaskSpec seg = make_task_spec("semseg", TaskKind::semseg, 5, 1.0);
  LinearParams seg_head = linear_init(8, 5, rng);
  CHECK(head_forward(feat, seg, seg_head).shape() == Shape{2, 64, 64, 5});

  TaskSpec nrm = make_task_spec("normal", TaskKind::normal, 3, 1.0);
  LinearParams nrm_head = linear_init(8, 3, rng);
  Tensor n = head_forward(feat, nrm, nrm_head);
  REQUIRE(n.shape() == Shape{2, 64, 64, 3});
  for (int64_t p = 0; p < n.size() / 3; ++p) {
    const double* v = n.data().data() + p * 3;
    const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    CHECK(std::abs(norm - 1.0) <= 1e-6);
  }

  for (TaskSpec* spec : {&seg, &nrm}) {
    LinearParams head = linear_init(6, spec->out_channels, rng);
    Tensor small = Tensor::uniform({1, 4, 4, 6}, rng, -1.0, 1.0);
    Tensor lw = Tensor::uniform({1, 16, 16, spec->out_channels}, rng, -1.0,
                                1.0);
    CHECK(check_gradients(
              GradScenario{
                  [&] { return loss_of(head_forward(small, *spec, head), lw); },
                  {small, head.weight, head.bias}},
              1e-5) <= 1e-5);
  }
}

TEST_CASE("model forward emits one full-resolution prediction per task") {
  Model m = model_init(small_config());
  Rng rng(73);
  Tensor image = Tensor::uniform({2, 64, 64, 3}, rng, 0.0, 1.0);
  std::vector<Tensor> out = model_forward(m, image, RunMode::train);
  REQUIRE(out.size() == 3);
  CHECK(out[0].shape() == Shape{2, 64, 64, 5});
  CHECK(out[1].shape() == Shape{2, 64, 64, 1});
  CHECK(out[2].shape() == Shape{2, 64, 64, 3});
  for (const Tensor& o : out)
    for (double v : o.data()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(model_forward(m, Tensor::zeros({1, 32, 32, 3}),
                                RunMode::train),
                  std::invalid_argument);
}

TEST_CASE("eval forward is deterministic") {
  Model m = model_init(small_config());
  Rng rng(74);
  Tensor image = Tensor::uniform({1, 64, 64, 3}, rng, 0.0, 1.0);
  // settle the norm running state with one training pass first
  model_forward(m, image, RunMode::train);
  std::vector<Tensor> a = model_forward(m, image, RunMode::eval);
  std::vector<Tensor> b = model_forward(m, image, RunMode::eval);
  for (size_t t = 0; t < a.size(); ++t)
    for (int64_t i = 0; i < a[t].size(); ++i)
      CHECK(a[t].data()[i] == b[t].data()[i]);
}

TEST_CASE("modes gate the decoder and encoder branching") {
  for (ModelMode mode : {ModelMode::baseline, ModelMode::dm,
                         ModelMode::dm_ti, ModelMode::dm_ti_tq}) {
    ModelConfig cfg = small_config();
    cfg.mode = mode;
    Model m = model_init(cfg);
    CHECK(m.encoders.size() ==
          (mode == ModelMode::baseline ? 1u : cfg.tasks.size()));

    bool has_interaction = false, has_query = false, has_shared = false;
    for (const auto& [name, t] : m.store.params) {
      if (name.starts_with("decoder.interaction.")) has_interaction = true;
      if (name.starts_with("decoder.query.")) has_query = true;
      if (name.starts_with("encoder.shared.")) has_shared = true;
    }
    CHECK(has_interaction ==
          (mode == ModelMode::dm_ti || mode == ModelMode::dm_ti_tq));
    CHECK(has_query == (mode == ModelMode::dm_ti_tq));
    CHECK(has_shared == (mode == ModelMode::baseline));

    Rng rng(75);
    Tensor image = Tensor::uniform({1, 64, 64, 3}, rng, 0.0, 1.0);
    std::vector<Tensor> out = model_forward(m, image, RunMode::train);
    REQUIRE(out.size() == 3);
    CHECK(out[0].shape() == Shape{1, 64, 64, 5});
  }
}

TEST_CASE("every parameter belongs to exactly one group") {
  for (ModelMode mode : {ModelMode::baseline, ModelMode::dm,
                         ModelMode::dm_ti, ModelMode::dm_ti_tq}) {
    ModelConfig cfg = small_config();
    cfg.mode = mode;
    Model m = model_init(cfg);
    std::set<std::string> seen;
    for (const auto& [name, t] : m.store.params) {
      CHECK(seen.insert(name).second);
      const bool grouped =
          name.starts_with("trunk.") || name.starts_with("encoder.") ||
          name.starts_with("decoder.") || name.starts_with("head.");
      CHECK(grouped);
    }
    for (const auto& [name, t] : m.store.state)
      CHECK(!seen.contains(name));
    CHECK(m.store.param_scalars() > 0);
    CHECK(m.store.find("trunk.conv1a.weight") != nullptr);
    CHECK(m.store.find("no.such.tensor") == nullptr);
  }
}

TEST_CASE("mixer depth doubles block parameters and deform calls") {
  ModelConfig c1 = small_config();
  c1.tasks = {make_task_spec("semseg", TaskKind::semseg, 5, 1.0),
              make_task_spec("depth", TaskKind::depth, 1, 1.0)};
  ModelConfig c2 = c1;
  c2.mixer_depth = 2;

  Model m1 = model_init(c1);
  Model m2 = model_init(c2);
  int64_t n1 = 0, n2 = 0;
  for (const auto& [name, t] : m1.store.params)
    if (name.find(".block") != std::string::npos) n1 += t.size();
  for (const auto& [name, t] : m2.store.params)
    if (name.find(".block") != std::string::npos) n2 += t.size();
  CHECK(n1 > 0);
  CHECK(n2 == 2 * n1);

  Rng rng(76);
  Tensor image = Tensor::uniform({1, 64, 64, 3}, rng, 0.0, 1.0);
  reset_spatial_deform_call_count();
  model_forward(m2, image, RunMode::train);
  CHECK(spatial_deform_call_count() == 4);  // 2 tasks x depth 2
  reset_spatial_deform_call_count();
  model_forward(m1, image, RunMode::train);
  CHECK(spatial_deform_call_count() == 2);  // 2 tasks x depth 1
  reset_spatial_deform_call_count();
}

TEST_CASE("single-task model degenerates cleanly") {
  ModelConfig cfg = small_config();
  cfg.tasks = {make_task_spec("depth", TaskKind::depth, 1, 1.0)};
  Model m = model_init(cfg);
  Rng rng(77);
  Tensor image = Tensor::uniform({1, 64, 64, 3}, rng, 0.0, 1.0);
  std::vector<Tensor> out = model_forward(m, image, RunMode::train);
  REQUIRE(out.size() == 1);
  CHECK(out[0].shape() == Shape{1, 64, 64, 1});
}

TEST_CASE("end-to-end gradients across a sampled parameter subset") {
  ModelConfig cfg;
  cfg.tasks = {make_task_spec("semseg", TaskKind::semseg, 3, 1.0),
               make_task_spec("depth", TaskKind::depth, 1, 1.0)};
  cfg.input_h = 32;
  cfg.input_w = 32;
  cfg.trunk_widths = {2, 4, 6, 8};
  cfg.reduced_channels = 4;
  cfg.heads = 2;
  cfg.seed = 11;
  Model m = model_init(cfg);
  Rng rng(78);
  nudge_offsets(m, rng);

  Tensor image = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
  Tensor w0 = Tensor::uniform({1, 32, 32, 3}, rng, -1.0, 1.0);
  Tensor w1 = Tensor::uniform({1, 32, 32, 1}, rng, -1.0, 1.0);
  std::vector<Tensor> wrt;
  for (const auto& [name, t] : m.store.params) wrt.push_back(t);
  const double worst = check_gradients(
      GradScenario{
          [&] {
            std::vector<Tensor> out =
                model_forward(m, image, RunMode::train);
            return add(loss_of(out[0], w0), loss_of(out[1], w1));
          },
          std::move(wrt)},
      // The wide query/key init gives the attention softmax O(1) logit
      // spread, so central differences at eps 1e-5 pick up visible
      // truncation error through this full-model path; eps 1e-6 is still
      // far above the fp64 roundoff floor.
      1e-6, 5, 123);
  CAPTURE(worst);
  CHECK(worst <= 1e-4);
}
