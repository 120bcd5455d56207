#include "demt/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace demt {

namespace {

constexpr std::array<int64_t, 4> kStrides = {4, 8, 16, 32};

void register_linear(ParamStore& s, const std::string& prefix,
                     const LinearParams& p) {
  s.add_param(prefix + ".weight", p.weight);
  if (p.bias.defined()) s.add_param(prefix + ".bias", p.bias);
}

void register_conv(ParamStore& s, const std::string& prefix,
                   const Conv2dParams& p) {
  s.add_param(prefix + ".weight", p.weight);
  if (p.bias.defined()) s.add_param(prefix + ".bias", p.bias);
}

void register_norm(ParamStore& s, const std::string& prefix,
                   const NormParams& p) {
  s.add_param(prefix + ".gamma", p.gamma);
  s.add_param(prefix + ".beta", p.beta);
  if (p.running_mean.defined()) {
    s.add_state(prefix + ".running_mean", p.running_mean);
    s.add_state(prefix + ".running_var", p.running_var);
  }
}

void register_attention(ParamStore& s, const std::string& prefix,
                        const AttentionParams& p) {
  register_linear(s, prefix + ".query", p.query);
  register_linear(s, prefix + ".key", p.key);
  register_linear(s, prefix + ".value", p.value);
  register_linear(s, prefix + ".out", p.out);
}

void register_smlp(ParamStore& s, const std::string& prefix,
                   const SmlpParams& p) {
  register_linear(s, prefix + ".lin", p.lin);
  register_norm(s, prefix + ".norm", p.norm);
}

void register_encoder(ParamStore& s, const std::string& prefix,
                      const DeformableMixerParams& p) {
  register_norm(s, prefix + ".reduce_ln", p.reduce_ln);
  register_linear(s, prefix + ".reduce", p.reduce);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string bp = prefix + ".block" + std::to_string(i);
    register_linear(s, bp + ".mix", p.blocks[i].mix);
    register_norm(s, bp + ".mix_bn", p.blocks[i].mix_bn);
    register_conv(s, bp + ".offset_conv", p.blocks[i].offset_conv);
    s.add_param(bp + ".deform_weight", p.blocks[i].deform_weight);
    register_norm(s, bp + ".deform_bn", p.blocks[i].deform_bn);
  }
}

}  // namespace

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "semseg") return TaskKind::semseg;
  if (s == "depth") return TaskKind::depth;
  if (s == "normal") return TaskKind::normal;
  throw std::invalid_argument("unknown task kind: " + s);
}

std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::semseg: return "semseg";
    case TaskKind::depth: return "depth";
    case TaskKind::normal: return "normal";
  }
  throw std::logic_error("bad task kind");
}

TaskSpec make_task_spec(const std::string& name, TaskKind kind,
                        int64_t out_channels, double loss_weight) {
  TaskSpec t;
  t.name = name;
  t.kind = kind;
  t.out_channels = out_channels;
  t.loss_weight = loss_weight;
  t.higher_better = kind == TaskKind::semseg;
  if (kind == TaskKind::depth && out_channels != 1)
    throw std::invalid_argument("depth task predicts a single channel");
  if (kind == TaskKind::normal && out_channels != 3)
    throw std::invalid_argument("normal task predicts three channels");
  if (kind == TaskKind::semseg && out_channels < 2)
    throw std::invalid_argument("semseg task needs at least two classes");
  return t;
}

ModelMode model_mode_from_string(const std::string& s) {
  if (s == "baseline") return ModelMode::baseline;
  if (s == "dm") return ModelMode::dm;
  if (s == "dm+ti") return ModelMode::dm_ti;
  if (s == "dm+ti+tq") return ModelMode::dm_ti_tq;
  throw std::invalid_argument("unknown model mode: " + s);
}

std::string model_mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::baseline: return "baseline";
    case ModelMode::dm: return "dm";
    case ModelMode::dm_ti: return "dm+ti";
    case ModelMode::dm_ti_tq: return "dm+ti+tq";
  }
  throw std::logic_error("bad model mode");
}

int64_t ModelConfig::aggregated_channels() const {
  int64_t c = 0;
  for (size_t i = 0; i < kStrides.size(); ++i)
    if (std::count(scales.begin(), scales.end(), kStrides[i]))
      c += trunk_widths[i];
  return c;
}

int64_t ModelConfig::reduced() const {
  return reduced_channels > 0 ? reduced_channels
                              : aggregated_channels() / 4;
}

void ModelConfig::validate() const {
  if (tasks.empty()) throw std::invalid_argument("config: no tasks");
  for (const TaskSpec& t : tasks) {
    if (t.name.empty()) throw std::invalid_argument("config: unnamed task");
    if (t.out_channels < 1)
      throw std::invalid_argument("config: task " + t.name +
                                  " has no output channels");
    if (!(t.loss_weight > 0.0))
      throw std::invalid_argument("config: task " + t.name +
                                  " needs a positive loss weight");
    int same = 0;
    for (const TaskSpec& o : tasks)
      if (o.name == t.name) ++same;
    if (same != 1)
      throw std::invalid_argument("config: duplicate task name " + t.name);
  }
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 ||
      input_w % 32 != 0)
    throw std::invalid_argument(
        "config: input extents must be positive multiples of 32");
  for (int64_t w : trunk_widths)
    if (w < 1) throw std::invalid_argument("config: trunk width < 1");
  if (scales.empty())
    throw std::invalid_argument("config: no feature scales selected");
  for (int64_t s : scales) {
    if (!std::count(kStrides.begin(), kStrides.end(), s))
      throw std::invalid_argument("config: unknown feature stride " +
                                  std::to_string(s));
    if (std::count(scales.begin(), scales.end(), s) != 1)
      throw std::invalid_argument("config: duplicate feature stride " +
                                  std::to_string(s));
  }
  if (!std::count(scales.begin(), scales.end(), 4))
    throw std::invalid_argument(
        "config: the stride-4 scale is required (it sets the decoder grid)");
  if (sampling_points != 1 && sampling_points != 9)
    throw std::invalid_argument("config: sampling points must be 1 or 9");
  if (mixer_depth < 1)
    throw std::invalid_argument("config: mixer depth must be >= 1");
  const int64_t cr = reduced();
  if (cr < 1)
    throw std::invalid_argument("config: reduced channel count came out " +
                                std::to_string(cr));
  if (heads < 1 || cr % heads != 0)
    throw std::invalid_argument(
        "config: heads (" + std::to_string(heads) +
        ") must divide the reduced channels (" + std::to_string(cr) + ")");
}

void ParamStore::add_param(const std::string& name, const Tensor& t) {
  params.emplace_back(name, t);
}

void ParamStore::add_state(const std::string& name, const Tensor& t) {
  state.emplace_back(name, t);
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return &t;
  for (const auto& [n, t] : state)
    if (n == name) return &t;
  return nullptr;
}

int64_t ParamStore::param_scalars() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

Model model_init(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;

  // Every component draws from its own derived stream, in an order that does
  // not depend on the mode or task set. Structural variants of one
  // configuration (the decoder ablation modes, task subsets) therefore share
  // bitwise-identical parameters for the components they have in common, so
  // comparing them measures the block under study rather than init luck.
  Rng master(config.seed);
  Rng trunk_rng(master.next_u64());
  const uint64_t encoder_base = master.next_u64();
  Rng decoder_rng(master.next_u64());
  const uint64_t head_base = master.next_u64();

  const std::array<int64_t, 4>& w = config.trunk_widths;
  m.trunk.conv1a = conv2d_init(3, w[0], 3, trunk_rng);
  m.trunk.bn1a = batch_norm_init(w[0]);
  m.trunk.conv1b = conv2d_init(w[0], w[0], 3, trunk_rng);
  m.trunk.bn1b = batch_norm_init(w[0]);
  for (int i = 0; i < 3; ++i) {
    m.trunk.stage_conv[i] = conv2d_init(w[i], w[i + 1], 3, trunk_rng);
    m.trunk.stage_bn[i] = batch_norm_init(w[i + 1]);
  }

  const int64_t c = config.aggregated_channels();
  const int64_t cr = config.reduced();
  const int64_t branches =
      config.mode == ModelMode::baseline ? 1 : config.tasks.size();
  for (int64_t e = 0; e < branches; ++e) {
    Rng encoder_rng(encoder_base + static_cast<uint64_t>(e));
    m.encoders.push_back(deformable_mixer_init(
        c, cr, config.mixer_depth, config.sampling_points, encoder_rng));
  }

  if (config.mode == ModelMode::dm_ti)
    m.decoder.interaction =
        task_interaction_init(cr, config.heads, decoder_rng);
  else if (config.mode == ModelMode::dm_ti_tq)
    m.decoder = task_decoder_init(cr, config.heads, decoder_rng);

  for (size_t t = 0; t < config.tasks.size(); ++t) {
    Rng head_rng(head_base + static_cast<uint64_t>(t));
    m.heads.push_back(
        linear_init(cr, config.tasks[t].out_channels, head_rng));
  }

  ParamStore& s = m.store;
  register_conv(s, "trunk.conv1a", m.trunk.conv1a);
  register_norm(s, "trunk.bn1a", m.trunk.bn1a);
  register_conv(s, "trunk.conv1b", m.trunk.conv1b);
  register_norm(s, "trunk.bn1b", m.trunk.bn1b);
  for (int i = 0; i < 3; ++i) {
    const std::string sp = "trunk.stage" + std::to_string(i + 2);
    register_conv(s, sp + ".conv", m.trunk.stage_conv[i]);
    register_norm(s, sp + ".bn", m.trunk.stage_bn[i]);
  }
  for (int64_t e = 0; e < branches; ++e) {
    const std::string name = config.mode == ModelMode::baseline
                                 ? "shared"
                                 : config.tasks[e].name;
    register_encoder(s, "encoder." + name, m.encoders[e]);
  }
  if (config.mode == ModelMode::dm_ti ||
      config.mode == ModelMode::dm_ti_tq) {
    register_norm(s, "decoder.interaction.norm", m.decoder.interaction.norm);
    register_attention(s, "decoder.interaction.attn",
                       m.decoder.interaction.attn);
    register_smlp(s, "decoder.interaction.mlp", m.decoder.interaction.mlp);
  }
  if (config.mode == ModelMode::dm_ti_tq) {
    register_norm(s, "decoder.query.norm_query", m.decoder.query.norm_query);
    register_norm(s, "decoder.query.norm_kv", m.decoder.query.norm_kv);
    register_attention(s, "decoder.query.attn", m.decoder.query.attn);
    register_smlp(s, "decoder.query.mlp", m.decoder.query.mlp);
  }
  for (size_t t = 0; t < config.tasks.size(); ++t)
    register_linear(s, "head." + config.tasks[t].name, m.heads[t]);
  return m;
}

std::array<Tensor, 4> trunk_forward(const Tensor& image, TrunkParams& p,
                                    RunMode mode) {
  if (image.rank() != 4 || image.dim(3) != 3)
    throw std::invalid_argument("trunk: [B,H,W,3] image required, got " +
                                shape_str(image.shape()));
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0)
    throw std::invalid_argument(
        "trunk: image extents must be divisible by 32");
  Tensor x = batch_norm(gelu(conv2d(image, p.conv1a)), p.bn1a, mode);
  x = batch_norm(gelu(conv2d(x, p.conv1b)), p.bn1b, mode);
  std::array<Tensor, 4> stages;
  stages[0] = avg_pool(x, 4);
  for (int i = 0; i < 3; ++i)
    stages[i + 1] = avg_pool(
        batch_norm(gelu(conv2d(stages[i], p.stage_conv[i])),
                   p.stage_bn[i], mode),
        2);
  return stages;
}

Tensor aggregate_features(const std::array<Tensor, 4>& stages,
                          const std::vector<int64_t>& scales) {
  if (scales.empty())
    throw std::invalid_argument("aggregate: no feature scales selected");
  const int64_t h = stages[0].dim(1), w = stages[0].dim(2);
  std::vector<Tensor> parts;
  for (size_t i = 0; i < kStrides.size(); ++i) {
    if (!std::count(scales.begin(), scales.end(), kStrides[i])) continue;
    parts.push_back(i == 0 ? stages[0]
                           : upsample_bilinear(stages[i], h, w));
  }
  return concat_last(parts);
}

Tensor head_forward(const Tensor& feat, const TaskSpec& spec,
                    const LinearParams& p) {
  Tensor logits = pointwise_conv(feat, p);
  Tensor full = upsample_bilinear(logits, feat.dim(1) * 4, feat.dim(2) * 4);
  if (spec.kind == TaskKind::normal) full = l2_normalize_last(full);
  return full;
}

std::vector<Tensor> model_forward(Model& m, const Tensor& image,
                                  RunMode mode) {
  const ModelConfig& cfg = m.config;
  if (image.rank() != 4 || image.dim(1) != cfg.input_h ||
      image.dim(2) != cfg.input_w || image.dim(3) != 3)
    throw std::invalid_argument("model: image " + shape_str(image.shape()) +
                                " does not match the configured input");
  const int64_t batch = image.dim(0);
  const int64_t tasks = cfg.tasks.size();
  const int64_t cr = cfg.reduced();

  std::array<Tensor, 4> stages = trunk_forward(image, m.trunk, mode);
  Tensor agg = aggregate_features(stages, cfg.scales);

  // [branch][image]
  std::vector<std::vector<DeformedFeature>> feats;
  for (DeformableMixerParams& enc : m.encoders)
    feats.push_back(deformable_mixer_forward(agg, enc, mode));
  const int64_t fh = feats[0][0].height, fw = feats[0][0].width;
  const int64_t n = fh * fw;

  // per-task, per-image stride-4 maps [fh, fw, C']
  std::vector<std::vector<Tensor>> maps(tasks);
  for (int64_t bi = 0; bi < batch; ++bi) {
    switch (cfg.mode) {
      case ModelMode::baseline:
      case ModelMode::dm:
        for (int64_t t = 0; t < tasks; ++t) {
          const DeformedFeature& f =
              feats[cfg.mode == ModelMode::baseline ? 0 : t][bi];
          maps[t].push_back(reshape(f.tokens, {fh, fw, cr}));
        }
        break;
      case ModelMode::dm_ti: {
        std::vector<DeformedFeature> per_image;
        for (int64_t t = 0; t < tasks; ++t)
          per_image.push_back(feats[t][bi]);
        Tensor interacted =
            task_interaction(per_image, m.decoder.interaction);
        for (int64_t t = 0; t < tasks; ++t)
          maps[t].push_back(reshape(
              slice_rows(interacted, t * n, (t + 1) * n), {fh, fw, cr}));
        break;
      }
      case ModelMode::dm_ti_tq: {
        std::vector<DeformedFeature> per_image;
        for (int64_t t = 0; t < tasks; ++t)
          per_image.push_back(feats[t][bi]);
        std::vector<TaskAwareFeature> aware =
            task_decoder_forward(per_image, m.decoder);
        for (int64_t t = 0; t < tasks; ++t)
          maps[t].push_back(aware[t].map);
        break;
      }
    }
  }

  std::vector<Tensor> out;
  for (int64_t t = 0; t < tasks; ++t) {
    std::vector<Tensor> batched;
    for (int64_t bi = 0; bi < batch; ++bi)
      batched.push_back(reshape(maps[t][bi], {1, fh, fw, cr}));
    out.push_back(
        head_forward(concat_rows(batched), cfg.tasks[t], m.heads[t]));
  }
  return out;
}

}  // namespace demt
