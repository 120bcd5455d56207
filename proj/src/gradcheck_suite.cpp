#include <memory>

#include "demt/data.hpp"
#include "demt/gradcheck.hpp"
#include "demt/runner.hpp"
#include "demt/training.hpp"

namespace demt {
namespace {

// Scalar readout that mixes every output element with fixed random weights,
// so no gradient component can vanish by symmetry.
Tensor dot_readout(const Tensor& y, const Tensor& r) {
  return sum(mul(reshape(y, {y.size()}), r));
}

Tensor readout_weights(const Shape& of, Rng& rng) {
  return Tensor::uniform({numel(of)}, rng, -1.0, 1.0);
}

// Random fractional offsets keep bilinear sampling away from the integer
// grid, where its derivative is discontinuous and finite differences lie.
Tensor fractional_offsets(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::uniform(shape, rng, 0.15, 0.35);
  std::span<double> d = t.mutable_data();
  for (double& v : d) {
    if (rng.uniform_int(2) == 0) v = -v;
  }
  return t;
}

void nudge_offset_conv(Conv2dParams& conv, Rng& rng) {
  for (double& v : conv.weight.mutable_data()) v = rng.uniform(-0.005, 0.005);
  for (double& v : conv.bias.mutable_data()) v = 0.5;
}

GradScenario unary(std::function<Tensor(const Tensor&)> op, const Shape& in,
                   uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor x = Tensor::uniform(in, rng, lo, hi);
  Tensor r;
  {
    NoGrad guard;
    r = readout_weights(op(x).shape(), rng);
  }
  GradScenario sc;
  sc.forward = [op, x, r]() { return dot_readout(op(x), r); };
  sc.wrt = {x};
  return sc;
}

GradScenario model_scenario(uint64_t seed) {
  Rng rng(seed);
  ModelConfig mc;
  mc.tasks = {make_task_spec("semseg", TaskKind::semseg, 4, 1.0),
              make_task_spec("depth", TaskKind::depth, 1, 1.0)};
  mc.input_h = 32;
  mc.input_w = 32;
  mc.trunk_widths = {2, 4, 6, 8};
  mc.scales = {4, 8, 16, 32};
  mc.reduced_channels = 4;
  mc.heads = 2;
  mc.seed = seed * 31 + 5;
  auto model = std::make_shared<Model>(model_init(mc));
  for (DeformableMixerParams& enc : model->encoders) {
    for (MixerBlockParams& block : enc.blocks) {
      nudge_offset_conv(block.offset_conv, rng);
    }
  }

  Tensor image = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
  std::vector<double> labels(32 * 32);
  for (double& v : labels) {
    v = static_cast<double>(rng.uniform_int(5));
    if (v == 4.0) v = 255.0;  // exercise the ignore path
  }
  Tensor semseg({1, 32, 32}, std::move(labels));
  Tensor depth = Tensor::uniform({1, 32, 32, 1}, rng, 0.5, 2.0);

  GradScenario sc;
  sc.forward = [model, image, semseg, depth]() {
    std::vector<Tensor> preds =
        model_forward(*model, image, RunMode::train);
    return total_loss({semseg_loss(preds[0], semseg),
                       depth_l1_loss(preds[1], depth)},
                      {1.0, 1.0});
  };
  for (const auto& [name, t] : model->store.params) sc.wrt.push_back(t);
  return sc;
}

}  // namespace

std::vector<GradCheckEntry> standard_gradcheck_suite() {
  std::vector<GradCheckEntry> suite;
  const auto entry = [&suite](const std::string& op,
                              std::function<GradScenario(uint64_t)> make,
                              int instances = 20, double eps = 1e-5,
                              int64_t sample_limit = 0) {
    suite.push_back({op, std::move(make), instances, eps, sample_limit});
  };

  entry("matmul", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({4, 2}, rng, -1.0, 1.0);
    Tensor r = readout_weights({3, 2}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() { return dot_readout(matmul(a, b), r); };
    sc.wrt = {a, b};
    return sc;
  });
  entry("transpose", [](uint64_t seed) {
    return unary([](const Tensor& x) { return transpose(x); }, {3, 5}, seed);
  });
  entry("add", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor r = readout_weights({2, 5}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() { return dot_readout(add(a, b), r); };
    sc.wrt = {a, b};
    return sc;
  });
  entry("sub", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor r = readout_weights({2, 5}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() { return dot_readout(sub(a, b), r); };
    sc.wrt = {a, b};
    return sc;
  });
  entry("mul", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    Tensor r = readout_weights({2, 5}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() { return dot_readout(mul(a, b), r); };
    sc.wrt = {a, b};
    return sc;
  });
  entry("scale", [](uint64_t seed) {
    return unary([](const Tensor& x) { return scale(x, 1.7); }, {7}, seed);
  });
  entry("softmax", [](uint64_t seed) {
    return unary([](const Tensor& x) { return softmax(x, 1); }, {3, 6}, seed,
                 -2.0, 2.0);
  });
  entry("reshape", [](uint64_t seed) {
    return unary([](const Tensor& x) { return reshape(x, {3, 4}); }, {2, 6},
                 seed);
  });
  entry("expand_leading", [](uint64_t seed) {
    return unary([](const Tensor& x) { return expand_leading(x, 4); }, {2, 3},
                 seed);
  });
  entry("sum", [](uint64_t seed) {
    return unary([](const Tensor& x) { return sum(x); }, {9}, seed);
  });
  entry("mean", [](uint64_t seed) {
    return unary([](const Tensor& x) { return mean(x); }, {9}, seed);
  });
  entry("concat_rows", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({2, 3}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({3, 3}, rng, -1.0, 1.0);
    Tensor r = readout_weights({5, 3}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() {
      const Tensor parts[] = {a, b};
      return dot_readout(concat_rows(parts), r);
    };
    sc.wrt = {a, b};
    return sc;
  });
  entry("slice_rows", [](uint64_t seed) {
    return unary([](const Tensor& x) { return slice_rows(x, 1, 4); }, {5, 3},
                 seed);
  });
  entry("concat_last", [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({4, 2}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
    Tensor r = readout_weights({4, 5}, rng);
    GradScenario sc;
    sc.forward = [a, b, r]() {
      const Tensor parts[] = {a, b};
      return dot_readout(concat_last(parts), r);
    };
    sc.wrt = {a, b};
    return sc;
  });
  entry("slice_last", [](uint64_t seed) {
    return unary([](const Tensor& x) { return slice_last(x, 1, 4); }, {3, 5},
                 seed);
  });
  entry("linear", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({4, 5}, rng, -1.0, 1.0);
    LinearParams p = linear_init(5, 3, rng);
    Tensor r = readout_weights({4, 3}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() { return dot_readout(linear(x, p), r); };
    sc.wrt = {x, p.weight, p.bias};
    return sc;
  });
  entry("layer_norm", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({3, 6}, rng, -1.0, 1.0);
    NormParams p = layer_norm_init(6);
    Tensor r = readout_weights({3, 6}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() { return dot_readout(layer_norm(x, p), r); };
    sc.wrt = {x, p.gamma, p.beta};
    return sc;
  });
  entry("batch_norm", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({2, 4, 4, 3}, rng, -1.0, 1.0);
    auto p = std::make_shared<NormParams>(batch_norm_init(3));
    Tensor r = readout_weights({2, 4, 4, 3}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() {
      return dot_readout(batch_norm(x, *p, RunMode::train), r);
    };
    sc.wrt = {x, p->gamma, p->beta};
    return sc;
  });
  entry("gelu", [](uint64_t seed) {
    return unary([](const Tensor& x) { return gelu(x); }, {11}, seed, -2.0,
                 2.0);
  });
  entry("conv2d", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({1, 5, 5, 2}, rng, -1.0, 1.0);
    Conv2dParams p = conv2d_init(2, 3, 3, rng);
    Tensor r = readout_weights({1, 5, 5, 3}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() { return dot_readout(conv2d(x, p), r); };
    sc.wrt = {x, p.weight, p.bias};
    return sc;
  });
  entry("pointwise_conv", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({1, 4, 4, 3}, rng, -1.0, 1.0);
    LinearParams p = linear_init(3, 2, rng);
    Tensor r = readout_weights({1, 4, 4, 2}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() { return dot_readout(pointwise_conv(x, p), r); };
    sc.wrt = {x, p.weight, p.bias};
    return sc;
  });
  entry("bilinear_sample", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({1, 3, 3, 2}, rng, -1.0, 1.0);
    std::vector<double> base(3 * 3 * 2 * 2);
    for (int64_t i = 0; i < 3; ++i) {
      for (int64_t j = 0; j < 3; ++j) {
        for (int64_t k = 0; k < 2; ++k) {
          const int64_t at = ((i * 3 + j) * 2 + k) * 2;
          base[at + 0] = static_cast<double>(i + k);
          base[at + 1] = static_cast<double>(j + k);
        }
      }
    }
    Tensor coords({1, 3, 3, 2, 2}, std::move(base));
    Tensor frac = fractional_offsets({1, 3, 3, 2, 2}, rng);
    {
      NoGrad guard;
      coords = add(coords, frac);
    }
    Tensor r = readout_weights({1, 3, 3, 2, 2}, rng);
    GradScenario sc;
    sc.forward = [x, coords, r]() {
      return dot_readout(bilinear_sample(x, coords), r);
    };
    sc.wrt = {x, coords};
    return sc;
  }, 20, 1e-6);
  entry("upsample_bilinear", [](uint64_t seed) {
    return unary([](const Tensor& x) { return upsample_bilinear(x, 8, 8); },
                 {1, 4, 4, 2}, seed);
  });
  entry("avg_pool", [](uint64_t seed) {
    return unary([](const Tensor& x) { return avg_pool(x, 2); }, {1, 6, 6, 2},
                 seed);
  });
  entry("l2_normalize_last", [](uint64_t seed) {
    return unary([](const Tensor& x) { return l2_normalize_last(x); },
                 {2, 3, 3}, seed, 0.8, 1.6);
  });
  entry("channel_mix", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<DeformableMixerParams>(
        deformable_mixer_init(16, 4, 1, 9, rng));
    Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
    Tensor r = readout_weights({1, 4, 4, 4}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() {
      return dot_readout(channel_mix(x, p->blocks[0], RunMode::train), r);
    };
    sc.wrt = {x, p->blocks[0].mix.weight, p->blocks[0].mix_bn.gamma};
    return sc;
  });
  entry("predict_offsets", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<DeformableMixerParams>(
        deformable_mixer_init(16, 4, 1, 9, rng));
    for (double& v : p->blocks[0].offset_conv.weight.mutable_data()) {
      v = rng.uniform(-0.01, 0.01);
    }
    Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
    Tensor r = readout_weights({1, 4, 4, 9, 2}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() {
      return dot_readout(predict_offsets(x, p->blocks[0]), r);
    };
    sc.wrt = {x, p->blocks[0].offset_conv.weight,
              p->blocks[0].offset_conv.bias};
    return sc;
  });
  entry("spatial_deform", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({1, 4, 4, 3}, rng, -1.0, 1.0);
    Tensor offsets = fractional_offsets({1, 4, 4, 9, 2}, rng);
    Tensor w = Tensor::uniform({9, 3, 3}, rng, -0.5, 0.5);
    Tensor r = readout_weights({1, 4, 4, 3}, rng);
    GradScenario sc;
    sc.forward = [x, offsets, w, r]() {
      return dot_readout(spatial_deform(x, offsets, w), r);
    };
    sc.wrt = {x, offsets, w};
    return sc;
  }, 10, 1e-6);
  entry("deformable_mixer", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<DeformableMixerParams>(
        deformable_mixer_init(12, 4, 1, 9, rng));
    nudge_offset_conv(p->blocks[0].offset_conv, rng);
    Tensor x = Tensor::uniform({1, 4, 4, 12}, rng, -1.0, 1.0);
    Tensor r = readout_weights({1, 4, 4, 4}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() {
      return dot_readout(deformable_mixer_apply(x, *p, RunMode::train), r);
    };
    sc.wrt = {x, p->reduce.weight, p->blocks[0].mix.weight,
              p->blocks[0].deform_weight, p->blocks[0].offset_conv.weight};
    return sc;
  }, 5, 1e-5, 40);
  entry("attention_apply", [](uint64_t seed) {
    Rng rng(seed);
    Tensor scores = Tensor::uniform({4, 6}, rng, -2.0, 2.0);
    Tensor values = Tensor::uniform({6, 3}, rng, -1.0, 1.0);
    Tensor r = readout_weights({4, 3}, rng);
    GradScenario sc;
    sc.forward = [scores, values, r]() {
      return dot_readout(attention_apply(scores, values, 2), r);
    };
    sc.wrt = {scores, values};
    return sc;
  }, 20, 1e-6);
  entry("mhsa", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<AttentionParams>(
        attention_params_init(4, 2, rng));
    Tensor q = Tensor::uniform({5, 4}, rng, -1.0, 1.0);
    Tensor kv = Tensor::uniform({7, 4}, rng, -1.0, 1.0);
    Tensor r = readout_weights({5, 4}, rng);
    GradScenario sc;
    sc.forward = [q, kv, p, r]() {
      return dot_readout(mhsa(q, kv, kv, *p), r);
    };
    sc.wrt = {q, kv, p->query.weight, p->key.weight, p->value.weight,
              p->out.weight};
    return sc;
  });
  entry("smlp", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<SmlpParams>(smlp_init(6, rng));
    Tensor x = Tensor::uniform({4, 6}, rng, -1.0, 1.0);
    Tensor r = readout_weights({4, 6}, rng);
    GradScenario sc;
    sc.forward = [x, p, r]() { return dot_readout(smlp(x, *p), r); };
    sc.wrt = {x, p->lin.weight, p->norm.gamma};
    return sc;
  });
  entry("task_interaction", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<TaskInteractionParams>(
        task_interaction_init(4, 2, rng));
    Tensor t0 = Tensor::uniform({9, 4}, rng, -1.0, 1.0);
    Tensor t1 = Tensor::uniform({9, 4}, rng, -1.0, 1.0);
    Tensor r = readout_weights({18, 4}, rng);
    GradScenario sc;
    sc.forward = [t0, t1, p, r]() {
      std::vector<DeformedFeature> feats(2);
      feats[0] = {t0, 3, 3};
      feats[1] = {t1, 3, 3};
      return dot_readout(task_interaction(feats, *p), r);
    };
    sc.wrt = {t0, t1, p->attn.query.weight, p->mlp.lin.weight,
              p->norm.gamma};
    return sc;
  });
  entry("task_query", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<TaskQueryParams>(task_query_init(4, 2, rng));
    Tensor tokens = Tensor::uniform({9, 4}, rng, -1.0, 1.0);
    Tensor interacted = Tensor::uniform({18, 4}, rng, -1.0, 1.0);
    Tensor r = readout_weights({3, 3, 4}, rng);
    GradScenario sc;
    sc.forward = [tokens, interacted, p, r]() {
      const DeformedFeature feat{tokens, 3, 3};
      return dot_readout(task_query(feat, interacted, 9, *p).map, r);
    };
    sc.wrt = {tokens, interacted, p->attn.value.weight,
              p->norm_query.gamma, p->mlp.lin.weight};
    return sc;
  });
  entry("task_decoder", [](uint64_t seed) {
    Rng rng(seed);
    auto p = std::make_shared<TaskDecoderParams>(task_decoder_init(4, 2, rng));
    Tensor t0 = Tensor::uniform({9, 4}, rng, -1.0, 1.0);
    Tensor t1 = Tensor::uniform({9, 4}, rng, -1.0, 1.0);
    Tensor r0 = readout_weights({3, 3, 4}, rng);
    Tensor r1 = readout_weights({3, 3, 4}, rng);
    GradScenario sc;
    sc.forward = [t0, t1, p, r0, r1]() {
      std::vector<DeformedFeature> feats(2);
      feats[0] = {t0, 3, 3};
      feats[1] = {t1, 3, 3};
      std::vector<TaskAwareFeature> out = task_decoder_forward(feats, *p);
      return add(dot_readout(out[0].map, r0), dot_readout(out[1].map, r1));
    };
    sc.wrt = {t0, t1, p->interaction.attn.query.weight,
              p->query.attn.value.weight, p->query.mlp.lin.weight};
    return sc;
  }, 10);
  entry("semseg_loss", [](uint64_t seed) {
    Rng rng(seed);
    Tensor logits = Tensor::uniform({1, 3, 3, 4}, rng, -2.0, 2.0);
    std::vector<double> labels(9);
    for (double& v : labels) v = static_cast<double>(rng.uniform_int(4));
    labels[static_cast<size_t>(rng.uniform_int(9))] = 255.0;
    Tensor gt({1, 3, 3}, std::move(labels));
    GradScenario sc;
    sc.forward = [logits, gt]() { return semseg_loss(logits, gt); };
    sc.wrt = {logits};
    return sc;
  }, 20, 1e-6);
  entry("depth_l1_loss", [](uint64_t seed) {
    Rng rng(seed);
    Tensor pred = Tensor::uniform({1, 3, 3, 1}, rng, 1.0, 2.0);
    Tensor target = Tensor::uniform({1, 3, 3, 1}, rng, 0.3, 0.6);
    target.mutable_data()[static_cast<size_t>(rng.uniform_int(9))] = 0.0;
    GradScenario sc;
    sc.forward = [pred, target]() { return depth_l1_loss(pred, target); };
    sc.wrt = {pred};
    return sc;
  }, 20, 1e-6);
  entry("normal_cosine_loss", [](uint64_t seed) {
    Rng rng(seed);
    Tensor pred = Tensor::zeros({1, 2, 2, 3});
    Tensor target = Tensor::zeros({1, 2, 2, 3});
    for (Tensor* t : {&pred, &target}) {
      for (double& v : t->mutable_data()) {
        v = (rng.uniform_int(2) == 0 ? 1.0 : -1.0) * rng.uniform(0.4, 1.2);
      }
    }
    {
      NoGrad guard;
      target = l2_normalize_last(target);
    }
    GradScenario sc;
    sc.forward = [pred, target]() {
      return normal_cosine_loss(pred, target);
    };
    sc.wrt = {pred};
    return sc;
  }, 20, 1e-6);
  entry("head_semseg", [](uint64_t seed) {
    Rng rng(seed);
    const TaskSpec spec = make_task_spec("semseg", TaskKind::semseg, 4, 1.0);
    LinearParams p = linear_init(5, 4, rng);
    Tensor feat = Tensor::uniform({1, 4, 4, 5}, rng, -1.0, 1.0);
    Tensor r = readout_weights({1, 16, 16, 4}, rng);
    GradScenario sc;
    sc.forward = [feat, spec, p, r]() {
      return dot_readout(head_forward(feat, spec, p), r);
    };
    sc.wrt = {feat, p.weight, p.bias};
    return sc;
  }, 10, 1e-5, 120);
  entry("head_normal", [](uint64_t seed) {
    Rng rng(seed);
    const TaskSpec spec = make_task_spec("normal", TaskKind::normal, 3, 1.0);
    LinearParams p = linear_init(5, 3, rng);
    for (double& v : p.bias.mutable_data()) v = 0.3;  // keep norms off zero
    Tensor feat = Tensor::uniform({1, 4, 4, 5}, rng, -1.0, 1.0);
    Tensor r = readout_weights({1, 16, 16, 3}, rng);
    GradScenario sc;
    sc.forward = [feat, spec, p, r]() {
      return dot_readout(head_forward(feat, spec, p), r);
    };
    sc.wrt = {feat, p.weight, p.bias};
    return sc;
  }, 10, 1e-5, 120);
  entry("model", [](uint64_t seed) { return model_scenario(seed); }, 2, 1e-5,
        4);

  return suite;
}

}  // namespace demt
