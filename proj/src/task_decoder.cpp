#include "demt/task_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace demt {

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

void record_op(Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(fn));
}

double sum_ascending(std::vector<double>& parts) {
  std::sort(parts.begin(), parts.end());
  double s = 0.0;
  for (double v : parts) s += v;
  return s;
}

void check_heads(int64_t channels, int64_t heads) {
  if (heads < 1 || channels % heads != 0)
    throw std::invalid_argument(
        "attention: heads (" + std::to_string(heads) +
        ") must divide channels (" + std::to_string(channels) + ")");
}

}  // namespace

AttentionParams attention_params_init(int64_t channels, int64_t heads,
                                      Rng& rng) {
  check_heads(channels, heads);
  AttentionParams p;
  p.heads = heads;
  // The decoder blocks have no residual bypass around the attention, so if
  // the initial logits are near zero the softmax is uniform over hundreds of
  // keys and every token collapses to the global mean — a constant map the
  // optimizer then spends most of a short run escaping. A wider query/key
  // bound gives O(1) logit spread at initialization, so attention is
  // content-dependent from the first step.
  const double qk_bound = 3.0 / std::sqrt(static_cast<double>(channels));
  p.query.weight = Tensor::uniform({channels, channels}, rng, -qk_bound,
                                   qk_bound);
  p.query.bias = Tensor::zeros({channels});
  p.key.weight = Tensor::uniform({channels, channels}, rng, -qk_bound,
                                 qk_bound);
  p.key.bias = Tensor::zeros({channels});
  p.value = linear_init(channels, channels, rng);
  p.out = linear_init(channels, channels, rng);
  return p;
}

Tensor attention_apply(const Tensor& scores, const Tensor& values,
                       int64_t key_block, Tensor* probs_out) {
  if (scores.rank() != 2 || values.rank() != 2)
    throw std::invalid_argument("attention_apply: rank-2 inputs required");
  const int64_t rows = scores.dim(0), nk = scores.dim(1),
                dv = values.dim(1);
  if (values.dim(0) != nk)
    throw std::invalid_argument(
        "attention_apply: " + std::to_string(nk) + " scores per row but " +
        std::to_string(values.dim(0)) + " value rows");
  if (key_block == 0) key_block = nk;
  if (key_block < 1 || nk % key_block != 0)
    throw std::invalid_argument(
        "attention_apply: key_block must divide the key count");
  const int64_t nb = nk / key_block;

  Tensor y = Tensor::zeros({rows, dv});
  auto probs = std::make_shared<std::vector<double>>(rows * nk);
  {
    const double* ps = scores.data().data();
    const double* pv = values.data().data();
    double* py = y.mutable_data().data();
    double* pp = probs->data();
    std::vector<double> den_part(nb);
    std::vector<double> num_part(nb * dv);
    std::vector<double> col(nb);
    for (int64_t r = 0; r < rows; ++r) {
      const double* srow = ps + r * nk;
      double m = srow[0];
      for (int64_t j = 1; j < nk; ++j) m = std::max(m, srow[j]);
      double* e = pp + r * nk;
      std::fill(den_part.begin(), den_part.end(), 0.0);
      std::fill(num_part.begin(), num_part.end(), 0.0);
      for (int64_t b = 0; b < nb; ++b) {
        double* npart = num_part.data() + b * dv;
        for (int64_t j = b * key_block; j < (b + 1) * key_block; ++j) {
          const double ej = std::exp(srow[j] - m);
          e[j] = ej;
          den_part[b] += ej;
          const double* vrow = pv + j * dv;
          for (int64_t c = 0; c < dv; ++c) npart[c] += ej * vrow[c];
        }
      }
      std::vector<double> dp = den_part;
      const double den = sum_ascending(dp);
      double* orow = py + r * dv;
      for (int64_t c = 0; c < dv; ++c) {
        for (int64_t b = 0; b < nb; ++b) col[b] = num_part[b * dv + c];
        orow[c] = sum_ascending(col) / den;
      }
      for (int64_t j = 0; j < nk; ++j) e[j] /= den;
    }
  }
  if (probs_out) {
    *probs_out = Tensor({rows, nk},
                        std::vector<double>(probs->begin(), probs->end()));
  }

  if (wants_grad({&scores, &values})) {
    Tensor ts = scores, tv = values;
    record_op(y, [ts, tv, y, probs, rows, nk, dv]() mutable {
      std::span<const double> go = y.grad();
      const double* py = y.data().data();
      const double* pv = tv.data().data();
      const double* pp = probs->data();
      double* gs = ts.requires_grad() ? ts.mutable_grad().data() : nullptr;
      double* gv = tv.requires_grad() ? tv.mutable_grad().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = go.data() + r * dv;
        const double* prow = pp + r * nk;
        double gdot = 0.0;
        for (int64_t c = 0; c < dv; ++c) gdot += grow[c] * py[r * dv + c];
        for (int64_t j = 0; j < nk; ++j) {
          const double pj = prow[j];
          if (gv) {
            double* gvrow = gv + j * dv;
            for (int64_t c = 0; c < dv; ++c) gvrow[c] += pj * grow[c];
          }
          if (gs) {
            const double* vrow = pv + j * dv;
            double dot = 0.0;
            for (int64_t c = 0; c < dv; ++c) dot += grow[c] * vrow[c];
            gs[r * nk + j] += pj * (dot - gdot);
          }
        }
      }
    });
  }
  return y;
}

Tensor mhsa(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
            const AttentionParams& p, int64_t key_block,
            Tensor* probs_out) {
  if (q_in.rank() != 2 || k_in.rank() != 2 || v_in.rank() != 2)
    throw std::invalid_argument("mhsa: rank-2 token inputs required");
  const int64_t channels = q_in.dim(1);
  if (k_in.dim(1) != channels || v_in.dim(1) != channels)
    throw std::invalid_argument("mhsa: channel extents must match");
  if (k_in.dim(0) != v_in.dim(0))
    throw std::invalid_argument("mhsa: key and value row counts differ");
  check_heads(channels, p.heads);
  const int64_t dk = channels / p.heads;

  Tensor q = linear(q_in, p.query);
  Tensor k = linear(k_in, p.key);
  Tensor v = linear(v_in, p.value);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Tensor> ctx;
  std::vector<Tensor> probs;
  for (int64_t h = 0; h < p.heads; ++h) {
    Tensor qh = slice_last(q, h * dk, (h + 1) * dk);
    Tensor kh = slice_last(k, h * dk, (h + 1) * dk);
    Tensor vh = slice_last(v, h * dk, (h + 1) * dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_scale);
    Tensor head_probs;
    ctx.push_back(attention_apply(scores, vh, key_block,
                                  probs_out ? &head_probs : nullptr));
    if (probs_out) probs.push_back(head_probs);
  }
  if (probs_out) *probs_out = concat_rows(probs);
  return linear(concat_last(ctx), p.out);
}

SmlpParams smlp_init(int64_t channels, Rng& rng) {
  SmlpParams p;
  p.lin = linear_init(channels, channels, rng);
  p.norm = layer_norm_init(channels);
  return p;
}

Tensor smlp(const Tensor& x, const SmlpParams& p) {
  return layer_norm(linear(x, p.lin), p.norm);
}

TaskInteractionParams task_interaction_init(int64_t channels, int64_t heads,
                                            Rng& rng) {
  TaskInteractionParams p;
  p.norm = layer_norm_init(channels);
  p.attn = attention_params_init(channels, heads, rng);
  p.mlp = smlp_init(channels, rng);
  return p;
}

Tensor task_interaction(const std::vector<DeformedFeature>& features,
                        const TaskInteractionParams& p) {
  if (features.empty())
    throw std::invalid_argument("task_interaction: no task features");
  const int64_t n = features[0].tokens.dim(0);
  const int64_t c = features[0].tokens.dim(1);
  std::vector<Tensor> parts;
  for (const DeformedFeature& f : features) {
    if (f.tokens.dim(0) != n || f.tokens.dim(1) != c)
      throw std::invalid_argument(
          "task_interaction: token shapes differ across tasks (" +
          shape_str(features[0].tokens.shape()) + " vs " +
          shape_str(f.tokens.shape()) + ")");
    parts.push_back(f.tokens);
  }
  Tensor fused = concat_rows(parts);       // [T*N, C'], task-major
  Tensor x = layer_norm(fused, p.norm);    // one LN feeds Q = K = V
  Tensor attended = mhsa(x, x, x, p.attn, n);
  return smlp(attended, p.mlp);            // no residual
}

TaskQueryParams task_query_init(int64_t channels, int64_t heads, Rng& rng) {
  TaskQueryParams p;
  p.norm_query = layer_norm_init(channels);
  p.norm_kv = layer_norm_init(channels);
  p.attn = attention_params_init(channels, heads, rng);
  p.mlp = smlp_init(channels, rng);
  return p;
}

TaskAwareFeature task_query(const DeformedFeature& deformed,
                            const Tensor& interacted,
                            int64_t tokens_per_task,
                            const TaskQueryParams& p) {
  if (deformed.tokens.dim(1) != interacted.dim(1))
    throw std::invalid_argument("task_query: channel extents must match");
  if (deformed.tokens.dim(0) != deformed.height * deformed.width)
    throw std::invalid_argument(
        "task_query: token count does not match the spatial extents");
  Tensor q = layer_norm(deformed.tokens, p.norm_query);
  Tensor kv = layer_norm(interacted, p.norm_kv);
  Tensor attended = mhsa(q, kv, kv, p.attn, tokens_per_task);
  Tensor mixed = add(deformed.tokens, smlp(attended, p.mlp));
  TaskAwareFeature out;
  out.map = reshape(mixed,
                    {deformed.height, deformed.width, deformed.tokens.dim(1)});
  return out;
}

TaskDecoderParams task_decoder_init(int64_t channels, int64_t heads,
                                    Rng& rng) {
  TaskDecoderParams p;
  p.interaction = task_interaction_init(channels, heads, rng);
  p.query = task_query_init(channels, heads, rng);
  return p;
}

std::vector<TaskAwareFeature> task_decoder_forward(
    const std::vector<DeformedFeature>& features,
    const TaskDecoderParams& p) {
  Tensor interacted = task_interaction(features, p.interaction);
  const int64_t n = features[0].tokens.dim(0);
  std::vector<TaskAwareFeature> out;
  for (const DeformedFeature& f : features)
    out.push_back(task_query(f, interacted, n, p.query));
  return out;
}

}  // namespace demt
