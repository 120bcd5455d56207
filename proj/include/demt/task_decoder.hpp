#pragma once

#include <vector>

#include "demt/deformable_mixer.hpp"
#include "demt/nn.hpp"

namespace demt {

struct AttentionParams {
  int64_t heads = 2;
  LinearParams query;
  LinearParams key;
  LinearParams value;
  LinearParams out;
};

AttentionParams attention_params_init(int64_t channels, int64_t heads,
                                      Rng& rng);

// softmax over the key axis followed by the weighted value sum:
// out[r] = sum_j softmax(scores[r])_j * values[j].
//
// The two reductions over keys (softmax denominator and the weighted sum)
// accumulate per key block of `key_block` rows and combine the block
// partials in ascending order, so the result is bitwise invariant under any
// block permutation of the keys. key_block = 0 treats all keys as one
// block. `probs_out`, when given, receives the [R, Nk] attention weights
// (plain data, not recorded).
Tensor attention_apply(const Tensor& scores, const Tensor& values,
                       int64_t key_block = 0, Tensor* probs_out = nullptr);

// Multi-head attention on projected inputs: per head
// attention_apply(Q_h K_h^T / sqrt(d_k), V_h), heads concatenated and
// output-projected. No positional encodings, no mask. `probs_out`, when
// given, receives the head-stacked [heads*Nq, Nk] attention weights.
Tensor mhsa(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
            const AttentionParams& p, int64_t key_block = 0,
            Tensor* probs_out = nullptr);

struct SmlpParams {
  LinearParams lin;  // C' -> C'
  NormParams norm;   // layer norm
};

SmlpParams smlp_init(int64_t channels, Rng& rng);

// linear then layer norm
Tensor smlp(const Tensor& x, const SmlpParams& p);

// Self-attention over the row-concatenated task tokens. One LN feeds
// Q = K = V; no residual.
struct TaskInteractionParams {
  NormParams norm;  // layer norm on the fused tokens
  AttentionParams attn;
  SmlpParams mlp;
};

TaskInteractionParams task_interaction_init(int64_t channels, int64_t heads,
                                            Rng& rng);

// [T*N, C'] tokens, task-major (rows of features[0] first).
Tensor task_interaction(const std::vector<DeformedFeature>& features,
                        const TaskInteractionParams& p);

// Cross-attention from one task's deformed tokens (queries) into the
// task-interacted tokens (keys and values), followed by an smlp with a
// residual from the query tokens. Parameters are shared across tasks.
struct TaskQueryParams {
  NormParams norm_query;
  NormParams norm_kv;
  AttentionParams attn;
  SmlpParams mlp;
};

TaskQueryParams task_query_init(int64_t channels, int64_t heads, Rng& rng);

// Task-aware spatial feature, one per task.
struct TaskAwareFeature {
  Tensor map;  // [h, w, C']
};

// `tokens_per_task` is the key block extent N for the permutation-invariant
// attention reduction (interacted tokens are task-major T blocks of N rows).
TaskAwareFeature task_query(const DeformedFeature& deformed,
                            const Tensor& interacted,
                            int64_t tokens_per_task,
                            const TaskQueryParams& p);

struct TaskDecoderParams {
  TaskInteractionParams interaction;
  TaskQueryParams query;
};

TaskDecoderParams task_decoder_init(int64_t channels, int64_t heads,
                                    Rng& rng);

// Full decoder: interaction over all tasks, then one shared-weight query
// block per task.
std::vector<TaskAwareFeature> task_decoder_forward(
    const std::vector<DeformedFeature>& features,
    const TaskDecoderParams& p);

}  // namespace demt
