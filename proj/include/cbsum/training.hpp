#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbsum/data.hpp"
#include "cbsum/decoding.hpp"
#include "cbsum/model.hpp"

namespace cbsum {

enum class OptimizerKind { kAdagrad, kAdam };

OptimizerKind optimizer_from_string(const std::string& name);
const char* optimizer_name(OptimizerKind kind);

struct TrainConfig {
  float gamma = 2.0f / 3.0f;        // closed-book : pointer mix ratio
  float rl_mix_lambda = 0.9984f;    // RL : XE mix ratio
  float coverage_weight = 1.0f;
  OptimizerKind optimizer = OptimizerKind::kAdagrad;
  float learning_rate = 0.15f;
  float adagrad_init_acc = 0.1f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float clip_norm = 2.0f;
  int batch_size = 16;
  bool flow_cut_1 = false;  // sever closed-book loss -> encoder (via the initial state)
  bool flow_cut_2 = false;  // sever closed-book loss -> embedding (direct lookups)
  bool fixed_encoder = false;
  std::uint64_t seed = 13;

  void validate() const;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdagrad;
  std::map<std::string, Tensor> accumulators;    // adagrad sum-of-squares / adam first moment
  std::map<std::string, Tensor> second_moments;  // adam only
  long long step = 0;                            // adam bias correction
};

struct LossResult {
  Tensor loss;
  int clamp_warnings = 0;  // target probabilities clamped at 1e-10
};

// Mixed negative log likelihood over one example's steps:
// L = (1/T) * sum_t -[(1-gamma) log P_ptr(w_t) + gamma log P_cb(w_t)].
// Pointer targets use extended ids, closed-book targets UNK-mapped ids.
LossResult xe_mixed_loss(Tape& tape, const std::vector<Tensor>& ptr_step_dists,
                         const std::vector<Tensor>& cb_step_dists,
                         const std::vector<int>& target_ext_ids, const std::vector<int>& target_unk_ids,
                         float gamma);

// (1/T) * sum_t sum_i min(a_i^t, c_i^t); coverages[t] is the coverage
// vector before step t.
Tensor coverage_loss(Tape& tape, const std::vector<Tensor>& attentions,
                     const std::vector<Tensor>& coverages);

// (1/T) * sum_t (r(greedy) - r(sampled)) * log pi(w_t); rewards are
// constants. Errors on an empty sampled sequence.
Tensor rl_self_critical_loss(Tape& tape, const std::vector<Tensor>& sample_step_log_probs,
                             float greedy_reward, float sampled_reward);

Tensor mixed_rl_xe_loss(Tape& tape, const Tensor& rl_loss, const Tensor& xe_loss, float rl_mix_lambda);

// Scales every gradient by clip_norm/norm when the global L2 norm exceeds
// clip_norm. Returns the pre-clip norm; errors on non-finite gradients.
float clip_gradients(GradMap& grads, float clip_norm);

void optimizer_step(const TrainConfig& config, ParamStore& params, const GradMap& grads,
                    OptimizerState& state);

struct ForwardFlags {
  float gamma = 2.0f / 3.0f;
  float coverage_weight = 1.0f;
  bool cut_enc_to_cb = false;
  bool cut_emb_to_cb = false;

  static ForwardFlags from(const TrainConfig& config) {
    return {config.gamma, config.coverage_weight, config.flow_cut_1, config.flow_cut_2};
  }
};

struct XeForward {
  Tensor total;  // xe + coverage_weight * coverage when coverage is enabled
  Tensor xe;
  std::optional<Tensor> coverage;
  int clamp_warnings = 0;
};

// Teacher-forced forward pass of both decoders over one example; the
// pointer branch is skipped at gamma == 1 without coverage, the
// closed-book branch at gamma == 0.
XeForward forward_xe_example(Tape& tape, const Summarizer& model, const EncodedExample& example,
                             const ForwardFlags& flags);

struct StepStats {
  float total = 0.0f;
  float xe = 0.0f;
  float coverage = 0.0f;
  float rl = 0.0f;
  float grad_norm = 0.0f;          // pre-clip global norm
  float encoder_grad_norm = 0.0f;  // encoder.* and reduce.* only, pre-clip
  int clamp_warnings = 0;
  int skipped_samples = 0;  // RL examples whose sample was empty
};

// One optimizer update on a batch: forward, backward, flow cuts / frozen
// encoder, clip, step.
StepStats train_step(Summarizer& model, const Batch& batch, const TrainConfig& config,
                     OptimizerState& state);

using RewardFn =
    std::function<float(const std::vector<std::string>& candidate, const std::vector<std::string>& reference)>;

// Self-critical policy-gradient update mixed with the XE loss: samples and
// greedily decodes each example, rewards both against the reference, and
// minimizes lambda*L_RL + (1-lambda)*L_XE.
StepStats rl_train_step(Summarizer& model, const Batch& batch,
                        const std::vector<std::vector<std::string>>& references, const Vocabulary& vocab,
                        const TrainConfig& config, const DecodeConfig& sample_config,
                        OptimizerState& state, Rng& rng, const RewardFn& reward_fn);

// Mean mixed XE over a corpus without touching parameters.
float evaluate_xe(const Summarizer& model, const std::vector<EncodedExample>& examples, float gamma);

}  // namespace cbsum
