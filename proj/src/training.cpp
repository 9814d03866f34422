#include "cbsum/training.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cbsum {

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "adagrad") return OptimizerKind::kAdagrad;
  if (name == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("train config: unknown optimizer \"" + name + "\"");
}

const char* optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::kAdagrad ? "adagrad" : "adam";
}

void TrainConfig::validate() const {
  if (gamma < 0.0f || gamma > 1.0f) throw std::invalid_argument("train config: gamma must be in [0,1]");
  if (rl_mix_lambda < 0.0f || rl_mix_lambda > 1.0f) {
    throw std::invalid_argument("train config: rl_mix_lambda must be in [0,1]");
  }
  if (coverage_weight < 0.0f) throw std::invalid_argument("train config: coverage_weight must be >= 0");
  if (clip_norm <= 0.0f) throw std::invalid_argument("train config: clip_norm must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (learning_rate <= 0.0f) throw std::invalid_argument("train config: learning_rate must be positive");
}

namespace {

// log of the target probability per step, clamped at 1e-10.
Tensor gathered_log_probs(Tape& tape, const std::vector<Tensor>& dists, const std::vector<int>& targets,
                          int* clamp_warnings) {
  std::vector<Tensor> logs;
  logs.reserve(dists.size());
  for (std::size_t t = 0; t < dists.size(); ++t) {
    Tensor p = tape.gather_rows(dists[t], {targets[t]});
    if (p.data[0] <= 0.0f) ++*clamp_warnings;
    logs.push_back(tape.log(tape.clamp_min(p, 1e-10f)));
  }
  return tape.concat(logs);
}

}  // namespace

LossResult xe_mixed_loss(Tape& tape, const std::vector<Tensor>& ptr_step_dists,
                         const std::vector<Tensor>& cb_step_dists, const std::vector<int>& target_ext_ids,
                         const std::vector<int>& target_unk_ids, float gamma) {
  const std::size_t steps = target_ext_ids.size();
  if (steps == 0 || target_unk_ids.size() != steps) {
    throw std::invalid_argument("xe_mixed_loss: target sequences empty or of different lengths");
  }
  const bool use_ptr = gamma < 1.0f;
  const bool use_cb = gamma > 0.0f;
  if (use_ptr && ptr_step_dists.size() != steps) {
    throw std::invalid_argument("xe_mixed_loss: " + std::to_string(ptr_step_dists.size()) +
                                " pointer distributions for " + std::to_string(steps) + " targets");
  }
  if (use_cb && cb_step_dists.size() != steps) {
    throw std::invalid_argument("xe_mixed_loss: " + std::to_string(cb_step_dists.size()) +
                                " closed-book distributions for " + std::to_string(steps) + " targets");
  }

  LossResult result;
  Tensor weighted;
  if (use_ptr) {
    Tensor ptr_sum = tape.sum(gathered_log_probs(tape, ptr_step_dists, target_ext_ids, &result.clamp_warnings));
    weighted = tape.scale(ptr_sum, 1.0f - gamma);
  }
  if (use_cb) {
    Tensor cb_sum = tape.sum(gathered_log_probs(tape, cb_step_dists, target_unk_ids, &result.clamp_warnings));
    Tensor cb_weighted = tape.scale(cb_sum, gamma);
    weighted = use_ptr ? tape.add(weighted, cb_weighted) : cb_weighted;
  }
  result.loss = tape.scale(tape.negate(weighted), 1.0f / static_cast<float>(steps));
  return result;
}

Tensor coverage_loss(Tape& tape, const std::vector<Tensor>& attentions,
                     const std::vector<Tensor>& coverages) {
  if (attentions.empty() || attentions.size() != coverages.size()) {
    throw std::invalid_argument("coverage_loss: attention/coverage step counts differ or are empty");
  }
  std::vector<Tensor> per_step;
  per_step.reserve(attentions.size());
  for (std::size_t t = 0; t < attentions.size(); ++t) {
    per_step.push_back(tape.sum(tape.minimum(attentions[t], coverages[t])));
  }
  return tape.mean(tape.concat(per_step));
}

Tensor rl_self_critical_loss(Tape& tape, const std::vector<Tensor>& sample_step_log_probs,
                             float greedy_reward, float sampled_reward) {
  if (sample_step_log_probs.empty()) {
    throw std::invalid_argument("rl_self_critical_loss: empty sampled sequence");
  }
  const float advantage = greedy_reward - sampled_reward;
  return tape.scale(tape.mean(tape.concat(sample_step_log_probs)), advantage);
}

Tensor mixed_rl_xe_loss(Tape& tape, const Tensor& rl_loss, const Tensor& xe_loss, float rl_mix_lambda) {
  if (rl_mix_lambda < 0.0f || rl_mix_lambda > 1.0f) {
    throw std::invalid_argument("mixed_rl_xe_loss: lambda must be in [0,1]");
  }
  return tape.add(tape.scale(rl_loss, rl_mix_lambda), tape.scale(xe_loss, 1.0f - rl_mix_lambda));
}

float clip_gradients(GradMap& grads, float clip_norm) {
  if (clip_norm <= 0.0f) throw std::invalid_argument("clip_gradients: clip_norm must be positive");
  double sq = 0.0;
  for (const auto& [name, grad] : grads) {
    for (float g : grad.data) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("clip_gradients: non-finite gradient in \"" + name + "\"");
      }
      sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const float scale = static_cast<float>(clip_norm / norm);
    for (auto& [name, grad] : grads) {
      for (float& g : grad.data) g *= scale;
    }
  }
  return static_cast<float>(norm);
}

void optimizer_step(const TrainConfig& config, ParamStore& params, const GradMap& grads,
                    OptimizerState& state) {
  state.kind = config.optimizer;
  if (config.optimizer == OptimizerKind::kAdam) ++state.step;
  for (const std::string& name : params.names()) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    Tensor& theta = params.mutate(name);
    if (g.shape != theta.shape) {
      throw std::invalid_argument("optimizer_step: gradient shape mismatch for \"" + name + "\"");
    }

    if (config.optimizer == OptimizerKind::kAdagrad) {
      auto acc_it = state.accumulators.find(name);
      if (acc_it == state.accumulators.end()) {
        acc_it = state.accumulators.emplace(name, Tensor::full(theta.shape, config.adagrad_init_acc)).first;
      }
      Tensor& acc = acc_it->second;
      for (std::size_t i = 0; i < theta.data.size(); ++i) {
        const double gi = g.data[i];
        acc.data[i] = static_cast<float>(acc.data[i] + gi * gi);
        theta.data[i] = static_cast<float>(theta.data[i] -
                                           config.learning_rate * gi / std::sqrt(static_cast<double>(acc.data[i])));
      }
    } else {
      auto m_it = state.accumulators.find(name);
      if (m_it == state.accumulators.end()) {
        m_it = state.accumulators.emplace(name, Tensor::zeros(theta.shape)).first;
        state.second_moments.emplace(name, Tensor::zeros(theta.shape));
      }
      Tensor& m = m_it->second;
      Tensor& v = state.second_moments.at(name);
      const double b1 = config.adam_beta1, b2 = config.adam_beta2;
      const double bias1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
      const double bias2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
      for (std::size_t i = 0; i < theta.data.size(); ++i) {
        const double gi = g.data[i];
        m.data[i] = static_cast<float>(b1 * m.data[i] + (1.0 - b1) * gi);
        v.data[i] = static_cast<float>(b2 * v.data[i] + (1.0 - b2) * gi * gi);
        const double m_hat = m.data[i] / bias1;
        const double v_hat = v.data[i] / bias2;
        theta.data[i] = static_cast<float>(theta.data[i] -
                                           config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps));
      }
    }
  }
}

XeForward forward_xe_example(Tape& tape, const Summarizer& model, const EncodedExample& example,
                             const ForwardFlags& flags) {
  const bool coverage_on = model.config().coverage_enabled;
  const bool use_ptr = flags.gamma < 1.0f || coverage_on;
  const bool use_cb = flags.gamma > 0.0f;
  const int steps = example.dec_len();

  EncoderOut enc = model.encode_source(tape, example.enc_ids);

  std::vector<Tensor> ptr_dists, cb_dists, attentions, coverages;
  if (use_ptr) {
    std::optional<CoverageState> coverage;
    if (coverage_on) coverage = CoverageState{Tensor::zeros({enc.states.steps()})};
    LstmState state = enc.init;
    Tensor context = model.zero_context();
    for (int t = 0; t < steps; ++t) {
      if (coverage_on) coverages.push_back(coverage->vec);
      StepOutput out = model.pointer_decoder_step(tape, enc, state, context, example.dec_in_ids[t],
                                                  coverage, example.enc_ext_ids, example.n_oov());
      ptr_dists.push_back(out.p_attn);
      attentions.push_back(out.attention);
      state = out.state;
      context = out.context;
    }
  }
  if (use_cb) {
    LstmState state = enc.init;
    if (flags.cut_enc_to_cb) {
      state = {tape.stop_gradient(state.hidden), tape.stop_gradient(state.memory)};
    }
    for (int t = 0; t < steps; ++t) {
      CbStepOutput out =
          model.closed_book_decoder_step(tape, state, example.dec_in_ids[t], flags.cut_emb_to_cb);
      cb_dists.push_back(out.p_cbdec);
      state = out.state;
    }
  }

  XeForward result;
  LossResult xe = xe_mixed_loss(tape, ptr_dists, cb_dists, example.dec_target_ext_ids,
                                example.dec_target_unk_ids, flags.gamma);
  result.xe = xe.loss;
  result.clamp_warnings = xe.clamp_warnings;
  if (coverage_on) {
    result.coverage = coverage_loss(tape, attentions, coverages);
    result.total = tape.add(result.xe, tape.scale(*result.coverage, flags.coverage_weight));
  } else {
    result.total = result.xe;
  }
  return result;
}

namespace {

void zero_encoder_grads(GradMap& grads) {
  for (auto& [name, grad] : grads) {
    if (is_encoder_param(name)) std::fill(grad.data.begin(), grad.data.end(), 0.0f);
  }
}

StepStats finish_step(Summarizer& model, Tape& tape, const Tensor& batch_loss, const TrainConfig& config,
                      OptimizerState& state, StepStats stats) {
  GradMap grads = tape.backward(batch_loss, model.params());
  if (config.fixed_encoder) zero_encoder_grads(grads);
  double enc_sq = 0.0;
  for (const auto& [name, grad] : grads) {
    if (!is_encoder_param(name)) continue;
    for (float g : grad.data) enc_sq += static_cast<double>(g) * g;
  }
  stats.encoder_grad_norm = static_cast<float>(std::sqrt(enc_sq));
  stats.grad_norm = clip_gradients(grads, config.clip_norm);
  optimizer_step(config, model.params(), grads, state);
  return stats;
}

}  // namespace

StepStats train_step(Summarizer& model, const Batch& batch, const TrainConfig& config,
                     OptimizerState& state) {
  config.validate();
  if (batch.size() == 0) throw std::invalid_argument("train_step: empty batch");

  Tape tape;
  StepStats stats;
  std::vector<Tensor> totals;
  const ForwardFlags flags = ForwardFlags::from(config);
  for (const EncodedExample& example : batch.examples) {
    XeForward fwd = forward_xe_example(tape, model, example, flags);
    totals.push_back(fwd.total);
    stats.xe += fwd.xe.item() / batch.size();
    if (fwd.coverage.has_value()) stats.coverage += fwd.coverage->item() / batch.size();
    stats.clamp_warnings += fwd.clamp_warnings;
  }
  Tensor batch_loss = tape.mean(tape.concat(totals));
  stats.total = batch_loss.item();
  return finish_step(model, tape, batch_loss, config, state, stats);
}

StepStats rl_train_step(Summarizer& model, const Batch& batch,
                        const std::vector<std::vector<std::string>>& references, const Vocabulary& vocab,
                        const TrainConfig& config, const DecodeConfig& sample_config,
                        OptimizerState& state, Rng& rng, const RewardFn& reward_fn) {
  config.validate();
  if (batch.size() == 0) throw std::invalid_argument("rl_train_step: empty batch");
  if (references.size() != batch.examples.size()) {
    throw std::invalid_argument("rl_train_step: " + std::to_string(references.size()) +
                                " references for a batch of " + std::to_string(batch.examples.size()));
  }

  Tape tape;
  StepStats stats;
  std::vector<Tensor> totals;
  const ForwardFlags flags = ForwardFlags::from(config);
  int counted = 0;
  for (std::size_t i = 0; i < batch.examples.size(); ++i) {
    const EncodedExample& example = batch.examples[i];

    DecodeConfig greedy_config = sample_config;
    greedy_config.mode = DecodeMode::kGreedy;
    const std::vector<int> greedy_ids = greedy_decode(model, example, greedy_config);
    const SampleResult sample = sample_decode(model, example, sample_config, rng);
    if (sample.ids.empty()) {
      ++stats.skipped_samples;
      continue;
    }
    const float greedy_reward = reward_fn(detokenize(greedy_ids, vocab, example.oov_words), references[i]);
    const float sampled_reward = reward_fn(detokenize(sample.ids, vocab, example.oov_words), references[i]);

    // Teacher-force the sampled sequence to rebuild its per-step log-probs
    // on the tape; the sampling policy masks [PAD]/[START], so log pi(w) =
    // log P_attn(w) - log(masked mass).
    EncoderOut enc = model.encode_source(tape, example.enc_ids);
    std::optional<CoverageState> coverage;
    if (model.config().coverage_enabled) coverage = CoverageState{Tensor::zeros({enc.states.steps()})};
    LstmState dec_state = enc.init;
    Tensor context = model.zero_context();
    const int vocab_size = model.config().vocab_size;
    Tensor mask = Tensor::full({vocab_size + example.n_oov()}, 1.0f);
    mask.data[kPadId] = 0.0f;
    mask.data[kStartId] = 0.0f;

    std::vector<int> actions = sample.ids;
    // The terminal decision is part of the policy, but only when the
    // sampler actually drew it (it records one log-prob per action).
    if (sample.log_probs.size() == sample.ids.size() + 1) actions.push_back(kStopId);
    std::vector<Tensor> log_probs;
    int input = kStartId;
    for (std::size_t t = 0; t < actions.size(); ++t) {
      StepOutput out = model.pointer_decoder_step(tape, enc, dec_state, context, input, coverage,
                                                  example.enc_ext_ids, example.n_oov());
      Tensor chosen = tape.clamp_min(tape.gather_rows(out.p_attn, {actions[t]}), 1e-10f);
      Tensor denom = tape.clamp_min(tape.sum(tape.multiply(out.p_attn, mask)), 1e-10f);
      log_probs.push_back(tape.subtract(tape.log(chosen), tape.log(denom)));
      input = actions[t] < vocab_size ? actions[t] : kUnkId;
      dec_state = out.state;
      context = out.context;
    }
    Tensor rl = rl_self_critical_loss(tape, log_probs, greedy_reward, sampled_reward);
    stats.rl += rl.item();

    XeForward xe = forward_xe_example(tape, model, example, flags);
    stats.xe += xe.xe.item();
    stats.clamp_warnings += xe.clamp_warnings;
    totals.push_back(mixed_rl_xe_loss(tape, rl, xe.total, config.rl_mix_lambda));
    ++counted;
  }
  if (counted == 0) return stats;  // every sample came back empty; skip the update
  stats.rl /= counted;
  stats.xe /= counted;
  Tensor batch_loss = tape.mean(tape.concat(totals));
  stats.total = batch_loss.item();
  return finish_step(model, tape, batch_loss, config, state, stats);
}

float evaluate_xe(const Summarizer& model, const std::vector<EncodedExample>& examples, float gamma) {
  if (examples.empty()) throw std::invalid_argument("evaluate_xe: empty corpus");
  double total = 0.0;
  for (const EncodedExample& example : examples) {
    Tape tape;
    ForwardFlags flags;
    flags.gamma = gamma;
    total += forward_xe_example(tape, model, example, flags).xe.item();
  }
  return static_cast<float>(total / examples.size());
}

}  // namespace cbsum
