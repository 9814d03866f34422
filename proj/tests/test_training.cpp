#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbsum/metrics.hpp"
#include "cbsum/training.hpp"

using namespace cbsum;

namespace {

ModelConfig tiny_config(int vocab = 20, int embed = 8, int hidden = 8, bool coverage = false) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = embed;
  cfg.hidden_dim = hidden;
  cfg.max_enc_steps = 60;
  cfg.max_dec_steps = 30;
  cfg.coverage_enabled = coverage;
  return cfg;
}

Summarizer make_model(const ModelConfig& cfg, std::uint64_t seed = 1, float scale = 0.5f) {
  Summarizer model(cfg);
  Rng rng(seed);
  model.init_params(rng);
  if (scale > 0.0f) {
    Rng rescale(seed + 1000);
    for (const std::string& name : model.params().names()) {
      Tensor t = model.params().get(name);
      for (float& v : t.data) v = rescale.uniform(-scale, scale);
      model.params().set(name, std::move(t));
    }
  }
  return model;
}

EncodedExample tiny_example() {
  EncodedExample ex;
  ex.enc_ids = {4, 1, 9, 12, 1};
  ex.enc_ext_ids = {4, 20, 9, 12, 21};
  ex.oov_words = {"novelone", "noveltwo"};
  ex.dec_in_ids = {kStartId, 5, kUnkId};
  ex.dec_target_ext_ids = {5, 20, kStopId};
  ex.dec_target_unk_ids = {5, kUnkId, kStopId};
  return ex;
}

GradMap example_grads(Summarizer& model, const EncodedExample& ex, const ForwardFlags& flags) {
  Tape tape;
  XeForward fwd = forward_xe_example(tape, model, ex, flags);
  return tape.backward(fwd.total, model.params());
}

double grad_norm_of(const GradMap& grads, const std::function<bool(const std::string&)>& pick) {
  double sq = 0.0;
  for (const auto& [name, grad] : grads) {
    if (!pick(name)) continue;
    for (float g : grad.data) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

}  // namespace

TEST_CASE("xe_mixed_loss of uniform distributions is ln(vocab)") {
  Tape tape;
  std::vector<Tensor> ptr(4, Tensor::full({20}, 0.05f));
  std::vector<Tensor> cb(4, Tensor::full({20}, 0.05f));
  const std::vector<int> targets = {4, 7, 11, 3};
  LossResult r = xe_mixed_loss(tape, ptr, cb, targets, targets, 2.0f / 3.0f);
  CHECK(r.loss.item() == doctest::Approx(std::log(20.0)).epsilon(1e-5));
  CHECK(r.clamp_warnings == 0);
}

TEST_CASE("xe_mixed_loss gamma endpoints") {
  Tape tape;
  std::vector<Tensor> ptr = {Tensor({4}, {0.1f, 0.2f, 0.3f, 0.4f})};
  std::vector<Tensor> cb = {Tensor({4}, {0.25f, 0.25f, 0.25f, 0.25f})};
  const std::vector<int> tgt = {2};

  LossResult ptr_only = xe_mixed_loss(tape, ptr, {}, tgt, tgt, 0.0f);
  CHECK(ptr_only.loss.item() == doctest::Approx(-std::log(0.3)).epsilon(1e-6));

  LossResult cb_only = xe_mixed_loss(tape, {}, cb, tgt, tgt, 1.0f);
  CHECK(cb_only.loss.item() == doctest::Approx(-std::log(0.25)).epsilon(1e-6));
}

TEST_CASE("xe_mixed_loss clamps zero target probabilities and warns") {
  Tape tape;
  std::vector<Tensor> ptr = {Tensor({3}, {1.0f, 0.0f, 0.0f})};
  const std::vector<int> tgt = {1};
  LossResult r = xe_mixed_loss(tape, ptr, {}, tgt, tgt, 0.0f);
  CHECK(r.clamp_warnings == 1);
  CHECK(r.loss.item() == doctest::Approx(-std::log(1e-10f)).epsilon(1e-4));
}

TEST_CASE("coverage_loss: first step zero, repeat costs 1, disjoint one-hots free") {
  Tape tape;
  Tensor a({3}, {0.5f, 0.3f, 0.2f});
  Tensor zero = Tensor::zeros({3});

  CHECK(coverage_loss(tape, {a}, {zero}).item() == doctest::Approx(0.0f));

  // Identical attention at steps 0 and 1: step-1 contribution is 1.
  Tensor after = tape.add(zero, a);
  CHECK(coverage_loss(tape, {a, a}, {zero, after}).item() == doctest::Approx(0.5f).epsilon(1e-5));

  Tensor one_hot_a({3}, {1.0f, 0.0f, 0.0f});
  Tensor one_hot_b({3}, {0.0f, 1.0f, 0.0f});
  Tensor cov_after_a = tape.add(zero, one_hot_a);
  CHECK(coverage_loss(tape, {one_hot_a, one_hot_b}, {zero, cov_after_a}).item() == doctest::Approx(0.0f));
}

TEST_CASE("rl loss: zero advantage is exactly zero with zero gradients") {
  ParamStore params;
  params.add("w", Tensor({2}, {0.3f, 0.6f}));
  Tape tape;
  Tensor w = tape.param("w", params.get("w"));
  std::vector<Tensor> logps = {tape.log(tape.gather_rows(tape.softmax(w), {0}))};
  Tensor loss = rl_self_critical_loss(tape, logps, 0.42f, 0.42f);
  CHECK(loss.item() == 0.0f);
  GradMap grads = tape.backward(loss, params);
  for (float g : grads.at("w").data) CHECK(g == 0.0f);
}

TEST_CASE("rl loss scales linearly with the advantage and rejects empty samples") {
  Tape tape;
  std::vector<Tensor> logps = {Tensor::scalar(-1.5f), Tensor::scalar(-0.5f)};
  Tensor single = rl_self_critical_loss(tape, logps, 0.8f, 0.6f);
  Tensor doubled = rl_self_critical_loss(tape, logps, 1.0f, 0.6f);
  CHECK(doubled.item() == doctest::Approx(2.0f * single.item()));
  CHECK_THROWS_AS(rl_self_critical_loss(tape, {}, 1.0f, 0.5f), std::invalid_argument);
}

TEST_CASE("one descent step on the RL loss raises the sampled sequence's log-prob") {
  Summarizer model = make_model(tiny_config(), 3);
  EncodedExample ex = tiny_example();
  const std::vector<int> sampled = {5, 9, kStopId};  // pretend sample that beat greedy

  auto sequence_log_prob = [&](Tape& tape) {
    EncoderOut enc = model.encode_source(tape, ex.enc_ids);
    std::optional<CoverageState> cov;
    LstmState state = enc.init;
    Tensor ctx = model.zero_context();
    std::vector<Tensor> logps;
    int input = kStartId;
    for (int id : sampled) {
      StepOutput out = model.pointer_decoder_step(tape, enc, state, ctx, input, cov, ex.enc_ext_ids,
                                                  ex.n_oov());
      logps.push_back(tape.log(tape.clamp_min(tape.gather_rows(out.p_attn, {id}), 1e-10f)));
      input = id < 20 ? id : kUnkId;
      state = out.state;
      ctx = out.context;
    }
    return logps;
  };

  float before;
  {
    Tape tape;
    std::vector<Tensor> logps = sequence_log_prob(tape);
    before = tape.sum(tape.concat(logps)).item();
  }
  {
    Tape tape;
    std::vector<Tensor> logps = sequence_log_prob(tape);
    // Sampled reward beats greedy: minimizing the loss should push the
    // sampled sequence's probability up.
    Tensor loss = rl_self_critical_loss(tape, logps, 0.2f, 0.9f);
    GradMap grads = tape.backward(loss, model.params());
    TrainConfig config;
    config.learning_rate = 0.05f;
    OptimizerState state;
    optimizer_step(config, model.params(), grads, state);
  }
  float after;
  {
    Tape tape;
    std::vector<Tensor> logps = sequence_log_prob(tape);
    after = tape.sum(tape.concat(logps)).item();
  }
  CHECK(after > before);
}

TEST_CASE("mixed RL+XE loss endpoints and arithmetic") {
  Tape tape;
  Tensor rl = Tensor::scalar(1.0f);
  Tensor xe = Tensor::scalar(2.0f);
  CHECK(mixed_rl_xe_loss(tape, rl, xe, 0.0f).item() == doctest::Approx(2.0f));
  CHECK(mixed_rl_xe_loss(tape, rl, xe, 1.0f).item() == doctest::Approx(1.0f));
  CHECK(mixed_rl_xe_loss(tape, rl, xe, 0.9984f).item() == doctest::Approx(1.0016f).epsilon(1e-6));
}

TEST_CASE("clip_gradients: below threshold unchanged, above rescaled, non-finite rejected") {
  {
    GradMap grads;
    grads.emplace("w", Tensor({2}, {0.6f, 0.8f}));  // norm 1
    const float norm = clip_gradients(grads, 2.0f);
    CHECK(norm == doctest::Approx(1.0f));
    CHECK(grads.at("w").data[0] == doctest::Approx(0.6f));
  }
  {
    GradMap grads;
    grads.emplace("w", Tensor({2}, {3.0f, 4.0f}));  // norm 5
    const float norm = clip_gradients(grads, 2.0f);
    CHECK(norm == doctest::Approx(5.0f));
    CHECK(grads.at("w").data[0] == doctest::Approx(1.2f));
    CHECK(grads.at("w").data[1] == doctest::Approx(1.6f));
  }
  {
    Rng rng(5);
    GradMap grads;
    grads.emplace("a", Tensor({7}, {1, -2, 3, -4, 5, -6, 7}));
    grads.emplace("b", Tensor({3}, {9, -8, 7}));
    clip_gradients(grads, 2.0f);
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
      for (float v : g.data) sq += static_cast<double>(v) * v;
    }
    CHECK(std::sqrt(sq) <= 2.0 + 1e-5);
  }
  {
    GradMap grads;
    grads.emplace("bad.param", Tensor({1}, {std::numeric_limits<float>::infinity()}));
    CHECK_THROWS_WITH_AS(clip_gradients(grads, 2.0f),
                         "clip_gradients: non-finite gradient in \"bad.param\"", std::runtime_error);
  }
}

TEST_CASE("adagrad: zero gradient is a no-op, first step matches the update rule") {
  TrainConfig config;
  config.optimizer = OptimizerKind::kAdagrad;
  config.learning_rate = 0.15f;
  ParamStore params;
  params.add("w", Tensor({2}, {1.0f, -2.0f}));
  OptimizerState state;

  GradMap zero;
  zero.emplace("w", Tensor::zeros({2}));
  optimizer_step(config, params, zero, state);
  CHECK(params.get("w").data[0] == 1.0f);
  CHECK(params.get("w").data[1] == -2.0f);
  CHECK(state.accumulators.at("w").data[0] == doctest::Approx(0.1f));

  GradMap grads;
  grads.emplace("w", Tensor({2}, {1.0f, 0.0f}));
  optimizer_step(config, params, grads, state);
  // acc = 0.1 + 1 = 1.1; delta = -0.15/sqrt(1.1)
  CHECK(params.get("w").data[0] == doctest::Approx(1.0f - 0.15 / std::sqrt(1.1)).epsilon(1e-6));
  CHECK(params.get("w").data[1] == -2.0f);
}

TEST_CASE("adam: first-step magnitude is about the learning rate") {
  TrainConfig config;
  config.optimizer = OptimizerKind::kAdam;
  config.learning_rate = 0.001f;
  ParamStore params;
  params.add("w", Tensor({3}, {0.5f, -0.25f, 2.0f}));
  OptimizerState state;
  GradMap grads;
  grads.emplace("w", Tensor({3}, {0.013f, -4.0f, 0.7f}));
  const Tensor before = params.get("w");
  optimizer_step(config, params, grads, state);
  for (int i = 0; i < 3; ++i) {
    const float delta = std::abs(params.get("w").data[i] - before.data[i]);
    CHECK(delta == doctest::Approx(config.learning_rate).epsilon(1e-2));
  }
  CHECK(state.step == 1);
}

TEST_CASE("gamma in (0,1) trains both decoders' exclusive parameters") {
  Summarizer model = make_model(tiny_config(), 7);
  ForwardFlags flags;
  flags.gamma = 2.0f / 3.0f;
  GradMap grads = example_grads(model, tiny_example(), flags);
  CHECK(grad_norm_of(grads, is_pointer_only_param) > 0.0);
  CHECK(grad_norm_of(grads, is_cb_only_param) > 0.0);
  CHECK(grad_norm_of(grads, is_encoder_param) > 0.0);
}

TEST_CASE("gamma=1 leaves every pointer-exclusive gradient exactly zero") {
  Summarizer model = make_model(tiny_config(), 9);
  ForwardFlags flags;
  flags.gamma = 1.0f;
  GradMap grads = example_grads(model, tiny_example(), flags);
  for (const auto& [name, grad] : grads) {
    if (!is_pointer_only_param(name)) continue;
    for (float g : grad.data) CHECK(g == 0.0f);
  }
  CHECK(grad_norm_of(grads, is_cb_only_param) > 0.0);
}

TEST_CASE("gamma=0 loss equals the pointer-only negative log likelihood") {
  Summarizer model = make_model(tiny_config(), 11);
  EncodedExample ex = tiny_example();
  Tape tape;
  ForwardFlags flags;
  flags.gamma = 0.0f;
  XeForward fwd = forward_xe_example(tape, model, ex, flags);

  // Independent recomputation of the pointer NLL from the same parameters.
  Tape tape2;
  EncoderOut enc = model.encode_source(tape2, ex.enc_ids);
  std::optional<CoverageState> cov;
  LstmState state = enc.init;
  Tensor ctx = model.zero_context();
  double nll = 0.0;
  for (int t = 0; t < ex.dec_len(); ++t) {
    StepOutput out =
        model.pointer_decoder_step(tape2, enc, state, ctx, ex.dec_in_ids[t], cov, ex.enc_ext_ids, ex.n_oov());
    nll -= std::log(std::max(static_cast<double>(out.p_attn.data[ex.dec_target_ext_ids[t]]), 1e-10));
    state = out.state;
    ctx = out.context;
  }
  nll /= ex.dec_len();
  CHECK(fwd.total.item() == doctest::Approx(nll).epsilon(1e-6));
}

TEST_CASE("flow cut 1 with gamma=1 zeroes all encoder gradients") {
  Summarizer model = make_model(tiny_config(), 13);
  ForwardFlags flags;
  flags.gamma = 1.0f;
  flags.cut_enc_to_cb = true;
  GradMap grads = example_grads(model, tiny_example(), flags);
  for (const auto& [name, grad] : grads) {
    if (!is_encoder_param(name)) continue;
    for (float g : grad.data) CHECK(g == 0.0f);
  }
  // The embedding still trains through the direct edge.
  CHECK(grad_norm_of(grads, [](const std::string& n) { return n == "embedding"; }) > 0.0);
}

TEST_CASE("flow cuts decompose the embedding gradient into two paths") {
  Summarizer model = make_model(tiny_config(), 15);
  EncodedExample ex = tiny_example();
  ForwardFlags none, cut1, cut2, both;
  none.gamma = cut1.gamma = cut2.gamma = both.gamma = 1.0f;
  cut1.cut_enc_to_cb = both.cut_enc_to_cb = true;
  cut2.cut_emb_to_cb = both.cut_emb_to_cb = true;

  const Tensor g_none = example_grads(model, ex, none).at("embedding");
  const Tensor g_cut1 = example_grads(model, ex, cut1).at("embedding");  // direct path only
  const Tensor g_cut2 = example_grads(model, ex, cut2).at("embedding");  // encoder path only
  const GradMap both_grads = example_grads(model, ex, both);

  for (std::size_t i = 0; i < g_none.data.size(); ++i) {
    CHECK(g_none.data[i] == doctest::Approx(g_cut1.data[i] + g_cut2.data[i]).epsilon(1e-4).scale(1.0));
  }
  // Both cuts: no gradient reaches any shared parameter, yet the
  // closed-book decoder's own parameters still train.
  for (const auto& [name, grad] : both_grads) {
    if (!is_shared_param(name)) continue;
    for (float g : grad.data) CHECK(g == 0.0f);
  }
  CHECK(grad_norm_of(both_grads, is_cb_only_param) > 0.0);
}

TEST_CASE("fixed encoder keeps encoder parameters bit-identical across steps") {
  Summarizer model = make_model(tiny_config(), 17);
  std::map<std::string, std::vector<float>> before;
  for (const std::string& name : model.params().names()) {
    if (is_encoder_param(name)) before[name] = model.params().get(name).data;
  }
  TrainConfig config;
  config.fixed_encoder = true;
  config.gamma = 0.5f;
  config.batch_size = 1;
  OptimizerState state;
  Batch batch = make_batch({tiny_example()}, 1);
  for (int step = 0; step < 3; ++step) train_step(model, batch, config, state);
  for (const auto& [name, data] : before) {
    CHECK(model.params().get(name).data == data);
  }
  // Sanity: something else did move.
  CHECK(model.params().get("embedding").data != std::vector<float>(model.params().get("embedding").size(), 0.0f));
}

TEST_CASE("train_step reduces the loss on a repeated batch") {
  Summarizer model = make_model(tiny_config(), 19, 0.1f);
  TrainConfig config;
  config.gamma = 2.0f / 3.0f;
  config.learning_rate = 0.2f;
  OptimizerState state;
  Batch batch = make_batch({tiny_example()}, 1);
  const float initial = train_step(model, batch, config, state).total;
  float last = initial;
  for (int step = 0; step < 30; ++step) last = train_step(model, batch, config, state).total;
  CHECK(last < 0.5f * initial);
}

TEST_CASE("full 2-decoder gradient check with coverage on (tiny dims)") {
  Summarizer model = make_model(tiny_config(20, 8, 8, true), 21);
  EncodedExample ex = tiny_example();
  ForwardFlags flags;
  flags.gamma = 2.0f / 3.0f;
  flags.coverage_weight = 1.0f;
  auto loss_fn = [&](Tape& tape) { return forward_xe_example(tape, model, ex, flags).total; };
  FdCheckResult r = finite_difference_check(model.params(), loss_fn);
  INFO("worst ", r.worst_param, "[", r.worst_element, "] analytic=", r.analytic, " numeric=", r.numeric);
  CHECK(r.max_rel_error < 5e-3f);
}

TEST_CASE("200 optimizer steps memorize a 4-example corpus (>=90% loss drop)") {
  std::vector<Example> corpus = generate_synthetic_corpus(23, 4, 8, 2, 0.25);
  Vocabulary vocab = Vocabulary::build(corpus, 60);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.embed_dim = 16;
  cfg.hidden_dim = 16;
  cfg.max_enc_steps = 60;
  cfg.max_dec_steps = 20;
  Summarizer model(cfg);
  Rng rng(29);
  model.init_params(rng);

  std::vector<EncodedExample> encoded;
  for (const Example& ex : corpus) encoded.push_back(encode_example(ex, vocab, 60, 20));
  Batch batch = make_batch(encoded, 4);
  TrainConfig config;
  config.gamma = 2.0f / 3.0f;
  config.optimizer = OptimizerKind::kAdam;
  config.learning_rate = 0.02f;
  OptimizerState state;
  const float initial = evaluate_xe(model, encoded, config.gamma);
  for (int step = 0; step < 200; ++step) train_step(model, batch, config, state);
  const float final_xe = evaluate_xe(model, encoded, config.gamma);
  INFO("initial ", initial, " final ", final_xe);
  CHECK(final_xe <= 0.1f * initial);
}

TEST_CASE("rl_train_step runs and keeps distributions trainable") {
  std::vector<Example> corpus = generate_synthetic_corpus(31, 2, 8, 2);
  Vocabulary vocab = Vocabulary::build(corpus, 60);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.max_enc_steps = 60;
  cfg.max_dec_steps = 16;
  Summarizer model(cfg);
  Rng rng(37);
  model.init_params(rng);

  std::vector<EncodedExample> encoded;
  std::vector<std::vector<std::string>> references;
  for (const Example& ex : corpus) {
    encoded.push_back(encode_example(ex, vocab, 60, 16));
    references.push_back(ex.summary);
  }
  Batch batch = make_batch(encoded, 2);
  TrainConfig config;
  config.optimizer = OptimizerKind::kAdam;
  config.learning_rate = 1e-3f;
  config.rl_mix_lambda = 0.9984f;
  DecodeConfig sample_cfg;
  sample_cfg.mode = DecodeMode::kSample;
  sample_cfg.min_len = 1;
  sample_cfg.max_len = 12;
  OptimizerState state;
  Rng sample_rng(41);
  auto reward = [](const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    return static_cast<float>(rouge_l(cand, ref).f1);
  };
  StepStats stats = rl_train_step(model, batch, references, vocab, config, sample_cfg, state, sample_rng, reward);
  CHECK(stats.skipped_samples <= 1);
  CHECK(std::isfinite(stats.total));
  CHECK(std::isfinite(stats.rl));
}
