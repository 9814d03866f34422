#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "cbsum/decoding.hpp"
#include "cbsum/training.hpp"

using namespace cbsum;

namespace {

ModelConfig tiny_config(int vocab = 20, int hidden = 8) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = 8;
  cfg.hidden_dim = hidden;
  cfg.max_enc_steps = 60;
  cfg.max_dec_steps = 24;
  return cfg;
}

Summarizer random_model(const ModelConfig& cfg, std::uint64_t seed, float scale = 0.6f) {
  Summarizer model(cfg);
  Rng rng(seed);
  model.init_params(rng);
  Rng rescale(seed + 999);
  for (const std::string& name : model.params().names()) {
    Tensor t = model.params().get(name);
    for (float& v : t.data) v = rescale.uniform(-scale, scale);
    model.params().set(name, std::move(t));
  }
  return model;
}

EncodedExample random_example(Rng& rng, int vocab, int len, int n_oov) {
  EncodedExample ex;
  for (int i = 0; i < len; ++i) {
    const bool oov = n_oov > 0 && rng.unit() < 0.25;
    if (oov) {
      const int k = rng.below(n_oov);
      ex.enc_ids.push_back(kUnkId);
      ex.enc_ext_ids.push_back(vocab + k);
    } else {
      const int id = 4 + rng.below(vocab - 4);
      ex.enc_ids.push_back(id);
      ex.enc_ext_ids.push_back(id);
    }
  }
  for (int k = 0; k < n_oov; ++k) ex.oov_words.push_back("oov" + std::to_string(k));
  ex.dec_in_ids = {kStartId};
  ex.dec_target_ext_ids = {kStopId};
  ex.dec_target_unk_ids = {kStopId};
  return ex;
}

// Length-normalized score of a decoded sequence under the model, counting
// the terminal [STOP] as an action when the sequence stopped naturally.
double sequence_score(const Summarizer& model, const EncodedExample& ex, const std::vector<int>& ids,
                      bool stopped) {
  Tape tape;
  EncoderOut enc = model.encode_source(tape, ex.enc_ids);
  std::optional<CoverageState> cov;
  LstmState state = enc.init;
  Tensor ctx = model.zero_context();
  std::vector<int> actions = ids;
  if (stopped) actions.push_back(kStopId);
  double cum = 0.0;
  int input = kStartId;
  for (int id : actions) {
    StepOutput out =
        model.pointer_decoder_step(tape, enc, state, ctx, input, cov, ex.enc_ext_ids, ex.n_oov());
    cum += std::log(std::max(static_cast<double>(out.p_attn.data[id]), 1e-10));
    input = id < model.config().vocab_size ? id : kUnkId;
    state = out.state;
    ctx = out.context;
  }
  return actions.empty() ? -1e30 : cum / static_cast<double>(actions.size());
}

}  // namespace

TEST_CASE("greedy decode is deterministic and respects length bounds") {
  Summarizer model = random_model(tiny_config(), 3);
  Rng rng(5);
  EncodedExample ex = random_example(rng, 20, 7, 2);
  DecodeConfig cfg;
  cfg.min_len = 4;
  cfg.max_len = 10;
  const std::vector<int> a = greedy_decode(model, ex, cfg);
  const std::vector<int> b = greedy_decode(model, ex, cfg);
  CHECK(a == b);
  CHECK(a.size() >= 4);
  CHECK(a.size() <= 10);
  for (int id : a) {
    CHECK(id != kPadId);
    CHECK(id != kStartId);
    CHECK(id != kStopId);
  }
}

TEST_CASE("decode config validation") {
  Summarizer model = random_model(tiny_config(), 7);
  Rng rng(9);
  EncodedExample ex = random_example(rng, 20, 5, 0);
  DecodeConfig cfg;
  cfg.min_len = 0;
  cfg.max_len = 10;
  CHECK_THROWS_AS(greedy_decode(model, ex, cfg), std::invalid_argument);
  cfg.min_len = 11;
  CHECK_THROWS_AS(greedy_decode(model, ex, cfg), std::invalid_argument);
  cfg.min_len = 1;
  cfg.max_len = 1000;  // beyond max_dec_steps
  CHECK_THROWS_AS(greedy_decode(model, ex, cfg), std::invalid_argument);
}

TEST_CASE("overfit model reproduces its gold summary under greedy decode") {
  std::vector<Example> corpus = generate_synthetic_corpus(41, 2, 8, 2, 0.3);
  Vocabulary vocab = Vocabulary::build(corpus, 60);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.embed_dim = 16;
  cfg.hidden_dim = 16;
  cfg.max_enc_steps = 60;
  cfg.max_dec_steps = 20;
  Summarizer model(cfg);
  Rng rng(43);
  model.init_params(rng);

  std::vector<EncodedExample> encoded;
  for (const Example& ex : corpus) encoded.push_back(encode_example(ex, vocab, 60, 20));
  Batch batch = make_batch(encoded, 2);
  TrainConfig tc;
  tc.gamma = 2.0f / 3.0f;
  tc.optimizer = OptimizerKind::kAdam;
  tc.learning_rate = 0.02f;
  OptimizerState state;
  for (int step = 0; step < 250; ++step) train_step(model, batch, tc, state);

  DecodeConfig dc;
  dc.min_len = 1;
  dc.max_len = 20;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::vector<int> ids = greedy_decode(model, encoded[i], dc);
    CHECK(detokenize(ids, vocab, encoded[i].oov_words) == corpus[i].summary);
  }
}

TEST_CASE("sampling is seed-deterministic and concentrated distributions behave like argmax") {
  Summarizer model = random_model(tiny_config(), 11);
  Rng ex_rng(13);
  EncodedExample ex = random_example(ex_rng, 20, 6, 1);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::kSample;
  cfg.min_len = 1;
  cfg.max_len = 8;
  cfg.seed = 77;
  Rng r1(cfg.seed), r2(cfg.seed);
  SampleResult a = sample_decode(model, ex, cfg, r1);
  SampleResult b = sample_decode(model, ex, cfg, r2);
  CHECK(a.ids == b.ids);
  CHECK(a.log_probs == b.log_probs);
  for (int id : a.ids) {
    CHECK(id != kPadId);
    CHECK(id != kStartId);
  }

  // Spike the vocabulary projection so one token holds ~all mass.
  Summarizer spiked = random_model(tiny_config(), 15, 0.0f);
  Tensor b2 = Tensor::zeros({20});
  b2.data[9] = 30.0f;
  spiked.params().set("ptrdec.proj.b2", b2);
  spiked.params().set("gate.bias", Tensor::scalar(30.0f));  // p_gen ~ 1
  EncodedExample plain = random_example(ex_rng, 20, 4, 0);
  DecodeConfig short_cfg = cfg;
  short_cfg.max_len = 5;
  Rng r3(123);
  SampleResult s = sample_decode(spiked, plain, short_cfg, r3);
  REQUIRE(s.ids.size() == 5);
  for (int id : s.ids) CHECK(id == 9);
}

TEST_CASE("sampled log-probs match an independent replay within 1e-5") {
  Summarizer model = random_model(tiny_config(), 17);
  Rng ex_rng(19);
  EncodedExample ex = random_example(ex_rng, 20, 6, 2);
  DecodeConfig cfg;
  cfg.mode = DecodeMode::kSample;
  cfg.min_len = 1;
  cfg.max_len = 8;
  Rng sample_rng(55);
  SampleResult sample = sample_decode(model, ex, cfg, sample_rng);
  REQUIRE(!sample.log_probs.empty());

  // Teacher-forced replay of the sampled actions.
  Tape tape;
  EncoderOut enc = model.encode_source(tape, ex.enc_ids);
  std::optional<CoverageState> cov;
  LstmState state = enc.init;
  Tensor ctx = model.zero_context();
  std::vector<int> actions = sample.ids;
  if (sample.log_probs.size() == sample.ids.size() + 1) actions.push_back(kStopId);
  int input = kStartId;
  for (std::size_t t = 0; t < actions.size(); ++t) {
    StepOutput out =
        model.pointer_decoder_step(tape, enc, state, ctx, input, cov, ex.enc_ext_ids, ex.n_oov());
    double denom = 0.0;
    for (int id = 0; id < static_cast<int>(out.p_attn.data.size()); ++id) {
      if (id != kPadId && id != kStartId) denom += out.p_attn.data[id];
    }
    const double logp = std::log(std::max(static_cast<double>(out.p_attn.data[actions[t]]) / denom, 1e-10));
    CHECK(std::abs(logp - sample.log_probs[t]) < 1e-5);
    input = actions[t] < 20 ? actions[t] : kUnkId;
    state = out.state;
    ctx = out.context;
  }
}

TEST_CASE("beam size 1 equals greedy on 100 random toy inputs") {
  int compared = 0;
  for (int m = 0; m < 10; ++m) {
    Summarizer model = random_model(tiny_config(16, 6), 100 + m);
    Rng ex_rng(200 + m);
    for (int i = 0; i < 10; ++i) {
      EncodedExample ex = random_example(ex_rng, 16, 3 + ex_rng.below(6), ex_rng.below(3));
      DecodeConfig cfg;
      cfg.min_len = 1 + ex_rng.below(3);
      cfg.max_len = cfg.min_len + 6;
      cfg.beam_size = 1;
      CHECK(beam_search_decode(model, ex, cfg) == greedy_decode(model, ex, cfg));
      ++compared;
    }
  }
  CHECK(compared == 100);
}

TEST_CASE("wide beam never scores below greedy on a toy model") {
  for (int m = 0; m < 5; ++m) {
    Summarizer model = random_model(tiny_config(8, 6), 300 + m);
    Rng ex_rng(400 + m);
    EncodedExample ex = random_example(ex_rng, 8, 5, 1);
    DecodeConfig cfg;
    cfg.min_len = 1;
    cfg.max_len = 6;
    cfg.beam_size = 9;  // >= extended vocabulary size
    const std::vector<int> beam_ids = beam_search_decode(model, ex, cfg);
    const std::vector<int> greedy_ids = greedy_decode(model, ex, cfg);
    const bool beam_stopped = static_cast<int>(beam_ids.size()) < cfg.max_len;
    const bool greedy_stopped = static_cast<int>(greedy_ids.size()) < cfg.max_len;
    const double beam_score = sequence_score(model, ex, beam_ids, beam_stopped);
    const double greedy_score = sequence_score(model, ex, greedy_ids, greedy_stopped);
    CHECK(beam_score >= greedy_score - 1e-6);
  }
}

TEST_CASE("beam decode is deterministic") {
  Summarizer model = random_model(tiny_config(), 21);
  Rng ex_rng(23);
  EncodedExample ex = random_example(ex_rng, 20, 6, 1);
  DecodeConfig cfg;
  cfg.min_len = 2;
  cfg.max_len = 10;
  cfg.beam_size = 4;
  CHECK(beam_search_decode(model, ex, cfg) == beam_search_decode(model, ex, cfg));
}

TEST_CASE("detokenize maps extended ids and drops specials") {
  std::vector<Example> corpus = {Example{tokenize("alpha beta"), tokenize("alpha"), {}}};
  Vocabulary vocab = Vocabulary::build(corpus, 6);
  const int v = vocab.size();
  CHECK(detokenize({kStartId, 4, v, kStopId}, vocab, {"zylophone"}) ==
        std::vector<std::string>{vocab.token_of(4), "zylophone"});
  CHECK(detokenize({}, vocab, {}).empty());
  CHECK_THROWS_AS(detokenize({v + 1}, vocab, {"one"}), std::out_of_range);
}

TEST_CASE("encode/detokenize round-trip on copyable synthetic summaries") {
  std::vector<Example> corpus = generate_synthetic_corpus(51, 12, 8, 2, 0.4);
  Vocabulary vocab = Vocabulary::build(corpus, 70);
  for (const Example& ex : corpus) {
    EncodedExample enc = encode_example(ex, vocab, 400, 100);
    const std::vector<std::string> back = detokenize(enc.dec_target_ext_ids, vocab, enc.oov_words);
    CHECK(back == ex.summary);
  }
}

TEST_CASE("decoded summaries file round-trips") {
  std::vector<DecodedSummary> summaries = {{0, {"a", "b", "."}}, {1, {"c"}}};
  save_decoded(summaries, "decoded_test.jsonl");
  std::vector<DecodedSummary> loaded = load_decoded("decoded_test.jsonl");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].example_index == 0);
  CHECK(loaded[0].tokens == summaries[0].tokens);
  CHECK(loaded[1].tokens == summaries[1].tokens);
  std::remove("decoded_test.jsonl");
}
