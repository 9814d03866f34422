#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbsum/nn.hpp"
#include "cbsum/rng.hpp"
#include "cbsum/tensor.hpp"

using namespace cbsum;

namespace {

LstmParams make_lstm(ParamStore& store, Tape& tape, const std::string& prefix) {
  return {tape.param(prefix + ".in_weights", store.get(prefix + ".in_weights")),
          tape.param(prefix + ".rec_weights", store.get(prefix + ".rec_weights")),
          tape.param(prefix + ".bias", store.get(prefix + ".bias"))};
}

void add_lstm(ParamStore& store, Rng& rng, const std::string& prefix, int input_dim, int hidden,
              float scale = 0.4f) {
  store.add(prefix + ".in_weights", init_weight(rng, {input_dim, 4 * hidden}, scale));
  store.add(prefix + ".rec_weights", init_weight(rng, {hidden, 4 * hidden}, scale));
  store.add(prefix + ".bias", lstm_bias_init(hidden));
}

}  // namespace

TEST_CASE("embed_lookup repeats rows for repeated ids and handles empty input") {
  Tape tape;
  Tensor emb({4, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  Tensor two = embed_lookup(tape, emb, {2, 2});
  REQUIRE(two.shape == std::vector<int>{2, 3});
  for (int j = 0; j < 3; ++j) {
    CHECK(two.at(0, j) == two.at(1, j));
    CHECK(two.at(0, j) == emb.at(2, j));
  }
  Tensor none = embed_lookup(tape, emb, {});
  CHECK(none.shape == std::vector<int>{0, 3});
  CHECK(none.data.empty());
}

TEST_CASE("embed_lookup rejects un-UNK-mapped ids") {
  Tape tape;
  Tensor emb = Tensor::zeros({4, 3});
  CHECK_THROWS_AS(embed_lookup(tape, emb, {4}), std::out_of_range);
}

TEST_CASE("embed_lookup gradient lands only in looked-up rows") {
  Rng rng(2);
  ParamStore store;
  store.add("embedding", init_weight(rng, {5, 3}, 0.5f));
  Tape tape;
  Tensor emb = tape.param("embedding", store.get("embedding"));
  Tensor out = embed_lookup(tape, emb, {1, 3, 1});
  GradMap grads = tape.backward(tape.sum(out), store);
  const Tensor& g = grads.at("embedding");
  for (int r = 0; r < 5; ++r) {
    const float want = r == 1 ? 2.0f : (r == 3 ? 1.0f : 0.0f);
    for (int c = 0; c < 3; ++c) CHECK(g.at(r, c) == doctest::Approx(want));
  }

  auto loss_fn = [&](Tape& t) {
    return t.sum(t.tanh(embed_lookup(t, t.param("embedding", store.get("embedding")), {1, 3, 1})));
  };
  CHECK(finite_difference_check(store, loss_fn).max_rel_error < 5e-3f);
}

TEST_CASE("lstm cell: zero params and state give zero hidden") {
  Tape tape;
  LstmParams p{Tensor::zeros({3, 16}), Tensor::zeros({4, 16}), Tensor::zeros({16})};
  LstmState out = lstm_cell_step(tape, p, Tensor({3}, {1.0f, -2.0f, 0.5f}), zero_state(4));
  for (float v : out.hidden.data) CHECK(v == doctest::Approx(0.0f));
  for (float v : out.memory.data) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("lstm cell: saturated forget gate preserves memory") {
  const int h = 4;
  Tensor bias = Tensor::zeros({4 * h});
  for (int i = 0; i < h; ++i) bias.data[i] = -20.0f;          // input gate ~ 0
  for (int i = h; i < 2 * h; ++i) bias.data[i] = 20.0f;       // forget gate ~ 1
  LstmParams p{Tensor::zeros({2, 4 * h}), Tensor::zeros({h, 4 * h}), bias};
  LstmState prev{Tensor::zeros({h}), Tensor({h}, {0.3f, -0.7f, 0.1f, 0.9f})};
  Tape tape;
  LstmState out = lstm_cell_step(tape, p, Tensor({2}, {1.0f, 1.0f}), prev);
  for (int i = 0; i < h; ++i) {
    CHECK(std::abs(out.memory.data[i] - prev.memory.data[i]) < 1e-3f);
  }
}

TEST_CASE("lstm cell gradient check, hidden 8") {
  Rng rng(4);
  ParamStore store;
  add_lstm(store, rng, "cell", 5, 8);
  Tensor input = init_weight(rng, {5}, 1.0f);
  Tensor h0 = init_weight(rng, {8}, 0.5f);
  Tensor m0 = init_weight(rng, {8}, 0.5f);
  auto loss_fn = [&](Tape& t) {
    LstmParams p = make_lstm(store, t, "cell");
    LstmState out = lstm_cell_step(t, p, input, {h0, m0});
    return t.sum(t.add(out.hidden, out.memory));
  };
  FdCheckResult r = finite_difference_check(store, loss_fn);
  INFO("worst ", r.worst_param, "[", r.worst_element, "]");
  CHECK(r.max_rel_error < 5e-3f);
}

TEST_CASE("lstm hidden values stay bounded by 1") {
  Rng rng(6);
  ParamStore store;
  add_lstm(store, rng, "cell", 4, 6, 2.0f);
  Tape tape;
  LstmParams p = make_lstm(store, tape, "cell");
  LstmState state = zero_state(6);
  for (int t = 0; t < 20; ++t) {
    state = lstm_cell_step(tape, p, init_weight(rng, {4}, 3.0f), state);
    for (float v : state.hidden.data) CHECK(std::abs(v) <= 1.0f);
  }
}

TEST_CASE("bilstm: single step concatenates one forward and one backward step") {
  Rng rng(8);
  ParamStore store;
  add_lstm(store, rng, "fwd", 3, 4);
  add_lstm(store, rng, "bwd", 3, 4);
  Tensor input = init_weight(rng, {1, 3}, 1.0f);

  Tape tape;
  LstmParams fwd = make_lstm(store, tape, "fwd");
  LstmParams bwd = make_lstm(store, tape, "bwd");
  EncoderStates enc = bilstm_encode(tape, fwd, bwd, input);
  REQUIRE(enc.states.shape == std::vector<int>{1, 8});

  LstmState fs = lstm_cell_step(tape, fwd, matrix_row(tape, input, 0), zero_state(4));
  LstmState bs = lstm_cell_step(tape, bwd, matrix_row(tape, input, 0), zero_state(4));
  for (int j = 0; j < 4; ++j) {
    CHECK(enc.states.at(0, j) == doctest::Approx(fs.hidden.data[j]));
    CHECK(enc.states.at(0, 4 + j) == doctest::Approx(bs.hidden.data[j]));
  }
}

TEST_CASE("bilstm: reversing input with swapped params swaps direction roles") {
  Rng rng(10);
  ParamStore store;
  add_lstm(store, rng, "fwd", 3, 4);
  add_lstm(store, rng, "bwd", 3, 4);
  const int steps = 5;
  Tensor input = init_weight(rng, {steps, 3}, 1.0f);
  Tensor reversed = Tensor::zeros({steps, 3});
  for (int t = 0; t < steps; ++t) {
    for (int j = 0; j < 3; ++j) reversed.at(t, j) = input.at(steps - 1 - t, j);
  }

  Tape tape;
  LstmParams fwd = make_lstm(store, tape, "fwd");
  LstmParams bwd = make_lstm(store, tape, "bwd");
  EncoderStates original = bilstm_encode(tape, fwd, bwd, input);
  EncoderStates swapped = bilstm_encode(tape, bwd, fwd, reversed);

  // Forward hiddens of the reversed run equal backward hiddens of the
  // original run, read in reverse.
  for (int t = 0; t < steps; ++t) {
    for (int j = 0; j < 4; ++j) {
      CHECK(swapped.states.at(t, j) == doctest::Approx(original.states.at(steps - 1 - t, 4 + j)));
    }
  }
}

TEST_CASE("bilstm rejects empty input and keeps row count for varied lengths") {
  Rng rng(12);
  ParamStore store;
  add_lstm(store, rng, "fwd", 2, 3);
  add_lstm(store, rng, "bwd", 2, 3);
  {
    Tape tape;
    LstmParams fwd = make_lstm(store, tape, "fwd");
    LstmParams bwd = make_lstm(store, tape, "bwd");
    CHECK_THROWS_AS(bilstm_encode(tape, fwd, bwd, Tensor::zeros({0, 2})), std::invalid_argument);
  }
  for (int steps : {1, 2, 17, 400}) {
    Tape tape;
    LstmParams fwd = make_lstm(store, tape, "fwd");
    LstmParams bwd = make_lstm(store, tape, "bwd");
    EncoderStates enc = bilstm_encode(tape, fwd, bwd, init_weight(rng, {steps, 2}, 1.0f));
    CHECK(enc.steps() == steps);
  }
}

TEST_CASE("bilstm gradient check, T=4 hidden 8") {
  Rng rng(14);
  ParamStore store;
  add_lstm(store, rng, "fwd", 3, 8);
  add_lstm(store, rng, "bwd", 3, 8);
  Tensor input = init_weight(rng, {4, 3}, 1.0f);
  auto loss_fn = [&](Tape& t) {
    EncoderStates enc = bilstm_encode(t, make_lstm(store, t, "fwd"), make_lstm(store, t, "bwd"), input);
    return t.sum(t.tanh(enc.states));
  };
  FdCheckResult r = finite_difference_check(store, loss_fn);
  INFO("worst ", r.worst_param, "[", r.worst_element, "]");
  CHECK(r.max_rel_error < 5e-3f);
}

TEST_CASE("reduce_states: zero inputs and params give the zero state") {
  Tape tape;
  ReduceParams p{Tensor::zeros({8, 4}), Tensor::zeros({4}), Tensor::zeros({8, 4}), Tensor::zeros({4})};
  LstmState out = reduce_states(tape, p, zero_state(4), zero_state(4));
  for (float v : out.hidden.data) CHECK(v == 0.0f);
  for (float v : out.memory.data) CHECK(v == 0.0f);
}

TEST_CASE("reduce_states with identity weights reproduces tanh of the concatenation") {
  // dec_hidden = 2*enc_hidden so an identity map fits.
  const int eh = 2, dh = 4;
  Tensor ident = Tensor::zeros({2 * eh, dh});
  for (int i = 0; i < dh; ++i) ident.at(i, i) = 1.0f;
  ReduceParams p{ident, Tensor::zeros({dh}), ident, Tensor::zeros({dh})};
  LstmState fwd{Tensor({eh}, {0.1f, -0.2f}), Tensor({eh}, {0.3f, 0.4f})};
  LstmState bwd{Tensor({eh}, {0.5f, -0.6f}), Tensor({eh}, {-0.7f, 0.05f})};
  Tape tape;
  LstmState out = reduce_states(tape, p, fwd, bwd);
  const float cat_h[] = {0.1f, -0.2f, 0.5f, -0.6f};
  const float cat_m[] = {0.3f, 0.4f, -0.7f, 0.05f};
  for (int i = 0; i < dh; ++i) {
    CHECK(out.hidden.data[i] == doctest::Approx(std::tanh(cat_h[i])));
    CHECK(out.memory.data[i] == doctest::Approx(std::tanh(cat_m[i])));
    CHECK(std::abs(out.hidden.data[i] - cat_h[i]) < 0.12f);  // near-identity for small values
  }
}

TEST_CASE("reduce_states gradient check") {
  Rng rng(16);
  ParamStore store;
  store.add("reduce.hidden_weight", init_weight(rng, {8, 5}, 0.5f));
  store.add("reduce.hidden_bias", init_weight(rng, {5}, 0.5f));
  store.add("reduce.memory_weight", init_weight(rng, {8, 5}, 0.5f));
  store.add("reduce.memory_bias", init_weight(rng, {5}, 0.5f));
  LstmState fwd{init_weight(rng, {4}, 1.0f), init_weight(rng, {4}, 1.0f)};
  LstmState bwd{init_weight(rng, {4}, 1.0f), init_weight(rng, {4}, 1.0f)};
  auto loss_fn = [&](Tape& t) {
    ReduceParams p{t.param("reduce.hidden_weight", store.get("reduce.hidden_weight")),
                   t.param("reduce.hidden_bias", store.get("reduce.hidden_bias")),
                   t.param("reduce.memory_weight", store.get("reduce.memory_weight")),
                   t.param("reduce.memory_bias", store.get("reduce.memory_bias"))};
    LstmState out = reduce_states(t, p, fwd, bwd);
    return t.sum(t.add(out.hidden, out.memory));
  };
  CHECK(finite_difference_check(store, loss_fn).max_rel_error < 5e-3f);
}
