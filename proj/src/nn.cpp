#include "cbsum/nn.hpp"

#include <stdexcept>

namespace cbsum {

LstmState zero_state(int hidden_dim) {
  return {Tensor::zeros({hidden_dim}), Tensor::zeros({hidden_dim})};
}

Tensor matrix_row(Tape& tape, const Tensor& matrix, int row) {
  return tape.reshape(tape.gather_rows(matrix, {row}), {matrix.shape[1]});
}

Tensor embed_lookup(Tape& tape, const Tensor& embedding, const std::vector<int>& ids) {
  const int vocab = embedding.shape[0];
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embed_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab) + " (caller must UNK-map extended ids)");
    }
  }
  return tape.gather_rows(embedding, ids);
}

LstmState lstm_cell_step(Tape& tape, const LstmParams& params, const Tensor& input,
                         const LstmState& prev) {
  const int h = params.hidden();
  Tensor pre = tape.add(tape.add(tape.matmul(input, params.in_weights),
                                 tape.matmul(prev.hidden, params.rec_weights)),
                        params.bias);
  Tensor in_gate = tape.sigmoid(tape.slice(pre, 0, h));
  Tensor forget_gate = tape.sigmoid(tape.slice(pre, h, h));
  Tensor candidate = tape.tanh(tape.slice(pre, 2 * h, h));
  Tensor out_gate = tape.sigmoid(tape.slice(pre, 3 * h, h));
  Tensor memory = tape.add(tape.multiply(forget_gate, prev.memory), tape.multiply(in_gate, candidate));
  Tensor hidden = tape.multiply(out_gate, tape.tanh(memory));
  return {hidden, memory};
}

EncoderStates bilstm_encode(Tape& tape, const LstmParams& fwd, const LstmParams& bwd,
                            const Tensor& inputs) {
  const int steps = inputs.shape[0];
  if (steps < 1) throw std::invalid_argument("bilstm_encode: empty input sequence");
  const int h = fwd.hidden();

  std::vector<Tensor> fwd_hidden(steps), bwd_hidden(steps);
  LstmState fwd_state = zero_state(h);
  for (int t = 0; t < steps; ++t) {
    fwd_state = lstm_cell_step(tape, fwd, matrix_row(tape, inputs, t), fwd_state);
    fwd_hidden[t] = fwd_state.hidden;
  }
  LstmState bwd_state = zero_state(h);
  for (int t = steps - 1; t >= 0; --t) {
    bwd_state = lstm_cell_step(tape, bwd, matrix_row(tape, inputs, t), bwd_state);
    bwd_hidden[t] = bwd_state.hidden;
  }

  std::vector<Tensor> rows(steps);
  for (int t = 0; t < steps; ++t) rows[t] = tape.concat({fwd_hidden[t], bwd_hidden[t]});
  return {tape.stack(rows), fwd_state, bwd_state};
}

LstmState reduce_states(Tape& tape, const ReduceParams& params, const LstmState& fwd_final,
                        const LstmState& bwd_final) {
  Tensor hidden_cat = tape.concat({fwd_final.hidden, bwd_final.hidden});
  Tensor memory_cat = tape.concat({fwd_final.memory, bwd_final.memory});
  Tensor hidden = tape.tanh(tape.add(tape.matmul(hidden_cat, params.hidden_weight), params.hidden_bias));
  Tensor memory = tape.tanh(tape.add(tape.matmul(memory_cat, params.memory_weight), params.memory_bias));
  return {hidden, memory};
}

Tensor init_weight(Rng& rng, std::vector<int> shape, float scale) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) v = rng.uniform(-scale, scale);
  return t;
}

Tensor lstm_bias_init(int hidden_dim) {
  Tensor bias = Tensor::zeros({4 * hidden_dim});
  for (int i = hidden_dim; i < 2 * hidden_dim; ++i) bias.data[i] = 1.0f;  // forget gate
  return bias;
}

}  // namespace cbsum
