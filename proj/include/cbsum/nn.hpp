#pragma once

#include "cbsum/rng.hpp"
#include "cbsum/tensor.hpp"

namespace cbsum {

// Gate order is fixed as (input, forget, cell-candidate, output).
struct LstmParams {
  Tensor in_weights;   // [input_dim x 4*hidden]
  Tensor rec_weights;  // [hidden x 4*hidden]
  Tensor bias;         // [4*hidden]

  int hidden() const { return rec_weights.shape[0]; }
};

struct LstmState {
  Tensor hidden;  // [hidden]
  Tensor memory;  // [hidden]
};

struct EncoderStates {
  Tensor states;  // [T x 2*hidden]; row i is [h_fwd_i ; h_bwd_i]
  LstmState fwd_final;
  LstmState bwd_final;

  int steps() const { return states.shape[0]; }
};

// Affine + tanh map from the concatenated bidirectional finals to the
// single state that initializes both decoders.
struct ReduceParams {
  Tensor hidden_weight;  // [2*enc_hidden x dec_hidden]
  Tensor hidden_bias;    // [dec_hidden]
  Tensor memory_weight;  // [2*enc_hidden x dec_hidden]
  Tensor memory_bias;    // [dec_hidden]
};

LstmState zero_state(int hidden_dim);

// Row i of the result is embedding row ids[i]; ids must already be
// UNK-mapped into the fixed vocabulary.
Tensor embed_lookup(Tape& tape, const Tensor& embedding, const std::vector<int>& ids);

LstmState lstm_cell_step(Tape& tape, const LstmParams& params, const Tensor& input,
                         const LstmState& prev);

EncoderStates bilstm_encode(Tape& tape, const LstmParams& fwd, const LstmParams& bwd,
                            const Tensor& inputs);

LstmState reduce_states(Tape& tape, const ReduceParams& params, const LstmState& fwd_final,
                        const LstmState& bwd_final);

// Rank-1 view of one matrix row.
Tensor matrix_row(Tape& tape, const Tensor& matrix, int row);

Tensor init_weight(Rng& rng, std::vector<int> shape, float scale = 0.02f);
Tensor lstm_bias_init(int hidden_dim);  // zeros, forget block set to 1

}  // namespace cbsum
