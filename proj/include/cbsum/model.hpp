#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbsum/nn.hpp"
#include "cbsum/rng.hpp"
#include "cbsum/tensor.hpp"

namespace cbsum {

struct ModelConfig {
  int vocab_size = 50000;
  int embed_dim = 128;
  int hidden_dim = 256;
  int max_enc_steps = 400;
  int max_dec_steps = 100;
  bool coverage_enabled = false;

  int attn_dim() const { return 2 * hidden_dim; }
  int proj_dim() const { return hidden_dim; }
  void validate() const;
};

struct AttentionParams {
  Tensor score_vec;  // [attn_dim]
  Tensor enc_proj;   // [2*hidden x attn_dim]
  Tensor dec_proj;   // [hidden x attn_dim]
  Tensor cov_proj;   // [1 x attn_dim]
  Tensor bias;       // [attn_dim]
};

struct PointerGateParams {
  Tensor context_weights;  // [2*hidden]
  Tensor state_weights;    // [hidden]
  Tensor input_weights;    // [embed_dim]
  Tensor bias;             // [1]
};

// Two-layer linear projection onto the fixed vocabulary.
struct VocabProjectionParams {
  Tensor w1;  // [in_dim x proj_dim]
  Tensor b1;  // [proj_dim]
  Tensor w2;  // [proj_dim x vocab_size]
  Tensor b2;  // [vocab_size]
};

// Sum of the attention distributions of all completed decode steps.
struct CoverageState {
  Tensor vec;  // [T_enc]
};

struct AttentionResult {
  Tensor attention;  // [T_enc]
  Tensor context;    // [2*hidden]
  std::optional<CoverageState> new_coverage;
};

struct StepOutput {
  Tensor attention;  // [T_enc]
  Tensor context;    // [2*hidden]
  Tensor p_gen;      // [1]
  Tensor p_vocab;    // [vocab_size]
  Tensor p_attn;     // [vocab_size + n_oov]
  LstmState state;
};

struct CbStepOutput {
  Tensor p_cbdec;  // [vocab_size]
  LstmState state;
};

struct EncoderOut {
  EncoderStates states;
  LstmState init;  // initializes both decoders; .memory is the final memory state
};

AttentionResult attention_step(Tape& tape, const AttentionParams& params, const EncoderStates& enc,
                               const LstmState& dec_state, const std::optional<CoverageState>& coverage,
                               bool coverage_enabled);

Tensor vocab_distribution(Tape& tape, const VocabProjectionParams& params, const LstmState& dec_state,
                          const Tensor& context);

Tensor pointer_gate(Tape& tape, const PointerGateParams& params, const Tensor& context,
                    const LstmState& dec_state, const Tensor& input_embedding);

Tensor pointer_final_distribution(Tape& tape, const Tensor& attention, const Tensor& p_vocab,
                                  const Tensor& p_gen, const std::vector<int>& src_ext_ids, int n_oov);

// Parameter-name buckets used by the ablation switches and structural tests.
bool is_encoder_param(const std::string& name);       // encoder.* and reduce.*
bool is_pointer_only_param(const std::string& name);  // ptrdec.*, attention.*, gate.*
bool is_cb_only_param(const std::string& name);       // cbdec.*
bool is_shared_param(const std::string& name);        // embedding, encoder.*, reduce.*

// The 2-decoder model: a shared bidirectional encoder feeding an
// attention/copy pointer decoder and a plain closed-book decoder.
class Summarizer {
 public:
  explicit Summarizer(ModelConfig config) : config_(config) { config_.validate(); }

  void init_params(Rng& rng);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Tensor embedding(Tape& tape) const;
  LstmParams encoder_fwd(Tape& tape) const;
  LstmParams encoder_bwd(Tape& tape) const;
  ReduceParams reducer(Tape& tape) const;
  AttentionParams attention(Tape& tape) const;
  PointerGateParams gate(Tape& tape) const;
  LstmParams ptr_lstm(Tape& tape) const;
  VocabProjectionParams ptr_proj(Tape& tape) const;
  LstmParams cb_lstm(Tape& tape) const;
  VocabProjectionParams cb_proj(Tape& tape) const;

  // One encoder pass whose outputs feed both decoders. Truncates to
  // max_enc_steps; errors on an empty source.
  EncoderOut encode_source(Tape& tape, const std::vector<int>& src_ids) const;

  // One teacher-forced pointer-decoder step. `prev_context` is the zero
  // vector on the first step; coverage is updated in place when enabled.
  StepOutput pointer_decoder_step(Tape& tape, const EncoderOut& enc, const LstmState& prev_state,
                                  const Tensor& prev_context, int input_id,
                                  std::optional<CoverageState>& coverage,
                                  const std::vector<int>& src_ext_ids, int n_oov,
                                  std::optional<float> force_p_gen = std::nullopt) const;

  // One closed-book step: shared embedding, own LSTM and projection, no
  // attention or copy path. `cut_embedding_grad` severs the direct
  // gradient edge into the embedding matrix.
  CbStepOutput closed_book_decoder_step(Tape& tape, const LstmState& prev_state, int input_id,
                                        bool cut_embedding_grad = false) const;

  Tensor zero_context() const { return Tensor::zeros({2 * config_.hidden_dim}); }

 private:
  ModelConfig config_;
  ParamStore params_;
};

}  // namespace cbsum
