#include "cbsum/model.hpp"

#include <stdexcept>

namespace cbsum {

void ModelConfig::validate() const {
  if (vocab_size <= 4 || embed_dim <= 0 || hidden_dim <= 0 || max_enc_steps <= 0 || max_dec_steps <= 0) {
    throw std::invalid_argument("model config: all dimensions must be positive (vocab_size > 4)");
  }
}

AttentionResult attention_step(Tape& tape, const AttentionParams& params, const EncoderStates& enc,
                               const LstmState& dec_state, const std::optional<CoverageState>& coverage,
                               bool coverage_enabled) {
  Tensor features = tape.add(tape.matmul(enc.states, params.enc_proj),
                             tape.matmul(dec_state.hidden, params.dec_proj));
  if (coverage_enabled) {
    if (!coverage.has_value()) {
      throw std::invalid_argument("attention_step: coverage enabled but no coverage state given");
    }
    Tensor cov_col = tape.reshape(coverage->vec, {enc.steps(), 1});
    features = tape.add(features, tape.matmul(cov_col, params.cov_proj));
  }
  Tensor scores = tape.matmul(tape.tanh(tape.add(features, params.bias)), params.score_vec);
  Tensor attention = tape.softmax(scores);
  Tensor context = tape.matmul(attention, enc.states);

  std::optional<CoverageState> new_coverage;
  if (coverage_enabled) new_coverage = CoverageState{tape.add(coverage->vec, attention)};
  return {attention, context, std::move(new_coverage)};
}

Tensor vocab_distribution(Tape& tape, const VocabProjectionParams& params, const LstmState& dec_state,
                          const Tensor& context) {
  Tensor joined = tape.concat({dec_state.hidden, context});
  Tensor inner = tape.add(tape.matmul(joined, params.w1), params.b1);
  Tensor logits = tape.add(tape.matmul(inner, params.w2), params.b2);
  return tape.softmax(logits);
}

Tensor pointer_gate(Tape& tape, const PointerGateParams& params, const Tensor& context,
                    const LstmState& dec_state, const Tensor& input_embedding) {
  Tensor pre = tape.add(tape.add(tape.matmul(context, params.context_weights),
                                 tape.matmul(dec_state.hidden, params.state_weights)),
                        tape.add(tape.matmul(input_embedding, params.input_weights), params.bias));
  return tape.sigmoid(pre);
}

Tensor pointer_final_distribution(Tape& tape, const Tensor& attention, const Tensor& p_vocab,
                                  const Tensor& p_gen, const std::vector<int>& src_ext_ids, int n_oov) {
  const int vocab_size = static_cast<int>(p_vocab.data.size());
  const int extended = vocab_size + n_oov;
  for (int id : src_ext_ids) {
    if (id < 0 || id >= extended) {
      throw std::out_of_range("pointer_final_distribution: extended id " + std::to_string(id) +
                              " outside [0," + std::to_string(extended) + ")");
    }
  }
  if (static_cast<int>(src_ext_ids.size()) != attention.size()) {
    throw std::invalid_argument("pointer_final_distribution: " + std::to_string(src_ext_ids.size()) +
                                " source ids for attention of length " + std::to_string(attention.size()));
  }
  Tensor copy_mass = tape.scatter_add_rows(attention, src_ext_ids, extended);
  Tensor gen_mass = n_oov > 0 ? tape.concat({p_vocab, Tensor::zeros({n_oov})}) : p_vocab;
  Tensor keep = tape.subtract(Tensor::scalar(1.0f), p_gen);
  return tape.add(tape.multiply(gen_mass, p_gen), tape.multiply(copy_mass, keep));
}

bool is_encoder_param(const std::string& name) {
  return name.rfind("encoder.", 0) == 0 || name.rfind("reduce.", 0) == 0;
}

bool is_pointer_only_param(const std::string& name) {
  return name.rfind("ptrdec.", 0) == 0 || name.rfind("attention.", 0) == 0 || name.rfind("gate.", 0) == 0;
}

bool is_cb_only_param(const std::string& name) { return name.rfind("cbdec.", 0) == 0; }

bool is_shared_param(const std::string& name) { return name == "embedding" || is_encoder_param(name); }

void Summarizer::init_params(Rng& rng) {
  const int v = config_.vocab_size;
  const int e = config_.embed_dim;
  const int h = config_.hidden_dim;
  const int a = config_.attn_dim();
  const int p = config_.proj_dim();

  auto add_lstm = [&](const std::string& prefix, int input_dim) {
    params_.add(prefix + ".in_weights", init_weight(rng, {input_dim, 4 * h}));
    params_.add(prefix + ".rec_weights", init_weight(rng, {h, 4 * h}));
    params_.add(prefix + ".bias", lstm_bias_init(h));
  };

  params_.add("embedding", init_weight(rng, {v, e}));
  add_lstm("encoder.fwd", e);
  add_lstm("encoder.bwd", e);
  params_.add("reduce.hidden_weight", init_weight(rng, {2 * h, h}));
  params_.add("reduce.hidden_bias", Tensor::zeros({h}));
  params_.add("reduce.memory_weight", init_weight(rng, {2 * h, h}));
  params_.add("reduce.memory_bias", Tensor::zeros({h}));
  params_.add("attention.score_vec", init_weight(rng, {a}));
  params_.add("attention.enc_proj", init_weight(rng, {2 * h, a}));
  params_.add("attention.dec_proj", init_weight(rng, {h, a}));
  params_.add("attention.cov_proj", init_weight(rng, {1, a}));
  params_.add("attention.bias", Tensor::zeros({a}));
  params_.add("gate.context_weights", init_weight(rng, {2 * h}));
  params_.add("gate.state_weights", init_weight(rng, {h}));
  params_.add("gate.input_weights", init_weight(rng, {e}));
  params_.add("gate.bias", Tensor::zeros({1}));
  add_lstm("ptrdec.lstm", e + 2 * h);
  params_.add("ptrdec.proj.w1", init_weight(rng, {3 * h, p}));
  params_.add("ptrdec.proj.b1", Tensor::zeros({p}));
  params_.add("ptrdec.proj.w2", init_weight(rng, {p, v}));
  params_.add("ptrdec.proj.b2", Tensor::zeros({v}));
  add_lstm("cbdec.lstm", e);
  params_.add("cbdec.proj.w1", init_weight(rng, {h, p}));
  params_.add("cbdec.proj.b1", Tensor::zeros({p}));
  params_.add("cbdec.proj.w2", init_weight(rng, {p, v}));
  params_.add("cbdec.proj.b2", Tensor::zeros({v}));
}

Tensor Summarizer::embedding(Tape& tape) const { return tape.param("embedding", params_.get("embedding")); }

static LstmParams lstm_view(Tape& tape, const ParamStore& store, const std::string& prefix) {
  return {tape.param(prefix + ".in_weights", store.get(prefix + ".in_weights")),
          tape.param(prefix + ".rec_weights", store.get(prefix + ".rec_weights")),
          tape.param(prefix + ".bias", store.get(prefix + ".bias"))};
}

LstmParams Summarizer::encoder_fwd(Tape& tape) const { return lstm_view(tape, params_, "encoder.fwd"); }
LstmParams Summarizer::encoder_bwd(Tape& tape) const { return lstm_view(tape, params_, "encoder.bwd"); }
LstmParams Summarizer::ptr_lstm(Tape& tape) const { return lstm_view(tape, params_, "ptrdec.lstm"); }
LstmParams Summarizer::cb_lstm(Tape& tape) const { return lstm_view(tape, params_, "cbdec.lstm"); }

ReduceParams Summarizer::reducer(Tape& tape) const {
  return {tape.param("reduce.hidden_weight", params_.get("reduce.hidden_weight")),
          tape.param("reduce.hidden_bias", params_.get("reduce.hidden_bias")),
          tape.param("reduce.memory_weight", params_.get("reduce.memory_weight")),
          tape.param("reduce.memory_bias", params_.get("reduce.memory_bias"))};
}

AttentionParams Summarizer::attention(Tape& tape) const {
  return {tape.param("attention.score_vec", params_.get("attention.score_vec")),
          tape.param("attention.enc_proj", params_.get("attention.enc_proj")),
          tape.param("attention.dec_proj", params_.get("attention.dec_proj")),
          tape.param("attention.cov_proj", params_.get("attention.cov_proj")),
          tape.param("attention.bias", params_.get("attention.bias"))};
}

PointerGateParams Summarizer::gate(Tape& tape) const {
  return {tape.param("gate.context_weights", params_.get("gate.context_weights")),
          tape.param("gate.state_weights", params_.get("gate.state_weights")),
          tape.param("gate.input_weights", params_.get("gate.input_weights")),
          tape.param("gate.bias", params_.get("gate.bias"))};
}

static VocabProjectionParams proj_view(Tape& tape, const ParamStore& store, const std::string& prefix) {
  return {tape.param(prefix + ".w1", store.get(prefix + ".w1")),
          tape.param(prefix + ".b1", store.get(prefix + ".b1")),
          tape.param(prefix + ".w2", store.get(prefix + ".w2")),
          tape.param(prefix + ".b2", store.get(prefix + ".b2"))};
}

VocabProjectionParams Summarizer::ptr_proj(Tape& tape) const { return proj_view(tape, params_, "ptrdec.proj"); }
VocabProjectionParams Summarizer::cb_proj(Tape& tape) const { return proj_view(tape, params_, "cbdec.proj"); }

EncoderOut Summarizer::encode_source(Tape& tape, const std::vector<int>& src_ids) const {
  if (src_ids.empty()) throw std::invalid_argument("encode_source: empty source");
  std::vector<int> ids = src_ids;
  if (static_cast<int>(ids.size()) > config_.max_enc_steps) ids.resize(config_.max_enc_steps);
  Tensor inputs = embed_lookup(tape, embedding(tape), ids);
  EncoderStates states = bilstm_encode(tape, encoder_fwd(tape), encoder_bwd(tape), inputs);
  LstmState init = reduce_states(tape, reducer(tape), states.fwd_final, states.bwd_final);
  return {std::move(states), std::move(init)};
}

StepOutput Summarizer::pointer_decoder_step(Tape& tape, const EncoderOut& enc, const LstmState& prev_state,
                                            const Tensor& prev_context, int input_id,
                                            std::optional<CoverageState>& coverage,
                                            const std::vector<int>& src_ext_ids, int n_oov,
                                            std::optional<float> force_p_gen) const {
  if (input_id < 0 || input_id >= config_.vocab_size) {
    throw std::out_of_range("pointer_decoder_step: input id " + std::to_string(input_id) +
                            " outside the fixed vocabulary (UNK-map extended ids first)");
  }
  Tensor x = matrix_row(tape, embed_lookup(tape, embedding(tape), {input_id}), 0);
  LstmState state = lstm_cell_step(tape, ptr_lstm(tape), tape.concat({x, prev_context}), prev_state);
  AttentionResult att =
      attention_step(tape, attention(tape), enc.states, state, coverage, config_.coverage_enabled);
  Tensor p_gen = force_p_gen.has_value() ? Tensor::scalar(*force_p_gen)
                                         : pointer_gate(tape, gate(tape), att.context, state, x);
  Tensor p_vocab = vocab_distribution(tape, ptr_proj(tape), state, att.context);
  Tensor p_attn = pointer_final_distribution(tape, att.attention, p_vocab, p_gen, src_ext_ids, n_oov);
  if (config_.coverage_enabled) coverage = att.new_coverage;
  return {att.attention, att.context, p_gen, p_vocab, p_attn, state};
}

CbStepOutput Summarizer::closed_book_decoder_step(Tape& tape, const LstmState& prev_state, int input_id,
                                                  bool cut_embedding_grad) const {
  if (input_id < 0 || input_id >= config_.vocab_size) {
    throw std::out_of_range("closed_book_decoder_step: input id " + std::to_string(input_id) +
                            " outside the fixed vocabulary");
  }
  Tensor x = matrix_row(tape, embed_lookup(tape, embedding(tape), {input_id}), 0);
  if (cut_embedding_grad) x = tape.stop_gradient(x);
  LstmState state = lstm_cell_step(tape, cb_lstm(tape), x, prev_state);
  VocabProjectionParams proj = cb_proj(tape);
  Tensor inner = tape.add(tape.matmul(state.hidden, proj.w1), proj.b1);
  Tensor p_cbdec = tape.softmax(tape.add(tape.matmul(inner, proj.w2), proj.b2));
  return {p_cbdec, state};
}

}  // namespace cbsum
