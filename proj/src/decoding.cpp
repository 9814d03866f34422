#include "cbsum/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cbsum {

void DecodeConfig::validate(int max_dec_steps) const {
  if (min_len < 1 || min_len > max_len || max_len > max_dec_steps) {
    throw std::invalid_argument("decode config: need 1 <= min_len <= max_len <= max_dec_steps, got " +
                                std::to_string(min_len) + "/" + std::to_string(max_len) + "/" +
                                std::to_string(max_dec_steps));
  }
  if (beam_size < 1) throw std::invalid_argument("decode config: beam_size must be >= 1");
}

DecodeMode decode_mode_from_string(const std::string& name) {
  if (name == "greedy") return DecodeMode::kGreedy;
  if (name == "sample") return DecodeMode::kSample;
  if (name == "beam") return DecodeMode::kBeam;
  throw std::invalid_argument("decode config: unknown mode \"" + name + "\"");
}

const char* decode_mode_name(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kGreedy: return "greedy";
    case DecodeMode::kSample: return "sample";
    case DecodeMode::kBeam: return "beam";
  }
  return "?";
}

namespace {

int unk_map(int ext_id, int vocab_size) { return ext_id < vocab_size ? ext_id : kUnkId; }

bool emittable(int id, int emitted, int min_len) {
  if (id == kPadId || id == kStartId) return false;
  if (id == kStopId && emitted < min_len) return false;
  return true;
}

}  // namespace

std::vector<int> greedy_decode(const Summarizer& model, const EncodedExample& example,
                               const DecodeConfig& config) {
  config.validate(model.config().max_dec_steps);
  Tape tape;
  EncoderOut enc = model.encode_source(tape, example.enc_ids);
  std::optional<CoverageState> coverage;
  if (model.config().coverage_enabled) {
    coverage = CoverageState{Tensor::zeros({enc.states.steps()})};
  }
  LstmState state = enc.init;
  Tensor context = model.zero_context();
  int input = kStartId;
  std::vector<int> out;
  for (int t = 0; t < config.max_len; ++t) {
    StepOutput step = model.pointer_decoder_step(tape, enc, state, context, input, coverage,
                                                 example.enc_ext_ids, example.n_oov(), config.force_p_gen);
    int best = -1;
    for (int id = 0; id < static_cast<int>(step.p_attn.data.size()); ++id) {
      if (!emittable(id, static_cast<int>(out.size()), config.min_len)) continue;
      if (best < 0 || step.p_attn.data[id] > step.p_attn.data[best]) best = id;
    }
    if (best == kStopId) break;
    out.push_back(best);
    input = unk_map(best, model.config().vocab_size);
    state = step.state;
    context = step.context;
  }
  return out;
}

SampleResult sample_decode(const Summarizer& model, const EncodedExample& example,
                           const DecodeConfig& config, Rng& rng) {
  config.validate(model.config().max_dec_steps);
  Tape tape;
  EncoderOut enc = model.encode_source(tape, example.enc_ids);
  std::optional<CoverageState> coverage;
  if (model.config().coverage_enabled) {
    coverage = CoverageState{Tensor::zeros({enc.states.steps()})};
  }
  LstmState state = enc.init;
  Tensor context = model.zero_context();
  int input = kStartId;
  SampleResult result;
  for (int t = 0; t < config.max_len; ++t) {
    StepOutput step = model.pointer_decoder_step(tape, enc, state, context, input, coverage,
                                                 example.enc_ext_ids, example.n_oov(), config.force_p_gen);
    const std::vector<float>& p = step.p_attn.data;
    double denom = 0.0;
    for (int id = 0; id < static_cast<int>(p.size()); ++id) {
      if (id != kPadId && id != kStartId) denom += p[id];
    }
    denom = std::max(denom, 1e-10);
    const double draw = rng.unit() * denom;
    double cum = 0.0;
    int chosen = -1;
    for (int id = 0; id < static_cast<int>(p.size()); ++id) {
      if (id == kPadId || id == kStartId) continue;
      cum += p[id];
      if (draw < cum) {
        chosen = id;
        break;
      }
    }
    if (chosen < 0) chosen = static_cast<int>(p.size()) - 1;  // fp edge of the CDF
    const double prob = std::max(static_cast<double>(p[chosen]) / denom, 1e-10);
    result.log_probs.push_back(static_cast<float>(std::log(prob)));
    if (chosen == kStopId) break;
    result.ids.push_back(chosen);
    input = unk_map(chosen, model.config().vocab_size);
    state = step.state;
    context = step.context;
  }
  return result;
}

namespace {

struct BeamHypothesis {
  std::vector<int> ids;      // emitted extended ids, [STOP] excluded
  double cum_log_prob = 0.0;
  int actions = 0;           // chosen tokens including the terminal [STOP]
  LstmState state;
  Tensor context;
  std::optional<CoverageState> coverage;

  double score() const { return actions == 0 ? -1e30 : cum_log_prob / actions; }
};

}  // namespace

std::vector<int> beam_search_decode(const Summarizer& model, const EncodedExample& example,
                                    const DecodeConfig& config) {
  config.validate(model.config().max_dec_steps);
  Tape tape;
  EncoderOut enc = model.encode_source(tape, example.enc_ids);

  BeamHypothesis root;
  root.state = enc.init;
  root.context = model.zero_context();
  if (model.config().coverage_enabled) {
    root.coverage = CoverageState{Tensor::zeros({enc.states.steps()})};
  }
  std::vector<BeamHypothesis> live = {std::move(root)};
  std::vector<BeamHypothesis> finished;

  for (int t = 0; t < config.max_len && !live.empty(); ++t) {
    struct Expansion {
      double cum;
      int hyp;
      int token;
      float log_p;
    };
    std::vector<Expansion> expansions;
    std::vector<StepOutput> steps(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      BeamHypothesis& hyp = live[h];
      const int input = hyp.ids.empty() ? kStartId : unk_map(hyp.ids.back(), model.config().vocab_size);
      std::optional<CoverageState> cov = hyp.coverage;
      steps[h] = model.pointer_decoder_step(tape, enc, hyp.state, hyp.context, input, cov,
                                            example.enc_ext_ids, example.n_oov(), config.force_p_gen);
      if (cov.has_value()) hyp.coverage = cov;
      const std::vector<float>& p = steps[h].p_attn.data;
      for (int id = 0; id < static_cast<int>(p.size()); ++id) {
        if (!emittable(id, static_cast<int>(hyp.ids.size()), config.min_len)) continue;
        const float log_p = std::log(std::max(p[id], 1e-10f));
        expansions.push_back({hyp.cum_log_prob + log_p, static_cast<int>(h), id, log_p});
      }
    }
    std::sort(expansions.begin(), expansions.end(), [](const Expansion& a, const Expansion& b) {
      if (a.cum != b.cum) return a.cum > b.cum;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });

    // Scan expansions best-first until the refilled beam or the finished
    // list is full, whichever comes first.
    std::vector<BeamHypothesis> next;
    for (const Expansion& exp : expansions) {
      const BeamHypothesis& parent = live[exp.hyp];
      if (exp.token == kStopId) {
        BeamHypothesis done = parent;
        done.cum_log_prob = exp.cum;
        done.actions += 1;
        finished.push_back(std::move(done));
      } else {
        BeamHypothesis child = parent;
        child.ids.push_back(exp.token);
        child.cum_log_prob = exp.cum;
        child.actions += 1;
        child.state = steps[exp.hyp].state;
        child.context = steps[exp.hyp].context;
        next.push_back(std::move(child));
      }
      if (static_cast<int>(next.size()) >= config.beam_size ||
          static_cast<int>(finished.size()) >= config.beam_size) {
        break;
      }
    }
    live = std::move(next);
  }

  // Highest length-normalized score across retired and still-live
  // hypotheses; an unfinished hypothesis is scored over its emitted
  // actions.
  const BeamHypothesis* best = nullptr;
  for (const BeamHypothesis& hyp : finished) {
    if (!best || hyp.score() > best->score()) best = &hyp;
  }
  for (const BeamHypothesis& hyp : live) {
    if (!best || hyp.score() > best->score()) best = &hyp;
  }
  if (!best) throw std::logic_error("beam_search_decode: no hypothesis survived");
  return best->ids;
}

std::vector<std::string> detokenize(const std::vector<int>& ext_ids, const Vocabulary& vocab,
                                    const std::vector<std::string>& oov_words) {
  const int base = vocab.size();
  const int extended = base + static_cast<int>(oov_words.size());
  std::vector<std::string> out;
  for (int id : ext_ids) {
    if (id < 0 || id >= extended) {
      throw std::out_of_range("detokenize: id " + std::to_string(id) + " outside [0," +
                              std::to_string(extended) + ")");
    }
    if (id == kPadId || id == kStartId || id == kStopId) continue;
    out.push_back(id < base ? vocab.token_of(id) : oov_words[id - base]);
  }
  return out;
}

void save_decoded(const std::vector<DecodedSummary>& summaries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("decoded output: cannot write " + path);
  for (const DecodedSummary& s : summaries) {
    nlohmann::json obj;
    obj["example_index"] = s.example_index;
    obj["summary"] = join_tokens(s.tokens);
    os << obj.dump() << '\n';
  }
  if (!os) throw std::runtime_error("decoded output: write failed for " + path);
}

std::vector<DecodedSummary> load_decoded(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("decoded output: cannot read " + path);
  std::vector<DecodedSummary> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line);
    DecodedSummary s;
    s.example_index = obj.at("example_index").get<int>();
    s.tokens = tokenize(obj.at("summary").get<std::string>());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cbsum
