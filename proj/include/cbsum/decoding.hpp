#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbsum/data.hpp"
#include "cbsum/model.hpp"
#include "cbsum/rng.hpp"

namespace cbsum {

enum class DecodeMode { kGreedy, kSample, kBeam };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  int beam_size = 4;
  int min_len = 35;
  int max_len = 100;
  std::uint64_t seed = 13;
  std::optional<float> force_p_gen;  // analysis hook; 1.0 disables copying

  void validate(int max_dec_steps) const;
};

DecodeMode decode_mode_from_string(const std::string& name);
const char* decode_mode_name(DecodeMode mode);

struct SampleResult {
  std::vector<int> ids;           // extended ids, specials excluded
  std::vector<float> log_probs;   // one per sampled action, terminal [STOP] included
};

// Inference uses only the pointer decoder; closed-book parameters are
// never executed here.

// Argmax of the extended distribution each step, ties to the lowest id;
// [PAD]/[START] are never emitted and [STOP] is suppressed before min_len.
std::vector<int> greedy_decode(const Summarizer& model, const EncodedExample& example,
                               const DecodeConfig& config);

// Multinomial draw from the extended distribution with [PAD]/[START]
// masked out (renormalized); log-probs are of that sampling distribution.
SampleResult sample_decode(const Summarizer& model, const EncodedExample& example,
                           const DecodeConfig& config, Rng& rng);

// Length-normalized beam search (score = cumulative log-prob / actions);
// hypotheses retire at [STOP]; the search ends once beam_size hypotheses
// have finished or every hypothesis hits max_len.
std::vector<int> beam_search_decode(const Summarizer& model, const EncodedExample& example,
                                    const DecodeConfig& config);

// Maps extended ids through (vocab, oov_words); drops [PAD]/[START]/[STOP].
std::vector<std::string> detokenize(const std::vector<int>& ext_ids, const Vocabulary& vocab,
                                    const std::vector<std::string>& oov_words);

struct DecodedSummary {
  int example_index = 0;
  std::vector<std::string> tokens;
};

// JSON-lines with fields "summary" (space-joined tokens) and "example_index".
void save_decoded(const std::vector<DecodedSummary>& summaries, const std::string& path);
std::vector<DecodedSummary> load_decoded(const std::string& path);

}  // namespace cbsum
