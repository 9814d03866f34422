#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbsum/data.hpp"
#include "cbsum/model.hpp"

namespace cbsum {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Clipped n-gram overlap (multiset intersection).
RougeScore rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                   int n);

// Longest common subsequence over the full token sequences. Also the
// reward function for self-critical training, so internal comparisons stay
// coherent; scores are not comparable to the official toolkit.
RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

// Unigram alignment by exact then stem match (suffix stripper: -s, -es,
// -ed, -ing), F_mean = 10PR/(R+9P), fragmentation penalty 0.5*(chunks/m)^3.
double meteor_lite(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

// Fraction of cloze keywords (distinct per example) appearing in the
// corresponding decoded summary. Errors when no example carries keywords.
double saliency_keyword_score(const std::vector<std::vector<std::string>>& summaries,
                              const std::vector<Example>& examples);

struct RepetitionStats {
  std::map<int, double> ngram_pct;  // n in {3,4,5}
  double sentence_pct = 0.0;        // sentences delimited by "."
};

RepetitionStats repetition_stats(const std::vector<std::vector<std::string>>& summaries);

// Percent of summary n-grams absent from the paired article.
double novel_ngram_rate(const std::vector<std::vector<std::string>>& summaries,
                        const std::vector<std::vector<std::string>>& articles, int n);

double summary_length_mean(const std::vector<std::vector<std::string>>& summaries);

// Zero vectors compare as 0.
double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);

// Mean cosine between the encoder's final memory state after reading the
// article and after reading the gold summary. Uses the reduced decoder
// initial state's memory; `raw_states` switches to the concatenated
// bidirectional final cell states instead.
double memory_similarity(const Summarizer& model, const std::vector<EncodedExample>& examples,
                         bool raw_states = false);

struct MetricReport {
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  double rougeL_f = 0.0;
  double meteor_lite = 0.0;
  std::optional<double> saliency_keyword;
  std::map<int, double> repeat_ngram_pct;  // 3,4,5
  double repeat_sentence_pct = 0.0;
  std::map<int, double> novel_ngram_pct;  // 2,3,4
  double mean_length = 0.0;
  std::optional<double> memory_cosine;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  std::string table() const;
};

// Corpus-level evaluation of decoded summaries against reference examples
// (mean per-example metrics). Errors on a length mismatch.
MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& summaries,
                             const std::vector<Example>& references);

}  // namespace cbsum
