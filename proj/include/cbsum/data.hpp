#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cbsum/rng.hpp"

namespace cbsum {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kStartId = 2;
inline constexpr int kStopId = 3;
inline constexpr int kNumReserved = 4;

// Lowercase, split on whitespace, peel terminal punctuation (. , ! ? ;)
// into separate tokens.
std::vector<std::string> tokenize(const std::string& text);

struct Example {
  std::vector<std::string> article;
  std::vector<std::string> summary;
  std::vector<std::string> cloze_keywords;
};

class Vocabulary {
 public:
  // Tokens ranked by frequency (ties by first occurrence), truncated to
  // max_size - 4, reserved tokens prepended.
  static Vocabulary build(const std::vector<Example>& corpus, int max_size);

  int id_of(const std::string& token) const;  // kUnkId when absent
  const std::string& token_of(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  // One "token count" line per id in rank order; reserved tokens carry
  // count 0.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::vector<long long> counts_;
  std::unordered_map<std::string, int> ids_;
};

struct EncodedExample {
  std::vector<int> enc_ids;                // UNK-mapped, truncated to max_enc
  std::vector<int> enc_ext_ids;            // article OOVs get vocab_size + k
  std::vector<std::string> oov_words;      // ordered, unique
  std::vector<int> dec_in_ids;             // [START] + UNK-mapped summary
  std::vector<int> dec_target_ext_ids;     // extended summary ids + [STOP]
  std::vector<int> dec_target_unk_ids;     // UNK-mapped summary ids + [STOP]

  int n_oov() const { return static_cast<int>(oov_words.size()); }
  int dec_len() const { return static_cast<int>(dec_target_ext_ids.size()); }
};

EncodedExample encode_example(const Example& example, const Vocabulary& vocab, int max_enc, int max_dec);

struct Batch {
  std::vector<EncodedExample> examples;
  std::vector<std::vector<int>> enc_ids;        // padded with [PAD]
  std::vector<std::vector<int>> dec_in_ids;
  std::vector<std::vector<int>> dec_target_ext;
  std::vector<std::vector<int>> dec_target_unk;
  std::vector<std::vector<float>> enc_mask;
  std::vector<std::vector<float>> dec_mask;
  int n_oov = 0;  // max per-example OOV count

  int size() const { return static_cast<int>(examples.size()); }
};

// Pads the first `batch_size` examples to the longest lengths in the batch.
Batch make_batch(const std::vector<EncodedExample>& examples, int batch_size);

// Desk-scale corpus: each article is a seeded shuffle of filler sentences
// and `n_salient` keyword-bearing sentences; the summary is exactly the
// salient sentences in article order; cloze keywords are the entity
// tokens. A fraction of entities are unique rare words so they fall out
// of any frequency-truncated vocabulary, exercising the copy path.
std::vector<Example> generate_synthetic_corpus(std::uint64_t seed, int n_examples, int article_len,
                                               int n_salient, double oov_entity_fraction = 0.0);

// JSON-lines dataset with fields "article", "summary", optional "keywords".
std::vector<Example> load_dataset(const std::string& path);
void save_dataset(const std::vector<Example>& examples, const std::string& path);

std::string join_tokens(const std::vector<std::string>& tokens);

}  // namespace cbsum
