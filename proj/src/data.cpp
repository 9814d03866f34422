#include "cbsum/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cbsum {

namespace {

const char* const kReservedTokens[kNumReserved] = {"[PAD]", "[UNK]", "[START]", "[STOP]"};

bool is_terminal_punct(char c) { return c == '.' || c == ',' || c == '!' || c == '?' || c == ';'; }

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    std::size_t end = word.size();
    while (end > 0 && is_terminal_punct(word[end - 1])) --end;
    if (end > 0) out.push_back(word.substr(0, end));
    for (std::size_t i = end; i < word.size(); ++i) out.push_back(std::string(1, word[i]));
    word.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

Vocabulary Vocabulary::build(const std::vector<Example>& corpus, int max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (max_size < kNumReserved) {
    throw std::invalid_argument("build_vocab: max_size must be at least " + std::to_string(kNumReserved));
  }

  struct Entry {
    long long count = 0;
    std::size_t first_seen = 0;
  };
  std::unordered_map<std::string, Entry> freq;
  std::size_t position = 0;
  auto scan = [&](const std::vector<std::string>& tokens) {
    for (const std::string& tok : tokens) {
      auto [it, inserted] = freq.try_emplace(tok);
      if (inserted) it->second.first_seen = position;
      ++it->second.count;
      ++position;
    }
  };
  for (const Example& ex : corpus) {
    scan(ex.article);
    scan(ex.summary);
  }

  std::vector<std::pair<std::string, Entry>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });

  Vocabulary vocab;
  for (int i = 0; i < kNumReserved; ++i) {
    vocab.tokens_.emplace_back(kReservedTokens[i]);
    vocab.counts_.push_back(0);
    vocab.ids_.emplace(kReservedTokens[i], i);
  }
  const std::size_t keep = static_cast<std::size_t>(max_size - kNumReserved);
  for (std::size_t i = 0; i < ranked.size() && i < keep; ++i) {
    vocab.ids_.emplace(ranked[i].first, static_cast<int>(vocab.tokens_.size()));
    vocab.tokens_.push_back(ranked[i].first);
    vocab.counts_.push_back(ranked[i].second.count);
  }
  return vocab;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " outside [0," +
                            std::to_string(size()) + ")");
  }
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) != 0; }

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("vocabulary: cannot write " + path);
  for (int i = 0; i < size(); ++i) os << tokens_[i] << ' ' << counts_[i] << '\n';
  if (!os) throw std::runtime_error("vocabulary: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("vocabulary: cannot read " + path);
  Vocabulary vocab;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const std::size_t space = line.rfind(' ');
    if (space == std::string::npos) throw std::runtime_error("vocabulary: malformed line \"" + line + "\"");
    const std::string token = line.substr(0, space);
    const long long count = std::stoll(line.substr(space + 1));
    vocab.ids_.emplace(token, static_cast<int>(vocab.tokens_.size()));
    vocab.tokens_.push_back(token);
    vocab.counts_.push_back(count);
  }
  for (int i = 0; i < kNumReserved && i < vocab.size(); ++i) {
    if (vocab.tokens_[i] != kReservedTokens[i]) {
      throw std::runtime_error("vocabulary: reserved token " + std::string(kReservedTokens[i]) +
                               " missing at id " + std::to_string(i));
    }
  }
  if (vocab.size() < kNumReserved) throw std::runtime_error("vocabulary: file lacks reserved tokens");
  return vocab;
}

EncodedExample encode_example(const Example& example, const Vocabulary& vocab, int max_enc, int max_dec) {
  if (example.article.empty()) throw std::invalid_argument("encode_example: empty article");
  const int base = vocab.size();

  EncodedExample enc;
  const std::size_t enc_len = std::min<std::size_t>(example.article.size(), max_enc);
  std::unordered_map<std::string, int> oov_ids;
  for (std::size_t i = 0; i < enc_len; ++i) {
    const std::string& tok = example.article[i];
    const int id = vocab.id_of(tok);
    enc.enc_ids.push_back(id);
    if (id != kUnkId || vocab.contains(tok)) {
      enc.enc_ext_ids.push_back(id);
    } else {
      auto [it, inserted] = oov_ids.try_emplace(tok, base + static_cast<int>(enc.oov_words.size()));
      if (inserted) enc.oov_words.push_back(tok);
      enc.enc_ext_ids.push_back(it->second);
    }
  }

  const std::size_t dec_len = std::min<std::size_t>(example.summary.size(), max_dec - 1);
  enc.dec_in_ids.push_back(kStartId);
  for (std::size_t i = 0; i < dec_len; ++i) {
    const std::string& tok = example.summary[i];
    const int id = vocab.id_of(tok);
    enc.dec_in_ids.push_back(id);
    enc.dec_target_unk_ids.push_back(id);
    if (id != kUnkId || vocab.contains(tok)) {
      enc.dec_target_ext_ids.push_back(id);
    } else {
      auto it = oov_ids.find(tok);
      enc.dec_target_ext_ids.push_back(it == oov_ids.end() ? kUnkId : it->second);
    }
  }
  enc.dec_target_ext_ids.push_back(kStopId);
  enc.dec_target_unk_ids.push_back(kStopId);
  return enc;
}

Batch make_batch(const std::vector<EncodedExample>& examples, int batch_size) {
  if (examples.empty()) throw std::invalid_argument("make_batch: empty example list");
  Batch batch;
  const int n = std::min<int>(batch_size, static_cast<int>(examples.size()));
  batch.examples.assign(examples.begin(), examples.begin() + n);

  std::size_t enc_max = 0, dec_max = 0;
  for (const EncodedExample& ex : batch.examples) {
    enc_max = std::max(enc_max, ex.enc_ids.size());
    dec_max = std::max(dec_max, ex.dec_target_ext_ids.size());
    batch.n_oov = std::max(batch.n_oov, ex.n_oov());
  }
  for (const EncodedExample& ex : batch.examples) {
    auto pad = [](const std::vector<int>& ids, std::size_t len) {
      std::vector<int> out = ids;
      out.resize(len, kPadId);
      return out;
    };
    auto mask = [](std::size_t used, std::size_t len) {
      std::vector<float> out(len, 0.0f);
      std::fill(out.begin(), out.begin() + used, 1.0f);
      return out;
    };
    batch.enc_ids.push_back(pad(ex.enc_ids, enc_max));
    batch.dec_in_ids.push_back(pad(ex.dec_in_ids, dec_max));
    batch.dec_target_ext.push_back(pad(ex.dec_target_ext_ids, dec_max));
    batch.dec_target_unk.push_back(pad(ex.dec_target_unk_ids, dec_max));
    batch.enc_mask.push_back(mask(ex.enc_ids.size(), enc_max));
    batch.dec_mask.push_back(mask(ex.dec_target_ext_ids.size(), dec_max));
  }
  return batch;
}

std::vector<Example> generate_synthetic_corpus(std::uint64_t seed, int n_examples, int article_len,
                                               int n_salient, double oov_entity_fraction) {
  if (n_salient < 1 || n_salient > article_len / 4) {
    throw std::invalid_argument("generate_synthetic_corpus: need 1 <= n_salient <= article_len/4");
  }
  Rng rng(seed);
  const int n_entities = 24, n_verbs = 12, n_objects = 16, n_fillers = 14;

  std::vector<Example> corpus;
  corpus.reserve(n_examples);
  for (int ex_idx = 0; ex_idx < n_examples; ++ex_idx) {
    std::vector<std::vector<std::string>> sentences;
    std::vector<bool> salient;
    std::vector<std::string> keywords;
    for (int s = 0; s < n_salient; ++s) {
      std::string entity;
      if (rng.unit() < oov_entity_fraction) {
        entity = "zq" + std::to_string(ex_idx) + "x" + std::to_string(s);
      } else {
        entity = "ent" + std::to_string(rng.below(n_entities));
      }
      keywords.push_back(entity);
      sentences.push_back({entity, "verb" + std::to_string(rng.below(n_verbs)),
                           "obj" + std::to_string(rng.below(n_objects)), "."});
      salient.push_back(true);
    }
    for (int s = n_salient; s < article_len; ++s) {
      sentences.push_back({"filler" + std::to_string(rng.below(n_fillers)), "said",
                           "thing" + std::to_string(rng.below(n_objects)), "."});
      salient.push_back(false);
    }
    for (int i = static_cast<int>(sentences.size()) - 1; i > 0; --i) {
      const int j = rng.below(i + 1);
      std::swap(sentences[i], sentences[j]);
      std::swap(salient[i], salient[j]);  // std::vector<bool> swap of values
    }

    Example example;
    example.cloze_keywords = std::move(keywords);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      for (const std::string& tok : sentences[i]) example.article.push_back(tok);
      if (salient[i]) {
        for (const std::string& tok : sentences[i]) example.summary.push_back(tok);
      }
    }
    corpus.push_back(std::move(example));
  }
  return corpus;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<Example> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset: cannot read " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("dataset: " + path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Example ex;
    ex.article = tokenize(obj.at("article").get<std::string>());
    ex.summary = tokenize(obj.at("summary").get<std::string>());
    if (obj.contains("keywords")) {
      for (const auto& kw : obj.at("keywords")) ex.cloze_keywords.push_back(kw.get<std::string>());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void save_dataset(const std::vector<Example>& examples, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset: cannot write " + path);
  for (const Example& ex : examples) {
    nlohmann::json obj;
    obj["article"] = join_tokens(ex.article);
    obj["summary"] = join_tokens(ex.summary);
    if (!ex.cloze_keywords.empty()) obj["keywords"] = ex.cloze_keywords;
    os << obj.dump() << '\n';
  }
  if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

}  // namespace cbsum
