#include "cbsum/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace cbsum {

namespace {

double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

// n-grams joined with an unprintable separator for hashing.
std::vector<std::string> ngrams(const std::vector<std::string>& tokens, int n) {
  std::vector<std::string> out;
  if (static_cast<int>(tokens.size()) < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    out.push_back(std::move(key));
  }
  return out;
}

std::string stem(const std::string& token) {
  // First matching suffix wins, in the listed order.
  for (const char* suffix : {"s", "es", "ed", "ing"}) {
    const std::size_t n = std::string(suffix).size();
    if (token.size() > n && token.compare(token.size() - n, n, suffix) == 0) {
      return token.substr(0, token.size() - n);
    }
  }
  return token;
}

}  // namespace

RougeScore rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                   int n) {
  if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
  const std::vector<std::string> cand = ngrams(candidate, n);
  const std::vector<std::string> ref = ngrams(reference, n);
  if (cand.empty() || ref.empty()) return {};

  std::unordered_map<std::string, int> ref_counts;
  for (const std::string& g : ref) ++ref_counts[g];
  long long overlap = 0;
  for (const std::string& g : cand) {
    auto it = ref_counts.find(g);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  RougeScore score;
  score.precision = static_cast<double>(overlap) / cand.size();
  score.recall = static_cast<double>(overlap) / ref.size();
  score.f1 = f1(score.precision, score.recall);
  return score;
}

RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return {};
  const std::size_t n = candidate.size(), m = reference.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const int lcs = prev[m];
  RougeScore score;
  score.precision = static_cast<double>(lcs) / n;
  score.recall = static_cast<double>(lcs) / m;
  score.f1 = f1(score.precision, score.recall);
  return score;
}

double meteor_lite(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t n = candidate.size(), m = reference.size();
  std::vector<int> cand_to_ref(n, -1);
  std::vector<bool> ref_used(m, false);

  auto align_pass = [&](bool use_stem) {
    for (std::size_t i = 0; i < n; ++i) {
      if (cand_to_ref[i] >= 0) continue;
      const std::string key = use_stem ? stem(candidate[i]) : candidate[i];
      for (std::size_t j = 0; j < m; ++j) {
        if (ref_used[j]) continue;
        const std::string ref_key = use_stem ? stem(reference[j]) : reference[j];
        if (key == ref_key) {
          cand_to_ref[i] = static_cast<int>(j);
          ref_used[j] = true;
          break;
        }
      }
    }
  };
  align_pass(false);
  align_pass(true);

  int matches = 0, chunks = 0;
  int prev_ref = -2;
  for (std::size_t i = 0; i < n; ++i) {
    if (cand_to_ref[i] < 0) {
      prev_ref = -2;
      continue;
    }
    ++matches;
    if (cand_to_ref[i] != prev_ref + 1) ++chunks;
    prev_ref = cand_to_ref[i];
  }
  if (matches == 0) return 0.0;

  const double p = static_cast<double>(matches) / n;
  const double r = static_cast<double>(matches) / m;
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / matches;
  const double penalty = 0.5 * frag * frag * frag;
  return f_mean * (1.0 - penalty);
}

double saliency_keyword_score(const std::vector<std::vector<std::string>>& summaries,
                              const std::vector<Example>& examples) {
  if (summaries.size() != examples.size()) {
    throw std::invalid_argument("saliency: " + std::to_string(summaries.size()) + " summaries vs " +
                                std::to_string(examples.size()) + " examples");
  }
  long long total = 0, found = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::set<std::string> keywords(examples[i].cloze_keywords.begin(),
                                         examples[i].cloze_keywords.end());
    if (keywords.empty()) continue;
    const std::unordered_set<std::string> tokens(summaries[i].begin(), summaries[i].end());
    total += static_cast<long long>(keywords.size());
    for (const std::string& kw : keywords) {
      if (tokens.count(kw)) ++found;
    }
  }
  if (total == 0) throw std::invalid_argument("saliency: corpus has no cloze keywords");
  return static_cast<double>(found) / static_cast<double>(total);
}

RepetitionStats repetition_stats(const std::vector<std::vector<std::string>>& summaries) {
  RepetitionStats stats;
  if (summaries.empty()) return stats;
  for (int n : {3, 4, 5}) {
    double total = 0.0;
    for (const auto& summary : summaries) {
      const std::vector<std::string> grams = ngrams(summary, n);
      if (grams.empty()) continue;
      const std::unordered_set<std::string> distinct(grams.begin(), grams.end());
      total += 1.0 - static_cast<double>(distinct.size()) / grams.size();
    }
    stats.ngram_pct[n] = 100.0 * total / summaries.size();
  }
  double total = 0.0;
  for (const auto& summary : summaries) {
    std::vector<std::string> sentences;
    std::string current;
    for (const std::string& tok : summary) {
      if (tok == ".") {
        if (!current.empty()) sentences.push_back(current);
        current.clear();
      } else {
        current += tok;
        current += ' ';
      }
    }
    if (!current.empty()) sentences.push_back(current);
    if (sentences.empty()) continue;
    const std::unordered_set<std::string> distinct(sentences.begin(), sentences.end());
    total += 1.0 - static_cast<double>(distinct.size()) / sentences.size();
  }
  stats.sentence_pct = 100.0 * total / summaries.size();
  return stats;
}

double novel_ngram_rate(const std::vector<std::vector<std::string>>& summaries,
                        const std::vector<std::vector<std::string>>& articles, int n) {
  if (summaries.size() != articles.size()) {
    throw std::invalid_argument("novel_ngram_rate: " + std::to_string(summaries.size()) +
                                " summaries vs " + std::to_string(articles.size()) + " articles");
  }
  if (summaries.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const std::vector<std::string> grams = ngrams(summaries[i], n);
    if (grams.empty()) continue;
    const std::vector<std::string> art = ngrams(articles[i], n);
    const std::unordered_set<std::string> seen(art.begin(), art.end());
    long long novel = 0;
    for (const std::string& g : grams) {
      if (!seen.count(g)) ++novel;
    }
    total += static_cast<double>(novel) / grams.size();
  }
  return 100.0 * total / summaries.size();
}

double summary_length_mean(const std::vector<std::vector<std::string>>& summaries) {
  if (summaries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : summaries) total += static_cast<double>(s.size());
  return total / summaries.size();
}

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine: length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double memory_similarity(const Summarizer& model, const std::vector<EncodedExample>& examples,
                         bool raw_states) {
  double total = 0.0;
  int counted = 0;
  for (const EncodedExample& ex : examples) {
    // Gold summary tokens, UNK-mapped, without the trailing [STOP].
    std::vector<int> summary_ids(ex.dec_target_unk_ids.begin(), ex.dec_target_unk_ids.end() - 1);
    if (ex.enc_ids.empty() || summary_ids.empty()) continue;

    auto final_memory = [&](const std::vector<int>& ids) {
      Tape tape;
      EncoderOut enc = model.encode_source(tape, ids);
      if (!raw_states) return enc.init.memory.data;
      std::vector<float> raw = enc.states.fwd_final.memory.data;
      raw.insert(raw.end(), enc.states.bwd_final.memory.data.begin(),
                 enc.states.bwd_final.memory.data.end());
      return raw;
    };
    total += cosine_similarity(final_memory(ex.enc_ids), final_memory(summary_ids));
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("memory_similarity: no usable examples");
  return total / counted;
}

std::string MetricReport::to_json() const {
  nlohmann::json obj;
  obj["rouge1_f"] = rouge1_f;
  obj["rouge2_f"] = rouge2_f;
  obj["rougeL_f"] = rougeL_f;
  obj["meteor_lite"] = meteor_lite;
  obj["saliency_keyword"] = saliency_keyword.has_value() ? nlohmann::json(*saliency_keyword)
                                                         : nlohmann::json(nullptr);
  for (const auto& [n, pct] : repeat_ngram_pct) obj["repeat_ngram_pct"][std::to_string(n)] = pct;
  obj["repeat_sentence_pct"] = repeat_sentence_pct;
  for (const auto& [n, pct] : novel_ngram_pct) obj["novel_ngram_pct"][std::to_string(n)] = pct;
  obj["mean_length"] = mean_length;
  obj["memory_cosine"] = memory_cosine.has_value() ? nlohmann::json(*memory_cosine)
                                                   : nlohmann::json(nullptr);
  return obj.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  const nlohmann::json obj = nlohmann::json::parse(text);
  MetricReport report;
  report.rouge1_f = obj.at("rouge1_f").get<double>();
  report.rouge2_f = obj.at("rouge2_f").get<double>();
  report.rougeL_f = obj.at("rougeL_f").get<double>();
  report.meteor_lite = obj.at("meteor_lite").get<double>();
  if (!obj.at("saliency_keyword").is_null()) report.saliency_keyword = obj.at("saliency_keyword").get<double>();
  if (obj.contains("repeat_ngram_pct")) {
    for (const auto& [key, val] : obj.at("repeat_ngram_pct").items()) {
      report.repeat_ngram_pct[std::stoi(key)] = val.get<double>();
    }
  }
  report.repeat_sentence_pct = obj.at("repeat_sentence_pct").get<double>();
  if (obj.contains("novel_ngram_pct")) {
    for (const auto& [key, val] : obj.at("novel_ngram_pct").items()) {
      report.novel_ngram_pct[std::stoi(key)] = val.get<double>();
    }
  }
  report.mean_length = obj.at("mean_length").get<double>();
  if (!obj.at("memory_cosine").is_null()) report.memory_cosine = obj.at("memory_cosine").get<double>();
  return report;
}

std::string MetricReport::table() const {
  std::ostringstream os;
  os << "metric                 value\n";
  os << "---------------------  --------\n";
  auto row = [&](const char* name, double v) {
    os << name;
    for (std::size_t i = std::string(name).size(); i < 23; ++i) os << ' ';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    os << buf << '\n';
  };
  row("rouge-1 f1", rouge1_f);
  row("rouge-2 f1", rouge2_f);
  row("rouge-l f1", rougeL_f);
  row("meteor-lite", meteor_lite);
  if (saliency_keyword.has_value()) row("saliency (keywords)", *saliency_keyword);
  for (const auto& [n, pct] : repeat_ngram_pct) {
    row(("repeat " + std::to_string(n) + "-gram %").c_str(), pct);
  }
  row("repeat sentence %", repeat_sentence_pct);
  for (const auto& [n, pct] : novel_ngram_pct) {
    row(("novel " + std::to_string(n) + "-gram %").c_str(), pct);
  }
  row("mean length", mean_length);
  if (memory_cosine.has_value()) row("memory cosine", *memory_cosine);
  return os.str();
}

MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& summaries,
                             const std::vector<Example>& references) {
  if (summaries.size() != references.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(summaries.size()) + " summaries vs " +
                                std::to_string(references.size()) + " references");
  }
  if (summaries.empty()) throw std::invalid_argument("evaluate: empty corpus");

  MetricReport report;
  double r1 = 0, r2 = 0, rl = 0, mtr = 0;
  std::vector<std::vector<std::string>> articles;
  articles.reserve(references.size());
  bool any_keywords = false;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    r1 += rouge_n(summaries[i], references[i].summary, 1).f1;
    r2 += rouge_n(summaries[i], references[i].summary, 2).f1;
    rl += rouge_l(summaries[i], references[i].summary).f1;
    mtr += meteor_lite(summaries[i], references[i].summary);
    articles.push_back(references[i].article);
    if (!references[i].cloze_keywords.empty()) any_keywords = true;
  }
  const double n = static_cast<double>(summaries.size());
  report.rouge1_f = r1 / n;
  report.rouge2_f = r2 / n;
  report.rougeL_f = rl / n;
  report.meteor_lite = mtr / n;
  if (any_keywords) report.saliency_keyword = saliency_keyword_score(summaries, references);
  RepetitionStats rep = repetition_stats(summaries);
  report.repeat_ngram_pct = rep.ngram_pct;
  report.repeat_sentence_pct = rep.sentence_pct;
  for (int k : {2, 3, 4}) report.novel_ngram_pct[k] = novel_ngram_rate(summaries, articles, k);
  report.mean_length = summary_length_mean(summaries);
  return report;
}

}  // namespace cbsum
