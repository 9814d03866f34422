#include "cbsum/run.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>

namespace cbsum {

void to_json(nlohmann::json& j, const RunConfig& cfg) {
  j = nlohmann::json{{"model", cfg.model},
                     {"train", cfg.train},
                     {"decode", cfg.decode},
                     {"phase", cfg.phase},
                     {"train_data", cfg.train_data},
                     {"val_data", cfg.val_data},
                     {"data", cfg.data},
                     {"vocab_path", cfg.vocab_path},
                     {"checkpoint_dir", cfg.checkpoint_dir},
                     {"init_from", cfg.init_from},
                     {"report_path", cfg.report_path},
                     {"steps", cfg.steps},
                     {"val_every", cfg.val_every}};
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
  if (j.contains("model")) j.at("model").get_to(cfg.model);
  if (j.contains("train")) j.at("train").get_to(cfg.train);
  if (j.contains("decode")) j.at("decode").get_to(cfg.decode);
  cfg.phase = j.value("phase", cfg.phase);
  cfg.train_data = j.value("train_data", cfg.train_data);
  cfg.val_data = j.value("val_data", cfg.val_data);
  cfg.data = j.value("data", cfg.data);
  cfg.vocab_path = j.value("vocab_path", cfg.vocab_path);
  cfg.checkpoint_dir = j.value("checkpoint_dir", cfg.checkpoint_dir);
  cfg.init_from = j.value("init_from", cfg.init_from);
  cfg.report_path = j.value("report_path", cfg.report_path);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.val_every = j.value("val_every", cfg.val_every);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot read " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config: malformed " + path + ": " + e.what());
  }
  RunConfig cfg;
  from_json(j, cfg);
  return cfg;
}

int cmd_gen_corpus(const std::string& out_path, std::uint64_t seed, int n_examples, int article_len,
                   int n_salient, double oov_entity_fraction) {
  const std::vector<Example> corpus =
      generate_synthetic_corpus(seed, n_examples, article_len, n_salient, oov_entity_fraction);
  save_dataset(corpus, out_path);
  std::cout << "wrote " << corpus.size() << " examples to " << out_path << "\n";
  return 0;
}

int cmd_build_vocab(const std::string& data_path, const std::string& out_path, int max_size) {
  const std::vector<Example> corpus = load_dataset(data_path);
  const Vocabulary vocab = Vocabulary::build(corpus, max_size);
  vocab.save(out_path);
  std::cout << "wrote vocabulary of " << vocab.size() << " tokens to " << out_path << "\n";
  return 0;
}

namespace {

std::vector<EncodedExample> encode_corpus(const std::vector<Example>& corpus, const Vocabulary& vocab,
                                          const ModelConfig& model) {
  std::vector<EncodedExample> out;
  out.reserve(corpus.size());
  for (const Example& ex : corpus) {
    out.push_back(encode_example(ex, vocab, model.max_enc_steps, model.max_dec_steps));
  }
  return out;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(std::string(what) + ": no path given");
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error(std::string(what) + ": cannot read " + path);
  }
}

struct StepLogger {
  std::ofstream file;
  bool show_encoder_norm = false;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  explicit StepLogger(const std::string& path) : file(path) {
    if (!file) throw std::runtime_error("train log: cannot write " + path);
  }

  void log(long long step, const StepStats& stats, bool rl_active) {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char line[320];
    int n;
    if (rl_active) {
      n = std::snprintf(line, sizeof line, "step %lld | xe %.4f | cov %.4f | rl %.4f | gnorm %.4f", step,
                        stats.xe, stats.coverage, stats.rl, stats.grad_norm);
    } else {
      n = std::snprintf(line, sizeof line, "step %lld | xe %.4f | cov %.4f | gnorm %.4f", step, stats.xe,
                        stats.coverage, stats.grad_norm);
    }
    if (show_encoder_norm && n > 0 && n < static_cast<int>(sizeof line)) {
      n += std::snprintf(line + n, sizeof line - n, " | encnorm %.4f", stats.encoder_grad_norm);
    }
    if (n > 0 && n < static_cast<int>(sizeof line)) {
      std::snprintf(line + n, sizeof line - n, " | wall %.2fs", wall);
    }
    std::cout << line << "\n";
    file << line << "\n";
  }
};

}  // namespace

int cmd_train(RunConfig config) {
  config.train.validate();
  if (config.phase != "xe" && config.phase != "coverage" && config.phase != "rl") {
    throw std::invalid_argument("train: unknown phase \"" + config.phase + "\" (xe|coverage|rl)");
  }
  require_file(config.vocab_path, "vocabulary");
  require_file(config.train_data, "train data");
  const Vocabulary vocab = Vocabulary::load(config.vocab_path);
  const std::vector<Example> train_corpus = load_dataset(config.train_data);
  if (train_corpus.empty()) throw std::runtime_error("train: empty training data");
  std::vector<Example> val_corpus;
  if (!config.val_data.empty()) {
    require_file(config.val_data, "validation data");
    val_corpus = load_dataset(config.val_data);
  }

  config.model.vocab_size = vocab.size();
  long long start_step = 0;
  Checkpoint restored;
  bool have_restore = false;
  if (!config.init_from.empty()) {
    restored = load_checkpoint(config.init_from);
    have_restore = true;
  } else if (config.phase != "xe") {
    throw std::invalid_argument("train: phase \"" + config.phase + "\" needs --init-from <checkpoint>");
  }

  if (config.phase == "coverage") config.model.coverage_enabled = true;
  if (config.phase == "rl" && have_restore) config.model.coverage_enabled = restored.model.coverage_enabled;

  Summarizer model(config.model);
  OptimizerState opt_state;
  opt_state.kind = config.train.optimizer;
  if (have_restore) {
    if (restored.model.vocab_size != config.model.vocab_size) {
      throw std::runtime_error("train: checkpoint vocab_size " + std::to_string(restored.model.vocab_size) +
                               " != vocabulary file size " + std::to_string(config.model.vocab_size));
    }
    Rng init_rng(config.train.seed);
    model.init_params(init_rng);  // defines the parameter set; values overwritten below
    for (const std::string& name : model.params().names()) {
      const Tensor& saved = restored.params.get(name);
      if (saved.shape != model.params().get(name).shape) {
        throw std::runtime_error("train: checkpoint shape " + shape_str(saved.shape) + " for \"" + name +
                                 "\" does not fit the configured model " +
                                 shape_str(model.params().get(name).shape));
      }
      model.params().set(name, saved);
    }
    start_step = restored.step;
    if (restored.optimizer.kind == config.train.optimizer) {
      opt_state = std::move(restored.optimizer);
    }
  } else {
    Rng init_rng(config.train.seed);
    model.init_params(init_rng);
  }

  std::filesystem::create_directories(config.checkpoint_dir);
  {
    nlohmann::json echo = config;
    std::ofstream os(config.checkpoint_dir + "/config.json");
    os << echo.dump(2) << '\n';
  }

  std::vector<EncodedExample> train_set = encode_corpus(train_corpus, vocab, config.model);
  std::vector<std::vector<std::string>> train_refs;
  train_refs.reserve(train_corpus.size());
  for (const Example& ex : train_corpus) train_refs.push_back(ex.summary);
  std::vector<EncodedExample> val_set = encode_corpus(val_corpus, vocab, config.model);

  const bool rl_active = config.phase == "rl";
  DecodeConfig sample_config = config.decode;
  sample_config.mode = DecodeMode::kSample;
  sample_config.max_len = std::min(sample_config.max_len, config.model.max_dec_steps);
  sample_config.min_len = std::min(sample_config.min_len, sample_config.max_len);
  RewardFn reward = [](const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    return static_cast<float>(rouge_l(cand, ref).f1);
  };

  StepLogger logger(config.checkpoint_dir + "/train_log.txt");
  logger.show_encoder_norm = config.train.flow_cut_1 || config.train.flow_cut_2 || config.train.fixed_encoder;
  Rng order_rng(config.train.seed + 1);
  Rng sample_rng(config.train.seed + 2);
  std::vector<int> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::size_t cursor = order.size();  // forces a shuffle on first use

  float best_val = std::numeric_limits<float>::max();
  auto save_as = [&](const std::string& name, long long step) {
    Checkpoint ckpt;
    ckpt.model = model.config();
    ckpt.train = config.train;
    ckpt.step = step;
    ckpt.params = model.params();
    ckpt.optimizer = opt_state;
    save_checkpoint(ckpt, config.checkpoint_dir + "/" + name);
  };

  for (long long step = start_step + 1; step <= start_step + config.steps; ++step) {
    std::vector<EncodedExample> batch_examples;
    std::vector<std::vector<std::string>> batch_refs;
    for (int b = 0; b < config.train.batch_size; ++b) {
      if (cursor >= order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[order_rng.below(static_cast<int>(i))]);
        }
        cursor = 0;
      }
      const int idx = order[cursor++];
      batch_examples.push_back(train_set[idx]);
      batch_refs.push_back(train_refs[idx]);
    }
    Batch batch = make_batch(batch_examples, config.train.batch_size);
    StepStats stats;
    if (rl_active) {
      stats = rl_train_step(model, batch, batch_refs, vocab, config.train, sample_config, opt_state,
                            sample_rng, reward);
    } else {
      stats = train_step(model, batch, config.train, opt_state);
    }
    logger.log(step, stats, rl_active);

    const bool last = step == start_step + config.steps;
    if ((config.val_every > 0 && step % config.val_every == 0) || last) {
      if (!val_set.empty()) {
        const float val_xe = evaluate_xe(model, val_set, config.train.gamma);
        std::cout << "validation | step " << step << " | xe " << val_xe << "\n";
        if (val_xe < best_val) {
          best_val = val_xe;
          save_as("best", step);
        }
      }
      save_as("latest", step);
    }
  }
  std::cout << "trained " << config.steps << " steps; checkpoints in " << config.checkpoint_dir << "\n";
  return 0;
}

namespace {

Summarizer model_from_checkpoint(const Checkpoint& ckpt) {
  Summarizer model(ckpt.model);
  Rng rng(1);
  model.init_params(rng);
  for (const std::string& name : model.params().names()) {
    model.params().set(name, ckpt.params.get(name));
  }
  return model;
}

}  // namespace

int cmd_decode(const std::string& checkpoint_stem, const std::string& data_path,
               const std::string& vocab_path, const DecodeConfig& decode, const std::string& out_path) {
  require_file(vocab_path, "vocabulary");
  require_file(data_path, "data");
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  const Checkpoint ckpt = load_checkpoint(checkpoint_stem);
  if (ckpt.model.vocab_size != vocab.size()) {
    throw std::runtime_error("decode: checkpoint vocab_size " + std::to_string(ckpt.model.vocab_size) +
                             " != vocabulary file size " + std::to_string(vocab.size()));
  }
  const Summarizer model = model_from_checkpoint(ckpt);
  decode.validate(model.config().max_dec_steps);

  const std::vector<Example> corpus = load_dataset(data_path);
  std::vector<DecodedSummary> decoded;
  decoded.reserve(corpus.size());
  Rng sample_rng(decode.seed);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const EncodedExample ex =
        encode_example(corpus[i], vocab, model.config().max_enc_steps, model.config().max_dec_steps);
    std::vector<int> ids;
    switch (decode.mode) {
      case DecodeMode::kGreedy: ids = greedy_decode(model, ex, decode); break;
      case DecodeMode::kSample: ids = sample_decode(model, ex, decode, sample_rng).ids; break;
      case DecodeMode::kBeam: ids = beam_search_decode(model, ex, decode); break;
    }
    decoded.push_back({static_cast<int>(i), detokenize(ids, vocab, ex.oov_words)});
  }
  save_decoded(decoded, out_path);
  std::cout << "decoded " << decoded.size() << " examples (" << decode_mode_name(decode.mode) << ") to "
            << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& summaries_path, const std::string& references_path,
             const std::string& report_path) {
  require_file(summaries_path, "summaries");
  require_file(references_path, "references");
  const std::vector<DecodedSummary> decoded = load_decoded(summaries_path);
  const std::vector<Example> references = load_dataset(references_path);
  if (decoded.size() != references.size()) {
    throw std::runtime_error("eval: " + std::to_string(decoded.size()) + " summaries vs " +
                             std::to_string(references.size()) + " references");
  }
  std::vector<std::vector<std::string>> summaries(references.size());
  for (const DecodedSummary& s : decoded) {
    if (s.example_index < 0 || s.example_index >= static_cast<int>(references.size())) {
      throw std::runtime_error("eval: example_index " + std::to_string(s.example_index) +
                               " outside the reference corpus of " + std::to_string(references.size()));
    }
    summaries[s.example_index] = s.tokens;
  }
  const MetricReport report = evaluate_corpus(summaries, references);
  std::cout << report.table();
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw std::runtime_error("eval: cannot write " + report_path);
    os << report.to_json() << '\n';
    std::cout << "report written to " << report_path << "\n";
  }
  return 0;
}

int cmd_analyze_memory_sim(const std::vector<std::string>& checkpoint_stems, const std::string& data_path,
                           const std::string& vocab_path, bool raw_states) {
  require_file(vocab_path, "vocabulary");
  require_file(data_path, "data");
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  const std::vector<Example> corpus = load_dataset(data_path);
  for (const std::string& stem : checkpoint_stems) {
    const Checkpoint ckpt = load_checkpoint(stem);
    if (ckpt.model.vocab_size != vocab.size()) {
      throw std::runtime_error("memory-sim: checkpoint vocab_size " +
                               std::to_string(ckpt.model.vocab_size) + " != vocabulary file size " +
                               std::to_string(vocab.size()));
    }
    const Summarizer model = model_from_checkpoint(ckpt);
    const std::vector<EncodedExample> encoded = encode_corpus(corpus, vocab, model.config());
    const double mean = memory_similarity(model, encoded, raw_states);
    std::printf("checkpoint %s | mean cosine %.6f\n", stem.c_str(), mean);
  }
  return 0;
}

int cmd_analyze_fixed_encoder(RunConfig config, const std::string& encoder_from) {
  const Checkpoint source = load_checkpoint(encoder_from);
  config.train.fixed_encoder = true;
  config.phase = "xe";
  config.init_from.clear();

  // Train a fresh model but with the encoder restored from the given
  // checkpoint before the loop; cmd_train would re-randomize it, so the
  // restore happens through a staged checkpoint.
  require_file(config.vocab_path, "vocabulary");
  const Vocabulary vocab = Vocabulary::load(config.vocab_path);
  config.model.vocab_size = vocab.size();
  if (source.model.vocab_size != config.model.vocab_size) {
    throw std::runtime_error("fixed-encoder: checkpoint vocab_size " +
                             std::to_string(source.model.vocab_size) + " != vocabulary file size " +
                             std::to_string(config.model.vocab_size));
  }
  Summarizer fresh(config.model);
  Rng rng(config.train.seed + 17);
  fresh.init_params(rng);
  for (const std::string& name : fresh.params().names()) {
    if (is_encoder_param(name)) fresh.params().set(name, source.params.get(name));
  }
  std::filesystem::create_directories(config.checkpoint_dir);
  Checkpoint staged;
  staged.model = fresh.config();
  staged.train = config.train;
  staged.step = 0;
  staged.params = fresh.params();
  const std::string staged_stem = config.checkpoint_dir + "/fixed_encoder_start";
  save_checkpoint(staged, staged_stem);
  config.init_from = staged_stem;
  return cmd_train(std::move(config));
}

int cmd_analyze_flow_cut(RunConfig config, int which_cut) {
  if (which_cut != 1 && which_cut != 2) {
    throw std::invalid_argument("flow-cut: cut must be 1 or 2");
  }
  config.train.flow_cut_1 = which_cut == 1;
  config.train.flow_cut_2 = which_cut == 2;
  config.phase = "xe";
  return cmd_train(std::move(config));
}

}  // namespace cbsum
