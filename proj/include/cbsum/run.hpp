#pragma once

#include <string>
#include <vector>

#include "cbsum/checkpoint.hpp"
#include "cbsum/decoding.hpp"
#include "cbsum/metrics.hpp"
#include "cbsum/model.hpp"
#include "cbsum/training.hpp"

namespace cbsum {

// Effective settings for one command invocation. Precedence when building
// one: command-line flags > JSON config file > these defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;

  std::string phase = "xe";  // xe | coverage | rl
  std::string train_data;
  std::string val_data;
  std::string data;  // decode/eval/analyze input
  std::string vocab_path;
  std::string checkpoint_dir = "checkpoints";
  std::string init_from;  // checkpoint stem for resume / fine-tune phases
  std::string report_path;
  int steps = 1000;
  int val_every = 100;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

int cmd_gen_corpus(const std::string& out_path, std::uint64_t seed, int n_examples, int article_len,
                   int n_salient, double oov_entity_fraction);

int cmd_build_vocab(const std::string& data_path, const std::string& out_path, int max_size);

// Runs the configured phase: "xe" trains from scratch (or resumes via
// init_from), "coverage" restores a checkpoint and fine-tunes with the
// coverage loss enabled, "rl" restores a checkpoint and minimizes the
// mixed RL+XE objective with Adam.
int cmd_train(RunConfig config);

int cmd_decode(const std::string& checkpoint_stem, const std::string& data_path,
               const std::string& vocab_path, const DecodeConfig& decode, const std::string& out_path);

int cmd_eval(const std::string& summaries_path, const std::string& references_path,
             const std::string& report_path);

int cmd_analyze_memory_sim(const std::vector<std::string>& checkpoint_stems, const std::string& data_path,
                           const std::string& vocab_path, bool raw_states);

// Fresh model with the encoder (and state reduction) restored from the
// given checkpoint and frozen; only embeddings and decoders train.
int cmd_analyze_fixed_encoder(RunConfig config, const std::string& encoder_from);

int cmd_analyze_flow_cut(RunConfig config, int which_cut);

}  // namespace cbsum
