#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cbsum/run.hpp"

using namespace cbsum;

namespace {

void add_model_flags(CLI::App* cmd, ModelConfig& model) {
  cmd->add_option("--embed-dim", model.embed_dim, "word embedding dimension");
  cmd->add_option("--hidden-dim", model.hidden_dim, "LSTM hidden dimension");
  cmd->add_option("--max-enc-steps", model.max_enc_steps, "encoder input truncation");
  cmd->add_option("--max-dec-steps", model.max_dec_steps, "decoder target truncation");
}

void add_train_flags(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--phase", cfg.phase, "training phase: xe | coverage | rl");
  cmd->add_option("--train-data", cfg.train_data, "training dataset (JSON lines)");
  cmd->add_option("--val-data", cfg.val_data, "validation dataset (JSON lines)");
  cmd->add_option("--vocab", cfg.vocab_path, "vocabulary file");
  cmd->add_option("--checkpoint-dir", cfg.checkpoint_dir, "checkpoint output directory");
  cmd->add_option("--init-from", cfg.init_from, "checkpoint stem to restore");
  cmd->add_option("--steps", cfg.steps, "optimizer steps to run");
  cmd->add_option("--val-every", cfg.val_every, "validation interval in steps");
  cmd->add_option("--gamma", cfg.train.gamma, "closed-book mix ratio in [0,1]");
  cmd->add_option("--rl-mix-lambda", cfg.train.rl_mix_lambda, "RL:XE mix ratio in [0,1]");
  cmd->add_option("--coverage-weight", cfg.train.coverage_weight, "coverage loss weight");
  cmd->add_option_function<std::string>(
         "--optimizer", [&cfg](const std::string& name) { cfg.train.optimizer = optimizer_from_string(name); },
         "adagrad | adam")
      ->type_name("TEXT");
  cmd->add_option("--learning-rate", cfg.train.learning_rate, "optimizer learning rate");
  cmd->add_option("--clip-norm", cfg.train.clip_norm, "global gradient norm cap");
  cmd->add_option("--batch-size", cfg.train.batch_size, "examples per step");
  cmd->add_flag("--flow-cut-1", cfg.train.flow_cut_1, "stop gradients encoder <- closed-book decoder");
  cmd->add_flag("--flow-cut-2", cfg.train.flow_cut_2, "stop gradients embedding <- closed-book decoder");
  cmd->add_flag("--fixed-encoder", cfg.train.fixed_encoder, "freeze encoder parameters");
  cmd->add_option("--seed", cfg.train.seed, "seed for init, shuffling, and sampling");
  cmd->add_option("--min-len", cfg.decode.min_len, "minimum sampled length (rl phase)");
  cmd->add_option("--max-len", cfg.decode.max_len, "maximum sampled length (rl phase)");
  add_model_flags(cmd, cfg.model);
}

void add_decode_flags(CLI::App* cmd, DecodeConfig& decode) {
  cmd->add_option_function<std::string>(
         "--mode", [&decode](const std::string& name) { decode.mode = decode_mode_from_string(name); },
         "greedy | sample | beam")
      ->type_name("TEXT");
  cmd->add_option("--beam-size", decode.beam_size, "beam width");
  cmd->add_option("--min-len", decode.min_len, "minimum summary length");
  cmd->add_option("--max-len", decode.max_len, "maximum summary length");
  cmd->add_option("--seed", decode.seed, "sampling seed");
  cmd->add_option("--force-p-gen", decode.force_p_gen, "pin the copy/generate gate (analysis)");
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  // The config file provides defaults; flags parsed afterwards override.
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    try {
      if (arg == "--config" && i + 1 < argc) {
        cfg = load_run_config(argv[i + 1]);
      } else if (arg.rfind("--config=", 0) == 0) {
        cfg = load_run_config(arg.substr(9));
      }
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }

  CLI::App app{"2-decoder pointer-generator summarizer"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override it)");

  CLI::App* gen = app.add_subcommand("gen-corpus", "write a synthetic dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 13;
  int gen_examples = 100, gen_article_len = 10, gen_salient = 2;
  double gen_oov = 0.2;
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--n-examples", gen_examples, "number of examples");
  gen->add_option("--article-len", gen_article_len, "sentences per article");
  gen->add_option("--n-salient", gen_salient, "salient sentences per article");
  gen->add_option("--oov-fraction", gen_oov, "fraction of entities outside the vocabulary");

  CLI::App* vocab_cmd = app.add_subcommand("build-vocab", "build a vocabulary file from a dataset");
  std::string bv_data, bv_out;
  int bv_max = 50000;
  vocab_cmd->add_option("--data", bv_data, "dataset path")->required();
  vocab_cmd->add_option("--out", bv_out, "vocabulary output path")->required();
  vocab_cmd->add_option("--max-size", bv_max, "maximum vocabulary size incl. reserved tokens");

  CLI::App* train_cmd = app.add_subcommand("train", "train (phases: xe, coverage fine-tune, rl)");
  add_train_flags(train_cmd, cfg);

  CLI::App* decode_cmd = app.add_subcommand("decode", "generate summaries with the pointer decoder");
  std::string dec_ckpt, dec_data, dec_vocab, dec_out;
  decode_cmd->add_option("--checkpoint", dec_ckpt, "checkpoint stem")->required();
  decode_cmd->add_option("--data", dec_data, "dataset to decode")->required();
  decode_cmd->add_option("--vocab", dec_vocab, "vocabulary file")->required();
  decode_cmd->add_option("--out", dec_out, "decoded summaries output")->required();
  add_decode_flags(decode_cmd, cfg.decode);

  CLI::App* eval_cmd = app.add_subcommand("eval", "score decoded summaries against references");
  std::string ev_summaries, ev_refs, ev_report;
  eval_cmd->add_option("--summaries", ev_summaries, "decoded summaries file")->required();
  eval_cmd->add_option("--references", ev_refs, "reference dataset")->required();
  eval_cmd->add_option("--report", ev_report, "metric report JSON output");

  CLI::App* analyze = app.add_subcommand("analyze", "analysis and ablation recipes");
  analyze->require_subcommand(1);

  CLI::App* memsim = analyze->add_subcommand("memory-sim", "article/summary memory-state cosine");
  std::vector<std::string> ms_ckpts;
  std::string ms_data, ms_vocab;
  bool ms_raw = false;
  memsim->add_option("--checkpoint", ms_ckpts, "checkpoint stem (repeatable)")->required();
  memsim->add_option("--data", ms_data, "dataset with gold summaries")->required();
  memsim->add_option("--vocab", ms_vocab, "vocabulary file")->required();
  memsim->add_flag("--raw-states", ms_raw, "use raw bidirectional final cell states");

  CLI::App* fixed = analyze->add_subcommand("fixed-encoder", "train with a restored, frozen encoder");
  std::string fe_from;
  fixed->add_option("--encoder-from", fe_from, "checkpoint stem providing the encoder")->required();
  add_train_flags(fixed, cfg);

  CLI::App* flowcut = analyze->add_subcommand("flow-cut", "train with a gradient flow cut");
  int fc_cut = 1;
  flowcut->add_option("--cut", fc_cut, "which edge to cut: 1 (encoder) or 2 (embedding)")->required();
  add_train_flags(flowcut, cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_corpus(gen_out, gen_seed, gen_examples, gen_article_len, gen_salient, gen_oov);
    }
    if (vocab_cmd->parsed()) return cmd_build_vocab(bv_data, bv_out, bv_max);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (decode_cmd->parsed()) return cmd_decode(dec_ckpt, dec_data, dec_vocab, cfg.decode, dec_out);
    if (eval_cmd->parsed()) return cmd_eval(ev_summaries, ev_refs, ev_report);
    if (analyze->parsed()) {
      if (memsim->parsed()) return cmd_analyze_memory_sim(ms_ckpts, ms_data, ms_vocab, ms_raw);
      if (fixed->parsed()) return cmd_analyze_fixed_encoder(cfg, fe_from);
      if (flowcut->parsed()) return cmd_analyze_flow_cut(cfg, fc_cut);
    }
    std::cerr << "error: no subcommand given\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
