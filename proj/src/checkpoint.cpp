#include "cbsum/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace cbsum {

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"vocab_size", cfg.vocab_size},   {"embed_dim", cfg.embed_dim},
                     {"hidden_dim", cfg.hidden_dim},   {"max_enc_steps", cfg.max_enc_steps},
                     {"max_dec_steps", cfg.max_dec_steps}, {"coverage_enabled", cfg.coverage_enabled}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.max_enc_steps = j.value("max_enc_steps", cfg.max_enc_steps);
  cfg.max_dec_steps = j.value("max_dec_steps", cfg.max_dec_steps);
  cfg.coverage_enabled = j.value("coverage_enabled", cfg.coverage_enabled);
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{{"gamma", cfg.gamma},
                     {"rl_mix_lambda", cfg.rl_mix_lambda},
                     {"coverage_weight", cfg.coverage_weight},
                     {"optimizer", optimizer_name(cfg.optimizer)},
                     {"learning_rate", cfg.learning_rate},
                     {"adagrad_init_acc", cfg.adagrad_init_acc},
                     {"clip_norm", cfg.clip_norm},
                     {"batch_size", cfg.batch_size},
                     {"flow_cut_1", cfg.flow_cut_1},
                     {"flow_cut_2", cfg.flow_cut_2},
                     {"fixed_encoder", cfg.fixed_encoder},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  cfg.gamma = j.value("gamma", cfg.gamma);
  cfg.rl_mix_lambda = j.value("rl_mix_lambda", cfg.rl_mix_lambda);
  cfg.coverage_weight = j.value("coverage_weight", cfg.coverage_weight);
  if (j.contains("optimizer")) cfg.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.adagrad_init_acc = j.value("adagrad_init_acc", cfg.adagrad_init_acc);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.flow_cut_1 = j.value("flow_cut_1", cfg.flow_cut_1);
  cfg.flow_cut_2 = j.value("flow_cut_2", cfg.flow_cut_2);
  cfg.fixed_encoder = j.value("fixed_encoder", cfg.fixed_encoder);
  cfg.seed = j.value("seed", cfg.seed);
}

void to_json(nlohmann::json& j, const DecodeConfig& cfg) {
  j = nlohmann::json{{"mode", decode_mode_name(cfg.mode)}, {"beam_size", cfg.beam_size},
                     {"min_len", cfg.min_len},             {"max_len", cfg.max_len},
                     {"seed", cfg.seed}};
  if (cfg.force_p_gen.has_value()) j["force_p_gen"] = *cfg.force_p_gen;
}

void from_json(const nlohmann::json& j, DecodeConfig& cfg) {
  if (j.contains("mode")) cfg.mode = decode_mode_from_string(j.at("mode").get<std::string>());
  cfg.beam_size = j.value("beam_size", cfg.beam_size);
  cfg.min_len = j.value("min_len", cfg.min_len);
  cfg.max_len = j.value("max_len", cfg.max_len);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("force_p_gen") && !j.at("force_p_gen").is_null()) {
    cfg.force_p_gen = j.at("force_p_gen").get<float>();
  }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& stem) {
  checkpoint.params.save(stem + ".ckpt");

  ParamStore opt;
  for (const auto& [name, tensor] : checkpoint.optimizer.accumulators) opt.add("acc." + name, tensor);
  for (const auto& [name, tensor] : checkpoint.optimizer.second_moments) opt.add("m2." + name, tensor);
  opt.save(stem + ".opt");

  nlohmann::json j;
  j["model"] = checkpoint.model;
  j["train"] = checkpoint.train;
  j["step"] = checkpoint.step;
  j["optimizer"] = {{"kind", optimizer_name(checkpoint.optimizer.kind)},
                    {"step", checkpoint.optimizer.step}};
  std::ofstream os(stem + ".json");
  if (!os) throw std::runtime_error("checkpoint: cannot write " + stem + ".json");
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("checkpoint: write failed for " + stem + ".json");
}

Checkpoint load_checkpoint(const std::string& stem) {
  Checkpoint checkpoint;
  checkpoint.params = ParamStore::load(stem + ".ckpt");

  std::ifstream is(stem + ".json");
  if (!is) throw std::runtime_error("checkpoint: cannot read " + stem + ".json");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: malformed " + stem + ".json: " + e.what());
  }
  checkpoint.model = j.at("model").get<ModelConfig>();
  checkpoint.train = j.at("train").get<TrainConfig>();
  checkpoint.step = j.at("step").get<long long>();
  checkpoint.optimizer.kind = optimizer_from_string(j.at("optimizer").at("kind").get<std::string>());
  checkpoint.optimizer.step = j.at("optimizer").at("step").get<long long>();

  ParamStore opt = ParamStore::load(stem + ".opt");
  for (const std::string& name : opt.names()) {
    if (name.rfind("acc.", 0) == 0) {
      checkpoint.optimizer.accumulators.emplace(name.substr(4), opt.get(name));
    } else if (name.rfind("m2.", 0) == 0) {
      checkpoint.optimizer.second_moments.emplace(name.substr(3), opt.get(name));
    } else {
      throw std::runtime_error("checkpoint: unexpected optimizer entry \"" + name + "\"");
    }
  }
  return checkpoint;
}

}  // namespace cbsum
