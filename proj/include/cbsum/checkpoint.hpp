#pragma once

#include <string>

#include <json.hpp>

#include "cbsum/decoding.hpp"
#include "cbsum/model.hpp"
#include "cbsum/training.hpp"

namespace cbsum {

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);
void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);
void to_json(nlohmann::json& j, const DecodeConfig& cfg);
void from_json(const nlohmann::json& j, DecodeConfig& cfg);

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  long long step = 0;
  ParamStore params;
  OptimizerState optimizer;
};

// <stem>.ckpt holds the parameter blob, <stem>.opt the optimizer tensors
// (both in the binary checkpoint format), <stem>.json the configs and
// counters.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& stem);
Checkpoint load_checkpoint(const std::string& stem);

}  // namespace cbsum
