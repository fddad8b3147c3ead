#pragma once

// JSON views of the configuration structs and the merged run
// configuration used by the command-line tool.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "drn/detector.hpp"
#include "drn/synth_data.hpp"

namespace drn {

struct TrainConfig {
  int steps = 1500;
  int batch_size = 4;
  double learning_rate = 4e-4;
  // Steps at which the rate drops by lr_decay; empty means 9/14 and 12/14
  // of the run.
  std::vector<int> decay_steps;
  double lr_decay = 0.1;
  double grad_clip = 10.0;  // global L2 norm, 0 disables
  bool augment = true;
  double scale_min = 0.7;
  double scale_max = 1.3;
  bool flip = true;
  double color_jitter = 0.2;
  int log_every = 10;
  int checkpoint_every = 500;

  std::vector<int> resolved_decay_steps() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Harness defaults follow the desk-scale profile: 256x256 inputs and a
// width-16 backbone.
struct RunConfig {
  ModelConfig model = [] {
    ModelConfig m;
    m.width = 16;
    return m;
  }();
  SceneConfig scene;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::string ablation = "full";
  std::string out_dir;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const SceneConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);

// Unknown keys are rejected so typos surface instead of silently using
// defaults. Missing keys keep the value already in `c`.
void merge(ModelConfig& c, const nlohmann::json& j);
void merge(SceneConfig& c, const nlohmann::json& j);
void merge(TrainConfig& c, const nlohmann::json& j);
void merge(RunConfig& c, const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace drn
