#pragma once

// Adam, binary checkpoints, augmentation and the training loop.
//
// Checkpoint layout (little-endian):
//   8 bytes   magic "DRNCKPT1"
//   u64       header length
//   header    JSON: run config, step, optimizer step count, tensor table
//   payload   raw doubles, one block per table entry, in table order
// The table lists every parameter (including running statistics) followed
// by the Adam first and second moments of the trainable ones.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "drn/config.hpp"
#include "drn/detector.hpp"
#include "drn/synth_data.hpp"

namespace drn {

class Adam {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit Adam(ParamList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(double lr);
  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  const ParamList& params() const { return params_; }
  // Parallel to params(); empty for frozen parameters.
  std::vector<Moments>& moments() { return moments_; }

 private:
  ParamList params_;
  std::vector<Moments> moments_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Rescales trainable gradients so their global L2 norm is at most
// max_norm (0 disables). Returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

struct CheckpointInfo {
  RunConfig config;
  std::int64_t step = 0;
  std::int64_t optimizer_steps = 0;
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, Detector& model,
                     const Adam* optimizer, std::int64_t step);
// Reads only the header.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);
// Restores weights (and moments when `optimizer` is given). Throws
// std::runtime_error when the stored model config or tensor table does not
// match `model`.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, Detector& model,
                               Adam* optimizer = nullptr);

// Generator seeded from (seed, step, stream) so a resumed run draws the
// same numbers as an uninterrupted one.
std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream);

// Random flip, scale about the center and brightness/contrast jitter.
// Output keeps the input size; objects whose centers leave the canvas are
// dropped.
Scene augment_scene(const Scene& scene, const TrainConfig& config, std::mt19937_64& rng);

double learning_rate_at(const TrainConfig& config, std::int64_t step);

struct StepLog {
  std::int64_t step = 0;  // 1-based index of the finished step
  double learning_rate = 0.0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const StepLog& s);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  // Scenes are letterboxed to the model input once, up front.
  Trainer(const RunConfig& config, const std::vector<Scene>& scenes);

  StepLog train_step();
  // Runs until `config.train.steps`; the callback sees every step.
  void run(const std::function<void(const StepLog&)>& on_step = {});

  std::int64_t step() const { return step_; }
  Detector& model() { return model_; }
  Adam& optimizer() { return optimizer_; }
  const RunConfig& config() const { return config_; }
  const std::vector<Scene>& data() const { return data_; }

  void save(const std::filesystem::path& path) { save_checkpoint(path, config_, model_, &optimizer_, step_); }
  void resume(const std::filesystem::path& path);

  // Scenes drawn at `step`: run-wide sample i is position i % n of a
  // per-epoch shuffle.
  std::vector<std::size_t> batch_indices(std::int64_t step) const;

 private:
  RunConfig config_;
  std::vector<Scene> data_;
  Detector model_;
  Adam optimizer_;
  std::int64_t step_ = 0;
};

struct InferenceOptions {
  bool nms = true;
  double nms_iou = 0.5;
  double nms_floor = 0.03;
  double score_floor = 0.0;
};

// Letterboxes to the model input, runs inference and maps boxes back to
// the original image coordinates.
std::vector<Detection> detect(Detector& model, const Image& image, const InferenceOptions& options);

}  // namespace drn
