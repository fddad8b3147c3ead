#include "drn/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace drn {

using nlohmann::json;

std::vector<int> TrainConfig::resolved_decay_steps() const {
  if (!decay_steps.empty()) return decay_steps;
  return {steps * 9 / 14, steps * 12 / 14};
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (steps < 0) fail("steps must be non-negative");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) fail("lr_decay must lie in (0, 1]");
  if (grad_clip < 0) fail("grad_clip must be non-negative");
  if (!(scale_min > 0) || scale_max < scale_min) fail("scale range is empty");
  if (color_jitter < 0 || color_jitter >= 1) fail("color_jitter must lie in [0, 1)");
  if (log_every <= 0 || checkpoint_every <= 0) fail("log and checkpoint intervals must be positive");
}

void RunConfig::validate() const {
  model.validate();
  scene.validate();
  train.validate();
  parse_ablation(ablation);
  if (scene.num_classes > model.num_classes) {
    throw std::invalid_argument("RunConfig: scene has " + std::to_string(scene.num_classes) +
                                " classes but the model only " +
                                std::to_string(model.num_classes));
  }
}

namespace {

std::string source_name(AngleSource s) { return s == AngleSource::kTarget ? "target" : "predicted"; }

AngleSource parse_source(const std::string& s) {
  if (s == "target") return AngleSource::kTarget;
  if (s == "predicted") return AngleSource::kPredicted;
  throw std::invalid_argument("unknown angle source '" + s + "' (expected target or predicted)");
}

void check_keys(const json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw std::invalid_argument(std::string(what) + ": unknown key '" + k + "'");
  }
}

template <class T>
void take(const json& j, const char* key, T& dst, const char* what) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string(what) + "." + key + ": wrong type");
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"input_height", c.input_height}, {"input_width", c.input_width},
          {"stride", c.stride},             {"width", c.width},
          {"depth", c.depth},               {"head_channels", c.head_channels},
          {"num_classes", c.num_classes},   {"fsm_ratio", c.fsm_ratio},
          {"use_fsm", c.use_fsm},           {"use_drhc", c.use_drhc},
          {"drhr_size", c.drhr_size},       {"drhr_offset", c.drhr_offset},
          {"drhr_angle", c.drhr_angle},     {"epsilon_c", c.epsilon_c},
          {"epsilon_r", c.epsilon_r},       {"train_angle_source", source_name(c.train_angle_source)},
          {"lambda_size", c.lambda_size},   {"lambda_off", c.lambda_off},
          {"lambda_ang", c.lambda_ang},     {"top_k", c.top_k},
          {"filter_scores", c.filter_scores}, {"score_floor", c.score_floor},
          {"init_seed", c.init_seed}};
}

void merge(ModelConfig& c, const json& j) {
  const char* w = "model";
  check_keys(j, {"input_height", "input_width", "stride", "width", "depth", "head_channels",
                 "num_classes", "fsm_ratio", "use_fsm", "use_drhc", "drhr_size", "drhr_offset",
                 "drhr_angle", "epsilon_c", "epsilon_r", "train_angle_source", "lambda_size",
                 "lambda_off", "lambda_ang", "top_k", "filter_scores", "score_floor", "init_seed"},
             w);
  take(j, "input_height", c.input_height, w);
  take(j, "input_width", c.input_width, w);
  take(j, "stride", c.stride, w);
  take(j, "width", c.width, w);
  take(j, "depth", c.depth, w);
  take(j, "head_channels", c.head_channels, w);
  take(j, "num_classes", c.num_classes, w);
  take(j, "fsm_ratio", c.fsm_ratio, w);
  take(j, "use_fsm", c.use_fsm, w);
  take(j, "use_drhc", c.use_drhc, w);
  take(j, "drhr_size", c.drhr_size, w);
  take(j, "drhr_offset", c.drhr_offset, w);
  take(j, "drhr_angle", c.drhr_angle, w);
  take(j, "epsilon_c", c.epsilon_c, w);
  take(j, "epsilon_r", c.epsilon_r, w);
  if (j.contains("train_angle_source")) {
    c.train_angle_source = parse_source(j.at("train_angle_source").get<std::string>());
  }
  take(j, "lambda_size", c.lambda_size, w);
  take(j, "lambda_off", c.lambda_off, w);
  take(j, "lambda_ang", c.lambda_ang, w);
  take(j, "top_k", c.top_k, w);
  take(j, "filter_scores", c.filter_scores, w);
  take(j, "score_floor", c.score_floor, w);
  take(j, "init_seed", c.init_seed, w);
}

json to_json(const SceneConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"min_size", c.min_size},
          {"max_size", c.max_size},
          {"min_angle_deg", c.min_angle_deg},
          {"max_angle_deg", c.max_angle_deg},
          {"max_iou", c.max_iou},
          {"num_classes", c.num_classes},
          {"noise", c.noise},
          {"attempts_per_object", c.attempts_per_object}};
}

void merge(SceneConfig& c, const json& j) {
  const char* w = "scene";
  check_keys(j, {"width", "height", "min_objects", "max_objects", "min_size", "max_size",
                 "min_angle_deg", "max_angle_deg", "max_iou", "num_classes", "noise",
                 "attempts_per_object"},
             w);
  take(j, "width", c.width, w);
  take(j, "height", c.height, w);
  take(j, "min_objects", c.min_objects, w);
  take(j, "max_objects", c.max_objects, w);
  take(j, "min_size", c.min_size, w);
  take(j, "max_size", c.max_size, w);
  take(j, "min_angle_deg", c.min_angle_deg, w);
  take(j, "max_angle_deg", c.max_angle_deg, w);
  take(j, "max_iou", c.max_iou, w);
  take(j, "num_classes", c.num_classes, w);
  take(j, "noise", c.noise, w);
  take(j, "attempts_per_object", c.attempts_per_object, w);
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"decay_steps", c.decay_steps},
          {"lr_decay", c.lr_decay},
          {"grad_clip", c.grad_clip},
          {"augment", c.augment},
          {"scale_min", c.scale_min},
          {"scale_max", c.scale_max},
          {"flip", c.flip},
          {"color_jitter", c.color_jitter},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every}};
}

void merge(TrainConfig& c, const json& j) {
  const char* w = "train";
  check_keys(j, {"steps", "batch_size", "learning_rate", "decay_steps", "lr_decay", "grad_clip",
                 "augment", "scale_min", "scale_max", "flip", "color_jitter", "log_every",
                 "checkpoint_every"},
             w);
  take(j, "steps", c.steps, w);
  take(j, "batch_size", c.batch_size, w);
  take(j, "learning_rate", c.learning_rate, w);
  take(j, "decay_steps", c.decay_steps, w);
  take(j, "lr_decay", c.lr_decay, w);
  take(j, "grad_clip", c.grad_clip, w);
  take(j, "augment", c.augment, w);
  take(j, "scale_min", c.scale_min, w);
  take(j, "scale_max", c.scale_max, w);
  take(j, "flip", c.flip, w);
  take(j, "color_jitter", c.color_jitter, w);
  take(j, "log_every", c.log_every, w);
  take(j, "checkpoint_every", c.checkpoint_every, w);
}

json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"scene", to_json(c.scene)},
          {"train", to_json(c.train)},
          {"seed", c.seed},
          {"ablation", c.ablation},
          {"out_dir", c.out_dir}};
}

void merge(RunConfig& c, const json& j) {
  check_keys(j, {"model", "scene", "train", "seed", "ablation", "out_dir"}, "config");
  if (j.contains("model")) merge(c.model, j["model"]);
  if (j.contains("scene")) merge(c.scene, j["scene"]);
  if (j.contains("train")) merge(c.train, j["train"]);
  take(j, "seed", c.seed, "config");
  take(j, "ablation", c.ablation, "config");
  take(j, "out_dir", c.out_dir, "config");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  RunConfig c;
  merge(c, j);
  return c;
}

}  // namespace drn
