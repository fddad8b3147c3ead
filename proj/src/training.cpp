#include "drn/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace drn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints assume little-endian doubles");

// ------------------------------------------------------------------ Adam

Adam::Adam(ParamList params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  moments_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i]->trainable) continue;
    moments_[i].m.assign(params_[i]->numel(), 0.0);
    moments_[i].v.assign(params_[i]->numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    auto& [m, v] = moments_[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double g = p.grad[k];
      m[k] = beta1_ * m[k] + (1 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1 - beta2_) * g * g;
      p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      for (double& g : p->grad) g *= f;
    }
  }
  return norm;
}

// ------------------------------------------------------------ checkpoint

namespace {

constexpr char kMagic[8] = {'D', 'R', 'N', 'C', 'K', 'P', 'T', '1'};

struct Block {
  std::string name;
  std::string kind;  // param | adam_m | adam_v
  std::vector<int> shape;
  std::vector<double>* data;
};

std::vector<Block> table(Detector& model, Adam* opt) {
  std::vector<Block> out;
  for (Parameter* p : model.parameters()) out.push_back({p->name, "param", p->shape, &p->value});
  if (opt) {
    const ParamList& ps = opt->params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i]->trainable) continue;
      out.push_back({ps[i]->name, "adam_m", ps[i]->shape, &opt->moments()[i].m});
      out.push_back({ps[i]->name, "adam_v", ps[i]->shape, &opt->moments()[i].v});
    }
  }
  return out;
}

struct RawCheckpoint {
  json header;
  std::uint64_t payload_offset = 0;
};

RawCheckpoint read_header(std::ifstream& in, const std::filesystem::path& path) {
  const auto fail = [&](const std::string& m) { throw std::runtime_error(path.string() + ": " + m); };
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) fail("not a drn checkpoint");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), 8) || len > (1u << 28)) fail("corrupt header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) fail("truncated header");
  RawCheckpoint r;
  try {
    r.header = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }
  r.payload_offset = 16 + len;
  return r;
}

CheckpointInfo info_from(const json& h) {
  CheckpointInfo info;
  merge(info.config, h.at("config"));
  info.step = h.at("step").get<std::int64_t>();
  info.optimizer_steps = h.at("optimizer_steps").get<std::int64_t>();
  return info;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, Detector& model,
                     const Adam* optimizer, std::int64_t step) {
  if (!(to_json(config.model) == to_json(model.config()))) {
    throw std::invalid_argument("save_checkpoint: run config does not describe this model");
  }
  const auto blocks = table(model, const_cast<Adam*>(optimizer));
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const Block& b : blocks) {
    tensors.push_back({{"name", b.name}, {"kind", b.kind}, {"shape", b.shape},
                       {"offset", offset}, {"count", b.data->size()}});
    offset += b.data->size();
  }
  const json header = {{"format", 1},
                       {"config", to_json(config)},
                       {"step", step},
                       {"optimizer_steps", optimizer ? optimizer->steps_taken() : 0},
                       {"tensors", tensors}};
  const std::string text = header.dump();
  std::string bytes(kMagic, 8);
  const std::uint64_t len = text.size();
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += text;
  for (const Block& b : blocks) {
    bytes.append(reinterpret_cast<const char*>(b.data->data()), b.data->size() * sizeof(double));
  }
  write_file_atomic(path, bytes);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const RawCheckpoint raw = read_header(in, path);
  try {
    return info_from(raw.header);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": bad header: " + e.what());
  }
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, Detector& model, Adam* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const RawCheckpoint raw = read_header(in, path);
  const auto fail = [&](const std::string& m) { throw std::runtime_error(path.string() + ": " + m); };
  CheckpointInfo info;
  try {
    info = info_from(raw.header);
  } catch (const std::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }

  const json stored = to_json(info.config.model), wanted = to_json(model.config());
  for (const auto& [key, value] : wanted.items()) {
    if (stored.at(key) != value) {
      fail("model config mismatch on '" + key + "': checkpoint has " + stored.at(key).dump() +
           ", model has " + value.dump());
    }
  }

  const json& entries = raw.header.at("tensors");
  std::vector<Block> blocks = table(model, nullptr);
  const std::size_t num_params = blocks.size();
  if (optimizer) {
    blocks = table(model, optimizer);
    if (entries.size() == num_params) fail("checkpoint carries no optimizer state");
  }
  if (entries.size() < blocks.size()) fail("tensor table is shorter than the model");
  if (!optimizer && entries.size() != num_params) {
    // Extra optimizer blocks are fine; anything else is a mismatch.
    for (std::size_t i = num_params; i < entries.size(); ++i) {
      if (entries[i].at("kind") == "param") fail("checkpoint has extra parameters");
    }
  }
  if (optimizer && entries.size() != blocks.size()) fail("tensor table size differs from the model");

  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const json& e = entries[i];
    const Block& b = blocks[i];
    if (e.at("name") != b.name || e.at("kind") != b.kind) {
      fail("tensor " + std::to_string(i) + " is " + e.at("kind").get<std::string>() + " '" +
           e.at("name").get<std::string>() + "', expected " + b.kind + " '" + b.name + "'");
    }
    if (e.at("shape").get<std::vector<int>>() != b.shape) {
      fail("shape mismatch for '" + b.name + "': checkpoint " + e.at("shape").dump() + ", model " +
           json(b.shape).dump());
    }
  }

  std::vector<double> scratch;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const json& e = entries[i];
    const std::uint64_t offset = e.at("offset"), count = e.at("count");
    if (count != blocks[i].data->size()) fail("element count mismatch for '" + blocks[i].name + "'");
    in.seekg(static_cast<std::streamoff>(raw.payload_offset + offset * sizeof(double)));
    scratch.resize(count);
    if (!in.read(reinterpret_cast<char*>(scratch.data()),
                 static_cast<std::streamsize>(count * sizeof(double)))) {
      fail("truncated payload at '" + blocks[i].name + "'");
    }
    *blocks[i].data = scratch;
  }
  if (optimizer) optimizer->set_steps_taken(info.optimizer_steps);
  return info;
}

// ---------------------------------------------------------- augmentation

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

Scene augment_scene(const Scene& scene, const TrainConfig& config, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> scale_d(config.scale_min, config.scale_max);
  std::uniform_real_distribution<double> jitter_d(-config.color_jitter, config.color_jitter);
  const bool flip = config.flip && coin(rng);
  const double s = scale_d(rng);
  const double brightness = jitter_d(rng) * 127.5, contrast = 1.0 + jitter_d(rng);

  const Image& src = scene.image;
  const double cx = src.width / 2.0, cy = src.height / 2.0;
  // Forward map: x' = cx + s * (fx(x) - cx), where fx mirrors horizontally.
  const auto fwd_x = [&](double x) { return cx + s * ((flip ? src.width - x : x) - cx); };
  const auto fwd_y = [&](double y) { return cy + s * (y - cy); };

  Scene out;
  const Rgb pad = mean_border(src);
  out.image = Image(src.width, src.height, pad);
  double px[3];
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double sx = cx + (x + 0.5 - cx) / s;
      if (flip) sx = src.width - sx;
      const double sy = cy + (y + 0.5 - cy) / s;
      std::uint8_t* dst = out.image.at(x, y);
      if (!sample_bilinear(src, sx, sy, px)) {
        for (int k = 0; k < 3; ++k) px[k] = pad[k];
      }
      for (int k = 0; k < 3; ++k) dst[k] = clamp_byte((px[k] - 127.5) * contrast + 127.5 + brightness);
    }

  out.annotation = scene.annotation;
  out.annotation.objects.clear();
  for (ObjectAnnotation obj : scene.annotation.objects) {
    const Vec2 c = obj.box.center();
    Septet b;
    b.cx = fwd_x(c.x);
    b.cy = fwd_y(c.y);
    b.w = obj.box.w * s;
    b.h = obj.box.h * s;
    b.theta = canonical_angle(flip ? -obj.box.theta : obj.box.theta);
    if (b.cx < 0 || b.cy < 0 || b.cx >= src.width || b.cy >= src.height) continue;
    obj.box = b;
    out.annotation.objects.push_back(obj);
  }
  return out;
}

double learning_rate_at(const TrainConfig& config, std::int64_t step) {
  double lr = config.learning_rate;
  for (int d : config.resolved_decay_steps()) {
    if (step >= d) lr *= config.lr_decay;
  }
  return lr;
}

json to_json(const StepLog& s) {
  return {{"step", s.step},
          {"lr", s.learning_rate},
          {"total", s.loss.total},
          {"heatmap", s.loss.heatmap},
          {"size", s.loss.size},
          {"offset", s.loss.offset},
          {"angle", s.loss.angle},
          {"grad_norm", s.grad_norm},
          {"seconds", s.seconds}};
}

// --------------------------------------------------------------- trainer

namespace {
constexpr std::uint64_t kStreamOrder = 1, kStreamAugment = 2;
}

Trainer::Trainer(const RunConfig& config, const std::vector<Scene>& scenes)
    : config_(config), model_(config.model), optimizer_(model_.parameters()) {
  config_.validate();
  if (scenes.empty()) throw std::invalid_argument("Trainer: no training scenes");
  data_.reserve(scenes.size());
  for (const Scene& s : scenes) data_.push_back(letterbox(s, config.model.input_width, config.model.input_height));
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
  // Sample i of the whole run sits at position i % n of epoch i / n.
  const std::size_t n = data_.size();
  const int bs = config_.train.batch_size;
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(n);
  for (int b = 0; b < bs; ++b) {
    const std::int64_t i = step * bs + b;
    const std::int64_t epoch = i / static_cast<std::int64_t>(n);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      auto rng = step_rng(config_.seed, epoch, kStreamOrder);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(i % static_cast<std::int64_t>(n))]);
  }
  return out;
}

StepLog Trainer::train_step() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::size_t> idx = batch_indices(step_);
  auto rng = step_rng(config_.seed, step_, kStreamAugment);

  std::vector<Scene> batch;
  batch.reserve(idx.size());
  for (std::size_t i : idx) {
    batch.push_back(config_.train.augment ? augment_scene(data_[i], config_.train, rng) : data_[i]);
  }
  std::vector<const Image*> images;
  std::vector<TargetMaps> parts;
  for (const Scene& s : batch) {
    images.push_back(&s.image);
    parts.push_back(build_targets(s.annotation, config_.model));
  }
  const Tensor x = to_tensor(images);
  const TargetMaps targets = stack_targets(parts);

  const ParamList params = model_.parameters();
  zero_grads(params);
  const RawPrediction pred = model_.forward(x, Mode::kTrain, &targets);
  RawPrediction grad;
  const LossBreakdown loss = loss_total(pred, targets, config_.model, &grad);
  const std::pair<const char*, double> terms[] = {{"heatmap", loss.heatmap}, {"size", loss.size},
                                                  {"offset", loss.offset},   {"angle", loss.angle},
                                                  {"total", loss.total}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) {
      throw NonFiniteLoss("non-finite " + std::string(name) + " loss at step " + std::to_string(step_ + 1));
    }
  }
  model_.backward(grad);

  StepLog log;
  log.grad_norm = clip_grad_norm(params, config_.train.grad_clip);
  if (!std::isfinite(log.grad_norm)) {
    throw NonFiniteLoss("non-finite gradient at step " + std::to_string(step_ + 1));
  }
  log.learning_rate = learning_rate_at(config_.train, step_);
  optimizer_.step(log.learning_rate);
  ++step_;
  log.step = step_;
  log.loss = loss;
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

void Trainer::run(const std::function<void(const StepLog&)>& on_step) {
  while (step_ < config_.train.steps) {
    const StepLog log = train_step();
    if (on_step) on_step(log);
  }
}

void Trainer::resume(const std::filesystem::path& path) {
  const CheckpointInfo info = load_checkpoint(path, model_, &optimizer_);
  step_ = info.step;
}

// ------------------------------------------------------------- inference

std::vector<Detection> detect(Detector& model, const Image& image, const InferenceOptions& options) {
  const ModelConfig& cfg = model.config();
  Scene wrapped;
  wrapped.image = image;
  wrapped.annotation.width = image.width;
  wrapped.annotation.height = image.height;
  const Scene boxed = letterbox(wrapped, cfg.input_width, cfg.input_height);
  const double f = std::min(double(cfg.input_width) / image.width, double(cfg.input_height) / image.height);

  const Tensor x = to_tensor({&boxed.image});
  const RawPrediction pred = model.forward(x, Mode::kInfer);
  std::vector<Detection> dets = decode(pred, cfg, 0);
  std::erase_if(dets, [&](const Detection& d) { return d.score < options.score_floor; });
  for (Detection& d : dets) {
    d.box.cx /= f;
    d.box.cy /= f;
    d.box.dx /= f;
    d.box.dy /= f;
    d.box.w /= f;
    d.box.h /= f;
  }
  if (options.nms) dets = angle_soft_nms(std::move(dets), options.nms_iou, options.nms_floor);
  return dets;
}

}  // namespace drn
