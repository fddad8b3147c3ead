#include "drn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace drn {

Ablation parse_ablation(const std::string& name) {
  if (name == "baseline") return Ablation::kBaseline;
  if (name == "fsm") return Ablation::kFsm;
  if (name == "fsm+drhc") return Ablation::kFsmDrhc;
  if (name == "full") return Ablation::kFull;
  throw std::invalid_argument("unknown ablation '" + name +
                              "' (expected baseline, fsm, fsm+drhc or full)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kBaseline: return "baseline";
    case Ablation::kFsm: return "fsm";
    case Ablation::kFsmDrhc: return "fsm+drhc";
    case Ablation::kFull: return "full";
  }
  return "full";
}

void ModelConfig::apply(Ablation a) {
  use_fsm = a != Ablation::kBaseline;
  use_drhc = a == Ablation::kFsmDrhc || a == Ablation::kFull;
  drhr_size = a == Ablation::kFull;
  drhr_offset = false;
  drhr_angle = false;
}

void ModelConfig::validate() const {
  if (stride <= 0 || (stride & (stride - 1)) != 0) {
    throw std::invalid_argument("ModelConfig: stride must be a power of two");
  }
  if (input_height <= 0 || input_width <= 0 || input_height % stride || input_width % stride) {
    throw std::invalid_argument("ModelConfig: stride " + std::to_string(stride) +
                                " must divide the input resolution " +
                                std::to_string(input_width) + "x" + std::to_string(input_height));
  }
  const int unit = 1 << depth;
  if (depth < 1 || output_height() % unit || output_width() % unit) {
    throw std::invalid_argument("ModelConfig: output map must be divisible by 2^depth");
  }
  if (width <= 0 || num_classes <= 0 || fsm_ratio <= 0) {
    throw std::invalid_argument("ModelConfig: width, classes and ratio must be positive");
  }
  if (lambda_size < 0 || lambda_off < 0 || lambda_ang < 0) {
    throw std::invalid_argument("ModelConfig: loss weights must be non-negative");
  }
  if (top_k <= 0) throw std::invalid_argument("ModelConfig: top_k must be positive");
}

// ---------------------------------------------------------------- targets

double gaussian_radius(double height, double width, double min_overlap) {
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;

  const double b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 16 * c2)) / 2;

  const double a3 = 4 * min_overlap;
  const double b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

namespace {

void draw_gaussian(Tensor& heat, int cls, int cx, int cy, int radius) {
  const double sigma = (2.0 * radius + 1) / 6.0;
  for (int y = std::max(0, cy - radius); y <= std::min(heat.h() - 1, cy + radius); ++y) {
    for (int x = std::max(0, cx - radius); x <= std::min(heat.w() - 1, cx + radius); ++x) {
      const double dx = x - cx, dy = y - cy;
      const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      double& dst = heat(0, y, x, cls);
      dst = std::max(dst, v);
    }
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TargetMaps build_targets(const SceneAnnotation& annotation, const ModelConfig& config) {
  const int oh = config.output_height(), ow = config.output_width();
  const double s = config.stride;
  TargetMaps t;
  t.heatmap = Tensor(1, oh, ow, config.num_classes);
  t.size = Tensor(1, oh, ow, 2);
  t.offset = Tensor(1, oh, ow, 2);
  t.angle = Tensor(1, oh, ow, 1);
  t.mask = Tensor(1, oh, ow, 1);
  t.angle_field = Tensor(1, oh, ow, 1);

  for (const auto& obj : annotation.objects) {
    if (obj.class_id < 0 || obj.class_id >= config.num_classes) {
      throw std::invalid_argument("build_targets: class id " + std::to_string(obj.class_id) +
                                  " out of range");
    }
    const Vec2 c = obj.box.center() * (1.0 / s);
    if (!(c.x >= 0 && c.x < ow && c.y >= 0 && c.y < oh)) continue;
    const int ix = static_cast<int>(std::floor(c.x));
    const int iy = static_cast<int>(std::floor(c.y));
    const double theta = canonical_angle(obj.box.theta);

    const CornerBox corners = corners_from_septet(obj.box);
    double minx = 1e300, maxx = -1e300, miny = 1e300, maxy = -1e300;
    for (const Vec2& p : corners.ring()) {
      minx = std::min(minx, p.x);
      maxx = std::max(maxx, p.x);
      miny = std::min(miny, p.y);
      maxy = std::max(maxy, p.y);
    }
    const double ext_w = (maxx - minx) / s, ext_h = (maxy - miny) / s;
    const int radius =
        std::max(0, static_cast<int>(gaussian_radius(std::ceil(ext_h), std::ceil(ext_w))));
    draw_gaussian(t.heatmap, obj.class_id, ix, iy, radius);

    t.size(0, iy, ix, 0) = obj.box.w / s;
    t.size(0, iy, ix, 1) = obj.box.h / s;
    t.offset(0, iy, ix, 0) = c.x - ix;
    t.offset(0, iy, ix, 1) = c.y - iy;
    t.angle(0, iy, ix, 0) = theta;
    ++t.num_positive;
    t.mask(0, iy, ix, 0) = 1.0;

    // Dense angle over the footprint: cells whose centers fall inside.
    const Mat2 inv = rotation_matrix(-obj.box.theta);
    const Vec2 ctr = obj.box.center();
    const int x0 = std::max(0, static_cast<int>(std::floor(minx / s)));
    const int x1 = std::min(ow - 1, static_cast<int>(std::floor(maxx / s)));
    const int y0 = std::max(0, static_cast<int>(std::floor(miny / s)));
    const int y1 = std::min(oh - 1, static_cast<int>(std::floor(maxy / s)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Vec2 local = inv * (Vec2{(x + 0.5) * s, (y + 0.5) * s} - ctr);
        if (std::abs(local.x) <= obj.box.w / 2 && std::abs(local.y) <= obj.box.h / 2) {
          t.angle_field(0, y, x, 0) = theta;
        }
      }
    }
    t.angle_field(0, iy, ix, 0) = theta;
  }
  return t;
}

TargetMaps stack_targets(const std::vector<TargetMaps>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_targets: no targets");
  const auto stack = [&](auto member) {
    const Tensor& first = parts[0].*member;
    Tensor out(static_cast<int>(parts.size()), first.h(), first.w(), first.c());
    for (std::size_t i = 0; i < parts.size(); ++i) out.set_batch(static_cast<int>(i), parts[i].*member);
    return out;
  };
  TargetMaps t;
  t.heatmap = stack(&TargetMaps::heatmap);
  t.size = stack(&TargetMaps::size);
  t.offset = stack(&TargetMaps::offset);
  t.angle = stack(&TargetMaps::angle);
  t.mask = stack(&TargetMaps::mask);
  t.angle_field = stack(&TargetMaps::angle_field);
  for (const auto& p : parts) t.num_positive += p.num_positive;
  return t;
}

RawPrediction RawPrediction::from_targets(const TargetMaps& t) {
  RawPrediction p;
  p.heatmap = Tensor(t.heatmap.shape());
  for (std::size_t i = 0; i < p.heatmap.size(); ++i) {
    const double v = std::clamp(t.heatmap[i], 1e-12, 1.0 - 1e-12);
    p.heatmap[i] = std::log(v / (1.0 - v));
  }
  p.size = t.size;
  p.offset = t.offset;
  p.angle = t.angle;
  return p;
}

RawPrediction RawPrediction::zeros_like(const RawPrediction& p) {
  return {Tensor(p.heatmap.shape()), Tensor(p.size.shape()), Tensor(p.offset.shape()),
          Tensor(p.angle.shape())};
}

// ----------------------------------------------------------------- losses

namespace {

// Mean absolute error over masked cells, normalised by N * channels.
double masked_l1(const Tensor& pred, const Tensor& target, const Tensor& mask, int n,
                 Tensor* grad) {
  if (grad) *grad = Tensor(pred.shape());
  if (n == 0) return 0.0;
  const int ch = pred.c();
  const double norm = 1.0 / (static_cast<double>(n) * ch);
  double sum = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p] == 0.0) continue;
    for (int c = 0; c < ch; ++c) {
      const double d = pred[p * ch + c] - target[p * ch + c];
      sum += std::abs(d);
      if (grad) (*grad)[p * ch + c] = d > 0 ? norm : (d < 0 ? -norm : 0.0);
    }
  }
  return sum * norm;
}

// Penalty-reduced pixelwise focal loss (alpha = 2, beta = 4) on logits.
double focal_loss(const Tensor& logits, const Tensor& gt, int n, Tensor* grad) {
  constexpr double kLo = 1e-4, kHi = 1.0 - 1e-4;
  if (grad) *grad = Tensor(logits.shape());
  double pos = 0.0, neg = 0.0;
  std::vector<double> dl(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double raw = sigmoid(logits[i]);
    const bool clamped = raw < kLo || raw > kHi;
    const double p = std::clamp(raw, kLo, kHi);
    double dldp;
    if (gt[i] == 1.0) {
      const double q = 1.0 - p;
      pos -= q * q * std::log(p);
      dldp = 2.0 * q * std::log(p) - q * q / p;
    } else {
      const double w = std::pow(1.0 - gt[i], 4);
      neg -= w * p * p * std::log(1.0 - p);
      dldp = -w * (2.0 * p * std::log(1.0 - p) - p * p / (1.0 - p));
    }
    dl[i] = clamped ? 0.0 : dldp * p * (1.0 - p);
  }
  const double norm = n > 0 ? 1.0 / n : 1.0;
  if (grad) {
    for (std::size_t i = 0; i < dl.size(); ++i) (*grad)[i] = dl[i] * norm;
  }
  return (pos + neg) * norm;
}

}  // namespace

double loss_angle(const Tensor& pred_angle, const TargetMaps& targets) {
  require_shape(pred_angle, targets.angle.shape(), "loss_angle");
  return masked_l1(pred_angle, targets.angle, targets.mask, targets.num_positive, nullptr);
}

LossBreakdown loss_total(const RawPrediction& pred, const TargetMaps& targets,
                         const ModelConfig& config, RawPrediction* grad) {
  require_shape(pred.heatmap, targets.heatmap.shape(), "loss_total heatmap");
  require_shape(pred.size, targets.size.shape(), "loss_total size");
  require_shape(pred.offset, targets.offset.shape(), "loss_total offset");
  require_shape(pred.angle, targets.angle.shape(), "loss_total angle");
  const int n = targets.num_positive;
  LossBreakdown l;
  l.heatmap = focal_loss(pred.heatmap, targets.heatmap, n, grad ? &grad->heatmap : nullptr);
  l.size = masked_l1(pred.size, targets.size, targets.mask, n, grad ? &grad->size : nullptr);
  l.offset = masked_l1(pred.offset, targets.offset, targets.mask, n, grad ? &grad->offset : nullptr);
  l.angle = masked_l1(pred.angle, targets.angle, targets.mask, n, grad ? &grad->angle : nullptr);
  l.total = l.heatmap + config.lambda_size * l.size + config.lambda_off * l.offset +
            config.lambda_ang * l.angle;
  if (grad) {
    for (double& v : grad->size.storage()) v *= config.lambda_size;
    for (double& v : grad->offset.storage()) v *= config.lambda_off;
    for (double& v : grad->angle.storage()) v *= config.lambda_ang;
  }
  return l;
}

// ----------------------------------------------------------------- decode

std::vector<Detection> decode(const RawPrediction& pred, const ModelConfig& config, int batch) {
  const Tensor& hm = pred.heatmap;
  const int oh = hm.h(), ow = hm.w(), nc = hm.c();
  const double s = config.stride;

  struct Peak {
    double score;
    std::size_t order;
    int y, x, cls;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      for (int c = 0; c < nc; ++c) {
        const double v = hm(batch, y, x, c);
        bool is_max = true;
        for (int yy = std::max(0, y - 1); yy <= std::min(oh - 1, y + 1) && is_max; ++yy)
          for (int xx = std::max(0, x - 1); xx <= std::min(ow - 1, x + 1); ++xx)
            if (hm(batch, yy, xx, c) > v) {
              is_max = false;
              break;
            }
        if (!is_max) continue;
        const double score = sigmoid(v);
        if (config.filter_scores && score < config.score_floor) continue;
        peaks.push_back({score, peaks.size(), y, x, c});
      }
    }
  }
  const auto better = [](const Peak& a, const Peak& b) {
    return a.score > b.score || (a.score == b.score && a.order < b.order);
  };
  const std::size_t k = std::min<std::size_t>(peaks.size(), static_cast<std::size_t>(config.top_k));
  std::partial_sort(peaks.begin(), peaks.begin() + static_cast<std::ptrdiff_t>(k), peaks.end(), better);
  peaks.resize(k);

  std::vector<Detection> out;
  out.reserve(k);
  for (const Peak& p : peaks) {
    Detection d;
    d.class_id = p.cls;
    d.score = p.score;
    d.box.cx = p.x * s;
    d.box.cy = p.y * s;
    d.box.dx = pred.offset(batch, p.y, p.x, 0) * s;
    d.box.dy = pred.offset(batch, p.y, p.x, 1) * s;
    d.box.w = std::max(pred.size(batch, p.y, p.x, 0) * s, 1e-3);
    d.box.h = std::max(pred.size(batch, p.y, p.x, 1) * s, 1e-3);
    d.box.theta = canonical_angle(pred.angle(batch, p.y, p.x, 0));
    out.push_back(d);
  }
  return out;
}

// --------------------------------------------------------------- backbone

struct Backbone::Level {
  ConvBlock pre, skip, down, post;
  std::unique_ptr<Level> inner;
  ConvBlock bottom;

  Level(const std::string& name, int width, int remaining, Rng& rng)
      : pre(name + ".pre", 3, width, width, 1, true, true, rng),
        skip(name + ".skip", 3, width, width, 1, true, true, rng),
        down(name + ".down", 3, width, width, 2, true, true, rng),
        post(name + ".post", 3, width, width, 1, true, true, rng) {
    if (remaining > 1) {
      inner = std::make_unique<Level>(name + ".inner", width, remaining - 1, rng);
    } else {
      bottom = ConvBlock(name + ".bottom", 3, width, width, 1, true, true, rng);
    }
  }

  Tensor forward(const Tensor& x, Mode mode) {
    const Tensor a = pre.forward(x, mode);
    Tensor out = skip.forward(a, mode);
    const Tensor d = down.forward(a, mode);
    const Tensor m = inner ? inner->forward(d, mode) : bottom.forward(d, mode);
    out += upsample2x(post.forward(m, mode));
    return out;
  }

  Tensor backward(const Tensor& dy) {
    const Tensor dm = post.backward(upsample2x_backward(dy));
    const Tensor dd = inner ? inner->backward(dm) : bottom.backward(dm);
    Tensor da = down.backward(dd);
    da += skip.backward(dy);
    return pre.backward(da);
  }

  void collect(ParamList& out) {
    pre.collect(out);
    skip.collect(out);
    down.collect(out);
    if (inner) {
      inner->collect(out);
    } else {
      bottom.collect(out);
    }
    post.collect(out);
  }
};

Backbone::Backbone(const std::string& name, const ModelConfig& config, Rng& rng)
    : stride_(config.stride), depth_(config.depth) {
  int in_ch = 3;
  int s = config.stride;
  int i = 0;
  do {
    const int step = s > 1 ? 2 : 1;
    stem_.emplace_back(name + ".stem" + std::to_string(i++), 3, in_ch, config.width, step, true,
                       true, rng);
    in_ch = config.width;
    s /= 2;
  } while (s > 1);
  hourglass_ = std::make_unique<Level>(name + ".hg", config.width, config.depth, rng);
  out_ = ConvBlock(name + ".out", 3, config.width, config.width, 1, true, true, rng);
}

Backbone::Backbone(Backbone&&) noexcept = default;
Backbone& Backbone::operator=(Backbone&&) noexcept = default;
Backbone::~Backbone() = default;

Tensor Backbone::forward(const Tensor& image, Mode mode) {
  const int unit = stride_ * (1 << depth_);
  if (image.c() != 3 || image.h() % unit || image.w() % unit) {
    throw std::invalid_argument("Backbone: image " + image.shape().str() +
                                " must be RGB with sides divisible by " + std::to_string(unit));
  }
  Tensor x = image;
  for (auto& b : stem_) x = b.forward(x, mode);
  x = hourglass_->forward(x, mode);
  return out_.forward(x, mode);
}

Tensor Backbone::backward(const Tensor& dy) {
  Tensor g = out_.backward(dy);
  g = hourglass_->backward(g);
  for (auto it = stem_.rbegin(); it != stem_.rend(); ++it) g = it->backward(g);
  return g;
}

void Backbone::collect(ParamList& out) {
  for (auto& b : stem_) b.collect(out);
  hourglass_->collect(out);
  out_.collect(out);
}

// --------------------------------------------------------------- detector

namespace {

std::unique_ptr<Head> make_head(const std::string& name, bool dynamic_cls, bool dynamic_reg,
                                HeadConfig cfg, Rng& rng) {
  cfg.validate();
  if (dynamic_cls) return std::make_unique<DrhC>(name, cfg, rng);
  if (dynamic_reg) return std::make_unique<DrhR>(name, cfg, rng);
  return std::make_unique<PlainHead>(name, cfg, rng);
}

}  // namespace

Detector::Detector(const ModelConfig& config) : config_(config) {
  config.validate();
  Rng rng(config.init_seed);
  backbone_ = Backbone("backbone", config, rng);
  if (config.use_fsm) {
    fsm_ = std::make_unique<FeatureSelection>(
        "fsm", FsmConfig::with_ratio(config.width, config.fsm_ratio), rng);
  }
  HeadConfig base;
  base.in_channels = config.width;
  base.mid_channels = config.mid_channels();
  base.epsilon_c = config.epsilon_c;
  base.epsilon_r = config.epsilon_r;

  HeadConfig hm = base;
  hm.out_channels = config.num_classes;
  hm.out_bias = -2.19;
  heatmap_head_ = make_head("head.heatmap", config.use_drhc, false, hm, rng);

  HeadConfig two = base;
  two.out_channels = 2;
  size_head_ = make_head("head.size", false, config.drhr_size, two, rng);
  offset_head_ = make_head("head.offset", false, config.drhr_offset, two, rng);

  HeadConfig one = base;
  one.out_channels = 1;
  angle_head_ = make_head("head.angle", false, config.drhr_angle, one, rng);
}

RawPrediction Detector::forward(const Tensor& images, Mode mode, const TargetMaps* targets) {
  const Tensor feat = backbone_.forward(images, mode);
  RawPrediction out;
  out.angle = angle_head_->forward(feat, mode);
  Tensor fused = feat;
  if (fsm_) {
    AngleField field;
    const bool use_target =
        targets != nullptr && config_.train_angle_source == AngleSource::kTarget;
    if (use_target) {
      require_shape(targets->angle_field, Shape{feat.n(), feat.h(), feat.w(), 1},
                    "Detector target angle field");
      field = {targets->angle_field, AngleSource::kTarget};
    } else {
      field = {out.angle, AngleSource::kPredicted};
    }
    last_source_ = field.source;
    fused = fsm_->forward(feat, field, mode);
  }
  out.heatmap = heatmap_head_->forward(fused, mode);
  out.size = size_head_->forward(fused, mode);
  out.offset = offset_head_->forward(fused, mode);
  return out;
}

void Detector::backward(const RawPrediction& grad) {
  Tensor dfused = heatmap_head_->backward(grad.heatmap);
  dfused += size_head_->backward(grad.size);
  dfused += offset_head_->backward(grad.offset);
  Tensor dangle = grad.angle;
  Tensor dfeat;
  if (fsm_) {
    FsmGrads g = fsm_->backward(dfused);
    dfeat = std::move(g.dx);
    if (last_source_ == AngleSource::kPredicted) dangle += g.dtheta;
  } else {
    dfeat = std::move(dfused);
  }
  dfeat += angle_head_->backward(dangle);
  backbone_.backward(dfeat);
}

ParamList Detector::parameters() {
  ParamList out;
  backbone_.collect(out);
  if (fsm_) fsm_->collect(out);
  heatmap_head_->collect(out);
  size_head_->collect(out);
  offset_head_->collect(out);
  angle_head_->collect(out);
  return out;
}

std::size_t Detector::parameter_count() { return count_trainable(parameters()); }

}  // namespace drn
