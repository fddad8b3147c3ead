#pragma once

// CenterNet-style oriented detector with optional feature selection and
// dynamic refinement heads.
//
// Output maps live at input / stride resolution. For every object the
// center cell carries a heatmap peak, the box size in stride units, the
// fractional residual of the downsampled center and the canonical angle.

#include <memory>
#include <string>
#include <vector>

#include "drn/annotation.hpp"
#include "drn/dynamic_heads.hpp"
#include "drn/feature_selection.hpp"
#include "drn/geometry.hpp"
#include "drn/layers.hpp"
#include "drn/rotation_conv.hpp"

namespace drn {

enum class Ablation { kBaseline, kFsm, kFsmDrhc, kFull };

Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);

struct ModelConfig {
  int input_height = 256;
  int input_width = 256;
  int stride = 4;
  int width = 64;        // backbone channels
  int depth = 3;         // hourglass levels
  int head_channels = 0;  // 0 means `width`
  int num_classes = 1;
  int fsm_ratio = 4;

  bool use_fsm = true;
  bool use_drhc = true;
  bool drhr_size = true;
  bool drhr_offset = false;
  bool drhr_angle = false;
  double epsilon_c = 0.1;
  double epsilon_r = 0.1;

  // Angles feeding the rotation convolutions while training.
  AngleSource train_angle_source = AngleSource::kTarget;

  double lambda_size = 0.1;
  double lambda_off = 0.1;
  double lambda_ang = 0.1;

  int top_k = 300;
  bool filter_scores = false;
  double score_floor = 0.0;

  std::uint64_t init_seed = 1;

  int output_height() const { return input_height / stride; }
  int output_width() const { return input_width / stride; }
  int mid_channels() const { return head_channels > 0 ? head_channels : width; }
  void apply(Ablation a);
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TargetMaps {
  Tensor heatmap;      // (n, oh, ow, classes), peaks exactly 1
  Tensor size;         // (n, oh, ow, 2)   w, h in stride units
  Tensor offset;       // (n, oh, ow, 2)   fractional center residual
  Tensor angle;        // (n, oh, ow, 1)   canonical theta at center cells
  Tensor mask;         // (n, oh, ow, 1)   1 at annotated center cells
  Tensor angle_field;  // (n, oh, ow, 1)   dense theta over each box footprint
  int num_positive = 0;
};

struct RawPrediction {
  Tensor heatmap;  // logits
  Tensor size;
  Tensor offset;
  Tensor angle;

  // Treats target maps as perfect predictions (heatmap converted to logits).
  static RawPrediction from_targets(const TargetMaps& t);
  static RawPrediction zeros_like(const RawPrediction& p);
};

// CenterNet Gaussian radius for a (height, width) extent and min overlap.
double gaussian_radius(double height, double width, double min_overlap = 0.7);

TargetMaps build_targets(const SceneAnnotation& annotation, const ModelConfig& config);
TargetMaps stack_targets(const std::vector<TargetMaps>& parts);

struct LossBreakdown {
  double total = 0.0;
  double heatmap = 0.0;
  double size = 0.0;
  double offset = 0.0;
  double angle = 0.0;
};

double loss_angle(const Tensor& pred_angle, const TargetMaps& targets);
// Optional `grad` receives dL/d(prediction) for every head.
LossBreakdown loss_total(const RawPrediction& pred, const TargetMaps& targets,
                         const ModelConfig& config, RawPrediction* grad = nullptr);

// sigmoid -> 3x3 peak suppression -> top-K -> septets at input scale.
// Uses the batch element `batch`.
std::vector<Detection> decode(const RawPrediction& pred, const ModelConfig& config, int batch = 0);

// Plain hourglass: stride-2 stem convolutions followed by one recursive
// down/up stack with additive skips.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const std::string& name, const ModelConfig& config, Rng& rng);
  Backbone(Backbone&&) noexcept;
  Backbone& operator=(Backbone&&) noexcept;
  ~Backbone();

  Tensor forward(const Tensor& image, Mode mode);
  Tensor backward(const Tensor& dy);
  void collect(ParamList& out);

 private:
  struct Level;
  std::vector<ConvBlock> stem_;
  std::unique_ptr<Level> hourglass_;
  ConvBlock out_;
  int stride_ = 4;
  int depth_ = 3;
};

class Detector {
 public:
  explicit Detector(const ModelConfig& config);

  // `targets` supplies the training-time angle field; pass nullptr to use
  // the predicted angles.
  RawPrediction forward(const Tensor& images, Mode mode, const TargetMaps* targets = nullptr);
  void backward(const RawPrediction& grad);

  ParamList parameters();
  std::size_t parameter_count();
  const ModelConfig& config() const { return config_; }
  AngleSource last_angle_source() const { return last_source_; }
  FeatureSelection* fsm() { return fsm_ ? fsm_.get() : nullptr; }
  Head& heatmap_head() { return *heatmap_head_; }
  Head& size_head() { return *size_head_; }
  Head& offset_head() { return *offset_head_; }
  Head& angle_head() { return *angle_head_; }

 private:
  ModelConfig config_;
  Backbone backbone_;
  std::unique_ptr<FeatureSelection> fsm_;
  std::unique_ptr<Head> heatmap_head_, size_head_, offset_head_, angle_head_;
  AngleSource last_source_ = AngleSource::kPredicted;
};

}  // namespace drn
