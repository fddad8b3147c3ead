#pragma once

// Feature selection: compress channels, run one rotation-conv branch per
// kernel shape, fuse the branches with a per-location softmax attention and
// expand back to the input width.

#include <string>
#include <utility>
#include <vector>

#include "drn/layers.hpp"
#include "drn/rotation_conv.hpp"

namespace drn {

struct FsmConfig {
  int in_channels = 64;
  int compressed_channels = 16;
  std::vector<std::pair<int, int>> branch_shapes = {{3, 3}, {1, 3}, {3, 1}};

  // Compressed width C / ratio, at least 1.
  static FsmConfig with_ratio(int in_channels, int ratio = 4);
  double ratio() const { return double(in_channels) / compressed_channels; }
  void validate() const;
};

struct AttentionStack {
  std::vector<Tensor> logits;   // one (n, h, w, 1) map per branch
  std::vector<Tensor> weights;  // softmax over branches at each location
};

// Softmax across the branch axis, independently per location. Needs at
// least two branches and finite logits.
AttentionStack select_weights(const AttentionStack& stack);

struct FsmGrads {
  Tensor dx;
  Tensor dtheta;
};

class FeatureSelection {
 public:
  FeatureSelection() = default;
  FeatureSelection(const std::string& name, const FsmConfig& config, Rng& rng);

  Tensor compress(const Tensor& x, Mode mode);
  Tensor forward(const Tensor& x, const AngleField& angles, Mode mode);
  FsmGrads backward(const Tensor& dy);
  void collect(ParamList& out);

  const FsmConfig& config() const { return config_; }

  // Intermediates of the last forward pass.
  const Tensor& compressed() const { return xc_; }
  const std::vector<Tensor>& branch_outputs() const { return branch_out_; }
  const AttentionStack& attention() const { return stack_; }
  const Tensor& fused() const { return fused_; }

  ConvBlock compress_block;
  std::vector<RotationConv> branches;
  std::vector<ConvBlock> attention_blocks;
  ConvBlock expand_block;

 private:
  FsmConfig config_;
  Tensor xc_;
  std::vector<Tensor> branch_out_;
  AttentionStack stack_;
  Tensor fused_;
};

}  // namespace drn
