#include "drn/feature_selection.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace drn {

FsmConfig FsmConfig::with_ratio(int in_channels, int ratio) {
  if (in_channels <= 0 || ratio <= 0) throw std::invalid_argument("FsmConfig: bad ratio");
  FsmConfig c;
  c.in_channels = in_channels;
  c.compressed_channels = std::max(1, in_channels / ratio);
  return c;
}

void FsmConfig::validate() const {
  if (in_channels <= 0 || compressed_channels < 1) {
    throw std::invalid_argument("FsmConfig: channel counts must be positive");
  }
  if (branch_shapes.empty()) throw std::invalid_argument("FsmConfig: no branches");
}

AttentionStack select_weights(const AttentionStack& stack) {
  const std::size_t nb = stack.logits.size();
  if (nb < 2) throw std::invalid_argument("select_weights: need at least two branches");
  const Shape s = stack.logits[0].shape();
  for (const auto& l : stack.logits) {
    require_shape(l, s, "select_weights");
    if (!l.all_finite()) throw std::invalid_argument("select_weights: non-finite logit");
  }
  AttentionStack out;
  out.logits = stack.logits;
  out.weights.assign(nb, Tensor(s));
  std::vector<double> e(nb);
  for (std::size_t i = 0; i < s.numel(); ++i) {
    double mx = stack.logits[0][i];
    for (std::size_t k = 1; k < nb; ++k) mx = std::max(mx, stack.logits[k][i]);
    double sum = 0.0;
    for (std::size_t k = 0; k < nb; ++k) {
      e[k] = std::exp(stack.logits[k][i] - mx);
      sum += e[k];
    }
    for (std::size_t k = 0; k < nb; ++k) out.weights[k][i] = e[k] / sum;
  }
  return out;
}

FeatureSelection::FeatureSelection(const std::string& name, const FsmConfig& config, Rng& rng)
    : config_(config) {
  config.validate();
  const int c = config.in_channels;
  const int cc = config.compressed_channels;
  compress_block = ConvBlock(name + ".compress", 1, c, cc, 1, true, true, rng);
  for (std::size_t i = 0; i < config.branch_shapes.size(); ++i) {
    const auto [r, k] = config.branch_shapes[i];
    const std::string bname = name + ".branch" + std::to_string(i);
    branches.emplace_back(bname + ".rcl", make_grid(r, k), cc, cc, rng);
    attention_blocks.emplace_back(bname + ".attention", 1, cc, 1, 1, true, true, rng);
  }
  expand_block = ConvBlock(name + ".expand", 1, cc, c, 1, true, false, rng);
}

Tensor FeatureSelection::compress(const Tensor& x, Mode mode) {
  if (x.c() != config_.in_channels) {
    throw std::invalid_argument("FeatureSelection: expected " +
                                std::to_string(config_.in_channels) + " channels, got " +
                                std::to_string(x.c()));
  }
  return compress_block.forward(x, mode);
}

Tensor FeatureSelection::forward(const Tensor& x, const AngleField& angles, Mode mode) {
  require_shape(angles.theta, Shape{x.n(), x.h(), x.w(), 1}, "FeatureSelection angle field");
  xc_ = compress(x, mode);
  const std::size_t nb = branches.size();
  branch_out_.clear();
  AttentionStack logits;
  for (std::size_t i = 0; i < nb; ++i) {
    branch_out_.push_back(branches[i].forward(xc_, angles));
    logits.logits.push_back(attention_blocks[i].forward(branch_out_[i], mode));
  }
  if (nb == 1) {
    stack_ = logits;
    stack_.weights = {Tensor(logits.logits[0].shape(), 1.0)};
  } else {
    stack_ = select_weights(logits);
  }
  fused_ = Tensor(xc_.shape());
  const int cc = xc_.c();
  for (std::size_t i = 0; i < nb; ++i) {
    const Tensor& a = stack_.weights[i];
    const Tensor& xi = branch_out_[i];
    for (std::size_t p = 0; p < a.size(); ++p) {
      const double ap = a[p];
      for (int c = 0; c < cc; ++c) fused_[p * cc + c] += ap * xi[p * cc + c];
    }
  }
  return expand_block.forward(fused_, mode);
}

FsmGrads FeatureSelection::backward(const Tensor& dy) {
  const Tensor dfused = expand_block.backward(dy);
  const std::size_t nb = branches.size();
  const int cc = xc_.c();
  const std::size_t npix = stack_.weights[0].size();

  // dA_i(p) = <dY(p), X_i(p)>; softmax backward gives the logit gradient.
  std::vector<Tensor> da(nb, Tensor(stack_.weights[0].shape()));
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t p = 0; p < npix; ++p) {
      double s = 0.0;
      for (int c = 0; c < cc; ++c) s += dfused[p * cc + c] * branch_out_[i][p * cc + c];
      da[i][p] = s;
    }
  }
  std::vector<Tensor> dlogit(nb, Tensor(stack_.weights[0].shape()));
  if (nb > 1) {
    for (std::size_t p = 0; p < npix; ++p) {
      double mean = 0.0;
      for (std::size_t i = 0; i < nb; ++i) mean += stack_.weights[i][p] * da[i][p];
      for (std::size_t i = 0; i < nb; ++i) dlogit[i][p] = stack_.weights[i][p] * (da[i][p] - mean);
    }
  }

  Tensor dxc(xc_.shape());
  FsmGrads g;
  for (std::size_t i = 0; i < nb; ++i) {
    Tensor dxi(xc_.shape());
    const Tensor& a = stack_.weights[i];
    for (std::size_t p = 0; p < npix; ++p)
      for (int c = 0; c < cc; ++c) dxi[p * cc + c] = a[p] * dfused[p * cc + c];
    if (nb > 1) dxi += attention_blocks[i].backward(dlogit[i]);
    RclGrads rg = branches[i].backward(dxi);
    dxc += rg.dx;
    if (g.dtheta.empty()) {
      g.dtheta = std::move(rg.dtheta);
    } else {
      g.dtheta += rg.dtheta;
    }
  }
  g.dx = compress_block.backward(dxc);
  return g;
}

void FeatureSelection::collect(ParamList& out) {
  compress_block.collect(out);
  for (std::size_t i = 0; i < branches.size(); ++i) {
    branches[i].collect(out);
    attention_blocks[i].collect(out);
  }
  expand_block.collect(out);
}

}  // namespace drn
