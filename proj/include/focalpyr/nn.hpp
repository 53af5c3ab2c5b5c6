#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focalpyr/ops.hpp"
#include "focalpyr/random.hpp"

namespace focalpyr {

namespace detail {

inline Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng, bool trainable) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(values), trainable);
}

}  // namespace detail

// y = x·Wᵀ + b. A frozen layer's tensors never require gradients, so no loss
// can reach them and optimizers skip them.
class LinearLayer {
 public:
  LinearLayer(std::size_t in, std::size_t out, Rng& rng, bool frozen = false)
      : weight_(detail::uniform_init({out, in}, in, rng, !frozen)),
        bias_(detail::uniform_init({out}, in, rng, !frozen)),
        frozen_(frozen) {}

  LinearLayer(Tensor weight, Tensor bias, bool frozen = false)
      : weight_(std::move(weight)), bias_(std::move(bias)), frozen_(frozen) {
    if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0))
      throw DimensionError("linear layer: weight " + to_string(weight_.shape()) + " and bias " +
                           to_string(bias_.shape()) + " disagree");
    set_frozen(frozen);
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in_features())
      throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                           to_string(weight_.shape()));
    return add_bias(matmul(x, transpose(weight_)), bias_);
  }

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  std::vector<Tensor> parameters() const { return {weight_, bias_}; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    weight_.set_requires_grad(!frozen);
    bias_.set_requires_grad(!frozen);
  }

 private:
  Tensor weight_, bias_;
  bool frozen_;
};

// 5×5 convolution with "same" padding (2). Stride defaults to 1; the toy
// backbone uses stride 2 for downsampling.
class Conv2dLayer {
 public:
  static constexpr std::size_t kernel_size = 5;
  static constexpr std::size_t padding = 2;

  Conv2dLayer(std::size_t in_channels, std::size_t out_channels, Rng& rng, std::size_t stride = 1,
              bool frozen = false)
      : kernel_(detail::uniform_init({out_channels, in_channels, kernel_size, kernel_size},
                                     in_channels * kernel_size * kernel_size, rng, !frozen)),
        bias_(detail::uniform_init({out_channels}, in_channels * kernel_size * kernel_size, rng, !frozen)),
        stride_(stride),
        frozen_(frozen) {}

  Conv2dLayer(Tensor kernel, Tensor bias, std::size_t stride = 1, bool frozen = false)
      : kernel_(std::move(kernel)), bias_(std::move(bias)), stride_(stride), frozen_(frozen) {
    if (kernel_.rank() != 4 || kernel_.dim(2) != kernel_size || kernel_.dim(3) != kernel_size)
      throw DimensionError("conv5x5: kernel must be [outC×inC×5×5], got " + to_string(kernel_.shape()));
    set_frozen(frozen);
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels())
      throw DimensionError("conv5x5: input " + to_string(x.shape()) + " has wrong channel count, expected " +
                           std::to_string(in_channels()));
    return conv2d(x, kernel_, bias_, stride_, padding);
  }

  std::size_t in_channels() const { return kernel_.dim(1); }
  std::size_t out_channels() const { return kernel_.dim(0); }
  std::size_t stride() const { return stride_; }
  const Tensor& kernel() const { return kernel_; }
  const Tensor& bias() const { return bias_; }
  std::vector<Tensor> parameters() const { return {kernel_, bias_}; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    kernel_.set_requires_grad(!frozen);
    bias_.set_requires_grad(!frozen);
  }

 private:
  Tensor kernel_, bias_;
  std::size_t stride_;
  bool frozen_;
};

inline Tensor resize_to(const Tensor& x, std::size_t target_h, std::size_t target_w,
                        ResizeMode mode = ResizeMode::bilinear) {
  return resize(x, target_h, target_w, mode);
}

// [b×C×H×W] -> [b×C]
inline Tensor global_mean_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_mean_pool expects rank 4, got " + to_string(x.shape()));
  return mean(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

// Single-head scaled dot-product self-attention with learned Q/K/V projections.
class AttentionLayer {
 public:
  AttentionLayer(std::size_t d, Rng& rng)
      : query_(detail::uniform_init({d, d}, d, rng, true)),
        key_(detail::uniform_init({d, d}, d, rng, true)),
        value_(detail::uniform_init({d, d}, d, rng, true)) {}

  struct Output {
    Tensor values;   // [b×T×d]
    Tensor weights;  // [b×T×T], rows sum to 1
  };

  Output forward_with_weights(const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(2) != width())
      throw DimensionError("attention: tokens " + to_string(tokens.shape()) + " do not match width " +
                           std::to_string(width()));
    const std::size_t b = tokens.dim(0), t = tokens.dim(1), d = width();
    Tensor flat = reshape(tokens, {b * t, d});
    auto project = [&](const Tensor& w) { return reshape(matmul(flat, transpose(w)), {b, t, d}); };
    Tensor q = project(query_), k = project(key_), v = project(value_);
    Tensor scores = scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor weights = softmax(scores, 2);
    return {bmm(weights, v), weights};
  }

  Tensor forward(const Tensor& tokens) const { return forward_with_weights(tokens).values; }

  std::size_t width() const { return query_.dim(0); }
  const Tensor& value_projection() const { return value_; }
  std::vector<Tensor> parameters() const { return {query_, key_, value_}; }

 private:
  Tensor query_, key_, value_;
};

inline Tensor attention_forward(const AttentionLayer& layer, const Tensor& tokens) {
  return layer.forward(tokens);
}

struct BackboneOutput {
  Tensor embedding;            // [b×embedding_dim]
  std::vector<Tensor> levels;  // per-stage maps, finest first; empty for dense backbones
};

// Stand-in for a pretrained feature extractor. Two flavours:
//  - dense: one linear map over precomputed feature vectors;
//  - conv: three stride-2 5×5 conv stages with relu, emitting every stage map
//    and a globally pooled embedding of the last stage.
class ToyBackbone {
 public:
  static ToyBackbone dense(std::size_t in, std::size_t width, Rng& rng, bool frozen = true) {
    ToyBackbone b;
    b.linear_.emplace(in, width, rng, frozen);
    b.input_dim_ = in;
    b.frozen_ = frozen;
    return b;
  }

  static ToyBackbone conv(std::size_t in_channels, std::vector<std::size_t> stage_channels,
                          std::vector<std::size_t> resolutions, Rng& rng, bool frozen = true) {
    if (stage_channels.empty()) throw ConfigError("conv backbone needs at least one stage");
    if (resolutions.empty()) throw ConfigError("conv backbone needs at least one input resolution");
    ToyBackbone b;
    std::size_t c = in_channels;
    for (std::size_t out : stage_channels) {
      b.stages_.emplace_back(c, out, rng, 2, frozen);
      c = out;
    }
    b.input_dim_ = in_channels;
    b.resolutions_ = std::move(resolutions);
    b.frozen_ = frozen;
    return b;
  }

  bool is_dense() const { return linear_.has_value(); }

  BackboneOutput forward(const Tensor& input) const {
    if (is_dense()) {
      if (input.rank() != 2 || input.dim(1) != input_dim_)
        throw ConfigError("dense backbone expects [batch×" + std::to_string(input_dim_) + "], got " +
                          to_string(input.shape()));
      return {linear_->forward(input), {}};
    }
    if (input.rank() != 4 || input.dim(1) != input_dim_ || input.dim(2) != input.dim(3))
      throw ConfigError("conv backbone expects square [batch×" + std::to_string(input_dim_) +
                        "×H×H] input, got " + to_string(input.shape()));
    if (std::find(resolutions_.begin(), resolutions_.end(), input.dim(2)) == resolutions_.end())
      throw ConfigError("conv backbone: unsupported input size " + std::to_string(input.dim(2)));
    BackboneOutput out;
    Tensor h = input;
    for (const Conv2dLayer& stage : stages_) {
      h = relu(stage.forward(h));
      out.levels.push_back(h);
    }
    out.embedding = global_mean_pool(h);
    return out;
  }

  std::size_t embedding_dim() const {
    return is_dense() ? linear_->out_features() : stages_.back().out_channels();
  }
  // Spatial size of each stage map for a square input of side `input_size`.
  std::vector<std::size_t> level_sizes(std::size_t input_size) const {
    std::vector<std::size_t> sizes;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      input_size = (input_size + 2 * Conv2dLayer::padding - Conv2dLayer::kernel_size) / 2 + 1;
      sizes.push_back(input_size);
    }
    return sizes;
  }
  const std::vector<std::size_t>& resolutions() const { return resolutions_; }

  std::vector<Tensor> parameters() const {
    if (is_dense()) return linear_->parameters();
    std::vector<Tensor> out;
    for (const auto& s : stages_)
      for (const auto& p : s.parameters()) out.push_back(p);
    return out;
  }

  bool frozen() const { return frozen_; }

 private:
  ToyBackbone() = default;

  std::optional<LinearLayer> linear_;
  std::vector<Conv2dLayer> stages_;
  std::vector<std::size_t> resolutions_;
  std::size_t input_dim_ = 0;
  bool frozen_ = true;
};

inline BackboneOutput backbone_forward(const ToyBackbone& backbone, const Tensor& image) {
  return backbone.forward(image);
}

}  // namespace focalpyr
