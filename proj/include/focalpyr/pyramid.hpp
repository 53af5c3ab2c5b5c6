#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <future>
#include <set>
#include <string>
#include <vector>

#include "focalpyr/nn.hpp"

namespace focalpyr {

// Multi-scale fusion geometry. `resolutions` are the spatial sizes of the
// incoming levels (square maps); each level gets its own 5×5 conv to
// `out_channels`, is resized to target×target, and all levels are summed.
struct PyramidConfig {
  std::vector<std::size_t> resolutions{320, 160, 80};
  std::vector<std::size_t> channels{4, 4, 4};  // input channels per level
  std::size_t out_channels = 4;
  std::size_t target = 14;

  void validate() const {
    if (resolutions.empty()) throw ConfigError("pyramid needs at least one level");
    if (channels.size() != resolutions.size())
      throw ConfigError("pyramid: " + std::to_string(channels.size()) + " channel counts for " +
                        std::to_string(resolutions.size()) + " levels");
    if (std::set<std::size_t>(resolutions.begin(), resolutions.end()).size() != resolutions.size())
      throw ConfigError("pyramid level resolutions must be distinct");
    if (target == 0 || out_channels == 0) throw ConfigError("pyramid target and channels must be positive");
  }
};

class PyramidFuser {
 public:
  PyramidFuser(PyramidConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t i = 0; i < cfg_.resolutions.size(); ++i)
      convs_.emplace_back(cfg_.channels[i], cfg_.out_channels, rng);
  }
  PyramidFuser(PyramidConfig cfg, std::vector<Conv2dLayer> convs) : cfg_(std::move(cfg)), convs_(std::move(convs)) {
    cfg_.validate();
    if (convs_.size() != cfg_.resolutions.size()) throw ConfigError("pyramid: one conv per level required");
  }

  // Levels are matched to their conv by spatial size, and summed in config
  // order, so the result does not depend on the order of `levels`.
  Tensor fuse(const std::vector<Tensor>& levels) const {
    if (levels.size() != cfg_.resolutions.size())
      throw ConfigError("pyramid: got " + std::to_string(levels.size()) + " levels, configured " +
                        std::to_string(cfg_.resolutions.size()));
    std::vector<const Tensor*> ordered(levels.size(), nullptr);
    for (const Tensor& level : levels) {
      if (level.rank() != 4 || level.dim(2) != level.dim(3))
        throw ConfigError("pyramid: level " + to_string(level.shape()) + " is not a square [b×C×H×W] map");
      auto it = std::find(cfg_.resolutions.begin(), cfg_.resolutions.end(), level.dim(2));
      if (it == cfg_.resolutions.end())
        throw ConfigError("pyramid: level size " + std::to_string(level.dim(2)) + " not configured");
      const auto idx = static_cast<std::size_t>(it - cfg_.resolutions.begin());
      if (ordered[idx]) throw ConfigError("pyramid: two levels of size " + std::to_string(level.dim(2)));
      if (level.dim(1) != cfg_.channels[idx])
        throw ConfigError("pyramid: level of size " + std::to_string(level.dim(2)) + " has " +
                          std::to_string(level.dim(1)) + " channels, configured " + std::to_string(cfg_.channels[idx]));
      ordered[idx] = &level;
    }
    Tensor fused;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      Tensor mapped = resize_to(convs_[i].forward(*ordered[i]), cfg_.target, cfg_.target);
      fused = fused.defined() ? add(fused, mapped) : mapped;
    }
    return fused;
  }

  const PyramidConfig& config() const { return cfg_; }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& c : convs_)
      for (const auto& p : c.parameters()) out.push_back(p);
    return out;
  }

 private:
  PyramidConfig cfg_;
  std::vector<Conv2dLayer> convs_;
};

inline Tensor fpn_fuse(const PyramidFuser& fuser, const std::vector<Tensor>& levels) {
  return fuser.fuse(levels);
}

// Linear-relu-...-linear regressor. Output width is 1 for plain regression or
// B for bitwise targets (logits; the loss applies the sigmoid).
class MlpHead {
 public:
  MlpHead(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng) {
    std::size_t width = in;
    for (std::size_t h : hidden) {
      layers_.emplace_back(width, h, rng);
      width = h;
    }
    layers_.emplace_back(width, out, rng);
  }

  Tensor forward(const Tensor& x) const { return forward_recording(x, nullptr); }

  // Also reports the input of every linear layer (for projector updates).
  Tensor forward_recording(const Tensor& x, std::vector<Tensor>* layer_inputs) const {
    if (x.rank() != 2 || x.dim(1) != in_features())
      throw DimensionError("mlp head: input " + to_string(x.shape()) + " does not match width " +
                           std::to_string(in_features()));
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layer_inputs) layer_inputs->push_back(h);
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  std::size_t in_features() const { return layers_.front().in_features(); }
  std::size_t out_features() const { return layers_.back().out_features(); }
  std::vector<LinearLayer>& layers() { return layers_; }
  const std::vector<LinearLayer>& layers() const { return layers_; }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_)
      for (const auto& p : l.parameters()) out.push_back(p);
    return out;
  }

 private:
  std::vector<LinearLayer> layers_;
};

// Self-attention over tokens, mean-pooled, then a linear read-out.
class AttentionHead {
 public:
  AttentionHead(std::size_t d, std::size_t out, Rng& rng) : attention_(d, rng), output_(d, out, rng) {}

  Tensor forward(const Tensor& tokens) const { return forward_recording(tokens, nullptr); }

  Tensor forward_recording(const Tensor& tokens, std::vector<Tensor>* layer_inputs) const {
    if (tokens.rank() != 3 || tokens.dim(1) == 0)
      throw DimensionError("attention head expects [batch×T×d] tokens, got " + to_string(tokens.shape()));
    Tensor pooled = mean(attention_.forward(tokens), 1);
    if (layer_inputs) layer_inputs->push_back(pooled);
    return output_.forward(pooled);
  }

  const AttentionLayer& attention() const { return attention_; }
  const LinearLayer& output_layer() const { return output_; }
  LinearLayer& output_layer() { return output_; }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out = attention_.parameters();
    for (const auto& p : output_.parameters()) out.push_back(p);
    return out;
  }

 private:
  AttentionLayer attention_;
  LinearLayer output_;
};

struct EnsembleConfig {
  std::vector<std::uint64_t> seeds;

  static EnsembleConfig with_members(std::size_t k, std::uint64_t base_seed) {
    EnsembleConfig cfg;
    for (std::size_t i = 0; i < k; ++i) cfg.seeds.push_back(base_seed + 1000003ULL * (i + 1));
    return cfg;
  }

  std::size_t members() const { return seeds.size(); }

  void validate() const {
    if (seeds.size() < 2) throw ConfigError("ensemble needs at least 2 members");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("ensemble member seeds must be pairwise distinct");
  }
};

struct EnsemblePrediction {
  std::vector<double> mean;
  std::vector<std::vector<double>> members;
  std::vector<double> variance;  // population variance across members
};

// Aggregates member predictions in member-index order.
inline EnsemblePrediction aggregate_members(std::vector<std::vector<double>> members) {
  if (members.empty()) throw ContractError("aggregate_members: no members");
  const std::size_t n = members.front().size();
  for (const auto& m : members)
    if (m.size() != n) throw DimensionError("ensemble members disagree on prediction count");
  const double k = static_cast<double>(members.size());
  EnsemblePrediction out{std::vector<double>(n, 0.0), {}, std::vector<double>(n, 0.0)};
  for (const auto& m : members)
    for (std::size_t i = 0; i < n; ++i) out.mean[i] += m[i];
  for (double& v : out.mean) v /= k;
  for (const auto& m : members)
    for (std::size_t i = 0; i < n; ++i) out.variance[i] += (m[i] - out.mean[i]) * (m[i] - out.mean[i]);
  for (double& v : out.variance) v /= k;
  out.members = std::move(members);
  return out;
}

// Trains every member (each on its own thread, with its own seed) and
// aggregates. `train_member(seed)` returns that member's eval predictions.
inline EnsemblePrediction ensemble_train_predict(
    const EnsembleConfig& cfg, const std::function<std::vector<double>(std::uint64_t)>& train_member) {
  cfg.validate();
  std::vector<std::future<std::vector<double>>> jobs;
  for (std::uint64_t seed : cfg.seeds) jobs.push_back(std::async(std::launch::async, train_member, seed));
  std::vector<std::vector<double>> members;
  for (auto& j : jobs) members.push_back(j.get());
  return aggregate_members(std::move(members));
}

}  // namespace focalpyr
