#pragma once

// Experiment harness: configuration, metrics, the seeded training loop,
// ablation sweeps and report emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "focalpyr/codec.hpp"
#include "focalpyr/data.hpp"
#include "focalpyr/losses.hpp"
#include "focalpyr/owm.hpp"
#include "focalpyr/pyramid.hpp"

namespace focalpyr {

// ---- configuration ------------------------------------------------------------

enum class HeadKind { mlp, attention, deep_ensemble };
enum class LossKind { mse, mae, bce, focal };
enum class OrMode { owm, soft_penalty, both };
enum class BackboneKind { none, dense, conv };

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<HeadKind> {
  static constexpr std::pair<HeadKind, const char*> values[] = {
      {HeadKind::mlp, "mlp"}, {HeadKind::attention, "attention"}, {HeadKind::deep_ensemble, "deep_ensemble"}};
};
template <>
struct EnumNames<LossKind> {
  static constexpr std::pair<LossKind, const char*> values[] = {
      {LossKind::mse, "mse"}, {LossKind::mae, "mae"}, {LossKind::bce, "bce"}, {LossKind::focal, "focal"}};
};
template <>
struct EnumNames<OrMode> {
  static constexpr std::pair<OrMode, const char*> values[] = {
      {OrMode::owm, "owm"}, {OrMode::soft_penalty, "soft_penalty"}, {OrMode::both, "both"}};
};
template <>
struct EnumNames<BackboneKind> {
  static constexpr std::pair<BackboneKind, const char*> values[] = {
      {BackboneKind::none, "none"}, {BackboneKind::dense, "dense"}, {BackboneKind::conv, "conv"}};
};

template <class E>
std::string enum_name(E value) {
  for (const auto& [v, name] : EnumNames<E>::values)
    if (v == value) return name;
  return "?";
}

template <class E>
E parse_enum(const std::string& key, const std::string& name) {
  std::string valid;
  for (const auto& [v, n] : EnumNames<E>::values) {
    if (name == n) return v;
    valid += valid.empty() ? n : std::string("|") + n;
  }
  throw ConfigError("'" + key + "': unknown value '" + name + "' (expected " + valid + ")");
}

}  // namespace detail

inline std::string to_string(HeadKind v) { return detail::enum_name(v); }
inline std::string to_string(LossKind v) { return detail::enum_name(v); }
inline std::string to_string(OrMode v) { return detail::enum_name(v); }
inline std::string to_string(BackboneKind v) { return detail::enum_name(v); }

struct ExperimentConfig {
  std::string task = "MRD1";

  BackboneKind backbone = BackboneKind::dense;
  std::size_t backbone_width = 64;
  std::vector<std::size_t> backbone_channels{4, 8, 8};
  bool freeze_backbone = true;

  HeadKind head = HeadKind::mlp;
  std::vector<std::size_t> hidden{256, 64};
  std::size_t attention_tokens = 4;

  LossKind loss = LossKind::mse;
  double gamma = 0.0;
  double alpha = 1.0;

  bool encoding = false;
  int bits = 16;
  DecodeMode decode_mode = DecodeMode::expected;

  bool or_enabled = false;
  OrMode or_mode = OrMode::soft_penalty;
  double or_alpha = 1e-3;
  double soft_orth_lambda = 1e-3;

  bool fpn = false;
  std::vector<std::size_t> fpn_resolutions{320, 160, 80};
  std::size_t fpn_channels = 8;

  double lr = 1e-3;
  std::size_t batch = 4;
  std::size_t epochs = 20;

  std::size_t ensemble_k = 5;
  std::uint64_t seed = 42;

  std::string data_source = "synthetic";
  std::size_t data_n = 2000;
  std::size_t data_dim = 32;
  double data_noise = 0.05;
  std::size_t image_size = 32;
  std::string features_path;
  std::string targets_path;

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    task_or_throw(task);
    if (encoding && loss != LossKind::bce && loss != LossKind::focal)
      throw ConfigError("loss '" + to_string(loss) +
                        "' is incompatible with encoding; valid pairs: encoding on with bce|focal, "
                        "encoding off with mse|mae|focal");
    if (!encoding && loss == LossKind::bce)
      throw ConfigError("loss 'bce' requires encoding; valid pairs: encoding on with bce|focal, "
                        "encoding off with mse|mae|focal");
    if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("loss.alpha must lie in (0, 1]");
    if (bits < 1 || bits > BitCodec::max_bits) throw ConfigError("encoding.bits must lie in [1, 52]");
    if (!(or_alpha > 0.0)) throw ConfigError("or.alpha must be positive");
    if (!(soft_orth_lambda >= 0.0)) throw ConfigError("regularizer.soft_orth_lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
    if (batch == 0 || epochs == 0) throw ConfigError("optimizer.batch and optimizer.epochs must be positive");
    if (head == HeadKind::deep_ensemble && ensemble_k < 2) throw ConfigError("ensemble.k must be at least 2");
    if (fpn && backbone != BackboneKind::conv) throw ConfigError("fpn.enabled requires backbone.kind = conv");
    if (fpn && fpn_resolutions.empty()) throw ConfigError("fpn.resolutions must not be empty");
    if (backbone == BackboneKind::conv && backbone_channels.empty())
      throw ConfigError("backbone.channels must not be empty");
    if (data_source != "synthetic" && data_source != "file")
      throw ConfigError("data.source must be synthetic|file");
    if (data_source == "file" && (features_path.empty() || targets_path.empty()))
      throw ConfigError("data.source = file requires data.features and data.targets");
    if (attention_tokens == 0) throw ConfigError("head.tokens must be positive");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return nlohmann::json{
      {"task", c.task},
      {"backbone.kind", to_string(c.backbone)},
      {"backbone.width", c.backbone_width},
      {"backbone.channels", c.backbone_channels},
      {"freeze_backbone", c.freeze_backbone},
      {"head.kind", to_string(c.head)},
      {"head.hidden", c.hidden},
      {"head.tokens", c.attention_tokens},
      {"loss.kind", to_string(c.loss)},
      {"loss.gamma", c.gamma},
      {"loss.alpha", c.alpha},
      {"encoding.enabled", c.encoding},
      {"encoding.bits", c.bits},
      {"encoding.decode_mode", to_string(c.decode_mode)},
      {"or.enabled", c.or_enabled},
      {"or.mode", to_string(c.or_mode)},
      {"or.alpha", c.or_alpha},
      {"regularizer.soft_orth_lambda", c.soft_orth_lambda},
      {"fpn.enabled", c.fpn},
      {"fpn.resolutions", c.fpn_resolutions},
      {"fpn.channels", c.fpn_channels},
      {"optimizer.lr", c.lr},
      {"optimizer.batch", c.batch},
      {"optimizer.epochs", c.epochs},
      {"ensemble.k", c.ensemble_k},
      {"seed", c.seed},
      {"data.source", c.data_source},
      {"data.n", c.data_n},
      {"data.dim", c.data_dim},
      {"data.noise", c.data_noise},
      {"data.image_size", c.image_size},
      {"data.features", c.features_path},
      {"data.targets", c.targets_path},
  };
}

// Missing keys keep their defaults; unknown keys and ill-typed values are
// configuration errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  ExperimentConfig c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + std::string(key) + "' has the wrong type");
    }
  };
  auto get_enum = [&](const char* key, auto& field) {
    std::string name;
    get(key, name);
    if (!name.empty()) field = detail::parse_enum<std::decay_t<decltype(field)>>(key, name);
  };
  get("task", c.task);
  get_enum("backbone.kind", c.backbone);
  get("backbone.width", c.backbone_width);
  get("backbone.channels", c.backbone_channels);
  get("freeze_backbone", c.freeze_backbone);
  get_enum("head.kind", c.head);
  get("head.hidden", c.hidden);
  get("head.tokens", c.attention_tokens);
  get_enum("loss.kind", c.loss);
  get("loss.gamma", c.gamma);
  get("loss.alpha", c.alpha);
  get("encoding.enabled", c.encoding);
  get("encoding.bits", c.bits);
  std::string decode;
  get("encoding.decode_mode", decode);
  if (!decode.empty()) c.decode_mode = parse_decode_mode(decode);
  get("or.enabled", c.or_enabled);
  get_enum("or.mode", c.or_mode);
  get("or.alpha", c.or_alpha);
  get("regularizer.soft_orth_lambda", c.soft_orth_lambda);
  get("fpn.enabled", c.fpn);
  get("fpn.resolutions", c.fpn_resolutions);
  get("fpn.channels", c.fpn_channels);
  get("optimizer.lr", c.lr);
  get("optimizer.batch", c.batch);
  get("optimizer.epochs", c.epochs);
  get("ensemble.k", c.ensemble_k);
  get("seed", c.seed);
  get("data.source", c.data_source);
  get("data.n", c.data_n);
  get("data.dim", c.data_dim);
  get("data.noise", c.data_noise);
  get("data.image_size", c.image_size);
  get("data.features", c.features_path);
  get("data.targets", c.targets_path);
  c.validate();
  return c;
}

// FP_SEED, when set, replaces the configured seed.
inline void apply_seed_override(ExperimentConfig& cfg, const char* env_value) {
  if (!env_value || !*env_value) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env_value, &end, 10);
  if (*end != '\0') throw ConfigError("FP_SEED must be an unsigned integer, got '" + std::string(env_value) + "'");
  cfg.seed = v;
}

// ---- metrics ------------------------------------------------------------------

namespace detail {

inline void require_metric_inputs(std::span<const double> pred, std::span<const double> target, std::size_t min) {
  if (pred.size() != target.size())
    throw DimensionError("metric: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
  if (pred.size() < min) throw ContractError("metric needs at least " + std::to_string(min) + " values");
}

}  // namespace detail

inline double metric_mse(std::span<const double> pred, std::span<const double> target) {
  detail::require_metric_inputs(pred, target, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

inline double metric_mae(std::span<const double> pred, std::span<const double> target) {
  detail::require_metric_inputs(pred, target, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

struct R2Score {
  double value;
  bool degenerate;  // target variance was zero; value is 0 by convention
};

inline R2Score metric_r2(std::span<const double> pred, std::span<const double> target) {
  detail::require_metric_inputs(pred, target, 2);
  double mu = 0.0;
  for (double t : target) mu += t;
  mu /= static_cast<double>(target.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
    ss_tot += (target[i] - mu) * (target[i] - mu);
  }
  if (ss_tot == 0.0) return {0.0, true};
  return {1.0 - ss_res / ss_tot, false};
}

struct CurvePoint {
  std::size_t epoch;
  double train_loss;
  double val_loss;
};

struct MetricsRecord {
  double mse = 0.0;
  double mae = 0.0;
  double r2 = 0.0;
  bool r2_degenerate = false;
  std::vector<CurvePoint> curve;
};

// ---- model --------------------------------------------------------------------

// One trainable regressor: optional backbone, optional pyramid fuser, head.
class Regressor {
 public:
  using Head = std::variant<MlpHead, AttentionHead>;

  Regressor(std::optional<ToyBackbone> backbone, std::optional<PyramidFuser> fuser, Head head,
            std::vector<std::size_t> fpn_resolutions, std::size_t tokens)
      : backbone_(std::move(backbone)),
        fuser_(std::move(fuser)),
        head_(std::move(head)),
        fpn_resolutions_(std::move(fpn_resolutions)),
        tokens_(tokens) {}

  // Output of the (possibly frozen) backbone: either the embedding, the last
  // stage map, or one last-stage map per pyramid input resolution.
  std::vector<Tensor> backbone_features(const Tensor& x) const {
    if (!backbone_) return {x};
    if (backbone_->is_dense()) return {backbone_->forward(x).embedding};
    if (!fuser_) return {backbone_->forward(x).levels.back()};
    std::vector<Tensor> levels;
    for (std::size_t r : fpn_resolutions_) {
      Tensor xr = x.dim(2) == r ? x : resize_to(x, r, r);
      levels.push_back(backbone_->forward(xr).levels.back());
    }
    return levels;
  }

  Tensor head_forward(const std::vector<Tensor>& features, std::vector<Tensor>* layer_inputs = nullptr) const {
    Tensor flat, tokens;
    if (fuser_) {
      Tensor fused = fuser_->fuse(features);
      flat = global_mean_pool(fused);
      tokens = spatial_tokens(fused);
    } else if (features.front().rank() == 4) {
      flat = global_mean_pool(features.front());
      tokens = spatial_tokens(features.front());
    } else {
      flat = features.front();
    }
    if (const auto* mlp = std::get_if<MlpHead>(&head_)) return mlp->forward_recording(flat, layer_inputs);
    const auto& attn = std::get<AttentionHead>(head_);
    if (!tokens.defined()) {
      const std::size_t b = flat.dim(0), d = flat.dim(1);
      if (d % tokens_ != 0)
        throw ConfigError("head.tokens = " + std::to_string(tokens_) + " does not divide embedding width " +
                          std::to_string(d));
      tokens = reshape(flat, {b, tokens_, d / tokens_});
    }
    return attn.forward_recording(tokens, layer_inputs);
  }

  Tensor forward(const Tensor& x) const { return head_forward(backbone_features(x)); }

  bool backbone_frozen() const { return !backbone_ || backbone_->frozen(); }
  const std::optional<ToyBackbone>& backbone() const { return backbone_; }
  Head& head() { return head_; }
  const Head& head() const { return head_; }

  std::vector<LinearLayer*> head_layers() {
    std::vector<LinearLayer*> out;
    if (auto* mlp = std::get_if<MlpHead>(&head_))
      for (auto& l : mlp->layers()) out.push_back(&l);
    else
      out.push_back(&std::get<AttentionHead>(head_).output_layer());
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    if (backbone_)
      for (auto& p : backbone_->parameters()) out.push_back(p);
    if (fuser_)
      for (auto& p : fuser_->parameters()) out.push_back(p);
    std::visit([&](const auto& h) { for (auto& p : h.parameters()) out.push_back(p); }, head_);
    return out;
  }

  // Square or wide matrices whose rows the soft penalty orthogonalizes.
  std::vector<Tensor> penalized_weights() const {
    std::vector<Tensor> out;
    if (const auto* mlp = std::get_if<MlpHead>(&head_)) {
      for (const auto& l : mlp->layers()) out.push_back(l.weight());
    } else {
      const auto& attn = std::get<AttentionHead>(head_);
      for (const auto& p : attn.attention().parameters()) out.push_back(p);
      out.push_back(attn.output_layer().weight());
    }
    return out;
  }

 private:
  static Tensor spatial_tokens(const Tensor& map) {
    const std::size_t b = map.dim(0), c = map.dim(1), hw = map.dim(2) * map.dim(3);
    return transpose(reshape(map, {b, c, hw}));
  }

  std::optional<ToyBackbone> backbone_;
  std::optional<PyramidFuser> fuser_;
  Head head_;
  std::vector<std::size_t> fpn_resolutions_;
  std::size_t tokens_;
};

// Builds a regressor for `data`. The backbone is seeded from cfg.seed (it
// stands in for fixed pretrained weights); the head from `head_seed`.
inline Regressor build_regressor(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t head_seed) {
  Rng backbone_rng(cfg.seed ^ 0xb4c0ffeeULL);
  Rng rng(head_seed);
  std::optional<ToyBackbone> backbone;
  std::size_t width = 0;
  switch (cfg.backbone) {
    case BackboneKind::none:
      if (data.is_image()) throw ConfigError("backbone.kind = none needs feature-vector data");
      width = data.inputs.dim(1);
      break;
    case BackboneKind::dense:
      if (data.is_image()) throw ConfigError("backbone.kind = dense needs feature-vector data");
      backbone = ToyBackbone::dense(data.inputs.dim(1), cfg.backbone_width, backbone_rng, cfg.freeze_backbone);
      width = cfg.backbone_width;
      break;
    case BackboneKind::conv: {
      if (!data.is_image()) throw ConfigError("backbone.kind = conv needs image data");
      std::vector<std::size_t> sizes = cfg.fpn ? cfg.fpn_resolutions : std::vector<std::size_t>{data.inputs.dim(2)};
      backbone = ToyBackbone::conv(data.inputs.dim(1), cfg.backbone_channels, sizes, backbone_rng, cfg.freeze_backbone);
      width = backbone->embedding_dim();
      break;
    }
  }
  std::optional<PyramidFuser> fuser;
  if (cfg.fpn) {
    PyramidConfig pc;
    pc.resolutions.clear();
    pc.channels.clear();
    for (std::size_t r : cfg.fpn_resolutions) {
      pc.resolutions.push_back(backbone->level_sizes(r).back());
      pc.channels.push_back(backbone->embedding_dim());
    }
    pc.out_channels = cfg.fpn_channels;
    fuser.emplace(pc, rng);
    width = cfg.fpn_channels;
  }
  const std::size_t out = cfg.encoding ? static_cast<std::size_t>(cfg.bits) : 1;
  std::optional<Regressor::Head> head;
  if (cfg.head == HeadKind::attention) {
    const bool spatial = cfg.backbone == BackboneKind::conv;
    if (!spatial && width % cfg.attention_tokens != 0)
      throw ConfigError("head.tokens = " + std::to_string(cfg.attention_tokens) + " does not divide embedding width " +
                        std::to_string(width));
    head.emplace(AttentionHead(spatial ? width : width / cfg.attention_tokens, out, rng));
  } else {
    head.emplace(MlpHead(width, cfg.hidden, out, rng));
  }
  return Regressor(std::move(backbone), std::move(fuser), std::move(*head), cfg.fpn_resolutions, cfg.attention_tokens);
}

// ---- training -----------------------------------------------------------------

namespace detail {

// Loss-side encoding of targets and decoding of head outputs.
class TargetAdapter {
 public:
  TargetAdapter(const ExperimentConfig& cfg, const TaskSpec& task) : cfg_(cfg), task_(task) {
    if (cfg.encoding) codec_.emplace(task.lo, task.hi, cfg.bits);
  }

  std::size_t width() const { return codec_ ? static_cast<std::size_t>(codec_->bits()) : 1; }

  Tensor encode(std::span<const double> mm) const {
    std::vector<double> out;
    out.reserve(mm.size() * width());
    for (double v : mm) {
      if (codec_)
        for (std::uint8_t b : codec_->encode(v)) out.push_back(b);
      else
        out.push_back((v - task_.mean) / task_.sd);
    }
    return Tensor::from({mm.size(), width()}, std::move(out));
  }

  Tensor loss(const Tensor& output, const Tensor& target) const {
    const FocalConfig focal{cfg_.gamma, cfg_.alpha};
    if (codec_) {
      Tensor p = sigmoid(output);
      return cfg_.loss == LossKind::bce ? bce_loss(p, target) : focal_bce(p, target, focal);
    }
    switch (cfg_.loss) {
      case LossKind::mae: return mae_loss(output, target);
      case LossKind::focal: return focal_mse(output, target, focal);
      default: return mse_loss(output, target);
    }
  }

  std::vector<double> decode(const Tensor& output) const {
    const std::size_t n = output.dim(0), w = width();
    std::vector<double> mm(n);
    std::vector<double> p(w);
    for (std::size_t i = 0; i < n; ++i) {
      if (!codec_) {
        mm[i] = task_.mean + task_.sd * output[i];
        continue;
      }
      for (std::size_t j = 0; j < w; ++j) {
        const double x = output[i * w + j];
        p[j] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      }
      mm[i] = codec_->decode_probabilistic(p, cfg_.decode_mode);
    }
    return mm;
  }

 private:
  const ExperimentConfig& cfg_;
  TaskSpec task_;
  std::optional<BitCodec> codec_;
};

inline std::vector<Tensor> gather_features(const std::vector<Tensor>& cached, std::span<const std::size_t> rows) {
  std::vector<Tensor> out;
  for (const Tensor& t : cached) out.push_back(gather_rows(t, rows));
  return out;
}

// Runs the frozen part of the model over the whole dataset once.
inline std::vector<Tensor> precompute_features(const Regressor& model, const Tensor& inputs) {
  NoGradGuard guard;
  const std::size_t n = inputs.dim(0), chunk = 64;
  std::vector<std::vector<double>> parts;
  std::vector<Shape> shapes;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
    auto feats = model.backbone_features(gather_rows(inputs, rows));
    if (parts.empty()) {
      parts.resize(feats.size());
      for (const Tensor& f : feats) {
        Shape s = f.shape();
        s[0] = n;
        shapes.push_back(s);
      }
    }
    for (std::size_t k = 0; k < feats.size(); ++k) {
      auto d = feats[k].data();
      parts[k].insert(parts[k].end(), d.begin(), d.end());
    }
  }
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < parts.size(); ++k) out.push_back(Tensor::from(shapes[k], std::move(parts[k])));
  return out;
}

inline std::vector<double> column(const Tensor& t, std::span<const std::size_t> rows) {
  std::vector<double> out;
  for (std::size_t r : rows) out.push_back(t[r]);
  return out;
}

}  // namespace detail

struct MemberRun {
  Regressor model;
  std::vector<CurvePoint> curve;
  std::vector<double> test_predictions;  // mm
};

// Trains one regressor. Mini-batches of cfg.batch (last partial batch kept),
// Adam at cfg.lr for cfg.epochs; the learning curve records mean train loss
// and full validation loss per epoch.
inline MemberRun train_member(const ExperimentConfig& cfg, const Dataset& data, const SplitIndices& splits,
                              std::uint64_t head_seed) {
  MemberRun run{build_regressor(cfg, data, head_seed), {}, {}};
  Regressor& model = run.model;
  const detail::TargetAdapter adapter(cfg, data.task);
  const bool frozen = model.backbone_frozen();
  const std::vector<Tensor> cached = frozen ? detail::precompute_features(model, data.inputs) : std::vector<Tensor>{};
  auto features = [&](std::span<const std::size_t> rows) {
    return frozen ? detail::gather_features(cached, rows) : model.backbone_features(gather_rows(data.inputs, rows));
  };

  std::vector<Tensor> params;
  for (const Tensor& p : model.parameters())
    if (p.requires_grad()) params.push_back(p);
  AdamState opt(AdamOptions{cfg.lr});

  const bool use_owm = cfg.or_enabled && (cfg.or_mode == OrMode::owm || cfg.or_mode == OrMode::both);
  const bool use_penalty = cfg.or_enabled && (cfg.or_mode == OrMode::soft_penalty || cfg.or_mode == OrMode::both);
  std::vector<LinearLayer*> layers = model.head_layers();
  std::vector<Projector> projectors;
  std::vector<LayerProjection> bindings;
  if (use_owm) {
    for (LinearLayer* l : layers) projectors.emplace_back(l->in_features() + 1, cfg.or_alpha);
    for (std::size_t i = 0; i < layers.size(); ++i)
      bindings.push_back({layers[i]->weight(), layers[i]->bias(), &projectors[i]});
  }

  auto eval_loss = [&](std::span<const std::size_t> rows) {
    NoGradGuard guard;
    double total = 0.0;
    for (std::size_t start = 0; start < rows.size(); start += 256) {
      auto chunk = rows.subspan(start, std::min<std::size_t>(256, rows.size() - start));
      Tensor out = model.head_forward(features(chunk));
      total += adapter.loss(out, adapter.encode(detail::column(data.targets, chunk))).item() * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(rows.size());
  };

  Rng shuffle_rng(head_seed ^ 0x5eedULL);
  std::vector<std::size_t> order = splits.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::span<const std::size_t> rows(order.data() + start, std::min(cfg.batch, order.size() - start));
      std::vector<Tensor> layer_inputs;
      Tensor out = model.head_forward(features(rows), use_owm ? &layer_inputs : nullptr);
      Tensor loss = adapter.loss(out, adapter.encode(detail::column(data.targets, rows)));
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch));
      epoch_loss += loss.item() * static_cast<double>(rows.size());
      Tensor objective = loss;
      if (use_penalty)
        for (const Tensor& w : model.penalized_weights()) {
          // Orient so the Gram matrix is the smaller one; rows of a tall
          // matrix cannot all be orthonormal.
          Tensor oriented = w.dim(0) <= w.dim(1) ? w : transpose(w);
          objective = add(objective, soft_orthogonality_penalty(oriented, cfg.soft_orth_lambda));
        }
      zero_grad(params);
      backward(objective);
      adam_step(opt, params, bindings);
      if (use_owm)
        for (std::size_t i = 0; i < projectors.size(); ++i) {
          const Tensor& x = layer_inputs[i];
          const std::size_t b = x.dim(0), d = x.dim(1);
          std::vector<double> mean_input(d + 1, 0.0);
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < d; ++c) mean_input[c] += x[r * d + c] / static_cast<double>(b);
          mean_input[d] = 1.0;
          (void)projectors[i].update(mean_input);
        }
    }
    const double val = splits.val.empty() ? 0.0 : eval_loss(splits.val);
    if (!std::isfinite(val)) throw NumericError("non-finite validation loss in epoch " + std::to_string(epoch));
    run.curve.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val});
  }

  NoGradGuard guard;
  for (std::size_t start = 0; start < splits.test.size(); start += 256) {
    std::span<const std::size_t> rows(splits.test.data() + start, std::min<std::size_t>(256, splits.test.size() - start));
    for (double v : adapter.decode(model.head_forward(features(rows)))) {
      if (!std::isfinite(v)) throw NumericError("non-finite prediction");
      run.test_predictions.push_back(v);
    }
  }
  return run;
}

struct TrainResult {
  std::vector<MemberRun> members;  // one unless head = deep_ensemble
  std::vector<double> test_predictions;
  std::vector<double> test_variance;  // ensemble only
  MetricsRecord metrics;
};

inline Dataset load_or_generate(const ExperimentConfig& cfg) {
  const TaskSpec task = task_or_throw(cfg.task);
  if (cfg.data_source == "file") return load_dataset(cfg.features_path, cfg.targets_path, cfg.task);
  if (cfg.backbone == BackboneKind::conv)
    return synth_generate_images(task, cfg.data_n, cfg.image_size, cfg.data_noise, cfg.seed);
  return synth_generate(task, cfg.data_n, cfg.data_dim, cfg.data_noise, cfg.seed);
}

inline TrainResult train(const ExperimentConfig& cfg, const Dataset& data, const SplitIndices& splits) {
  cfg.validate();
  if (splits.train.empty() || splits.test.empty()) throw ConfigError("train and test splits must be nonempty");
  TrainResult result;
  if (cfg.head == HeadKind::deep_ensemble) {
    const EnsembleConfig ens = EnsembleConfig::with_members(cfg.ensemble_k, cfg.seed);
    std::mutex mu;
    std::map<std::uint64_t, MemberRun> runs;
    EnsemblePrediction pred = ensemble_train_predict(ens, [&](std::uint64_t seed) {
      ExperimentConfig member_cfg = cfg;
      member_cfg.head = HeadKind::mlp;
      MemberRun run = train_member(member_cfg, data, splits, seed);
      std::vector<double> p = run.test_predictions;
      std::lock_guard lock(mu);
      runs.emplace(seed, std::move(run));
      return p;
    });
    for (std::uint64_t seed : ens.seeds) result.members.push_back(std::move(runs.at(seed)));
    result.test_predictions = std::move(pred.mean);
    result.test_variance = std::move(pred.variance);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      CurvePoint p{e + 1, 0.0, 0.0};
      for (const auto& m : result.members) {
        p.train_loss += m.curve[e].train_loss / static_cast<double>(result.members.size());
        p.val_loss += m.curve[e].val_loss / static_cast<double>(result.members.size());
      }
      result.metrics.curve.push_back(p);
    }
  } else {
    result.members.push_back(train_member(cfg, data, splits, cfg.seed));
    result.test_predictions = result.members.front().test_predictions;
    result.metrics.curve = result.members.front().curve;
  }
  const std::vector<double> truth = detail::column(data.targets, splits.test);
  result.metrics.mse = metric_mse(result.test_predictions, truth);
  result.metrics.mae = metric_mae(result.test_predictions, truth);
  if (truth.size() >= 2) {
    const R2Score r2 = metric_r2(result.test_predictions, truth);
    result.metrics.r2 = r2.value;
    result.metrics.r2_degenerate = r2.degenerate;
  }
  return result;
}

// ---- results, ablation, reports ---------------------------------------------------

struct ResultRow {
  std::string task;
  std::string head;
  std::string loss;                // mse | mae | bce | focal
  std::optional<double> gamma;     // focal rows only
  std::string encoding;            // Classification | Regression
  bool orthogonal = false;
  MetricsRecord metrics;

  static ResultRow from(const ExperimentConfig& cfg, MetricsRecord metrics) {
    ResultRow r{cfg.task, to_string(cfg.head), to_string(cfg.loss), std::nullopt,
                cfg.encoding ? "Classification" : "Regression", cfg.or_enabled, std::move(metrics)};
    if (cfg.loss == LossKind::focal) r.gamma = cfg.gamma;
    return r;
  }
};

struct AblationGrid {
  std::vector<double> gammas{0, 2, 4, 6};
  std::vector<bool> orthogonal{false, true};
  std::vector<bool> encoding{false, true};
  bool include_base_loss = true;  // mse (Regression) / bce (Classification) rows

  std::size_t cells() const {
    return encoding.size() * (gammas.size() + (include_base_loss ? 1 : 0)) * orthogonal.size();
  }
};

inline AblationGrid grid_from_json(const nlohmann::json& j) {
  AblationGrid g;
  if (!j.is_object()) throw ConfigError("grid must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (key != "gammas" && key != "or" && key != "encoding" && key != "base_loss")
      throw ConfigError("unknown grid key '" + key + "'");
  try {
    if (j.contains("gammas")) g.gammas = j.at("gammas").get<std::vector<double>>();
    if (j.contains("or")) g.orthogonal = j.at("or").get<std::vector<bool>>();
    if (j.contains("encoding")) g.encoding = j.at("encoding").get<std::vector<bool>>();
    if (j.contains("base_loss")) g.include_base_loss = j.at("base_loss").get<bool>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("grid values have the wrong type");
  }
  for (double gamma : g.gammas)
    if (!(gamma >= 0.0)) throw ConfigError("grid gammas must be >= 0");
  return g;
}

// Cell configurations in report order: encoding, then loss, then OR.
inline std::vector<ExperimentConfig> ablation_cells(const ExperimentConfig& base, const AblationGrid& grid) {
  std::vector<ExperimentConfig> cells;
  for (bool enc : grid.encoding) {
    std::vector<std::pair<LossKind, double>> losses;
    if (grid.include_base_loss) losses.emplace_back(enc ? LossKind::bce : LossKind::mse, 0.0);
    for (double g : grid.gammas) losses.emplace_back(LossKind::focal, g);
    for (const auto& [loss, gamma] : losses)
      for (bool orth : grid.orthogonal) {
        ExperimentConfig c = base;
        c.encoding = enc;
        c.loss = loss;
        c.gamma = gamma;
        c.or_enabled = orth;
        cells.push_back(c);
      }
  }
  return cells;
}

// All cells share data, splits and seed; only the grid factors vary.
inline std::vector<ResultRow> ablate(const ExperimentConfig& base, const AblationGrid& grid) {
  base.validate();
  const Dataset data = load_or_generate(base);
  const SplitIndices splits = split(data.size(), base.seed);
  std::vector<ResultRow> rows;
  for (const ExperimentConfig& cell : ablation_cells(base, grid))
    rows.push_back(ResultRow::from(cell, train(cell, data, splits).metrics));
  return rows;
}

inline const char* results_header() { return "task,head,loss,gamma,encoding,or,mse,mae,r2"; }

inline void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << results_header() << '\n';
  for (const ResultRow& r : rows)
    out << r.task << ',' << r.head << ',' << r.loss << ',' << (r.gamma ? format_decimal(*r.gamma) : "") << ','
        << r.encoding << ',' << (r.orthogonal ? "on" : "off") << ',' << format_decimal(r.metrics.mse, 17) << ','
        << format_decimal(r.metrics.mae, 17) << ',' << format_decimal(r.metrics.r2, 17) << '\n';
}

inline std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != results_header())
    throw ParseError(1, std::string("expected header '") + results_header() + "'");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() == 8 && line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw ParseError(lineno, "expected 9 fields");
    try {
      ResultRow r;
      r.task = f[0];
      r.head = f[1];
      r.loss = f[2];
      if (!f[3].empty()) r.gamma = std::stod(f[3]);
      r.encoding = f[4];
      if (f[5] != "on" && f[5] != "off") throw std::invalid_argument("or");
      r.orthogonal = f[5] == "on";
      r.metrics.mse = std::stod(f[6]);
      r.metrics.mae = std::stod(f[7]);
      r.metrics.r2 = std::stod(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw ParseError(lineno, "malformed result row '" + line + "'");
    }
  }
  return rows;
}

inline void write_results_markdown(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "| task | head | loss | gamma | encoding | or | mse | mae | r2 |\n";
  out << "|---|---|---|---|---|---|---|---|---|\n";
  for (const ResultRow& r : rows)
    out << "| " << r.task << " | " << r.head << " | " << r.loss << " | " << (r.gamma ? format_decimal(*r.gamma) : "-")
        << " | " << r.encoding << " | " << (r.orthogonal ? "on" : "off") << " | " << format_decimal(r.metrics.mse, 4)
        << " | " << format_decimal(r.metrics.mae, 4) << " | " << format_decimal(r.metrics.r2, 4) << " |\n";
}

// Learning curves as one <path> per series (train and val per record), with
// one M/L command per epoch.
inline void write_curves_svg(std::ostream& out, const std::vector<std::vector<CurvePoint>>& curves) {
  const double width = 640, height = 400, margin = 40;
  std::size_t epochs = 1;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& c : curves)
    for (const CurvePoint& p : c) {
      epochs = std::max(epochs, p.epoch);
      for (double v : {p.train_loss, p.val_loss}) {
        lo = first ? v : std::min(lo, v);
        hi = first ? v : std::max(hi, v);
        first = false;
      }
    }
  if (hi <= lo) hi = lo + 1.0;
  auto x = [&](std::size_t e) {
    return margin + (epochs > 1 ? static_cast<double>(e - 1) / static_cast<double>(epochs - 1) : 0.0) * (width - 2 * margin);
  };
  auto y = [&](double v) { return height - margin - (v - lo) / (hi - lo) * (height - 2 * margin); };
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
      << height - margin << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << height - margin
      << "\" stroke=\"black\"/>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    for (int series = 0; series < 2; ++series) {
      out << "<path class=\"" << (series == 0 ? "train" : "val") << "\" data-record=\"" << k << "\" fill=\"none\" stroke=\""
          << (series == 0 ? "steelblue" : "darkorange") << "\" d=\"";
      for (std::size_t i = 0; i < curves[k].size(); ++i) {
        const CurvePoint& p = curves[k][i];
        out << (i == 0 ? "M" : " L") << format_decimal(x(p.epoch), 6) << ','
            << format_decimal(y(series == 0 ? p.train_loss : p.val_loss), 6);
      }
      out << "\"/>\n";
    }
  }
  out << "</svg>\n";
}

inline void write_curves_csv(std::ostream& out, const std::vector<std::vector<CurvePoint>>& curves) {
  out << "record,epoch,train_loss,val_loss\n";
  for (std::size_t k = 0; k < curves.size(); ++k)
    for (const CurvePoint& p : curves[k])
      out << k << ',' << p.epoch << ',' << format_decimal(p.train_loss, 17) << ',' << format_decimal(p.val_loss, 17) << '\n';
}

inline std::vector<std::vector<CurvePoint>> read_curves_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "record,epoch,train_loss,val_loss")
    throw ParseError(1, "expected header 'record,epoch,train_loss,val_loss'");
  std::vector<std::vector<CurvePoint>> curves;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[4];
    for (auto& s : f) std::getline(ss, s, ',');
    try {
      const std::size_t k = std::stoul(f[0]);
      if (curves.size() <= k) curves.resize(k + 1);
      curves[k].push_back({std::stoul(f[1]), std::stod(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw ParseError(lineno, "malformed curve row '" + line + "'");
    }
  }
  return curves;
}

}  // namespace focalpyr
