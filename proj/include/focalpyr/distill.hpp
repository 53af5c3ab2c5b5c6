#pragma once

// Student/teacher self-distillation without multi-crop:
//   x1, x2 = augment(x), augment(x)
//   loss   = H(t1, s2)/2 + H(t2, s1)/2
//   student <- optimizer step on loss
//   teacher <- l * teacher + (1 - l) * student
//   center  <- m * center + (1 - m) * mean(cat[t1, t2])
// with H(t, s) = -sum softmax((t - C)/tpt) * log softmax(s/tps), teacher detached.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "focalpyr/nn.hpp"
#include "focalpyr/owm.hpp"

namespace focalpyr {

struct DistillConfig {
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double teacher_momentum = 0.996;
  double center_momentum = 0.9;

  void validate() const {
    if (!(student_temperature > 0.0) || !(teacher_temperature > 0.0))
      throw ParameterError("distillation temperatures must be positive");
    if (!(teacher_momentum >= 0.0 && teacher_momentum <= 1.0) || !(center_momentum >= 0.0 && center_momentum <= 1.0))
      throw ParameterError("distillation momenta must lie in [0, 1]");
  }
};

// Two-layer projection network shared by student and teacher.
class ProjectionNet {
 public:
  ProjectionNet(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : hidden_(in, hidden, rng), output_(hidden, out, rng) {}

  Tensor forward(const Tensor& x) const { return output_.forward(relu(hidden_.forward(x))); }

  std::vector<Tensor> parameters() const {
    return {hidden_.weight(), hidden_.bias(), output_.weight(), output_.bias()};
  }
  std::size_t out_features() const { return output_.out_features(); }

  // Deep copy with every tensor detached from gradient tracking.
  ProjectionNet frozen_copy() const {
    ProjectionNet copy = *this;
    copy.hidden_ = LinearLayer(hidden_.weight().detach(), hidden_.bias().detach(), true);
    copy.output_ = LinearLayer(output_.weight().detach(), output_.bias().detach(), true);
    return copy;
  }

 private:
  LinearLayer hidden_, output_;
};

struct DistillState {
  ProjectionNet student;
  ProjectionNet teacher;  // never requires grad
  std::vector<double> center;
  DistillConfig config;

  static DistillState init(ProjectionNet student, DistillConfig config) {
    config.validate();
    ProjectionNet teacher = student.frozen_copy();
    std::vector<double> center(student.out_features(), 0.0);
    return DistillState{std::move(student), std::move(teacher), std::move(center), config};
  }
};

namespace detail {

// softmax((t - C) / tpt) row-wise on a detached copy.
inline std::vector<double> sharpen_teacher(const Tensor& t, std::span<const double> center, double temperature) {
  const std::size_t n = t.dim(0), k = t.dim(1);
  std::vector<double> shifted(t.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) shifted[i * k + j] = t[i * k + j] - center[j];
  NoGradGuard guard;
  return softmax(Tensor::from({n, k}, std::move(shifted)), 1, temperature).to_vector();
}

}  // namespace detail

inline Tensor distill_cross_entropy(const Tensor& teacher_logits, const Tensor& student_logits,
                                    std::span<const double> center, const DistillConfig& cfg) {
  cfg.validate();
  if (teacher_logits.rank() != 2 || teacher_logits.shape() != student_logits.shape())
    throw DimensionError("distill_cross_entropy: teacher " + to_string(teacher_logits.shape()) + " and student " +
                         to_string(student_logits.shape()) + " must be matching [n×K]");
  if (center.size() != teacher_logits.dim(1)) throw DimensionError("distill_cross_entropy: center length mismatch");
  const std::size_t n = teacher_logits.dim(0);
  Tensor targets = Tensor::from(teacher_logits.shape(),
                                detail::sharpen_teacher(teacher_logits, center, cfg.teacher_temperature));
  Tensor log_probs = log_softmax(student_logits, 1, cfg.student_temperature);
  return scale(sum(mul(targets, log_probs)), -1.0 / static_cast<double>(n));
}

inline Tensor distill_cross_entropy(const Tensor& teacher_logits, const Tensor& student_logits,
                                    const DistillState& state) {
  return distill_cross_entropy(teacher_logits, student_logits, state.center, state.config);
}

using Augment = std::function<Tensor(const Tensor&, Rng&)>;

// Additive Gaussian noise plus random coordinate dropout.
inline Augment noise_dropout_augment(double noise_sd, double drop_probability) {
  return [noise_sd, drop_probability](const Tensor& x, Rng& rng) {
    std::vector<double> v = x.to_vector();
    for (double& e : v) e = rng.bernoulli(drop_probability) ? 0.0 : e + rng.normal(0.0, noise_sd);
    return Tensor::from(x.shape(), std::move(v));
  };
}

inline double parameter_distance(const ProjectionNet& a, const ProjectionNet& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  double s = 0.0;
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].numel(); ++i) s += (pa[k][i] - pb[k][i]) * (pa[k][i] - pb[k][i]);
  return std::sqrt(s);
}

inline void update_teacher(DistillState& state) {
  const double l = state.config.teacher_momentum;
  auto ps = state.student.parameters();
  auto pt = state.teacher.parameters();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto dst = pt[k].mutable_data();
    auto src = ps[k].data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = l * dst[i] + (1.0 - l) * src[i];
  }
}

struct DistillStepResult {
  double loss;
  std::vector<double> batch_center;  // mean of cat[t1, t2]
};

inline DistillStepResult distill_step(DistillState& state, const Tensor& batch, const Augment& augment,
                                      AdamState& optimizer, Rng& rng) {
  if (batch.rank() != 2 || batch.dim(0) == 0) throw DimensionError("distill_step expects a [n×d] batch");
  Tensor x1 = augment(batch, rng);
  Tensor x2 = augment(batch, rng);
  Tensor s1 = state.student.forward(x1);
  Tensor s2 = state.student.forward(x2);
  Tensor t1, t2;
  {
    NoGradGuard guard;
    t1 = state.teacher.forward(x1);
    t2 = state.teacher.forward(x2);
  }
  Tensor loss = add(scale(distill_cross_entropy(t1, s2, state), 0.5), scale(distill_cross_entropy(t2, s1, state), 0.5));
  auto params = state.student.parameters();
  zero_grad(params);
  backward(loss);
  adam_step(optimizer, params);
  update_teacher(state);

  const std::size_t k = state.center.size();
  const std::size_t rows = t1.dim(0) + t2.dim(0);
  std::vector<double> batch_center(k, 0.0);
  for (const Tensor* t : {&t1, &t2})
    for (std::size_t i = 0; i < t->dim(0); ++i)
      for (std::size_t j = 0; j < k; ++j) batch_center[j] += (*t)[i * k + j];
  for (double& c : batch_center) c /= static_cast<double>(rows);
  const double m = state.config.center_momentum;
  for (std::size_t j = 0; j < k; ++j) state.center[j] = m * state.center[j] + (1.0 - m) * batch_center[j];
  return {loss.item(), std::move(batch_center)};
}

struct CollapseDiagnostics {
  std::vector<double> output_std;  // per output dimension, over the probe batch
  double mean_distribution_entropy = 0.0;
};

inline CollapseDiagnostics collapse_diagnostics(const DistillState& state, const Tensor& probe) {
  if (probe.rank() != 2 || probe.dim(0) == 0) throw DimensionError("collapse_diagnostics needs a nonempty [n×d] probe");
  NoGradGuard guard;
  Tensor t = state.teacher.forward(probe);
  const std::size_t n = t.dim(0), k = t.dim(1);
  CollapseDiagnostics d;
  d.output_std.assign(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    // Shifted by the first row, so identical rows give exactly zero.
    const double origin = t[j];
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += t[i * k + j] - origin;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (t[i * k + j] - origin - mu) * (t[i * k + j] - origin - mu);
    d.output_std[j] = std::sqrt(var / static_cast<double>(n));
  }
  const auto probs = detail::sharpen_teacher(t, state.center, state.config.teacher_temperature);
  std::vector<double> mean_dist(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) mean_dist[j] += probs[i * k + j] / static_cast<double>(n);
  for (double p : mean_dist)
    if (p > 0.0) d.mean_distribution_entropy -= p * std::log(p);
  return d;
}

// Seeded two-Gaussian-cluster toy data in R^d (cluster means at ±separation
// along the first axis).
inline Tensor two_cluster_batch(std::size_t n, std::size_t d, double separation, Rng& rng) {
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = rng.normal() + (j == 0 ? sign * separation : 0.0);
  }
  return Tensor::from({n, d}, std::move(v));
}

struct DistillRunConfig {
  DistillConfig distill;
  std::size_t steps = 200;
  std::size_t batch = 16;
  std::size_t input_dim = 8;
  std::size_t hidden = 32;
  std::size_t out_dim = 16;
  double separation = 3.0;
  double noise = 0.3;
  double dropout = 0.1;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct DistillLogRow {
  std::size_t step;
  double loss;
  double divergence;   // ||teacher - student|| over all parameters
  double center_norm;  // ||C||
};

struct DistillRun {
  DistillState state;
  std::vector<DistillLogRow> log;
};

inline DistillRun run_distillation(const DistillRunConfig& cfg) {
  Rng rng(cfg.seed);
  DistillRun run{DistillState::init(ProjectionNet(cfg.input_dim, cfg.hidden, cfg.out_dim, rng), cfg.distill), {}};
  AdamState opt(AdamOptions{cfg.lr});
  const Augment augment = noise_dropout_augment(cfg.noise, cfg.dropout);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    Tensor batch = two_cluster_batch(cfg.batch, cfg.input_dim, cfg.separation, rng);
    const double loss = distill_step(run.state, batch, augment, opt, rng).loss;
    if (!std::isfinite(loss)) throw NumericError("distillation loss became non-finite at step " + std::to_string(step));
    double cn = 0.0;
    for (double c : run.state.center) cn += c * c;
    run.log.push_back({step, loss, parameter_distance(run.state.teacher, run.state.student), std::sqrt(cn)});
  }
  return run;
}

}  // namespace focalpyr
