#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "support/toys.hpp"

using namespace focalpyr;
using focalpyr::fixtures::random_tensor;

namespace {

std::vector<double> softmax_row(std::span<const double> z, double temperature) {
  double top = z[0];
  for (double v : z) top = std::max(top, v);
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) total += p[j] = std::exp((z[j] - top) / temperature);
  for (double& v : p) v /= total;
  return p;
}

// Mean over rows of -Σ p_t log p_s, written out directly.
double cross_entropy_reference(const Tensor& t, const Tensor& s, const std::vector<double>& center, double tpt,
                               double tps) {
  const std::size_t n = t.dim(0), k = t.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> shifted(k);
    for (std::size_t j = 0; j < k; ++j) shifted[j] = t[i * k + j] - center[j];
    const auto pt = softmax_row(shifted, tpt);
    const auto ps = softmax_row(std::span<const double>(s.data().data() + i * k, k), tps);
    for (std::size_t j = 0; j < k; ++j) total -= pt[j] * std::log(ps[j]);
  }
  return total / static_cast<double>(n);
}

std::vector<double> flatten(const ProjectionNet& net) {
  std::vector<double> out;
  for (const Tensor& p : net.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

Augment identity_augment() {
  return [](const Tensor& x, Rng&) { return x.detach(); };
}

}  // namespace

TEST(DistillLoss, MatchesDirectComputation) {
  Rng rng(1);
  const DistillConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor t = random_tensor(rng, {4, 6}, -2, 2, false);
    const Tensor s = random_tensor(rng, {4, 6}, -2, 2, false);
    const auto c = fixtures::random_vector(rng, 6, -0.5, 0.5);
    EXPECT_NEAR(distill_cross_entropy(t, s, c, cfg).item(),
                cross_entropy_reference(t, s, c, cfg.teacher_temperature, cfg.student_temperature), 1e-10);
  }
}

TEST(DistillLoss, EqualLogitsGiveEntropy) {
  Rng rng(2);
  DistillConfig cfg;
  cfg.teacher_temperature = cfg.student_temperature = 0.5;
  const Tensor s = random_tensor(rng, {3, 5}, -1, 1, false);
  double entropy = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (double p : softmax_row(std::span<const double>(s.data().data() + i * 5, 5), 0.5)) entropy -= p * std::log(p);
  EXPECT_NEAR(distill_cross_entropy(s, s, std::vector<double>(5, 0.0), cfg).item(), entropy / 3.0, 1e-12);
}

TEST(DistillLoss, LowTeacherTemperatureSelectsArgmax) {
  Rng rng(3);
  DistillConfig cfg;
  cfg.teacher_temperature = 1e-5;
  const Tensor t = random_tensor(rng, {4, 6}, -1, 1, false);
  const Tensor s = random_tensor(rng, {4, 6}, -1, 1, false);
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto row = t.data().subspan(i * 6, 6);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    expected -= std::log(softmax_row(s.data().subspan(i * 6, 6), cfg.student_temperature)[best]);
  }
  EXPECT_NEAR(distill_cross_entropy(t, s, std::vector<double>(6, 0.0), cfg).item(), expected / 4.0, 1e-9);
}

TEST(DistillLoss, TeacherReceivesNoGradient) {
  Rng rng(4);
  Tensor t = random_tensor(rng, {3, 4});
  Tensor s = random_tensor(rng, {3, 4});
  backward(distill_cross_entropy(t, s, std::vector<double>(4, 0.1), DistillConfig{}));
  double teacher_total = 0.0, student_total = 0.0;
  if (t.has_grad())
    for (double g : t.grad()) teacher_total += std::abs(g);
  for (double g : s.grad()) student_total += std::abs(g);
  EXPECT_EQ(teacher_total, 0.0);
  EXPECT_GT(student_total, 0.0);
}

TEST(DistillLoss, Validation) {
  const Tensor a = Tensor::zeros({2, 3});
  const std::vector<double> c(3, 0.0);
  EXPECT_THROW(distill_cross_entropy(a, Tensor::zeros({2, 4}), c, {}), DimensionError);
  EXPECT_THROW(distill_cross_entropy(a, a, std::vector<double>(2, 0.0), {}), DimensionError);
  EXPECT_THROW(distill_cross_entropy(a, a, c, {0.0, 0.04, 0.996, 0.9}), ParameterError);
  EXPECT_THROW(distill_cross_entropy(a, a, c, {0.1, -1.0, 0.996, 0.9}), ParameterError);
  EXPECT_THROW(distill_cross_entropy(a, a, c, {0.1, 0.04, 1.5, 0.9}), ParameterError);
  EXPECT_THROW(distill_cross_entropy(a, a, c, {0.1, 0.04, 0.996, -0.1}), ParameterError);
}

TEST(DistillState, TeacherStartsAsDetachedCopy) {
  Rng rng(5);
  const DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), {});
  EXPECT_EQ(flatten(state.teacher), flatten(state.student));
  EXPECT_EQ(state.center, std::vector<double>(6, 0.0));
  for (const Tensor& p : state.teacher.parameters()) EXPECT_FALSE(p.requires_grad());
  for (const Tensor& p : state.student.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(DistillStep, TeacherEmaMatchesClosedForm) {
  Rng rng(6);
  DistillConfig cfg;
  cfg.teacher_momentum = 0.9;
  DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), cfg);
  for (Tensor& p : state.teacher.parameters())
    for (double& v : p.mutable_data()) v += rng.uniform(-1, 1);
  const auto teacher0 = flatten(state.teacher), student = flatten(state.student);
  AdamState frozen_student(AdamOptions{0.0});
  const Augment augment = noise_dropout_augment(0.1, 0.1);
  for (int step = 0; step < 50; ++step) (void)distill_step(state, two_cluster_batch(8, 4, 2.0, rng), augment, frozen_student, rng);
  EXPECT_EQ(flatten(state.student), student);
  const double decay = std::pow(0.9, 50);
  const auto teacher = flatten(state.teacher);
  for (std::size_t i = 0; i < teacher.size(); ++i)
    EXPECT_NEAR(teacher[i], decay * teacher0[i] + (1.0 - decay) * student[i], 1e-10);
}

TEST(DistillStep, UnitMomentumFreezesTeacher) {
  Rng rng(7);
  DistillConfig cfg;
  cfg.teacher_momentum = 1.0;
  DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), cfg);
  const auto teacher0 = flatten(state.teacher), student0 = flatten(state.student);
  AdamState opt(AdamOptions{1e-2});
  for (int step = 0; step < 10; ++step)
    (void)distill_step(state, two_cluster_batch(8, 4, 2.0, rng), noise_dropout_augment(0.3, 0.1), opt, rng);
  EXPECT_EQ(flatten(state.teacher), teacher0);
  EXPECT_NE(flatten(state.student), student0);
  for (const Tensor& p : state.teacher.parameters()) EXPECT_FALSE(p.has_grad());
}

TEST(DistillStep, ZeroCenterMomentumGivesBatchMean) {
  Rng rng(8);
  DistillConfig cfg;
  cfg.center_momentum = 0.0;
  DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), cfg);
  state.center.assign(6, 123.0);
  AdamState opt;
  for (int step = 0; step < 3; ++step) {
    const Tensor batch = two_cluster_batch(5, 4, 2.0, rng);
    Tensor t;
    {
      NoGradGuard guard;
      t = state.teacher.forward(batch);
    }
    std::vector<double> mean(6, 0.0);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) mean[j] += 2.0 * t[i * 6 + j];
    for (double& m : mean) m /= 10.0;
    const auto result = distill_step(state, batch, identity_augment(), opt, rng);
    EXPECT_EQ(state.center, result.batch_center);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(state.center[j], mean[j], 1e-14);
  }
}

TEST(DistillStep, CenterFollowsEma) {
  Rng rng(9);
  DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), {});
  state.center = fixtures::random_vector(rng, 6);
  const auto before = state.center;
  AdamState opt;
  const auto result = distill_step(state, two_cluster_batch(5, 4, 2.0, rng), identity_augment(), opt, rng);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(state.center[j], 0.9 * before[j] + 0.1 * result.batch_center[j], 1e-15);
}

TEST(DistillStep, LossIsSymmetricAverageOverViews) {
  Rng rng(10);
  DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), {});
  for (Tensor& p : state.teacher.parameters())
    for (double& v : p.mutable_data()) v += rng.uniform(-0.2, 0.2);
  state.center = fixtures::random_vector(rng, 6, -0.1, 0.1);
  const Tensor batch = two_cluster_batch(5, 4, 2.0, rng);
  // Deterministic views: a fixed shift for the first call, a scale for the second.
  int calls = 0;
  const Augment views = [&calls](const Tensor& x, Rng&) {
    return ++calls % 2 ? add_scalar(x.detach(), 0.3) : scale(x.detach(), 0.7);
  };
  const Tensor x1 = add_scalar(batch, 0.3), x2 = scale(batch, 0.7);
  double expected;
  {
    NoGradGuard guard;
    const auto& c = state.center;
    const auto& cfg = state.config;
    expected = 0.5 * cross_entropy_reference(state.teacher.forward(x1), state.student.forward(x2), c,
                                             cfg.teacher_temperature, cfg.student_temperature) +
               0.5 * cross_entropy_reference(state.teacher.forward(x2), state.student.forward(x1), c,
                                             cfg.teacher_temperature, cfg.student_temperature);
  }
  AdamState opt;
  EXPECT_NEAR(distill_step(state, batch, views, opt, rng).loss, expected, 1e-10);
  EXPECT_THROW(distill_step(state, Tensor::zeros({0, 4}), views, opt, rng), DimensionError);
}

TEST(Collapse, IdenticalProbeHasZeroSpread) {
  Rng rng(11);
  const DistillState state = DistillState::init(ProjectionNet(4, 8, 6, rng), {});
  const auto row = fixtures::random_vector(rng, 4);
  std::vector<double> same;
  for (int i = 0; i < 10; ++i) same.insert(same.end(), row.begin(), row.end());
  const auto flat = collapse_diagnostics(state, Tensor::from({10, 4}, same));
  for (double s : flat.output_std) EXPECT_EQ(s, 0.0);
  const auto spread = collapse_diagnostics(state, two_cluster_batch(64, 4, 2.0, rng));
  EXPECT_GT(std::accumulate(spread.output_std.begin(), spread.output_std.end(), 0.0), 0.0);
  EXPECT_GE(spread.mean_distribution_entropy, 0.0);
  EXPECT_LE(spread.mean_distribution_entropy, std::log(6.0) + 1e-12);
  EXPECT_THROW(collapse_diagnostics(state, Tensor::zeros({0, 4})), DimensionError);
}

TEST(DistillRun, ToyRunLearnsWithoutCollapse) {
  const DistillRunConfig cfg;
  const DistillRun run = run_distillation(cfg);
  ASSERT_EQ(run.log.size(), cfg.steps);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += run.log[i].loss;
    last += run.log[cfg.steps - 1 - i].loss;
  }
  EXPECT_LT(last, first);
  for (const auto& row : run.log) {
    EXPECT_TRUE(std::isfinite(row.loss));
    EXPECT_GE(row.divergence, 0.0);
  }
  EXPECT_EQ(run.log.front().step, 1u);
  Rng probe_rng(99);
  const auto diag = collapse_diagnostics(run.state, two_cluster_batch(256, cfg.input_dim, cfg.separation, probe_rng));
  EXPECT_GT(diag.mean_distribution_entropy, 0.1 * std::log(double(cfg.out_dim)));

  const DistillRun again = run_distillation(cfg);
  for (std::size_t i = 0; i < cfg.steps; ++i) EXPECT_EQ(again.log[i].loss, run.log[i].loss);
}
