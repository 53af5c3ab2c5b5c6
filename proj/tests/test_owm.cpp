#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "support/toys.hpp"

using namespace focalpyr;
using focalpyr::fixtures::random_vector;

namespace {

Eigen::MatrixXd as_matrix(const Projector& p) {
  Eigen::MatrixXd m(p.dim(), p.dim());
  for (std::size_t i = 0; i < p.dim(); ++i)
    for (std::size_t j = 0; j < p.dim(); ++j) m(i, j) = p.at(i, j);
  return m;
}

std::vector<double> unit(std::size_t dim, std::size_t i) {
  std::vector<double> e(dim, 0.0);
  e[i] = 1.0;
  return e;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (double x : t.data()) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Projector, RankOneClosedForm) {
  const double alpha = 1e-10;
  Projector p(3, alpha);
  ASSERT_EQ(p.update(unit(3, 0)), Projector::Update::applied);
  const std::vector<double> pe1 = p.apply(unit(3, 0));
  EXPECT_NEAR(pe1[0], alpha / (1.0 + alpha), 1e-12);
  EXPECT_EQ(pe1[1], 0.0);
  EXPECT_EQ(pe1[2], 0.0);
  EXPECT_LE(norm(pe1), 1e-9);
  EXPECT_EQ(p.apply(unit(3, 1)), unit(3, 1));

  Projector q(4, 0.3);
  (void)q.update(unit(4, 0));
  Eigen::MatrixXd expected = Eigen::MatrixXd::Identity(4, 4);
  expected(0, 0) -= 1.0 / 1.3;
  EXPECT_LE((as_matrix(q) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Projector, TwoUpdatesDeflateTheirSpan) {
  Projector p(3, 1e-10);
  (void)p.update(unit(3, 0));
  (void)p.update(unit(3, 1));
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    EXPECT_LE(norm(p.apply(std::vector<double>{a, b, 0.0})), 1e-9);
  }
  EXPECT_EQ(p.apply(unit(3, 2)), unit(3, 2));
}

TEST(Projector, MatchesRegularizedInverseOracle) {
  Rng rng(2);
  const std::size_t dim = 6;
  const double alpha = 0.05;
  Projector p(dim, alpha);
  Eigen::MatrixXd xxt = Eigen::MatrixXd::Zero(dim, dim);
  for (int k = 0; k < 9; ++k) {
    const auto x = random_vector(rng, dim);
    (void)p.update(x);
    const Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(x.data(), dim);
    xxt += v * v.transpose();
    const Eigen::MatrixXd oracle = alpha * (alpha * Eigen::MatrixXd::Identity(dim, dim) + xxt).inverse();
    EXPECT_LE((as_matrix(p) - oracle).cwiseAbs().maxCoeff(), 1e-10) << "after update " << k;
  }
}

TEST(Projector, SymmetryAndSpectrumOverThousandUpdates) {
  Rng rng(3);
  const std::size_t dim = 8;
  Projector p(dim, 1e-3);
  for (int k = 0; k < 1000; ++k) {
    std::vector<double> x = random_vector(rng, dim, -2, 2);
    // Mostly low-rank input stream, so the projector keeps deflating the same
    // directions and round-off has every chance to accumulate.
    if (k % 10) std::fill(x.begin() + 3, x.end(), 0.0);
    (void)p.update(x);
    const Eigen::MatrixXd m = as_matrix(p);
    ASSERT_LE((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-8) << k;
    if (k % 50 == 0 || k == 999) {
      const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
      EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-8) << k;
      EXPECT_LE(eig.eigenvalues().maxCoeff(), 1.0 + 1e-8) << k;
    }
  }
}

TEST(Projector, DeflationIsMonotone) {
  Rng rng(4);
  const std::size_t dim = 5;
  Projector p(dim, 1e-2);
  const auto recorded = random_vector(rng, dim);
  (void)p.update(recorded);
  // P only shrinks in the Loewner order, so the quadratic form xᵀPx never grows.
  auto quadratic = [&] {
    const auto px = p.apply(recorded);
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) s += recorded[i] * px[i];
    return s;
  };
  double previous = quadratic();
  for (int k = 0; k < 200; ++k) {
    (void)p.update(random_vector(rng, dim));
    const double now = quadratic();
    EXPECT_LE(now, previous + 1e-15);
    previous = now;
  }
}

TEST(Projector, ZeroInputAndErrors) {
  Projector p(3, 1e-3);
  const std::vector<double> before(p.matrix().begin(), p.matrix().end());
  EXPECT_EQ(p.update(std::vector<double>(3, 0.0)), Projector::Update::skipped_zero_input);
  EXPECT_EQ(std::vector<double>(p.matrix().begin(), p.matrix().end()), before);
  EXPECT_THROW((void)p.update(std::vector<double>(4, 1.0)), DimensionError);
  EXPECT_THROW(Projector(0, 1.0), ParameterError);
  EXPECT_THROW(Projector(3, 0.0), ParameterError);
  EXPECT_THROW(project_gradient(p, Tensor::zeros({2, 4})), DimensionError);
}

TEST(ProjectGradient, FreshProjectorIsIdentity) {
  Rng rng(5);
  const Tensor g = fixtures::random_tensor(rng, {3, 4}, -1, 1, false);
  EXPECT_EQ(project_gradient(Projector(4, 1e-3), g).to_vector(), g.to_vector());
}

TEST(ProjectGradient, FullSpanDeflatesToZero) {
  Rng rng(6);
  Projector p(4, 1e-10);
  for (int k = 0; k < 4; ++k) (void)p.update(random_vector(rng, 4));
  const Tensor g = fixtures::random_tensor(rng, {5, 4}, -1, 1, false);
  EXPECT_LT(frobenius(project_gradient(p, g)), 1e-6 * frobenius(g));
}

TEST(ProjectGradient, RowsOrthogonalToRecordedInputs) {
  Rng rng(7);
  const double alpha = 1e-4;
  const std::size_t dim = 6;
  Projector p(dim, alpha);
  std::vector<std::vector<double>> recorded;
  for (int k = 0; k < 2; ++k) {
    recorded.push_back(random_vector(rng, dim, -2, 2));
    (void)p.update(recorded.back());
  }
  const Tensor g = project_gradient(p, fixtures::random_tensor(rng, {4, dim}, -1, 1, false));
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(g.data().begin() + r * dim, g.data().begin() + (r + 1) * dim);
    for (const auto& x : recorded) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += row[j] * x[j];
      EXPECT_LE(std::abs(dot), 10.0 * alpha * norm(row) * norm(x));
    }
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  (void)w.mutable_grad();
  std::vector<Tensor> params{w};
  AdamState opt;
  for (int i = 0; i < 5; ++i) adam_step(opt, params);
  EXPECT_EQ(w.to_vector(), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepOfUnitGradient) {
  Tensor w = Tensor::scalar(0.0, true);
  w.mutable_grad()[0] = 1.0;
  std::vector<Tensor> params{w};
  AdamState opt;
  EXPECT_EQ(opt.options.lr, 1e-3);
  EXPECT_EQ(opt.options.beta1, 0.9);
  EXPECT_EQ(opt.options.beta2, 0.999);
  EXPECT_EQ(opt.options.eps, 1e-8);
  adam_step(opt, params);
  EXPECT_NEAR(w.item(), -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_EQ(opt.step, 1u);
}

TEST(Adam, SaturatedProjectorFreezesProjectedLayer) {
  Rng rng(8);
  LinearLayer layer(3, 2, rng);
  Projector p(4, 1e-14);
  for (int k = 0; k < 4; ++k) (void)p.update(random_vector(rng, 4));
  std::vector<Tensor> params = layer.parameters();
  const auto w0 = layer.weight().to_vector(), b0 = layer.bias().to_vector();
  AdamState opt;
  const std::vector<LayerProjection> projections{{layer.weight(), layer.bias(), &p}};
  for (int step = 0; step < 10; ++step) {
    zero_grad(params);
    backward(sum(square(layer.forward(fixtures::random_tensor(rng, {4, 3}, -1, 1, false)))));
    ASSERT_GT(frobenius(Tensor::from({6}, std::vector<double>(layer.weight().grad().begin(), layer.weight().grad().end()))), 0.0);
    adam_step(opt, params, projections);
  }
  // Unprojected, every coordinate would move about lr per step. What remains is
  // round-off in the near-singular P, magnified by Adam's normalization.
  const double unprojected = opt.options.lr * 10;
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_LT(std::abs(layer.weight()[i] - w0[i]), 1e-3 * unprojected);
  for (std::size_t i = 0; i < b0.size(); ++i) EXPECT_LT(std::abs(layer.bias()[i] - b0[i]), 1e-3 * unprojected);
}

TEST(Adam, WeightOnlyProjectionLeavesBiasFree) {
  Rng rng(9);
  LinearLayer layer(3, 2, rng);
  Projector p(3, 1e-14);
  for (int k = 0; k < 3; ++k) (void)p.update(random_vector(rng, 3));
  std::vector<Tensor> params = layer.parameters();
  const auto w0 = layer.weight().to_vector(), b0 = layer.bias().to_vector();
  backward(sum(layer.forward(fixtures::random_tensor(rng, {4, 3}, -1, 1, false))));
  AdamState opt;
  const std::vector<LayerProjection> projections{{layer.weight(), layer.bias(), &p}};
  adam_step(opt, params, projections);
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_LT(std::abs(layer.weight()[i] - w0[i]), 1e-6);
  for (std::size_t i = 0; i < b0.size(); ++i) EXPECT_NEAR(std::abs(layer.bias()[i] - b0[i]), 1e-3, 1e-9);

  Projector wrong(5, 1e-3);
  const std::vector<LayerProjection> bad{{layer.weight(), layer.bias(), &wrong}};
  EXPECT_THROW(adam_step(opt, params, bad), DimensionError);
}

TEST(Adam, ContractErrors) {
  Tensor w = Tensor::scalar(1.0, true);
  std::vector<Tensor> params{w};
  AdamState opt;
  EXPECT_THROW(adam_step(opt, params), ContractError);
  (void)w.mutable_grad();
  adam_step(opt, params);
  std::vector<Tensor> more{w, Tensor::scalar(2.0, true)};
  EXPECT_THROW(adam_step(opt, more), ContractError);

  Tensor frozen = Tensor::scalar(3.0);
  std::vector<Tensor> with_frozen{frozen};
  AdamState fresh;
  adam_step(fresh, with_frozen);
  EXPECT_EQ(frozen.item(), 3.0);
}

TEST(ContinualLearning, ProjectionPreservesEarlierTask) {
  std::vector<double> plain, owm;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    plain.push_back(fixtures::ContinualToy::task_a_loss_after_b(seed, false));
    owm.push_back(fixtures::ContinualToy::task_a_loss_after_b(seed, true));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return (v[4] + v[5]) / 2.0;
  };
  EXPECT_LT(median(owm), median(plain));
}
