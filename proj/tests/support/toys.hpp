#pragma once

// Small seeded problems shared by unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "focalpyr/focalpyr.hpp"

namespace focalpyr::fixtures {

// Random point in R^n with entries in [lo, hi).
inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), random_vector(rng, n, lo, hi), requires_grad);
}

// Scalar probe of a tensor: sum(out * w) with a fixed pseudo-random w depending only on the shape.
inline Tensor contract(const Tensor& out) {
  Rng rng(out.numel() * 7919 + out.rank());
  return sum(mul(out, Tensor::from(out.shape(), random_vector(rng, out.numel(), 0.5, 1.5))));
}

// Two sequential regression tasks on one small MLP. Task inputs live in two
// random 3-dim subspaces of R^8, and the task targets are unrelated linear
// read-outs, so fitting B with unconstrained updates disturbs A.
struct ContinualToy {
  static constexpr std::size_t dim = 8;
  static constexpr std::size_t rank = 3;
  static constexpr std::size_t hidden = 16;
  static constexpr std::size_t samples = 64;
  static constexpr std::size_t epochs = 60;
  static constexpr std::size_t batch = 8;

  struct Task {
    Tensor x, y;
  };

  static Task make_task(Rng& rng) {
    std::vector<std::vector<double>> basis(rank);
    for (auto& b : basis) b = random_vector(rng, dim);
    const std::vector<double> readout = random_vector(rng, rank);
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < samples; ++i) {
      std::vector<double> coef = random_vector(rng, rank);
      double y = 0.0;
      for (std::size_t k = 0; k < rank; ++k) y += readout[k] * coef[k];
      for (std::size_t j = 0; j < dim; ++j) {
        double v = 0.0;
        for (std::size_t k = 0; k < rank; ++k) v += coef[k] * basis[k][j];
        xs.push_back(v);
      }
      ys.push_back(y);
    }
    return {Tensor::from({samples, dim}, std::move(xs)), Tensor::from({samples, 1}, std::move(ys))};
  }

  // Task-A MSE after training on A, then on B (with or without projection).
  static double task_a_loss_after_b(std::uint64_t seed, bool use_owm, double alpha = 1e-3) {
    Rng rng(seed);
    const Task a = make_task(rng);
    const Task b = make_task(rng);
    MlpHead net(dim, {hidden}, 1, rng);
    std::vector<Tensor> params = net.parameters();
    std::vector<Projector> projectors;
    std::vector<LayerProjection> bindings;
    for (const auto& layer : net.layers()) projectors.emplace_back(layer.in_features() + 1, alpha);
    for (std::size_t i = 0; i < projectors.size(); ++i)
      bindings.push_back({net.layers()[i].weight(), net.layers()[i].bias(), &projectors[i]});

    auto fit = [&](const Task& task, bool project, bool record) {
      AdamState opt(AdamOptions{1e-2});
      std::vector<std::size_t> order(samples);
      for (std::size_t i = 0; i < samples; ++i) order[i] = i;
      for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (std::size_t start = 0; start < samples; start += batch) {
          std::span<const std::size_t> rows(order.data() + start, batch);
          std::vector<Tensor> inputs;
          Tensor out = net.forward_recording(gather_rows(task.x, rows), &inputs);
          Tensor loss = mse_loss(out, gather_rows(task.y, rows));
          zero_grad(params);
          backward(loss);
          adam_step(opt, params, project ? std::span<const LayerProjection>(bindings) : std::span<const LayerProjection>{});
        }
      }
      if (!record) return;
      // Absorb every task input (plus the bias coordinate) into the projectors.
      NoGradGuard guard;
      std::vector<Tensor> inputs;
      net.forward_recording(task.x, &inputs);
      for (std::size_t l = 0; l < projectors.size(); ++l) {
        const std::size_t in = inputs[l].dim(1);
        for (std::size_t r = 0; r < samples; ++r) {
          std::vector<double> x(in + 1, 1.0);
          for (std::size_t c = 0; c < in; ++c) x[c] = inputs[l][r * in + c];
          (void)projectors[l].update(x);
        }
      }
    };

    fit(a, false, use_owm);
    fit(b, use_owm, false);
    NoGradGuard guard;
    return mse_loss(net.forward(a.x), a.y).item();
  }
};

}  // namespace focalpyr::fixtures
