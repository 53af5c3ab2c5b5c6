#pragma once

// Orthogonal weight modification. A Projector tracks the input subspace a
// layer has already consumed; gradients for y = W x are right-multiplied by P
// so updates leave the layer's response to recorded inputs (nearly) intact.
//
// Recursive least-squares update with damping alpha:
//   P <- P - (P x)(P x)ᵀ / (alpha + xᵀ P x)

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "focalpyr/tensor.hpp"

namespace focalpyr {

class Projector {
 public:
  enum class Update { applied, skipped_zero_input };

  Projector(std::size_t dim, double alpha) : dim_(dim), alpha_(alpha), p_(dim * dim, 0.0) {
    if (dim == 0) throw ParameterError("projector dimension must be positive");
    if (!(alpha > 0.0)) throw ParameterError("projector alpha must be positive");
    for (std::size_t i = 0; i < dim; ++i) p_[i * dim + i] = 1.0;
  }

  std::size_t dim() const { return dim_; }
  double alpha() const { return alpha_; }
  std::span<const double> matrix() const { return p_; }
  double at(std::size_t i, std::size_t j) const { return p_[i * dim_ + j]; }

  // An all-zero x leaves P untouched and reports skipped_zero_input.
  [[nodiscard]] Update update(std::span<const double> x) {
    if (x.size() != dim_)
      throw DimensionError("projector update: input length " + std::to_string(x.size()) +
                           " does not match dimension " + std::to_string(dim_));
    bool zero = true;
    for (double v : x) zero = zero && v == 0.0;
    if (zero) return Update::skipped_zero_input;
    const std::vector<double> px = apply(x);
    double xpx = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) xpx += x[i] * px[i];
    const double denom = alpha_ + xpx;
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j) p_[i * dim_ + j] -= px[i] * px[j] / denom;
    return Update::applied;
  }

  // P·x
  std::vector<double> apply(std::span<const double> x) const {
    if (x.size() != dim_) throw DimensionError("projector apply: length mismatch");
    std::vector<double> out(dim_, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) s += p_[i * dim_ + j] * x[j];
      out[i] = s;
    }
    return out;
  }

  // Row-major g[rows×dim] <- g·P.
  void project_rows(std::span<double> g, std::size_t rows) const {
    if (g.size() != rows * dim_) throw DimensionError("projector: gradient size does not match dimension");
    std::vector<double> row(dim_);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(r * dim_), dim_, row.begin());
      for (std::size_t j = 0; j < dim_; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) s += row[k] * p_[k * dim_ + j];
        g[r * dim_ + j] = s;
      }
    }
  }

 private:
  std::size_t dim_;
  double alpha_;
  std::vector<double> p_;
};

// G[out×in] · P
inline Tensor project_gradient(const Projector& projector, const Tensor& gradient) {
  if (gradient.rank() != 2 || gradient.dim(1) != projector.dim())
    throw DimensionError("project_gradient: gradient " + to_string(gradient.shape()) +
                         " does not match projector dimension " + std::to_string(projector.dim()));
  std::vector<double> g = gradient.to_vector();
  projector.project_rows(g, gradient.dim(0));
  return Tensor::from(gradient.shape(), std::move(g));
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  explicit AdamState(AdamOptions opts) : options(opts) {}
};

// Binds a projector to a linear layer. When the projector dimension is
// in + 1 the bias is treated as the weight of a constant input and [dW | db]
// is projected jointly; when it is `in`, only dW is projected.
struct LayerProjection {
  Tensor weight;
  Tensor bias;
  const Projector* projector = nullptr;
};

// One bias-corrected Adam step over `params`, in order. Tensors without
// requires_grad (frozen) are skipped. Gradients of layers listed in
// `projections` are projected before entering the moment estimates.
inline void adam_step(AdamState& state, std::span<const Tensor> params,
                      std::span<const LayerProjection> projections = {}) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ContractError("adam_step: parameter list changed between steps");

  // Effective gradients for projected layers, keyed by tensor identity.
  std::vector<std::pair<Tensor, std::vector<double>>> overrides;
  for (const LayerProjection& lp : projections) {
    if (!lp.projector || !lp.weight.requires_grad()) continue;
    const std::size_t out = lp.weight.dim(0), in = lp.weight.dim(1);
    if (!lp.weight.has_grad()) throw ContractError("adam_step: projected weight has no gradient");
    const bool joint = lp.bias.defined() && lp.projector->dim() == in + 1;
    if (!joint && lp.projector->dim() != in)
      throw DimensionError("adam_step: projector dimension " + std::to_string(lp.projector->dim()) +
                           " does not match layer input " + std::to_string(in));
    const std::size_t cols = joint ? in + 1 : in;
    std::vector<double> g(out * cols);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < in; ++c) g[r * cols + c] = lp.weight.grad()[r * in + c];
      if (joint) g[r * cols + in] = lp.bias.has_grad() ? lp.bias.grad()[r] : 0.0;
    }
    lp.projector->project_rows(g, out);
    std::vector<double> dw(out * in), db(out);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < in; ++c) dw[r * in + c] = g[r * cols + c];
      if (joint) db[r] = g[r * cols + in];
    }
    overrides.emplace_back(lp.weight, std::move(dw));
    if (joint) overrides.emplace_back(lp.bias, std::move(db));
  }

  state.step += 1;
  const AdamOptions& o = state.options;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    if (!p.requires_grad()) continue;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.numel()) throw ContractError("adam_step: moment shape does not match parameter");
    std::span<const double> g;
    for (const auto& [tensor, grad] : overrides)
      if (tensor.same_node(p)) g = grad;
    if (g.empty()) {
      if (!p.has_grad()) throw ContractError("adam_step: trainable parameter " + std::to_string(k) + " has no gradient");
      g = p.grad();
    }
    auto x = p.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      x[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

}  // namespace focalpyr
