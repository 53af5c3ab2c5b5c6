#pragma once

#include <string>

#include "focalpyr/ops.hpp"

namespace focalpyr {

struct FocalConfig {
  double gamma = 0.0;  // focusing parameter
  double alpha = 1.0;  // constant weight in (0, 1]

  void validate() const {
    if (!(gamma >= 0.0)) throw ParameterError("focal gamma must be >= 0, got " + std::to_string(gamma));
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ParameterError("focal alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
};

inline constexpr double bce_epsilon = 1e-7;

namespace detail {

inline Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

inline void require_binary(const Tensor& y) {
  for (double v : y.data())
    if (v != 0.0 && v != 1.0) throw DomainError("binary target " + std::to_string(v) + " is not 0 or 1");
}

}  // namespace detail

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape("mse_loss", pred, target);
  return mean(square(sub(pred, target)));
}

// Subgradient 0 at exact ties.
inline Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape("mae_loss", pred, target);
  return mean(abs(sub(pred, target)));
}

// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline Tensor bce_loss(const Tensor& p, const Tensor& y) {
  detail::require_same_shape("bce_loss", p, y);
  detail::require_binary(y);
  Tensor pc = clamp(p, bce_epsilon, 1.0 - bce_epsilon);
  Tensor ll = add(mul(y, log(pc)), mul(detail::one_minus(y), log(detail::one_minus(pc))));
  return neg(mean(ll));
}

// mean of -alpha (1 - p_t)^gamma log(p_t), p_t = p if y = 1 else 1 - p.
inline Tensor focal_bce(const Tensor& p, const Tensor& y, const FocalConfig& cfg) {
  cfg.validate();
  detail::require_same_shape("focal_bce", p, y);
  detail::require_binary(y);
  Tensor pc = clamp(p, bce_epsilon, 1.0 - bce_epsilon);
  Tensor pt = add(mul(y, pc), mul(detail::one_minus(y), detail::one_minus(pc)));
  Tensor modulation = pow_scalar(detail::one_minus(pt), cfg.gamma);
  return scale(mean(mul(modulation, log(pt))), -cfg.alpha);
}

// Focal-modulated squared error: mean of w e^2 with w = (1 - exp(-e^2))^gamma.
// gamma = 0 is plain MSE; small residuals are down-weighted as gamma grows.
inline Tensor focal_mse(const Tensor& pred, const Tensor& target, const FocalConfig& cfg) {
  cfg.validate();
  detail::require_same_shape("focal_mse", pred, target);
  Tensor e2 = square(sub(pred, target));
  Tensor w = pow_scalar(detail::one_minus(exp(neg(e2))), cfg.gamma);
  return mean(mul(w, e2));
}

// lambda * ||W Wᵀ - I||_F^2, pushing the rows of W towards an orthonormal set.
inline Tensor soft_orthogonality_penalty(const Tensor& weight, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("orthogonality lambda must be >= 0");
  if (weight.rank() != 2) throw DimensionError("orthogonality penalty expects a matrix, got " + to_string(weight.shape()));
  const std::size_t rows = weight.dim(0);
  std::vector<double> eye(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) eye[i * rows + i] = 1.0;
  Tensor gram = matmul(weight, transpose(weight));
  return scale(sum(square(sub(gram, Tensor::from({rows, rows}, std::move(eye))))), lambda);
}

}  // namespace focalpyr
