#pragma once

// Differentiable operations over Tensor. Binary elementwise operations require
// equal shapes; the only implicit broadcast is multiplication by a scalar.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "focalpyr/tensor.hpp"

namespace focalpyr {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
}

// Applies f(x) elementwise; df(x, y) is the local derivative given input x and output y.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor::record(op, a.shape(), std::move(out), {a}, [df](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto y = ctx.value();
    auto x = ctx.input_value(0);
    auto dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(x[i], y[i]);
  });
}

struct AxisSplit {
  std::size_t outer, length, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " is invalid for shape " + to_string(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::record("add", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto g = ctx.grad();
    for (std::size_t k = 0; k < 2; ++k)
      if (auto d = ctx.input_grad(k); !d.empty())
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::record("sub", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto g = ctx.grad();
    if (auto d = ctx.input_grad(0); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (auto d = ctx.input_grad(1); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::record("mul", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto x = ctx.input_value(0);
    auto y = ctx.input_value(1);
    if (auto d = ctx.input_grad(0); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
    if (auto d = ctx.input_grad(1); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; },
                       [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; },
                       [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary("square", a, [](double x) { return x * x; },
                       [](double x, double) { return 2.0 * x; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw DomainError("log: input " + std::to_string(x) + " is not strictly positive");
  return detail::unary("log", a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

// Subgradient 0 at x == 0.
inline Tensor abs(const Tensor& a) {
  return detail::unary("abs", a, [](double x) { return std::abs(x); },
                       [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// x^e for x >= 0. e == 0 yields exact ones with zero gradient.
inline Tensor pow_scalar(const Tensor& a, double e) {
  for (double x : a.data())
    if (x < 0.0) throw DomainError("pow_scalar: negative base " + std::to_string(x));
  return detail::unary(
      "pow", a, [e](double x) { return e == 0.0 ? 1.0 : std::pow(x, e); },
      [e](double x, double) { return e == 0.0 ? 0.0 : e * std::pow(x, e - 1.0); });
}

// Gradient passes only where lo <= x <= hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// x[..., n] + b[n]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.shape().back() != b.dim(0))
    throw DimensionError("add_bias: bias " + to_string(b.shape()) + " does not match trailing dim of " +
                         to_string(x.shape()));
  const std::size_t n = b.dim(0);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % n];
  return Tensor::record("add_bias", x.shape(), std::move(out), {x, b}, [n](BackwardContext& ctx) {
    auto g = ctx.grad();
    if (auto d = ctx.input_grad(0); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    if (auto d = ctx.input_grad(1); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
  });
}

// ---- linear algebra --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " are incompatible");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  return Tensor::record("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto A = ctx.input_value(0);
    auto B = ctx.input_value(1);
    if (auto dA = ctx.input_grad(0); !dA.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          dA[i * k + p] += s;
        }
    if (auto dB = ctx.input_grad(1); !dB.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * g[i * n + j];
        }
  });
}

// Batched product: a[b×m×k] · b[b×k×n] -> [b×m×n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " are incompatible");
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t z = 0; z < bs; ++z)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[(z * m + i) * k + p];
        for (std::size_t j = 0; j < n; ++j) out[(z * m + i) * n + j] += aip * B[(z * k + p) * n + j];
      }
  return Tensor::record("bmm", {bs, m, n}, std::move(out), {a, b}, [bs, m, k, n](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto A = ctx.input_value(0);
    auto B = ctx.input_value(1);
    auto dA = ctx.input_grad(0);
    auto dB = ctx.input_grad(1);
    for (std::size_t z = 0; z < bs; ++z)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[(z * m + i) * k + p];
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = g[(z * m + i) * n + j];
            s += gij * B[(z * k + p) * n + j];
            if (!dB.empty()) dB[(z * k + p) * n + j] += aip * gij;
          }
          if (!dA.empty()) dA[(z * m + i) * k + p] += s;
        }
  });
}

// Swaps the last two axes (rank 2 or 3).
inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2 && a.rank() != 3)
    throw DimensionError("transpose expects rank 2 or 3, got " + to_string(a.shape()));
  const std::size_t bs = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t z = 0; z < bs; ++z)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[z * r * c + j * r + i] = x[z * r * c + i * c + j];
  return Tensor::record("transpose", shape, std::move(out), {a}, [bs, r, c](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto d = ctx.input_grad(0);
    for (std::size_t z = 0; z < bs; ++z)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[z * r * c + i * c + j] += g[z * r * c + j * r + i];
  });
}

// ---- shape -----------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  return Tensor::record("reshape", std::move(shape), a.to_vector(), {a}, [](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat: invalid axis " + std::to_string(axis));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch " + to_string(s));
    s[axis] = shape[axis];
    if (s != shape)
      throw DimensionError("concat: shapes " + to_string(parts.front().shape()) + " and " +
                           to_string(p.shape()) + " differ off-axis");
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto split = detail::split_axis(shape, axis);
  std::vector<std::size_t> offsets;
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    auto x = p.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < split.inner; ++in)
          out[(o * total + offset + l) * split.inner + in] = x[(o * len + l) * split.inner + in];
    offset += len;
  }
  std::vector<std::size_t> lengths;
  for (const Tensor& p : parts) lengths.push_back(p.dim(axis));
  return Tensor::record("concat", shape, std::move(out), std::span<const Tensor>(parts),
                        [split, total, offsets, lengths](BackwardContext& ctx) {
                          auto g = ctx.grad();
                          for (std::size_t k = 0; k < lengths.size(); ++k) {
                            auto d = ctx.input_grad(k);
                            if (d.empty()) continue;
                            for (std::size_t o = 0; o < split.outer; ++o)
                              for (std::size_t l = 0; l < lengths[k]; ++l)
                                for (std::size_t in = 0; in < split.inner; ++in)
                                  d[(o * lengths[k] + l) * split.inner + in] +=
                                      g[(o * total + offsets[k] + l) * split.inner + in];
                          }
                        });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return Tensor::record("sum", {1}, {s}, {a}, [](BackwardContext& ctx) {
    const double g = ctx.grad()[0];
    for (double& d : ctx.input_grad(0)) d += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return Tensor::record("mean", {1}, {s / n}, {a}, [n](BackwardContext& ctx) {
    const double g = ctx.grad()[0] / n;
    for (double& d : ctx.input_grad(0)) d += g;
  });
}

inline Tensor sum(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.length + l) * s.inner + i];
  return Tensor::record("sum_axis", detail::drop_axis(a.shape(), axis), std::move(out), {a},
                        [s](BackwardContext& ctx) {
                          auto g = ctx.grad();
                          auto d = ctx.input_grad(0);
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t l = 0; l < s.length; ++l)
                              for (std::size_t i = 0; i < s.inner; ++i)
                                d[(o * s.length + l) * s.inner + i] += g[o * s.inner + i];
                        });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.length));
}

// ---- softmax ---------------------------------------------------------------

inline Tensor softmax(const Tensor& a, std::size_t axis, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive");
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.length + l) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, x[at(l)] / temperature);
      double z = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) z += (out[at(l)] = std::exp(x[at(l)] / temperature - mx));
      for (std::size_t l = 0; l < s.length; ++l) out[at(l)] /= z;
    }
  return Tensor::record("softmax", a.shape(), std::move(out), {a}, [s, temperature](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto y = ctx.value();
    auto d = ctx.input_grad(0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.length + l) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.length; ++l) dot += g[at(l)] * y[at(l)];
        for (std::size_t l = 0; l < s.length; ++l) d[at(l)] += y[at(l)] * (g[at(l)] - dot) / temperature;
      }
  });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("log_softmax temperature must be positive");
  const auto s = detail::split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.length + l) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, x[at(l)] / temperature);
      double z = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) z += std::exp(x[at(l)] / temperature - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < s.length; ++l) out[at(l)] = x[at(l)] / temperature - lse;
    }
  return Tensor::record("log_softmax", a.shape(), std::move(out), {a}, [s, temperature](BackwardContext& ctx) {
    auto g = ctx.grad();
    auto y = ctx.value();
    auto d = ctx.input_grad(0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.length + l) * s.inner + i; };
        double total = 0.0;
        for (std::size_t l = 0; l < s.length; ++l) total += g[at(l)];
        for (std::size_t l = 0; l < s.length; ++l)
          d[at(l)] += (g[at(l)] - std::exp(y[at(l)]) * total) / temperature;
      }
  });
}

// ---- spatial ---------------------------------------------------------------

// x[b×inC×H×W] * kernel[outC×inC×kh×kw] (+ bias[outC]) with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (x.rank() != 4 || kernel.rank() != 4 || x.dim(1) != kernel.dim(1))
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " and kernel " +
                         to_string(kernel.shape()) + " are incompatible");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)))
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " does not match kernel " +
                         to_string(kernel.shape()));
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  if (H + 2 * padding < KH || W + 2 * padding < KW)
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " smaller than kernel");
  const std::size_t HO = (H + 2 * padding - KH) / stride + 1;
  const std::size_t WO = (W + 2 * padding - KW) / stride + 1;
  const long pad = static_cast<long>(padding);

  struct Geometry {
    std::size_t B, C, H, W, O, KH, KW, HO, WO, stride;
    long pad;
  } geo{B, C, H, W, O, KH, KW, HO, WO, stride, pad};

  // Calls fn(out_index, in_index, kernel_index) for every valid tap.
  auto for_each_tap = [](const Geometry& g, auto&& fn) {
    for (std::size_t b = 0; b < g.B; ++b)
      for (std::size_t o = 0; o < g.O; ++o)
        for (std::size_t c = 0; c < g.C; ++c)
          for (std::size_t ki = 0; ki < g.KH; ++ki)
            for (std::size_t kj = 0; kj < g.KW; ++kj) {
              const std::size_t kidx = ((o * g.C + c) * g.KH + ki) * g.KW + kj;
              for (std::size_t i = 0; i < g.HO; ++i) {
                const long yi = static_cast<long>(i * g.stride + ki) - g.pad;
                if (yi < 0 || yi >= static_cast<long>(g.H)) continue;
                const std::size_t obase = ((b * g.O + o) * g.HO + i) * g.WO;
                const std::size_t ibase = ((b * g.C + c) * g.H + static_cast<std::size_t>(yi)) * g.W;
                for (std::size_t j = 0; j < g.WO; ++j) {
                  const long xj = static_cast<long>(j * g.stride + kj) - g.pad;
                  if (xj < 0 || xj >= static_cast<long>(g.W)) continue;
                  fn(obase + j, ibase + static_cast<std::size_t>(xj), kidx);
                }
              }
            }
  };

  std::vector<double> out(B * O * HO * WO, 0.0);
  auto X = x.data();
  auto K = kernel.data();
  for_each_tap(geo, [&](std::size_t oi, std::size_t ii, std::size_t ki) { out[oi] += X[ii] * K[ki]; });
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < HO * WO; ++p) out[(b * O + o) * HO * WO + p] += bv[o];
  }
  std::vector<Tensor> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor::record(
      "conv2d", {B, O, HO, WO}, std::move(out), std::span<const Tensor>(inputs),
      [geo, has_bias, for_each_tap](BackwardContext& ctx) {
        auto g = ctx.grad();
        auto X = ctx.input_value(0);
        auto K = ctx.input_value(1);
        auto dX = ctx.input_grad(0);
        auto dK = ctx.input_grad(1);
        if (!dX.empty())
          for_each_tap(geo, [&](std::size_t oi, std::size_t ii, std::size_t ki) { dX[ii] += g[oi] * K[ki]; });
        if (!dK.empty())
          for_each_tap(geo, [&](std::size_t oi, std::size_t ii, std::size_t ki) { dK[ki] += g[oi] * X[ii]; });
        if (has_bias)
          if (auto dB = ctx.input_grad(2); !dB.empty())
            for (std::size_t b = 0; b < geo.B; ++b)
              for (std::size_t o = 0; o < geo.O; ++o)
                for (std::size_t p = 0; p < geo.HO * geo.WO; ++p) dB[o] += g[(b * geo.O + o) * geo.HO * geo.WO + p];
      });
}

enum class ResizeMode { nearest, bilinear };

namespace detail {

struct ResizeTap {
  std::size_t lo, hi;
  double w;  // weight of hi
};

// Half-pixel-center source coordinates, clamped at the borders.
inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out, ResizeMode mode) {
  std::vector<ResizeTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (mode == ResizeMode::nearest) {
      const auto src = std::min(in - 1, static_cast<std::size_t>(std::floor(static_cast<double>(i) * ratio)));
      taps[i] = {src, src, 0.0};
      continue;
    }
    const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * ratio - 0.5);
    const auto lo = std::min(in - 1, static_cast<std::size_t>(std::floor(src)));
    const auto hi = std::min(in - 1, lo + 1);
    taps[i] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

inline Tensor resize(const Tensor& x, std::size_t target_h, std::size_t target_w,
                     ResizeMode mode = ResizeMode::bilinear) {
  if (x.rank() != 4) throw DimensionError("resize expects [batch×C×H×W], got " + to_string(x.shape()));
  if (target_h == 0 || target_w == 0) throw DimensionError("resize target must be at least 1×1");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = detail::resize_taps(H, target_h, mode);
  const auto tx = detail::resize_taps(W, target_w, mode);
  std::vector<double> out(planes * target_h * target_w);
  auto X = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < target_h; ++i) {
      const double* r0 = &X[(p * H + ty[i].lo) * W];
      const double* r1 = &X[(p * H + ty[i].hi) * W];
      for (std::size_t j = 0; j < target_w; ++j) {
        const double top = r0[tx[j].lo] + tx[j].w * (r0[tx[j].hi] - r0[tx[j].lo]);
        const double bot = r1[tx[j].lo] + tx[j].w * (r1[tx[j].hi] - r1[tx[j].lo]);
        out[(p * target_h + i) * target_w + j] = top + ty[i].w * (bot - top);
      }
    }
  Shape shape{x.dim(0), x.dim(1), target_h, target_w};
  return Tensor::record("resize", shape, std::move(out), {x},
                        [planes, H, W, target_h, target_w, ty, tx](BackwardContext& ctx) {
                          auto g = ctx.grad();
                          auto d = ctx.input_grad(0);
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t i = 0; i < target_h; ++i)
                              for (std::size_t j = 0; j < target_w; ++j) {
                                const double gv = g[(p * target_h + i) * target_w + j];
                                const double wy = ty[i].w, wx = tx[j].w;
                                d[(p * H + ty[i].lo) * W + tx[j].lo] += gv * (1 - wy) * (1 - wx);
                                d[(p * H + ty[i].lo) * W + tx[j].hi] += gv * (1 - wy) * wx;
                                d[(p * H + ty[i].hi) * W + tx[j].lo] += gv * wy * (1 - wx);
                                d[(p * H + ty[i].hi) * W + tx[j].hi] += gv * wy * wx;
                              }
                        });
}

}  // namespace focalpyr
