#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cofusion/error.hpp"
#include "cofusion/rng.hpp"
#include "cofusion/tensor.hpp"

namespace cofusion::ops {

namespace detail {

using cofusion::detail::record;
using cofusion::detail::should_record;

inline void require_rank(const Tensor& x, std::size_t rank, std::string_view op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got shape " + shape_str(x.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Elementwise binary op where either side may be a single-element tensor.
template <class Fwd, class DA, class DB>
Tensor broadcast_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.data();
  auto bv = b.data();
  auto at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bt = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(at(i), bt(i));
  Tensor result(shape, std::move(out));
  if (should_record({&a, &b})) {
    record(name, result, [a, b, a_scalar, b_scalar, n, da, db](std::span<const double> g) {
      auto av = a.data();
      auto bv = b.data();
      std::vector<double> ga(a.numel(), 0.0), gb(b.numel(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = a_scalar ? av[0] : av[i];
        const double y = b_scalar ? bv[0] : bv[i];
        ga[a_scalar ? 0 : i] += g[i] * da(x, y);
        gb[b_scalar ? 0 : i] += g[i] * db(x, y);
      }
      a.accumulate_grad(ga);
      b.accumulate_grad(gb);
    });
  }
  return result;
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tensor result(x.shape(), std::move(out));
  if (should_record({&x})) {
    record(name, result, [x, deriv](std::span<const double> g) {
      auto xv = x.data();
      std::vector<double> gx(x.numel());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * deriv(xv[i]);
      x.accumulate_grad(gx);
    });
  }
  return result;
}

}  // namespace detail

// --- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

inline Tensor add_scalar(const Tensor& x, double offset) {
  return detail::unary(
      "add_scalar", x, [offset](double v) { return v + offset; }, [](double) { return 1.0; });
}

// 1 - x
inline Tensor one_minus(const Tensor& x) {
  return detail::unary(
      "one_minus", x, [](double v) { return 1.0 - v; }, [](double) { return -1.0; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor result = Tensor::scalar(total);
  if (detail::should_record({&x})) {
    detail::record("sum", result, [x](std::span<const double> g) {
      x.accumulate_grad(std::vector<double>(x.numel(), g[0]));
    });
  }
  return result;
}

inline Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  Tensor result = Tensor::scalar(total / n);
  if (detail::should_record({&x})) {
    detail::record("mean", result, [x, n](std::span<const double> g) {
      x.accumulate_grad(std::vector<double>(x.numel(), g[0] / n));
    });
  }
  return result;
}

// --- activations ----------------------------------------------------------

enum class Activation { gelu, relu, sigmoid };

inline Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

inline double gaussian_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double gaussian_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor activation(Activation kind, const Tensor& x) {
  switch (kind) {
    case Activation::gelu:
      return detail::unary(
          "gelu", x, [](double v) { return v * gaussian_cdf(v); },
          [](double v) { return gaussian_cdf(v) + v * gaussian_pdf(v); });
    case Activation::relu:
      return detail::unary(
          "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
          [](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::sigmoid:
      return detail::unary("sigmoid", x, sigmoid_value, [](double v) {
        const double s = sigmoid_value(v);
        return s * (1.0 - s);
      });
  }
  throw ConfigError("unknown activation kind");
}

inline Tensor activation(std::string_view kind, const Tensor& x) {
  return activation(parse_activation(kind), x);
}

inline Tensor gelu(const Tensor& x) { return activation(Activation::gelu, x); }
inline Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }

// --- shape manipulation ---------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor result(std::move(shape), x.values());
  if (detail::should_record({&x})) {
    detail::record("reshape", result, [x](std::span<const double> g) { x.accumulate_grad(g); });
  }
  return result;
}

// Concatenates tensors along axis 0; trailing dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                           shape_str(p.shape()));
    }
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor result(shape, std::move(out));
  if (detail::should_record(parts)) {
    detail::record("concat", result, [parts](std::span<const double> g) {
      std::size_t offset = 0;
      for (const auto& p : parts) {
        p.accumulate_grad(g.subspan(offset, p.numel()));
        offset += p.numel();
      }
    });
  }
  return result;
}

// Rows [begin, end) along axis 0.
inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + begin * inner, x.data().begin() + end * inner);
  Tensor result(shape, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("slice", result, [x, begin, inner](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      std::copy(g.begin(), g.end(), gx.begin() + begin * inner);
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// --- channel broadcasting over [C,H,W] ------------------------------------

inline Tensor mul_channel(const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 3, "mul_channel");
  if (v.numel() != x.dim(0)) {
    throw DimensionError("mul_channel: " + std::to_string(v.numel()) + " weights for " +
                         std::to_string(x.dim(0)) + " channels");
  }
  const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = x[c * plane + p] * v[c];
  Tensor result(x.shape(), std::move(out));
  if (detail::should_record({&x, &v})) {
    detail::record("mul_channel", result, [x, v, channels, plane](std::span<const double> g) {
      std::vector<double> gx(x.numel()), gv(channels, 0.0);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
          gx[c * plane + p] = g[c * plane + p] * v[c];
          gv[c] += g[c * plane + p] * x[c * plane + p];
        }
      }
      x.accumulate_grad(gx);
      v.accumulate_grad(gv);
    });
  }
  return result;
}

// --- linear algebra on small vectors/matrices ------------------------------

// y = W x (+ b). W is [rows, cols], x is [cols].
inline Tensor linear(const Tensor& weight, const Tensor& x, const Tensor& bias = Tensor()) {
  detail::require_rank(weight, 2, "linear");
  const std::size_t rows = weight.dim(0), cols = weight.dim(1);
  if (x.numel() != cols) {
    throw DimensionError("linear: weight " + shape_str(weight.shape()) + " applied to vector of " +
                         std::to_string(x.numel()));
  }
  if (bias.defined() && bias.numel() != rows) {
    throw DimensionError("linear: bias of " + std::to_string(bias.numel()) + " for " +
                         std::to_string(rows) + " outputs");
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = bias.defined() ? bias[r] : 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += weight[r * cols + c] * x[c];
    out[r] = acc;
  }
  Tensor result({rows}, std::move(out));
  if (detail::should_record({&weight, &x, &bias})) {
    detail::record("linear", result, [weight, x, bias, rows, cols](std::span<const double> g) {
      std::vector<double> gw(rows * cols), gx(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          gw[r * cols + c] = g[r] * x[c];
          gx[c] += g[r] * weight[r * cols + c];
        }
      }
      weight.accumulate_grad(gw);
      x.accumulate_grad(gx);
      if (bias.defined()) bias.accumulate_grad(g);
    });
  }
  return result;
}

// u v^T for vectors u [m], v [n].
inline Tensor outer(const Tensor& u, const Tensor& v) {
  const std::size_t m = u.numel(), n = v.numel();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = u[i] * v[j];
  Tensor result({m, n}, std::move(out));
  if (detail::should_record({&u, &v})) {
    detail::record("outer", result, [u, v, m, n](std::span<const double> g) {
      std::vector<double> gu(m, 0.0), gv(n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          gu[i] += g[i * n + j] * v[j];
          gv[j] += g[i * n + j] * u[i];
        }
      }
      u.accumulate_grad(gu);
      v.accumulate_grad(gv);
    });
  }
  return result;
}

inline Tensor diag(const Tensor& v) {
  const std::size_t n = v.numel();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = v[i];
  Tensor result({n, n}, std::move(out));
  if (detail::should_record({&v})) {
    detail::record("diag", result, [v, n](std::span<const double> g) {
      std::vector<double> gv(n);
      for (std::size_t i = 0; i < n; ++i) gv[i] = g[i * n + i];
      v.accumulate_grad(gv);
    });
  }
  return result;
}

// Entries with |x| < tau become exactly zero (and pass no gradient).
inline Tensor threshold_zero(const Tensor& x, double tau) {
  return detail::unary(
      "threshold_zero", x, [tau](double v) { return std::abs(v) < tau ? 0.0 : v; },
      [tau](double v) { return std::abs(v) < tau ? 0.0 : 1.0; });
}

// Gathers columns of a [rows, cols] matrix in the given order.
inline Tensor select_columns(const Tensor& m, const std::vector<std::size_t>& columns) {
  detail::require_rank(m, 2, "select_columns");
  const std::size_t rows = m.dim(0), cols = m.dim(1), k = columns.size();
  for (std::size_t c : columns) {
    if (c >= cols) throw ArgumentError("select_columns: column " + std::to_string(c) + " out of range");
  }
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = m[r * cols + columns[j]];
  Tensor result({rows, k}, std::move(out));
  if (detail::should_record({&m})) {
    detail::record("select_columns", result, [m, columns, rows, cols, k](std::span<const double> g) {
      std::vector<double> gm(m.numel(), 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) gm[r * cols + columns[j]] += g[r * k + j];
      m.accumulate_grad(gm);
    });
  }
  return result;
}

// --- convolutions ---------------------------------------------------------

inline std::size_t conv_output_size(std::size_t in, std::size_t pad, std::size_t k, std::size_t dilation,
                                    std::size_t stride) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * pad) -
                              static_cast<std::ptrdiff_t>(dilation * (k - 1)) - 1;
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

/// Per-channel k×k convolution with zero padding dilation·(k−1)/2.
inline Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel, std::size_t dilation = 1,
                               std::size_t stride = 1) {
  detail::require_rank(x, 3, "conv2d_depthwise");
  detail::require_rank(kernel, 3, "conv2d_depthwise kernel");
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const std::size_t k = kernel.dim(1);
  if (kernel.dim(0) != channels) {
    throw DimensionError("conv2d_depthwise: input has " + std::to_string(channels) +
                         " channels, kernel " + shape_str(kernel.shape()));
  }
  if (k % 2 == 0 || kernel.dim(2) != k) {
    throw DimensionError("conv2d_depthwise: kernel must be square with odd size, got " +
                         shape_str(kernel.shape()));
  }
  if (dilation < 1 || stride < 1) throw ArgumentError("conv2d_depthwise: dilation and stride must be >= 1");
  const std::size_t pad = dilation * (k - 1) / 2;
  const std::size_t out_h = conv_output_size(height, pad, k, dilation, stride);
  const std::size_t out_w = conv_output_size(width, pad, k, dilation, stride);

  // Visits every (output, input, tap) triple that lies inside the image.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky * dilation) - static_cast<std::ptrdiff_t>(pad);
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx * dilation) - static_cast<std::ptrdiff_t>(pad);
          const std::size_t kidx = (c * k + ky) * k + kx;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride) + dx;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              fn((c * out_h + oy) * out_w + ox, (c * height + static_cast<std::size_t>(iy)) * width +
                                                    static_cast<std::size_t>(ix),
                 kidx);
            }
          }
        }
      }
    }
  };

  std::vector<double> out(channels * out_h * out_w, 0.0);
  auto xv = x.data();
  auto kv = kernel.data();
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t t) { out[o] += xv[i] * kv[t]; });
  Tensor result({channels, out_h, out_w}, std::move(out));
  if (detail::should_record({&x, &kernel})) {
    detail::record("conv2d_depthwise", result, [x, kernel, for_each_tap](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0), gk(kernel.numel(), 0.0);
      auto xv = x.data();
      auto kv = kernel.data();
      for_each_tap([&](std::size_t o, std::size_t i, std::size_t t) {
        gx[i] += g[o] * kv[t];
        gk[t] += g[o] * xv[i];
      });
      x.accumulate_grad(gx);
      kernel.accumulate_grad(gk);
    });
  }
  return result;
}

/// Per-pixel linear map across channels: out[o,p] = Σ_i W[o,i]·x[i,p] + b[o].
inline Tensor conv2d_pointwise(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  detail::require_rank(x, 3, "conv2d_pointwise");
  detail::require_rank(kernel, 2, "conv2d_pointwise kernel");
  const std::size_t cin = x.dim(0), cout = kernel.dim(0), plane = x.dim(1) * x.dim(2);
  if (kernel.dim(1) != cin) {
    throw DimensionError("conv2d_pointwise: kernel " + shape_str(kernel.shape()) + " for " +
                         std::to_string(cin) + " input channels");
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d_pointwise: bias of " + std::to_string(bias.numel()) + " for " +
                         std::to_string(cout) + " outputs");
  }
  std::vector<double> out(cout * plane);
  auto xv = x.data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* row = out.data() + o * plane;
    std::fill(row, row + plane, bias.defined() ? bias[o] : 0.0);
    for (std::size_t i = 0; i < cin; ++i) {
      const double w = kernel[o * cin + i];
      const double* src = xv.data() + i * plane;
      for (std::size_t p = 0; p < plane; ++p) row[p] += w * src[p];
    }
  }
  Tensor result({cout, x.dim(1), x.dim(2)}, std::move(out));
  if (detail::should_record({&x, &kernel, &bias})) {
    detail::record("conv2d_pointwise", result, [x, kernel, bias, cin, cout, plane](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0), gk(kernel.numel(), 0.0), gb(cout, 0.0);
      auto xv = x.data();
      for (std::size_t o = 0; o < cout; ++o) {
        const double* go = g.data() + o * plane;
        for (std::size_t p = 0; p < plane; ++p) gb[o] += go[p];
        for (std::size_t i = 0; i < cin; ++i) {
          const double w = kernel[o * cin + i];
          const double* src = xv.data() + i * plane;
          double* dst = gx.data() + i * plane;
          double acc = 0.0;
          for (std::size_t p = 0; p < plane; ++p) {
            dst[p] += go[p] * w;
            acc += go[p] * src[p];
          }
          gk[o * cin + i] = acc;
        }
      }
      x.accumulate_grad(gx);
      kernel.accumulate_grad(gk);
      if (bias.defined()) bias.accumulate_grad(gb);
    });
  }
  return result;
}

/// Dense k×k convolution, stride 1, zero padding (k−1)/2. Kernel is [Cout,Cin,k,k].
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const std::size_t cin = x.dim(0), height = x.dim(1), width = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin || kernel.dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d: bias of " + std::to_string(bias.numel()) + " for " +
                         std::to_string(cout) + " outputs");
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);

  // fn(out_row_ptr_offset, in_row_offset, tap, x0, x1): contiguous run of valid columns.
  auto for_each_run = [=](auto&& fn) {
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t tap = ((o * cin + i) * k + ky) * k + kx;
            const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
            for (std::ptrdiff_t oy = std::max<std::ptrdiff_t>(0, -dy); oy < std::min<std::ptrdiff_t>(h, h - dy); ++oy) {
              const std::size_t out_off = (o * height + static_cast<std::size_t>(oy)) * width;
              const std::size_t in_off = (i * height + static_cast<std::size_t>(oy + dy)) * width;
              fn(out_off, in_off, dx, tap, x0, x1);
            }
          }
        }
      }
    }
  };

  std::vector<double> out(cout * height * width, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    std::fill(out.begin() + o * height * width, out.begin() + (o + 1) * height * width,
              bias.defined() ? bias[o] : 0.0);
  auto xv = x.data();
  auto kv = kernel.data();
  for_each_run([&](std::size_t out_off, std::size_t in_off, std::ptrdiff_t dx, std::size_t tap,
                   std::ptrdiff_t x0, std::ptrdiff_t x1) {
    const double wt = kv[tap];
    for (std::ptrdiff_t ox = x0; ox < x1; ++ox) out[out_off + ox] += wt * xv[in_off + ox + dx];
  });
  Tensor result({cout, height, width}, std::move(out));
  if (detail::should_record({&x, &kernel, &bias})) {
    detail::record("conv2d", result, [x, kernel, bias, cout, height, width, for_each_run](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0), gk(kernel.numel(), 0.0), gb(cout, 0.0);
      auto xv = x.data();
      auto kv = kernel.data();
      const std::size_t plane = height * width;
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t p = 0; p < plane; ++p) gb[o] += g[o * plane + p];
      for_each_run([&](std::size_t out_off, std::size_t in_off, std::ptrdiff_t dx, std::size_t tap,
                       std::ptrdiff_t x0, std::ptrdiff_t x1) {
        const double wt = kv[tap];
        double acc = 0.0;
        for (std::ptrdiff_t ox = x0; ox < x1; ++ox) {
          gx[in_off + ox + dx] += g[out_off + ox] * wt;
          acc += g[out_off + ox] * xv[in_off + ox + dx];
        }
        gk[tap] += acc;
      });
      x.accumulate_grad(gx);
      kernel.accumulate_grad(gk);
      if (bias.defined()) bias.accumulate_grad(gb);
    });
  }
  return result;
}

// --- pooling ----------------------------------------------------------------

/// Windowed maximum; padded cells never win. Gradient goes to the first
/// maximal element of each window in row-major scan order.
inline Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride, std::size_t padding = 0) {
  detail::require_rank(x, 3, "maxpool2d");
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  if (window < 1 || stride < 1) throw ArgumentError("maxpool2d: window and stride must be >= 1");
  if (window > height + 2 * padding || window > width + 2 * padding) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                         shape_str(x.shape()));
  }
  if (padding >= window) throw ArgumentError("maxpool2d: padding must be smaller than the window");
  const std::size_t out_h = (height + 2 * padding - window) / stride + 1;
  const std::size_t out_w = (width + 2 * padding - window) / stride + 1;
  std::vector<double> out(channels * out_h * out_w);
  std::vector<std::size_t> argmax(out.size());
  auto xv = x.data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (std::size_t wy = 0; wy < window; ++wy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + wy) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t wx = 0; wx < window; ++wx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + wx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
            const std::size_t idx = (c * height + static_cast<std::size_t>(iy)) * width + static_cast<std::size_t>(ix);
            if (best_idx == std::numeric_limits<std::size_t>::max() || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (c * out_h + oy) * out_w + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  Tensor result({channels, out_h, out_w}, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("maxpool2d", result, [x, argmax](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// Per-channel spatial maximum, [C,H,W] -> [C,1,1].
inline Tensor global_maxpool(const Tensor& x) {
  detail::require_rank(x, 3, "global_maxpool");
  const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (plane == 0) throw DimensionError("global_maxpool: empty spatial extent");
  std::vector<double> out(channels);
  std::vector<std::size_t> argmax(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t best = c * plane;
    for (std::size_t p = 1; p < plane; ++p)
      if (x[c * plane + p] > x[best]) best = c * plane + p;
    out[c] = x[best];
    argmax[c] = best;
  }
  Tensor result({channels, 1, 1}, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("global_maxpool", result, [x, argmax](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t c = 0; c < argmax.size(); ++c) gx[argmax[c]] += g[c];
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// --- normalization ----------------------------------------------------------

/// Max-shifted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  const std::size_t n = shape[axis];
  const std::size_t outer = shape_numel(Shape(shape.begin(), shape.begin() + axis));
  const std::size_t inner = shape_numel(Shape(shape.begin() + axis + 1, shape.end()));
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, x[base + i * inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(x[base + i * inner] - peak);
        total += out[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  Tensor result(shape, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("softmax", result, [x, result_data = result.values(), n, outer, inner](std::span<const double> g) {
      std::vector<double> gx(x.numel());
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * result_data[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = base + i * inner;
            gx[j] = result_data[j] * (g[j] - dot);
          }
        }
      }
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// Softmax over the H·W positions of each channel of a [C,H,W] tensor.
inline Tensor spatial_softmax(const Tensor& x) {
  detail::require_rank(x, 3, "spatial_softmax");
  const Shape shape = x.shape();
  return reshape(softmax(reshape(x, {shape[0], shape[1] * shape[2]}), 1), shape);
}

/// Normalizes each pixel's channel vector to zero mean and unit (population)
/// variance, then applies the per-channel affine gamma, beta.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_rank(x, 3, "layernorm");
  if (eps <= 0.0) throw ArgumentError("layernorm: eps must be positive");
  const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("layernorm: affine parameters must have " + std::to_string(channels) + " entries");
  }
  std::vector<double> normed(x.numel()), inv_std(plane), out(x.numel());
  const double cn = static_cast<double>(channels);
  for (std::size_t p = 0; p < plane; ++p) {
    double mu = 0.0;
    for (std::size_t c = 0; c < channels; ++c) mu += x[c * plane + p];
    mu /= cn;
    double var = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double d = x[c * plane + p] - mu;
      var += d * d;
    }
    var /= cn;
    inv_std[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = c * plane + p;
      normed[i] = (x[i] - mu) * inv_std[p];
      out[i] = gamma[c] * normed[i] + beta[c];
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (detail::should_record({&x, &gamma, &beta})) {
    detail::record("layernorm", result,
                   [x, gamma, beta, normed = std::move(normed), inv_std = std::move(inv_std), channels, plane,
                    cn](std::span<const double> g) {
                     std::vector<double> gx(x.numel()), gg(channels, 0.0), gb(channels, 0.0), dn(channels);
                     for (std::size_t p = 0; p < plane; ++p) {
                       double mean_dn = 0.0, mean_dn_n = 0.0;
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t i = c * plane + p;
                         gg[c] += g[i] * normed[i];
                         gb[c] += g[i];
                         dn[c] = g[i] * gamma[c];
                         mean_dn += dn[c];
                         mean_dn_n += dn[c] * normed[i];
                       }
                       mean_dn /= cn;
                       mean_dn_n /= cn;
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t i = c * plane + p;
                         gx[i] = inv_std[p] * (dn[c] - mean_dn - normed[i] * mean_dn_n);
                       }
                     }
                     x.accumulate_grad(gx);
                     gamma.accumulate_grad(gg);
                     beta.accumulate_grad(gb);
                   });
  }
  return result;
}

// --- resampling -------------------------------------------------------------

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-center source coordinates for resizing `in` samples to `out`.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, hi == lo ? 0.0 : src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling to out_h×out_w with half-pixel centers (no corner
/// alignment). Values are formed as a + t·(b − a) so constants map to
/// themselves exactly.
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ArgumentError("bilinear_resize: target size must be >= 1");
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const auto ty = detail::lerp_taps(height, out_h);
  const auto tx = detail::lerp_taps(width, out_w);
  std::vector<double> out(channels * out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t base = c * height * width;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& vy = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& vx = tx[ox];
        const double a = x[base + vy.lo * width + vx.lo], b = x[base + vy.lo * width + vx.hi];
        const double cc = x[base + vy.hi * width + vx.lo], d = x[base + vy.hi * width + vx.hi];
        const double top = a + vx.frac * (b - a);
        const double bottom = cc + vx.frac * (d - cc);
        out[(c * out_h + oy) * out_w + ox] = top + vy.frac * (bottom - top);
      }
    }
  }
  Tensor result({channels, out_h, out_w}, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("bilinear_resize", result, [x, ty, tx, channels, height, width, out_h, out_w](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = c * height * width;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& vy = ty[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& vx = tx[ox];
            const double go = g[(c * out_h + oy) * out_w + ox];
            const double gt = go * (1.0 - vy.frac), gbot = go * vy.frac;
            gx[base + vy.lo * width + vx.lo] += gt * (1.0 - vx.frac);
            gx[base + vy.lo * width + vx.hi] += gt * vx.frac;
            gx[base + vy.hi * width + vx.lo] += gbot * (1.0 - vx.frac);
            gx[base + vy.hi * width + vx.hi] += gbot * vx.frac;
          }
        }
      }
      x.accumulate_grad(gx);
    });
  }
  return result;
}

inline Tensor upsample2(const Tensor& x) { return bilinear_resize(x, x.dim(1) * 2, x.dim(2) * 2); }

inline Tensor downsample2(const Tensor& x) {
  return bilinear_resize(x, std::max<std::size_t>(1, x.dim(1) / 2), std::max<std::size_t>(1, x.dim(2) / 2));
}

namespace detail {

// Mirror index without repeating the edge sample (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * static_cast<std::ptrdiff_t>(n) - 2;
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

inline Tensor pad_reflect(const Tensor& x, std::size_t bottom, std::size_t right) {
  detail::require_rank(x, 3, "pad_reflect");
  if (bottom == 0 && right == 0) return x;
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const std::size_t out_h = height + bottom, out_w = width + right;
  std::vector<std::size_t> src(channels * out_h * out_w);
  std::vector<double> out(src.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const std::size_t o = (c * out_h + y) * out_w + xx;
        src[o] = (c * height + detail::reflect_index(static_cast<std::ptrdiff_t>(y), height)) * width +
                 detail::reflect_index(static_cast<std::ptrdiff_t>(xx), width);
        out[o] = x[src[o]];
      }
  Tensor result({channels, out_h, out_w}, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("pad_reflect", result, [x, src](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// Top-left out_h×out_w window of a [C,H,W] tensor.
inline Tensor crop(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "crop");
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  if (out_h > height || out_w > width) {
    throw DimensionError("crop: " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " exceeds " + shape_str(x.shape()));
  }
  if (out_h == height && out_w == width) return x;
  std::vector<double> out(channels * out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx)
        out[(c * out_h + y) * out_w + xx] = x[(c * height + y) * width + xx];
  Tensor result({channels, out_h, out_w}, std::move(out));
  if (detail::should_record({&x})) {
    detail::record("crop", result, [x, channels, height, width, out_h, out_w](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < out_h; ++y)
          for (std::size_t xx = 0; xx < out_w; ++xx)
            gx[(c * height + y) * width + xx] = g[(c * out_h + y) * out_w + xx];
      x.accumulate_grad(gx);
    });
  }
  return result;
}

// --- wavelets ---------------------------------------------------------------

struct HaarBands {
  Tensor ll, lh, hl, hh;
};

namespace detail {

// Sign pattern over the 2×2 block [a b; c d] for each subband.
constexpr double haar_sign[4][4] = {
    {1, 1, 1, 1},    // LL
    {1, -1, 1, -1},  // LH
    {1, 1, -1, -1},  // HL
    {1, -1, -1, 1},  // HH
};

inline Tensor haar_band(const Tensor& x, int band) {
  const std::size_t channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const std::size_t oh = height / 2, ow = width / 2;
  const double* s = haar_sign[band];
  std::vector<double> out(channels * oh * ow);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t top = (c * height + 2 * y) * width + 2 * xx;
        const std::size_t bot = top + width;
        out[(c * oh + y) * ow + xx] =
            0.5 * (s[0] * x[top] + s[1] * x[top + 1] + s[2] * x[bot] + s[3] * x[bot + 1]);
      }
  Tensor result({channels, oh, ow}, std::move(out));
  if (should_record({&x})) {
    record("haar_dwt2", result, [x, s, channels, height, width, oh, ow](std::span<const double> g) {
      std::vector<double> gx(x.numel(), 0.0);
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double v = 0.5 * g[(c * oh + y) * ow + xx];
            const std::size_t top = (c * height + 2 * y) * width + 2 * xx;
            const std::size_t bot = top + width;
            gx[top] += s[0] * v;
            gx[top + 1] += s[1] * v;
            gx[bot] += s[2] * v;
            gx[bot + 1] += s[3] * v;
          }
      x.accumulate_grad(gx);
    });
  }
  return result;
}

}  // namespace detail

/// One-level orthonormal 2-D Haar analysis. H and W must be even.
inline HaarBands haar_dwt2(const Tensor& x) {
  detail::require_rank(x, 3, "haar_dwt2");
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw DimensionError("haar_dwt2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  return {detail::haar_band(x, 0), detail::haar_band(x, 1), detail::haar_band(x, 2), detail::haar_band(x, 3)};
}

/// Exact inverse of haar_dwt2.
inline Tensor haar_idwt2(const Tensor& ll, const Tensor& lh, const Tensor& hl, const Tensor& hh) {
  detail::require_rank(ll, 3, "haar_idwt2");
  for (const Tensor* t : {&lh, &hl, &hh}) detail::require_same_shape(ll, *t, "haar_idwt2");
  const std::size_t channels = ll.dim(0), oh = ll.dim(1), ow = ll.dim(2);
  const std::size_t height = oh * 2, width = ow * 2;
  std::vector<double> out(channels * height * width);
  const Tensor* bands[4] = {&ll, &lh, &hl, &hh};
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t i = (c * oh + y) * ow + xx;
        const std::size_t top = (c * height + 2 * y) * width + 2 * xx;
        const std::size_t pos[4] = {top, top + 1, top + width, top + width + 1};
        for (int p = 0; p < 4; ++p) {
          double v = 0.0;
          for (int b = 0; b < 4; ++b) v += detail::haar_sign[b][p] * (*bands[b])[i];
          out[pos[p]] = 0.5 * v;
        }
      }
  Tensor result({channels, height, width}, std::move(out));
  if (detail::should_record({&ll, &lh, &hl, &hh})) {
    detail::record("haar_idwt2", result, [ll, lh, hl, hh, channels, oh, ow, height, width](std::span<const double> g) {
      std::vector<double> gb[4];
      for (auto& v : gb) v.assign(channels * oh * ow, 0.0);
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const std::size_t i = (c * oh + y) * ow + xx;
            const std::size_t top = (c * height + 2 * y) * width + 2 * xx;
            const std::size_t pos[4] = {top, top + 1, top + width, top + width + 1};
            for (int b = 0; b < 4; ++b) {
              double v = 0.0;
              for (int p = 0; p < 4; ++p) v += detail::haar_sign[b][p] * g[pos[p]];
              gb[b][i] = 0.5 * v;
            }
          }
      ll.accumulate_grad(gb[0]);
      lh.accumulate_grad(gb[1]);
      hl.accumulate_grad(gb[2]);
      hh.accumulate_grad(gb[3]);
    });
  }
  return result;
}

inline Tensor haar_idwt2(const HaarBands& bands) { return haar_idwt2(bands.ll, bands.lh, bands.hl, bands.hh); }

// --- selection ----------------------------------------------------------------

struct TopK {
  Tensor values;
  std::vector<std::size_t> indices;
};

// Indices of the k largest scores, descending; ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  order.resize(k);
  return order;
}

inline TopK topk(const Tensor& v, std::size_t k) {
  auto indices = topk_indices(v.data(), k);
  std::vector<double> values(k);
  for (std::size_t j = 0; j < k; ++j) values[j] = v[indices[j]];
  Tensor result({k}, std::move(values));
  if (detail::should_record({&v})) {
    detail::record("topk", result, [v, indices](std::span<const double> g) {
      std::vector<double> gv(v.numel(), 0.0);
      for (std::size_t j = 0; j < indices.size(); ++j) gv[indices[j]] += g[j];
      v.accumulate_grad(gv);
    });
  }
  return {std::move(result), std::move(indices)};
}

// --- regularization ---------------------------------------------------------

/// Inverted dropout. In training mode each element is kept with probability
/// 1 − rate and rescaled by 1/(1 − rate); the mask is a pure function of the
/// seed. In inference mode the input handle itself is returned.
inline Tensor dropout_mask(const Tensor& x, double rate, std::uint64_t seed, Mode mode) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw ArgumentError("dropout_mask: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::inference || rate == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  Tensor result(x.shape(), std::move(out));
  if (detail::should_record({&x})) {
    detail::record("dropout_mask", result, [x, mask = std::move(mask)](std::span<const double> g) {
      std::vector<double> gx(x.numel());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * mask[i];
      x.accumulate_grad(gx);
    });
  }
  return result;
}

}  // namespace cofusion::ops
