#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cofusion/error.hpp"
#include "cofusion/model.hpp"
#include "cofusion/ops.hpp"
#include "cofusion/tensor.hpp"

namespace cofusion {

// --- losses -------------------------------------------------------------------

inline Tensor l1_loss(const Tensor& pred, const Tensor& ref) {
  if (pred.shape() != ref.shape()) {
    throw DimensionError("l1_loss: prediction " + shape_str(pred.shape()) + " vs reference " + shape_str(ref.shape()));
  }
  return ops::mean(ops::abs(ops::sub(pred, ref)));
}

/// Gaussian-weighted SSIM over valid sliding windows. Constants assume unit
/// dynamic range.
struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Largest odd window ≤ 11 that fits in an h×w image.
inline SsimOptions ssim_options_for(std::size_t height, std::size_t width) {
  SsimOptions opts;
  std::size_t fit = std::min({opts.window, height, width});
  if (fit % 2 == 0) --fit;
  opts.window = std::max<std::size_t>(fit, 1);
  return opts;
}

namespace ssim_detail {

// Separable valid-mode Gaussian filtering of an h×w plane and its adjoint.
class WindowFilter {
 public:
  WindowFilter(std::size_t height, std::size_t width, const SsimOptions& opts)
      : h_(height), w_(width), k_(opts.window), taps_(k_) {
    if (k_ % 2 == 0 || k_ < 1) throw ArgumentError("ssim: window must be odd, got " + std::to_string(k_));
    if (height < k_ || width < k_) {
      throw DimensionError("ssim: " + std::to_string(height) + "x" + std::to_string(width) +
                           " image is smaller than the " + std::to_string(k_) + "x" + std::to_string(k_) + " window");
    }
    const double r = static_cast<double>(k_ / 2);
    double total = 0.0;
    for (std::size_t i = 0; i < k_; ++i) {
      const double d = static_cast<double>(i) - r;
      taps_[i] = std::exp(-d * d / (2.0 * opts.sigma * opts.sigma));
      total += taps_[i];
    }
    for (auto& t : taps_) t /= total;
    oh_ = h_ - k_ + 1;
    ow_ = w_ - k_ + 1;
  }

  std::size_t out_h() const noexcept { return oh_; }
  std::size_t out_w() const noexcept { return ow_; }
  const std::vector<double>& taps() const noexcept { return taps_; }

  std::vector<double> apply(std::span<const double> img) const {
    std::vector<double> rows(h_ * ow_, 0.0), out(oh_ * ow_, 0.0);
    for (std::size_t y = 0; y < h_; ++y)
      for (std::size_t x = 0; x < ow_; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < k_; ++k) acc += taps_[k] * img[y * w_ + x + k];
        rows[y * ow_ + x] = acc;
      }
    for (std::size_t y = 0; y < oh_; ++y)
      for (std::size_t x = 0; x < ow_; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < k_; ++k) acc += taps_[k] * rows[(y + k) * ow_ + x];
        out[y * ow_ + x] = acc;
      }
    return out;
  }

  std::vector<double> adjoint(std::span<const double> g) const {
    std::vector<double> rows(h_ * ow_, 0.0), out(h_ * w_, 0.0);
    for (std::size_t y = 0; y < oh_; ++y)
      for (std::size_t x = 0; x < ow_; ++x)
        for (std::size_t k = 0; k < k_; ++k) rows[(y + k) * ow_ + x] += taps_[k] * g[y * ow_ + x];
    for (std::size_t y = 0; y < h_; ++y)
      for (std::size_t x = 0; x < ow_; ++x)
        for (std::size_t k = 0; k < k_; ++k) out[y * w_ + x + k] += taps_[k] * rows[y * ow_ + x];
    return out;
  }

 private:
  std::size_t h_, w_, k_, oh_ = 0, ow_ = 0;
  std::vector<double> taps_;
};

struct BandStats {
  std::vector<double> mx, my, exx, eyy, exy, s;
  double mean = 0.0;
};

inline BandStats band_stats(const WindowFilter& f, std::span<const double> x, std::span<const double> y,
                            const SsimOptions& opts) {
  const std::size_t n = x.size();
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  BandStats st{f.apply(x), f.apply(y), f.apply(xx), f.apply(yy), f.apply(xy), {}, 0.0};
  st.s.resize(st.mx.size());
  double total = 0.0;
  for (std::size_t p = 0; p < st.s.size(); ++p) {
    const double mx = st.mx[p], my = st.my[p];
    const double vx = st.exx[p] - mx * mx, vy = st.eyy[p] - my * my, cxy = st.exy[p] - mx * my;
    st.s[p] = ((2.0 * mx * my + opts.c1) * (2.0 * cxy + opts.c2)) /
              ((mx * mx + my * my + opts.c1) * (vx + vy + opts.c2));
    total += st.s[p];
  }
  st.mean = total / static_cast<double>(st.s.size());
  return st;
}

}  // namespace ssim_detail

/// Mean SSIM of two h×w planes.
inline double ssim_band(std::span<const double> x, std::span<const double> y, std::size_t height, std::size_t width,
                        const SsimOptions& opts = {}) {
  if (x.size() != height * width || y.size() != height * width) {
    throw DimensionError("ssim_band: planes do not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  const ssim_detail::WindowFilter filter(height, width, opts);
  return ssim_detail::band_stats(filter, x, y, opts).mean;
}

/// Band-averaged SSIM of two [C,H,W] tensors, differentiable in both.
inline Tensor ssim_mean(const Tensor& pred, const Tensor& ref, const SsimOptions& opts) {
  if (pred.shape() != ref.shape() || pred.rank() != 3) {
    throw DimensionError("ssim: prediction " + shape_str(pred.shape()) + " vs reference " + shape_str(ref.shape()));
  }
  const std::size_t bands = pred.dim(0), h = pred.dim(1), w = pred.dim(2), plane = h * w;
  const ssim_detail::WindowFilter filter(h, w, opts);
  std::vector<ssim_detail::BandStats> stats;
  double total = 0.0;
  for (std::size_t c = 0; c < bands; ++c) {
    stats.push_back(ssim_detail::band_stats(filter, pred.data().subspan(c * plane, plane),
                                            ref.data().subspan(c * plane, plane), opts));
    total += stats.back().mean;
  }
  Tensor result = Tensor::scalar(total / static_cast<double>(bands));
  if (cofusion::detail::should_record({&pred, &ref})) {
    cofusion::detail::record("ssim", result, [pred, ref, opts, filter, stats = std::move(stats), bands,
                                              plane](std::span<const double> g) {
      std::vector<double> gp(pred.numel()), gr(ref.numel());
      const std::size_t npos = filter.out_h() * filter.out_w();
      const double scale = g[0] / static_cast<double>(bands * npos);
      std::vector<double> g_mx(npos), g_my(npos), g_exx(npos), g_eyy(npos), g_exy(npos);
      for (std::size_t c = 0; c < bands; ++c) {
        const auto& st = stats[c];
        for (std::size_t p = 0; p < npos; ++p) {
          const double mx = st.mx[p], my = st.my[p];
          const double a1 = 2.0 * mx * my + opts.c1;
          const double b1 = mx * mx + my * my + opts.c1;
          const double a2 = 2.0 * (st.exy[p] - mx * my) + opts.c2;
          const double b2 = (st.exx[p] - mx * mx) + (st.eyy[p] - my * my) + opts.c2;
          const double s = st.s[p] * scale;
          g_mx[p] = s * (2.0 * my / a1 - 2.0 * mx / b1 - 2.0 * my / a2 + 2.0 * mx / b2);
          g_my[p] = s * (2.0 * mx / a1 - 2.0 * my / b1 - 2.0 * mx / a2 + 2.0 * my / b2);
          g_exx[p] = -s / b2;
          g_eyy[p] = -s / b2;
          g_exy[p] = 2.0 * s / a2;
        }
        const auto t_mx = filter.adjoint(g_mx), t_my = filter.adjoint(g_my);
        const auto t_exx = filter.adjoint(g_exx), t_eyy = filter.adjoint(g_eyy), t_exy = filter.adjoint(g_exy);
        for (std::size_t i = 0; i < plane; ++i) {
          const double x = pred[c * plane + i], y = ref[c * plane + i];
          gp[c * plane + i] = t_mx[i] + 2.0 * x * t_exx[i] + y * t_exy[i];
          gr[c * plane + i] = t_my[i] + 2.0 * y * t_eyy[i] + x * t_exy[i];
        }
      }
      pred.accumulate_grad(gp);
      ref.accumulate_grad(gr);
    });
  }
  return result;
}

// 1 − band-averaged SSIM, window shrunk to fit small images.
inline Tensor ssim_loss(const Tensor& pred, const Tensor& ref) {
  if (pred.rank() != 3) throw DimensionError("ssim_loss: expected [C,H,W], got " + shape_str(pred.shape()));
  return ops::one_minus(ssim_mean(pred, ref, ssim_options_for(pred.dim(1), pred.dim(2))));
}

inline constexpr double kDefaultSsimWeight = 0.1;

struct LossBreakdown {
  double l1 = 0.0;
  double ssim_loss = 0.0;
  double total = 0.0;
  double lambda = kDefaultSsimWeight;
  Tensor total_tensor;  // differentiable total
};

inline LossBreakdown total_loss(const Tensor& pred, const Tensor& ref, double lambda = kDefaultSsimWeight) {
  if (!(lambda >= 0.0)) throw ArgumentError("total_loss: lambda must be >= 0");
  const Tensor l1 = l1_loss(pred, ref);
  const Tensor ss = ssim_loss(pred, ref);
  LossBreakdown out;
  out.l1 = l1.item();
  out.ssim_loss = ss.item();
  out.lambda = lambda;
  out.total_tensor = ops::add(l1, ops::scale(ss, lambda));
  out.total = out.total_tensor.item();
  return out;
}

// --- AdamW ----------------------------------------------------------------------

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay:
///   θ ← θ·(1 − lr·wd)
///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
///   θ ← θ − lr·m̂/(√v̂ + ε),  m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  const AdamWOptions& options() const noexcept { return options_; }
  std::size_t step_count() const noexcept { return steps_; }
  const std::map<std::string, Moments>& moments() const noexcept { return moments_; }

  // Updates every parameter in place, then clears all gradients.
  void step(ModelParams& params, std::optional<double> lr_override = std::nullopt) {
    for (const auto& [path, t] : params) {
      if (!t.has_grad()) throw StateError("AdamW: parameter '" + path + "' has no gradient");
    }
    const double lr = lr_override.value_or(options_.lr);
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double bias1 = 1.0 - std::pow(options_.beta1, t);
    const double bias2 = 1.0 - std::pow(options_.beta2, t);
    for (auto& [path, param] : params) {
      auto& mom = moments_[path];
      if (mom.m.empty()) {
        mom.m.assign(param.numel(), 0.0);
        mom.v.assign(param.numel(), 0.0);
      } else if (mom.m.size() != param.numel()) {
        throw StateError("AdamW: parameter '" + path + "' changed size");
      }
      auto theta = param.mutable_data();
      auto grad = param.grad();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        theta[i] *= 1.0 - lr * options_.weight_decay;
        mom.m[i] = options_.beta1 * mom.m[i] + (1.0 - options_.beta1) * g;
        mom.v[i] = options_.beta2 * mom.v[i] + (1.0 - options_.beta2) * g * g;
        const double m_hat = mom.m[i] / bias1;
        const double v_hat = mom.v[i] / bias2;
        theta[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      }
    }
    params.clear_grads();
  }

 private:
  AdamWOptions options_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

// --- training loop ----------------------------------------------------------------

struct Sample {
  Tensor lrhsi;
  Tensor hrmsi;
  Tensor gt;
};

enum class Schedule { constant, cosine };

inline Schedule parse_schedule(std::string_view name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine") return Schedule::cosine;
  throw ConfigError("unknown learning-rate schedule '" + std::string(name) + "'");
}

struct TrainOptions {
  std::size_t steps = 300;
  double lr = 1e-3;
  double lr_min = 1e-4;
  Schedule schedule = Schedule::cosine;
  double weight_decay = 1e-4;
  double lambda = kDefaultSsimWeight;
  std::uint64_t seed = 42;

  double lr_at(std::size_t step) const {
    if (schedule == Schedule::constant || steps == 0) return lr;
    const double progress = static_cast<double>(step) / static_cast<double>(steps);
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct LossRecord {
  std::size_t step = 0;
  double l1 = 0.0;
  double ssim_loss = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

inline std::string to_ndjson(const LossRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["l1"] = r.l1;
  j["ssim_loss"] = r.ssim_loss;
  j["total"] = r.total;
  j["lr"] = r.lr;
  return j.dump();
}

struct TrainResult {
  ModelParams params;
  std::vector<LossRecord> log;
};

inline void check_dataset(const std::vector<Sample>& data, const ModelConfig& config) {
  if (data.empty()) throw DataError("training set is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    try {
      check_input_shapes(s.lrhsi, s.hrmsi, config);
    } catch (const DimensionError& e) {
      throw DataError("sample " + std::to_string(i) + ": " + e.what());
    }
    const Shape want{config.hsi_bands, s.hrmsi.dim(1), s.hrmsi.dim(2)};
    if (s.gt.shape() != want) {
      throw DataError("sample " + std::to_string(i) + ": ground truth " + shape_str(s.gt.shape()) + ", expected " +
                      shape_str(want));
    }
  }
}

/// Batch-size-1 AdamW training, cycling through the samples in order. The
/// result is a pure function of (data, config, options, initial params).
inline TrainResult train_loop(const std::vector<Sample>& data, const ModelConfig& config, const TrainOptions& options,
                              std::optional<ModelParams> initial = std::nullopt,
                              const std::function<void(const LossRecord&)>& on_step = {}) {
  config.validate();
  check_dataset(data, config);
  TrainResult result{initial ? initial->clone() : init_params(config, options.seed), {}};
  AdamW optimizer({options.lr, 0.9, 0.999, 1e-8, options.weight_decay});
  for (std::size_t step = 0; step < options.steps; ++step) {
    const Sample& sample = data[step % data.size()];
    const double lr = options.lr_at(step);
    Graph graph(Mode::training);
    ForwardContext ctx(Mode::training, splitmix64(options.seed ^ (0xa24baed4963ee407ULL * (step + 1))));
    const Tensor pred = cofusion_forward(sample.lrhsi, sample.hrmsi, result.params, config, ctx);
    const LossBreakdown loss = total_loss(pred, sample.gt, options.lambda);
    if (!std::isfinite(loss.total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step));
    }
    const LossRecord record{step, loss.l1, loss.ssim_loss, loss.total, lr};
    result.log.push_back(record);
    if (on_step) on_step(record);
    graph.backward(loss.total_tensor);
    optimizer.step(result.params, lr);
  }
  return result;
}

}  // namespace cofusion
