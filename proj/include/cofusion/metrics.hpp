#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cofusion/datasim.hpp"
#include "cofusion/error.hpp"
#include "cofusion/objective.hpp"

namespace cofusion {

namespace metrics_detail {

inline void require_same_shape(const HyperCube& a, const HyperCube& b, const char* metric) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(metric) + ": fused " + a.dims() + " vs reference " + b.dims());
  }
}

}  // namespace metrics_detail

// --- full reference -------------------------------------------------------------

inline double psnr(const HyperCube& fused, const HyperCube& ref, double peak = 1.0) {
  metrics_detail::require_same_shape(fused, ref, "psnr");
  if (!(peak > 0.0)) throw ArgumentError("psnr: peak must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const double d = fused.data[i] - ref.data[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(fused.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double ssim_metric(const HyperCube& fused, const HyperCube& ref) {
  metrics_detail::require_same_shape(fused, ref, "ssim");
  const SsimOptions opts = ssim_options_for(fused.height, fused.width);
  double total = 0.0;
  for (std::size_t b = 0; b < fused.bands; ++b) {
    total += ssim_band(fused.band(b), ref.band(b), fused.height, fused.width, opts);
  }
  return total / static_cast<double>(fused.bands);
}

struct SamResult {
  double degrees = 0.0;
  std::size_t skipped = 0;  // zero-norm pixels left out of the mean
};

inline SamResult sam_detailed(const HyperCube& fused, const HyperCube& ref) {
  metrics_detail::require_same_shape(fused, ref, "sam");
  const std::size_t plane = fused.plane();
  double total = 0.0;
  std::size_t counted = 0;
  SamResult out;
  for (std::size_t p = 0; p < plane; ++p) {
    double nx = 0.0, ny = 0.0;
    for (std::size_t b = 0; b < fused.bands; ++b) {
      const double x = fused.data[b * plane + p], y = ref.data[b * plane + p];
      nx += x * x;
      ny += y * y;
    }
    if (nx == 0.0 || ny == 0.0) {
      ++out.skipped;
      continue;
    }
    // angle between unit vectors as 2·atan2(|a-b|, |a+b|); stays accurate for near-parallel spectra
    const double ix = 1.0 / std::sqrt(nx), iy = 1.0 / std::sqrt(ny);
    double dm = 0.0, dp = 0.0;
    for (std::size_t b = 0; b < fused.bands; ++b) {
      const double u = fused.data[b * plane + p] * ix, v = ref.data[b * plane + p] * iy;
      dm += (u - v) * (u - v);
      dp += (u + v) * (u + v);
    }
    total += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
    ++counted;
  }
  if (counted == 0) throw UndefinedMetricError("sam: every pixel spectrum has zero norm");
  out.degrees = total / static_cast<double>(counted) * 180.0 / std::numbers::pi;
  return out;
}

inline double sam(const HyperCube& fused, const HyperCube& ref) { return sam_detailed(fused, ref).degrees; }

/// scale_ratio is low/high resolution, e.g. 0.25 for ×4.
inline double ergas(const HyperCube& fused, const HyperCube& ref, double scale_ratio) {
  metrics_detail::require_same_shape(fused, ref, "ergas");
  if (!(scale_ratio > 0.0)) throw ArgumentError("ergas: scale ratio must be positive");
  const auto n = static_cast<double>(fused.plane());
  double acc = 0.0;
  for (std::size_t b = 0; b < fused.bands; ++b) {
    const auto f = fused.band(b), r = ref.band(b);
    double sse = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double d = f[i] - r[i];
      sse += d * d;
      sum += r[i];
    }
    const double mu = sum / n;
    if (mu == 0.0) throw UndefinedMetricError("ergas: reference band " + std::to_string(b) + " has zero mean");
    acc += (sse / n) / (mu * mu);
  }
  return 100.0 * scale_ratio * std::sqrt(acc / static_cast<double>(fused.bands));
}

// --- no reference ------------------------------------------------------------------

inline constexpr std::size_t kQBlock = 32;

// Universal image quality index of one block pair.
inline double q_block(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  const double mean_term = mx * mx + my * my;
  const double var_term = vx + vy;
  if (mean_term == 0.0 && var_term == 0.0) return 1.0;
  if (var_term == 0.0) return 2.0 * mx * my / mean_term;
  if (mean_term == 0.0) return 2.0 * cxy / var_term;
  return 4.0 * cxy * mx * my / (var_term * mean_term);
}

/// Q averaged over non-overlapping block×block tiles (full tiles only). The
/// block shrinks to the image when the image is smaller.
inline double q_index(std::span<const double> x, std::span<const double> y, std::size_t height, std::size_t width,
                      std::size_t block = kQBlock) {
  if (x.size() != height * width || y.size() != height * width) {
    throw DimensionError("q_index: planes do not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t b = std::min({block, height, width});
  if (b == 0) throw DimensionError("q_index: empty image");
  double total = 0.0;
  std::size_t tiles = 0;
  std::vector<double> bx(b * b), by(b * b);
  for (std::size_t r0 = 0; r0 + b <= height; r0 += b) {
    for (std::size_t c0 = 0; c0 + b <= width; c0 += b) {
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < b; ++c) {
          bx[r * b + c] = x[(r0 + r) * width + c0 + c];
          by[r * b + c] = y[(r0 + r) * width + c0 + c];
        }
      total += q_block(bx, by);
      ++tiles;
    }
  }
  return total / static_cast<double>(tiles);
}

inline std::size_t resolution_ratio(const HyperCube& high, const HyperCube& low, const char* metric) {
  if (low.height == 0 || low.width == 0 || high.height % low.height != 0 || high.width % low.width != 0 ||
      high.height / low.height != high.width / low.width) {
    throw DimensionError(std::string(metric) + ": " + high.dims() + " is not an integer multiple of " + low.dims());
  }
  return high.height / low.height;
}

/// Spectral distortion: the fused cube is degraded to the LRHSI grid, then
/// inter-band Q values are compared pairwise with those of the LRHSI.
inline double d_lambda(const HyperCube& fused, const HyperCube& lrhsi) {
  if (fused.bands != lrhsi.bands) {
    throw DimensionError("d_lambda: fused has " + std::to_string(fused.bands) + " bands, lrhsi " +
                         std::to_string(lrhsi.bands));
  }
  if (fused.bands < 2) throw UndefinedMetricError("d_lambda needs at least 2 bands");
  const std::size_t s = resolution_ratio(fused, lrhsi, "d_lambda");
  const HyperCube low = s == 1 ? fused : wald_degrade(fused, DegradationSpec::for_scale(s));
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < fused.bands; ++i) {
    for (std::size_t j = i + 1; j < fused.bands; ++j) {
      const double qf = q_index(low.band(i), low.band(j), low.height, low.width);
      const double ql = q_index(lrhsi.band(i), lrhsi.band(j), lrhsi.height, lrhsi.width);
      total += std::abs(qf - ql);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

/// Spatial distortion against the band-mean intensity of the HRMSI.
inline double d_s(const HyperCube& fused, const HyperCube& hrmsi, const HyperCube& lrhsi) {
  if (fused.height != hrmsi.height || fused.width != hrmsi.width) {
    throw DimensionError("d_s: fused " + fused.dims() + " and hrmsi " + hrmsi.dims() + " differ in resolution");
  }
  if (fused.bands != lrhsi.bands) {
    throw DimensionError("d_s: fused " + fused.dims() + " and lrhsi " + lrhsi.dims() + " differ in band count");
  }
  const std::size_t s = resolution_ratio(fused, lrhsi, "d_s");
  HyperCube pan(hrmsi.height, hrmsi.width, 1);
  for (std::size_t m = 0; m < hrmsi.bands; ++m) {
    const auto band = hrmsi.band(m);
    for (std::size_t i = 0; i < band.size(); ++i) pan.data[i] += band[i];
  }
  for (auto& v : pan.data) v /= static_cast<double>(hrmsi.bands);
  const HyperCube pan_low = s == 1 ? pan : wald_degrade(pan, DegradationSpec::for_scale(s));
  const std::size_t low_block = std::max<std::size_t>(kQBlock / s, 2);
  double total = 0.0;
  for (std::size_t c = 0; c < fused.bands; ++c) {
    const double qh = q_index(fused.band(c), pan.band(0), fused.height, fused.width);
    const double ql = q_index(lrhsi.band(c), pan_low.band(0), lrhsi.height, lrhsi.width, low_block);
    total += std::abs(qh - ql);
  }
  return total / static_cast<double>(fused.bands);
}

inline double qnr(double d_lambda_value, double d_s_value) {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError(std::string("qnr: ") + name + " must lie in [0,1]");
  };
  check(d_lambda_value, "d_lambda");
  check(d_s_value, "d_s");
  return (1.0 - d_lambda_value) * (1.0 - d_s_value);
}

// --- report -----------------------------------------------------------------------

enum class MetricsMode { full_reference, no_reference, both };

inline std::string to_string(MetricsMode mode) {
  switch (mode) {
    case MetricsMode::full_reference: return "full-reference";
    case MetricsMode::no_reference: return "no-reference";
    case MetricsMode::both: return "both";
  }
  return "unknown";
}

struct MetricsReport {
  MetricsMode mode = MetricsMode::full_reference;
  std::optional<double> psnr, ssim, sam, ergas;
  std::optional<double> d_lambda, d_s, qnr;
};

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
  if (std::isnan(v)) return "\"nan\"";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Fixed key order, six decimals, absent fields omitted.
inline std::string to_json(const MetricsReport& r) {
  std::string out = "{\"mode\":\"" + to_string(r.mode) + "\"";
  auto field = [&](const char* key, const std::optional<double>& v) {
    if (v) out += std::string(",\"") + key + "\":" + format_metric(*v);
  };
  field("psnr", r.psnr);
  field("ssim", r.ssim);
  field("sam", r.sam);
  field("ergas", r.ergas);
  field("d_lambda", r.d_lambda);
  field("d_s", r.d_s);
  field("qnr", r.qnr);
  return out + "}";
}

inline MetricsReport full_reference_report(const HyperCube& fused, const HyperCube& ref, double scale_ratio) {
  MetricsReport r;
  r.mode = MetricsMode::full_reference;
  r.psnr = psnr(fused, ref);
  r.ssim = ssim_metric(fused, ref);
  r.sam = sam(fused, ref);
  r.ergas = ergas(fused, ref, scale_ratio);
  return r;
}

inline MetricsReport no_reference_report(const HyperCube& fused, const HyperCube& lrhsi, const HyperCube& hrmsi) {
  MetricsReport r;
  r.mode = MetricsMode::no_reference;
  r.d_lambda = d_lambda(fused, lrhsi);
  r.d_s = d_s(fused, hrmsi, lrhsi);
  r.qnr = qnr(*r.d_lambda, *r.d_s);
  return r;
}

}  // namespace cofusion
