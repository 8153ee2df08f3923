#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cofusion/error.hpp"
#include "cofusion/io.hpp"
#include "cofusion/ops.hpp"
#include "cofusion/rng.hpp"
#include "cofusion/tensor.hpp"

namespace cofusion {

/// H×W×C image stored band-major: data[(band·H + row)·W + col].
struct HyperCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> data;
  std::optional<std::vector<double>> wavelengths_nm;

  HyperCube() = default;
  HyperCube(std::size_t h, std::size_t w, std::size_t b, double fill = 0.0)
      : height(h), width(w), bands(b), data(h * w * b, fill) {}

  std::size_t plane() const noexcept { return height * width; }
  std::size_t size() const noexcept { return data.size(); }

  double& at(std::size_t band, std::size_t row, std::size_t col) {
    return data[(band * height + row) * width + col];
  }
  double at(std::size_t band, std::size_t row, std::size_t col) const {
    return data[(band * height + row) * width + col];
  }

  std::span<const double> band(std::size_t b) const {
    return std::span<const double>(data).subspan(b * plane(), plane());
  }

  std::string dims() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(bands);
  }

  void validate() const {
    if (data.size() != height * width * bands) {
      throw DimensionError("cube " + dims() + " holds " + std::to_string(data.size()) + " values");
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw DataError("cube " + dims() + " contains a non-finite value");
    }
    if (wavelengths_nm) {
      if (wavelengths_nm->size() != bands) {
        throw DataError("cube has " + std::to_string(bands) + " bands but " +
                        std::to_string(wavelengths_nm->size()) + " wavelengths");
      }
      for (std::size_t i = 1; i < wavelengths_nm->size(); ++i) {
        if (!((*wavelengths_nm)[i] > (*wavelengths_nm)[i - 1])) {
          throw DataError("wavelengths must be strictly increasing");
        }
      }
    }
  }

  bool same_shape(const HyperCube& other) const {
    return height == other.height && width == other.width && bands == other.bands;
  }
};

inline Tensor to_tensor(const HyperCube& cube) { return Tensor({cube.bands, cube.height, cube.width}, cube.data); }

inline HyperCube to_cube(const Tensor& t, bool clip_unit = false) {
  if (t.rank() != 3) throw DimensionError("to_cube: expected [C,H,W] tensor, got " + shape_str(t.shape()));
  HyperCube cube;
  cube.bands = t.dim(0);
  cube.height = t.dim(1);
  cube.width = t.dim(2);
  cube.data = t.values();
  if (clip_unit) {
    for (auto& v : cube.data) v = std::clamp(v, 0.0, 1.0);
  }
  return cube;
}

// --- degradation ------------------------------------------------------------

/// Row-stochastic spectral response: rows are MSI bands, columns HSI bands.
struct SpectralResponse {
  std::size_t msi_bands = 0;
  std::size_t hsi_bands = 0;
  std::vector<double> weights;  // row-major msi_bands × hsi_bands

  double operator()(std::size_t m, std::size_t b) const { return weights[m * hsi_bands + b]; }

  void validate() const {
    if (weights.size() != msi_bands * hsi_bands || msi_bands == 0 || hsi_bands == 0) {
      throw DimensionError("spectral response must be " + std::to_string(msi_bands) + "x" +
                           std::to_string(hsi_bands));
    }
    for (std::size_t m = 0; m < msi_bands; ++m) {
      double total = 0.0;
      for (std::size_t b = 0; b < hsi_bands; ++b) {
        if (!((*this)(m, b) >= 0.0)) throw DataError("spectral response row " + std::to_string(m) + " has a negative entry");
        total += (*this)(m, b);
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw DataError("spectral response row " + std::to_string(m) + " sums to " + std::to_string(total));
      }
    }
  }
};

inline std::size_t min_kernel_size(double sigma) {
  auto k = static_cast<std::size_t>(std::ceil(6.0 * sigma));
  if (k % 2 == 0) ++k;
  return std::max<std::size_t>(k, 1);
}

struct DegradationSpec {
  double blur_sigma = 2.0;
  std::size_t kernel_size = 13;
  std::size_t scale = 4;
  SpectralResponse srf;

  // σ = scale/2 with the smallest admissible odd kernel.
  static DegradationSpec for_scale(std::size_t scale) {
    DegradationSpec spec;
    spec.scale = scale;
    spec.blur_sigma = static_cast<double>(scale) / 2.0;
    spec.kernel_size = min_kernel_size(spec.blur_sigma);
    return spec;
  }

  void validate_blur() const {
    if (scale < 1) throw ArgumentError("degradation scale must be >= 1");
    if (!(blur_sigma > 0.0)) throw ArgumentError("blur sigma must be positive");
    if (kernel_size % 2 == 0) throw ArgumentError("blur kernel size must be odd");
    if (kernel_size < min_kernel_size(blur_sigma)) {
      throw ArgumentError("blur kernel size " + std::to_string(kernel_size) + " is below ceil(6*sigma) = " +
                          std::to_string(min_kernel_size(blur_sigma)));
    }
  }
};

// Normalized 1-D Gaussian taps; the 2-D blur kernel is their outer product.
inline std::vector<double> gaussian_taps(double sigma, std::size_t size) {
  std::vector<double> taps(size);
  const double r = static_cast<double>(size / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - r;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

/// Per-band Gaussian blur (reflect padding) followed by decimation that keeps
/// pixel (scale/2, scale/2) of every scale×scale block.
inline HyperCube wald_degrade(const HyperCube& gt, const DegradationSpec& spec) {
  spec.validate_blur();
  const std::size_t s = spec.scale;
  if (gt.height % s != 0 || gt.width % s != 0) {
    throw DimensionError("wald_degrade: " + gt.dims() + " is not divisible by scale " + std::to_string(s));
  }
  const auto taps = gaussian_taps(spec.blur_sigma, spec.kernel_size);
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(spec.kernel_size / 2);
  const std::size_t h = gt.height, w = gt.width;
  HyperCube out(h / s, w / s, gt.bands);
  out.wavelengths_nm = gt.wavelengths_nm;
  std::vector<double> rows(h * w);
  for (std::size_t b = 0; b < gt.bands; ++b) {
    const auto band = gt.band(b);
    // Horizontal pass over the full band, anchored at the center sample so
    // that constant rows are reproduced exactly.
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double anchor = band[y * w + x];
        double acc = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          const std::size_t xi = ops::detail::reflect_index(static_cast<std::ptrdiff_t>(x) + k, w);
          acc += taps[static_cast<std::size_t>(k + r)] * (band[y * w + xi] - anchor);
        }
        rows[y * w + x] = anchor + acc;
      }
    }
    // Vertical pass only where samples are kept.
    for (std::size_t oy = 0; oy < out.height; ++oy) {
      const std::size_t y = oy * s + s / 2;
      for (std::size_t ox = 0; ox < out.width; ++ox) {
        const std::size_t x = ox * s + s / 2;
        const double anchor = rows[y * w + x];
        double acc = 0.0;
        for (std::ptrdiff_t k = -r; k <= r; ++k) {
          const std::size_t yi = ops::detail::reflect_index(static_cast<std::ptrdiff_t>(y) + k, h);
          acc += taps[static_cast<std::size_t>(k + r)] * (rows[yi * w + x] - anchor);
        }
        out.at(b, oy, ox) = anchor + acc;
      }
    }
  }
  return out;
}

/// Multiplies every pixel spectrum by the response matrix.
inline HyperCube apply_srf(const HyperCube& gt, const SpectralResponse& srf) {
  if (srf.hsi_bands != gt.bands) {
    throw DimensionError("apply_srf: response expects " + std::to_string(srf.hsi_bands) + " bands, cube has " +
                         std::to_string(gt.bands));
  }
  HyperCube out(gt.height, gt.width, srf.msi_bands);
  const std::size_t plane = gt.plane();
  for (std::size_t m = 0; m < srf.msi_bands; ++m) {
    // Anchored at the row's dominant band: a flat spectrum and a one-hot row
    // both reproduce their input exactly.
    const auto row = std::span<const double>(srf.weights).subspan(m * srf.hsi_bands, srf.hsi_bands);
    const std::size_t a = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    for (std::size_t p = 0; p < plane; ++p) {
      const double anchor = gt.data[a * plane + p];
      double acc = 0.0;
      for (std::size_t b = 0; b < gt.bands; ++b) acc += srf(m, b) * (gt.data[b * plane + p] - anchor);
      out.data[m * plane + p] = anchor + acc;
    }
  }
  return out;
}

/// Gaussian responses centred at evenly spaced band positions, each row
/// normalized to sum to one. Width is 0.6 of the centre spacing.
inline SpectralResponse default_srf(std::size_t hsi_bands, std::size_t msi_bands) {
  if (msi_bands < 1 || hsi_bands < 1 || msi_bands > hsi_bands) {
    throw ArgumentError("default_srf: need 1 <= msi_bands <= hsi_bands, got " + std::to_string(msi_bands) +
                        " and " + std::to_string(hsi_bands));
  }
  SpectralResponse srf{msi_bands, hsi_bands, std::vector<double>(msi_bands * hsi_bands)};
  const double last = static_cast<double>(hsi_bands - 1);
  const double spacing = msi_bands > 1 ? last / static_cast<double>(msi_bands - 1) : static_cast<double>(hsi_bands);
  const double width = std::max(0.6 * spacing, 0.5);
  for (std::size_t m = 0; m < msi_bands; ++m) {
    const double centre = msi_bands > 1 ? static_cast<double>(m) * spacing : last / 2.0;
    double total = 0.0;
    for (std::size_t b = 0; b < hsi_bands; ++b) {
      const double d = static_cast<double>(b) - centre;
      srf.weights[m * hsi_bands + b] = std::exp(-d * d / (2.0 * width * width));
      total += srf.weights[m * hsi_bands + b];
    }
    for (std::size_t b = 0; b < hsi_bands; ++b) srf.weights[m * hsi_bands + b] /= total;
  }
  return srf;
}

inline SpectralResponse srf_from_json(const nlohmann::json& j) {
  const auto rows = j.is_object() ? j.at("srf") : j;
  if (!rows.is_array() || rows.empty()) throw DataError("spectral response JSON must be a non-empty array of rows");
  SpectralResponse srf;
  srf.msi_bands = rows.size();
  srf.hsi_bands = rows[0].size();
  for (const auto& row : rows) {
    if (row.size() != srf.hsi_bands) throw DataError("spectral response rows have unequal lengths");
    for (const auto& v : row) srf.weights.push_back(v.get<double>());
  }
  srf.validate();
  return srf;
}

// --- synthetic scenes ---------------------------------------------------------

enum class SceneKind { gaussian_blobs, piecewise_materials };

inline SceneKind parse_scene_kind(std::string_view name) {
  if (name == "gaussian-blobs") return SceneKind::gaussian_blobs;
  if (name == "piecewise-materials") return SceneKind::piecewise_materials;
  throw ArgumentError("unknown scene kind '" + std::string(name) + "'");
}

// Smooth spectrum: sum of three Gaussians over the band index plus a floor.
inline std::vector<double> random_spectrum(Rng& rng, std::size_t bands) {
  std::vector<double> spectrum(bands, 0.05);
  const double last = static_cast<double>(bands - 1);
  for (int j = 0; j < 3; ++j) {
    const double amp = rng.uniform(0.2, 1.0);
    const double centre = rng.uniform(0.0, last);
    const double width = rng.uniform(0.1, 0.35) * static_cast<double>(bands) + 0.5;
    for (std::size_t b = 0; b < bands; ++b) {
      const double d = static_cast<double>(b) - centre;
      spectrum[b] += amp * std::exp(-d * d / (2.0 * width * width));
    }
  }
  return spectrum;
}

struct MaterialsLayout {
  std::vector<std::array<double, 2>> sites;  // (row, col) of each Voronoi site
  std::vector<std::vector<double>> spectra;  // unnormalized, one per site
};

inline constexpr std::size_t kMaterialCount = 8;

inline MaterialsLayout materials_layout(std::size_t height, std::size_t width, std::size_t bands, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  MaterialsLayout layout;
  for (std::size_t i = 0; i < kMaterialCount; ++i) {
    layout.sites.push_back({rng.uniform(0.0, static_cast<double>(height)), rng.uniform(0.0, static_cast<double>(width))});
    layout.spectra.push_back(random_spectrum(rng, bands));
  }
  return layout;
}

// Nearest site to the pixel centre; ties go to the lower site index.
inline std::size_t nearest_site(const MaterialsLayout& layout, std::size_t row, std::size_t col) {
  const double y = static_cast<double>(row) + 0.5, x = static_cast<double>(col) + 0.5;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < layout.sites.size(); ++i) {
    const double dy = y - layout.sites[i][0], dx = x - layout.sites[i][1];
    const double d = dy * dy + dx * dx;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// Deterministic synthetic scene with values in [0, 1].
inline HyperCube synth_cube(std::size_t height, std::size_t width, std::size_t bands, std::uint64_t seed,
                            SceneKind kind) {
  if (height < 8 || width < 8) throw ArgumentError("synth_cube: spatial dims must be >= 8");
  if (bands < 2) throw ArgumentError("synth_cube: at least 2 bands required");
  HyperCube cube(height, width, bands);
  if (kind == SceneKind::piecewise_materials) {
    const auto layout = materials_layout(height, width, bands, seed);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const auto& spectrum = layout.spectra[nearest_site(layout, y, x)];
        for (std::size_t b = 0; b < bands; ++b) cube.at(b, y, x) = spectrum[b];
      }
  } else {
    Rng rng(splitmix64(seed ^ 0x5bd1e995ULL));
    const auto background = random_spectrum(rng, bands);
    for (std::size_t b = 0; b < bands; ++b)
      for (std::size_t p = 0; p < cube.plane(); ++p) cube.data[b * cube.plane() + p] = 0.2 * background[b];
    const double extent = static_cast<double>(std::min(height, width));
    for (int blob = 0; blob < 6; ++blob) {
      const double cy = rng.uniform(0.0, static_cast<double>(height));
      const double cx = rng.uniform(0.0, static_cast<double>(width));
      const double radius = rng.uniform(extent / 8.0, extent / 3.0);
      const auto spectrum = random_spectrum(rng, bands);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double weight = std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
          for (std::size_t b = 0; b < bands; ++b) cube.at(b, y, x) += weight * spectrum[b];
        }
    }
  }
  const double peak = *std::max_element(cube.data.begin(), cube.data.end());
  for (auto& v : cube.data) v /= peak;
  return cube;
}

// --- HSC file format ------------------------------------------------------------
//
// bytes 0-3   "HSC1"
// bytes 4-15  height, width, bands as little-endian uint32
// then        height·width·bands little-endian float32, band-major
// optional sidecar <stem>.json: {"wavelengths_nm": [...]}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline constexpr std::string_view kHscMagic = "HSC1";

inline std::filesystem::path hsc_sidecar_path(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar.replace_extension(".json");
  return sidecar;
}

inline std::string encode_hsc(const HyperCube& cube) {
  cube.validate();
  std::string bytes(kHscMagic);
  detail::put_u32(bytes, static_cast<std::uint32_t>(cube.height));
  detail::put_u32(bytes, static_cast<std::uint32_t>(cube.width));
  detail::put_u32(bytes, static_cast<std::uint32_t>(cube.bands));
  bytes.reserve(bytes.size() + cube.size() * 4);
  for (double v : cube.data) detail::put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return bytes;
}

inline HyperCube decode_hsc(std::string_view bytes, const std::string& source = "<memory>") {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kHscMagic) {
    throw IoError(IoError::Kind::bad_magic, "bad magic in '" + source + "': expected HSC1");
  }
  if (bytes.size() < 16) {
    throw IoError(IoError::Kind::bad_header, "truncated header in '" + source + "'");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  HyperCube cube;
  cube.height = detail::get_u32(p + 4);
  cube.width = detail::get_u32(p + 8);
  cube.bands = detail::get_u32(p + 12);
  if (cube.height == 0 || cube.width == 0 || cube.bands == 0) {
    throw IoError(IoError::Kind::bad_header, "zero dimension in header of '" + source + "'");
  }
  const std::uint64_t expected = static_cast<std::uint64_t>(cube.height) * cube.width * cube.bands * 4;
  const std::uint64_t actual = bytes.size() - 16;
  if (actual < expected) {
    throw IoError(IoError::Kind::truncated_payload, "truncated payload in '" + source + "': expected " +
                                                        std::to_string(expected) + " bytes, got " +
                                                        std::to_string(actual));
  }
  if (actual > expected) {
    throw IoError(IoError::Kind::size_mismatch, "payload size mismatch in '" + source + "': header " +
                                                    cube.dims() + " implies " + std::to_string(expected) +
                                                    " bytes, file has " + std::to_string(actual));
  }
  cube.data.resize(cube.height * cube.width * cube.bands);
  for (std::size_t i = 0; i < cube.data.size(); ++i) {
    cube.data[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + 16 + 4 * i)));
  }
  return cube;
}

inline void write_hsc(const std::filesystem::path& path, const HyperCube& cube) {
  detail::write_file(path, encode_hsc(cube));
  if (cube.wavelengths_nm) {
    nlohmann::json side;
    side["wavelengths_nm"] = *cube.wavelengths_nm;
    detail::write_file(hsc_sidecar_path(path), side.dump() + "\n");
  }
}

inline HyperCube read_hsc(const std::filesystem::path& path) {
  HyperCube cube = decode_hsc(detail::read_file(path), path.string());
  const auto sidecar = hsc_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    const auto side = nlohmann::json::parse(detail::read_file(sidecar));
    if (side.contains("wavelengths_nm")) cube.wavelengths_nm = side["wavelengths_nm"].get<std::vector<double>>();
  }
  cube.validate();
  return cube;
}

}  // namespace cofusion
