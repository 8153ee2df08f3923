#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cofusion/error.hpp"
#include "cofusion/io.hpp"
#include "cofusion/ops.hpp"
#include "cofusion/rng.hpp"
#include "cofusion/tensor.hpp"

namespace cofusion {

struct Ablation {
  bool disable_spacam = false;
  bool disable_specam = false;
  bool disable_sscfm = false;

  bool any() const noexcept { return disable_spacam || disable_specam || disable_sscfm; }
};

struct ModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t scm_topk = 8;
  std::vector<std::size_t> dilations{1, 2, 4};
  std::size_t levels = 3;
  std::vector<std::size_t> lka_kernels{3, 5};
  std::size_t split_groups = 4;
  double dropout_rate = 0.1;
  double scm_threshold = 1e-3;
  Ablation ablation;
  std::size_t hsi_bands = 0;
  std::size_t msi_bands = 0;
  std::size_t scale_factor = 4;

  // Spatial multiple every level needs (halving per level plus one Haar split).
  std::size_t spatial_multiple() const { return std::size_t{1} << levels; }

  void validate() const {
    if (hidden_dim == 0) throw ConfigError("hidden_dim must be positive");
    if (split_groups == 0 || hidden_dim % split_groups != 0) {
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by split_groups " +
                        std::to_string(split_groups));
    }
    if (scm_topk < 1 || scm_topk > hidden_dim) {
      throw ConfigError("scm_topk must lie in [1, hidden_dim], got " + std::to_string(scm_topk));
    }
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (dilations.empty()) throw ConfigError("at least one dilation is required");
    for (auto d : dilations)
      if (d < 1) throw ConfigError("dilations must be >= 1");
    if (lka_kernels.empty()) throw ConfigError("at least one LKA kernel size is required");
    for (auto k : lka_kernels)
      if (k % 2 == 0) throw ConfigError("LKA kernel sizes must be odd");
    if (split_groups < lka_kernels.size()) throw ConfigError("split_groups must be >= number of LKA kernels");
    if (hidden_dim / 4 == 0) throw ConfigError("hidden_dim must be >= 4 for the squeeze-excitation bottleneck");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
    if (hsi_bands < 1 || msi_bands < 1) throw ConfigError("hsi_bands and msi_bands must be set");
    if (scale_factor < 1) throw ConfigError("scale_factor must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"hidden_dim", c.hidden_dim},
                     {"scm_topk", c.scm_topk},
                     {"dilations", c.dilations},
                     {"levels", c.levels},
                     {"lka_kernels", c.lka_kernels},
                     {"split_groups", c.split_groups},
                     {"dropout_rate", c.dropout_rate},
                     {"scm_threshold", c.scm_threshold},
                     {"ablation",
                      {{"disable_spacam", c.ablation.disable_spacam},
                       {"disable_specam", c.ablation.disable_specam},
                       {"disable_sscfm", c.ablation.disable_sscfm}}},
                     {"hsi_bands", c.hsi_bands},
                     {"msi_bands", c.msi_bands},
                     {"scale_factor", c.scale_factor}};
}

// Missing keys keep their current value, so a partial file overlays defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  take("hidden_dim", c.hidden_dim);
  take("scm_topk", c.scm_topk);
  take("dilations", c.dilations);
  take("levels", c.levels);
  take("lka_kernels", c.lka_kernels);
  take("split_groups", c.split_groups);
  take("dropout_rate", c.dropout_rate);
  take("scm_threshold", c.scm_threshold);
  take("hsi_bands", c.hsi_bands);
  take("msi_bands", c.msi_bands);
  take("scale_factor", c.scale_factor);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    auto flag = [&](const char* key) { return a.is_array() ? std::find(a.begin(), a.end(), key) != a.end()
                                                           : a.value(key, false); };
    c.ablation.disable_spacam = flag("disable_spacam");
    c.ablation.disable_specam = flag("disable_specam") || flag("disable_spespectral");
    c.ablation.disable_sscfm = flag("disable_sscfm");
  }
}

// --- parameters -----------------------------------------------------------------

enum class Init { fan_in_uniform, zeros, ones };

struct ParamSpec {
  std::string path;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

/// Named learnable tensors, enumerated in sorted path order.
class ModelParams {
 public:
  void set(std::string path, Tensor t) {
    t.set_requires_grad(true);
    tensors_[std::move(path)] = std::move(t);
  }

  const Tensor& at(const std::string& path) const {
    auto it = tensors_.find(path);
    if (it == tensors_.end()) throw StateError("missing model parameter '" + path + "'");
    return it->second;
  }

  bool contains(const std::string& path) const { return tensors_.count(path) != 0; }

  std::size_t size() const noexcept { return tensors_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  void clear_grads() {
    for (auto& [_, t] : tensors_) t.clear_grad();
  }

  // Deep copy; the copy shares no storage with this set.
  ModelParams clone() const {
    ModelParams copy;
    for (const auto& [path, t] : tensors_) copy.set(path, Tensor(t.shape(), t.values()));
    return copy;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

 private:
  std::map<std::string, Tensor> tensors_;
};

namespace model_detail {

inline std::string level_prefix(std::size_t level) { return "level" + std::to_string(level); }

// Depthwise k×k followed by pointwise 1×1 with bias.
inline void add_dwconv(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t channels,
                       std::size_t k = 3) {
  specs.push_back({prefix + ".dw.kernel", {channels, k, k}, Init::fan_in_uniform, k * k});
  specs.push_back({prefix + ".pw.weight", {channels, channels}, Init::fan_in_uniform, channels});
  specs.push_back({prefix + ".pw.bias", {channels}, Init::zeros});
}

inline void add_conv(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t cout, std::size_t cin,
                     std::size_t k) {
  specs.push_back({prefix + ".weight", {cout, cin, k, k}, Init::fan_in_uniform, cin * k * k});
  specs.push_back({prefix + ".bias", {cout}, Init::zeros});
}

inline void add_linear(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t out, std::size_t in,
                       bool bias = true) {
  specs.push_back({prefix + ".weight", {out, in}, Init::fan_in_uniform, in});
  if (bias) specs.push_back({prefix + ".bias", {out}, Init::zeros});
}

}  // namespace model_detail

/// Full parameter inventory for a configuration. Ablated modules are
/// replaced by a residual DWConv block under "<level>.<module>_res".
inline std::vector<ParamSpec> describe_params(const ModelConfig& config) {
  using namespace model_detail;
  config.validate();
  const std::size_t d = config.hidden_dim;
  std::vector<ParamSpec> specs;
  add_conv(specs, "msg.stem", d, config.hsi_bands + config.msi_bands, 3);
  for (std::size_t l = 2; l <= config.levels; ++l) add_dwconv(specs, "msg.enc_local.l" + std::to_string(l), d);
  for (std::size_t l = 1; l <= config.levels; ++l) add_dwconv(specs, "msg.enc_global.l" + std::to_string(l), d);

  for (std::size_t l = 1; l <= config.levels; ++l) {
    const std::string lp = level_prefix(l);
    if (config.ablation.disable_spacam) {
      add_dwconv(specs, lp + ".spacam_res", d);
    } else {
      for (std::size_t j = 0; j < config.dilations.size(); ++j) {
        add_dwconv(specs, lp + ".spacam.branch" + std::to_string(j) + ".gate", d);
        add_dwconv(specs, lp + ".spacam.branch" + std::to_string(j) + ".value", d);
      }
      add_linear(specs, lp + ".spacam.fuse", d, d);
    }
    if (config.ablation.disable_specam) {
      add_dwconv(specs, lp + ".specam_res", d);
    } else {
      const std::string sp = lp + ".specam";
      add_dwconv(specs, sp + ".low", d);
      add_dwconv(specs, sp + ".high", d);
      add_dwconv(specs, sp + ".mid", d);
      add_linear(specs, sp + ".g", d, 2 * d);
      add_linear(specs, sp + ".expand.w1", d, d, false);
      add_linear(specs, sp + ".expand.w2", d, d, false);
      add_linear(specs, sp + ".expand.w3", d, d, false);
      add_linear(specs, sp + ".map", d, d);
      specs.push_back({sp + ".alpha", {1}, Init::zeros});
      specs.push_back({sp + ".z0", {d}, Init::zeros});
    }
    if (config.ablation.disable_sscfm) {
      add_dwconv(specs, lp + ".sscfm_res", d);
    } else {
      const std::string fp = lp + ".sscfm";
      for (const char* stream : {"spa", "spe"}) {
        const std::string s = fp + "." + stream;
        specs.push_back({s + ".norm.gamma", {d}, Init::ones});
        specs.push_back({s + ".norm.beta", {d}, Init::zeros});
        for (auto k : config.lka_kernels) add_dwconv(specs, s + ".lka" + std::to_string(k), d, k);
        add_linear(specs, s + ".sse.fc1", d / 4, d);
        add_linear(specs, s + ".sse.fc2", d, d / 4);
      }
      add_conv(specs, fp + ".out", d, 2 * d, 3);
    }
  }
  for (std::size_t l = 1; l < config.levels; ++l) add_dwconv(specs, "recon.up" + std::to_string(l), d);
  add_conv(specs, "recon.head", config.hsi_bands, d, 3);
  std::sort(specs.begin(), specs.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.path < b.path; });
  return specs;
}

/// Fan-in-scaled uniform weights U(−1/√fan_in, 1/√fan_in), zero biases,
/// unit norm gains, α = 0 (sigmoid 0.5) and z⁰ = 0. Draws follow sorted path
/// order, so the result is a pure function of (config, seed).
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  ModelParams params;
  for (const auto& spec : describe_params(config)) {
    std::vector<double> values(shape_numel(spec.shape), spec.init == Init::ones ? 1.0 : 0.0);
    if (spec.init == Init::fan_in_uniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (auto& v : values) v = rng.uniform(-bound, bound);
    }
    params.set(spec.path, Tensor(spec.shape, std::move(values)));
  }
  return params;
}

inline ModelParams zero_params(const ModelConfig& config) {
  ModelParams params;
  for (const auto& spec : describe_params(config)) params.set(spec.path, Tensor::zeros(spec.shape));
  return params;
}

// --- forward context -------------------------------------------------------------

/// Mode plus the dropout seed stream for one forward pass.
class ForwardContext {
 public:
  explicit ForwardContext(Mode mode = Mode::inference, std::uint64_t seed = 0) : mode_(mode), seed_(seed) {}

  Mode mode() const noexcept { return mode_; }

  // Each call yields a fresh, reproducible seed.
  std::uint64_t next_seed() { return splitmix64(seed_ + 0x632be59bd9b4e019ULL * ++counter_); }

 private:
  Mode mode_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// --- building blocks ---------------------------------------------------------------

inline Tensor dwconv(const Tensor& x, const ModelParams& p, const std::string& prefix, std::size_t dilation = 1) {
  return ops::conv2d_pointwise(ops::conv2d_depthwise(x, p.at(prefix + ".dw.kernel"), dilation),
                               p.at(prefix + ".pw.weight"), p.at(prefix + ".pw.bias"));
}

inline Tensor conv(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ops::conv2d(x, p.at(prefix + ".weight"), p.at(prefix + ".bias"));
}

// Encoder block E(·): DWConv3×3 then GELU.
inline Tensor encoder_block(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ops::gelu(dwconv(x, p, prefix));
}

// Stand-in for an ablated module: x + GELU(DWConv(x)).
inline Tensor residual_block(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return ops::add(x, ops::gelu(dwconv(x, p, prefix)));
}

// --- multi-scale generator ------------------------------------------------------------

struct PyramidFeatures {
  std::vector<Tensor> local;   // index 0 is level 1 (finest)
  std::vector<Tensor> global;  // global-proxy stream, same dims as local
};

/// Builds both pyramid streams from a stem input that is already at the
/// working resolution: local stream goes fine→coarse by bilinear halving,
/// the global proxy is seeded at the coarsest level and goes coarse→fine.
inline PyramidFeatures msg_build_from_stem(const Tensor& stem_input, const ModelParams& p, const ModelConfig& config) {
  PyramidFeatures f;
  f.local.push_back(conv(stem_input, p, "msg.stem"));
  for (std::size_t l = 2; l <= config.levels; ++l) {
    f.local.push_back(encoder_block(ops::downsample2(f.local.back()), p, "msg.enc_local.l" + std::to_string(l)));
  }
  f.global.resize(config.levels);
  const std::size_t top = config.levels;
  f.global[top - 1] = encoder_block(f.local[top - 1], p, "msg.enc_global.l" + std::to_string(top));
  for (std::size_t l = top - 1; l >= 1; --l) {
    f.global[l - 1] = encoder_block(ops::upsample2(f.global[l]), p, "msg.enc_global.l" + std::to_string(l));
  }
  return f;
}

inline void check_input_shapes(const Tensor& lrhsi, const Tensor& hrmsi, const ModelConfig& config) {
  if (lrhsi.rank() != 3 || hrmsi.rank() != 3) {
    throw DimensionError("inputs must be [C,H,W]; got lrhsi " + shape_str(lrhsi.shape()) + " and hrmsi " +
                         shape_str(hrmsi.shape()));
  }
  if (lrhsi.dim(0) != config.hsi_bands) {
    throw DimensionError("lrhsi has " + std::to_string(lrhsi.dim(0)) + " bands, model expects " +
                         std::to_string(config.hsi_bands));
  }
  if (hrmsi.dim(0) != config.msi_bands) {
    throw DimensionError("hrmsi has " + std::to_string(hrmsi.dim(0)) + " bands, model expects " +
                         std::to_string(config.msi_bands));
  }
  const std::size_t s = config.scale_factor;
  if (hrmsi.dim(1) != s * lrhsi.dim(1) || hrmsi.dim(2) != s * lrhsi.dim(2)) {
    throw DimensionError("hrmsi " + std::to_string(hrmsi.dim(1)) + "x" + std::to_string(hrmsi.dim(2)) +
                         " is not " + std::to_string(s) + "x lrhsi " + std::to_string(lrhsi.dim(1)) + "x" +
                         std::to_string(lrhsi.dim(2)));
  }
}

// Reflect-pads H and W up to the next multiple of config.spatial_multiple().
inline Tensor pad_to_multiple(const Tensor& x, const ModelConfig& config) {
  const std::size_t m = config.spatial_multiple();
  const std::size_t ph = (m - x.dim(1) % m) % m, pw = (m - x.dim(2) % m) % m;
  return ops::pad_reflect(x, ph, pw);
}

inline PyramidFeatures msg_build_pyramid(const Tensor& lrhsi, const Tensor& hrmsi, const ModelParams& p,
                                         const ModelConfig& config) {
  check_input_shapes(lrhsi, hrmsi, config);
  const Tensor up = ops::bilinear_resize(lrhsi, hrmsi.dim(1), hrmsi.dim(2));
  return msg_build_from_stem(pad_to_multiple(ops::concat({up, hrmsi}), config), p, config);
}

// --- SpaCAM --------------------------------------------------------------------------

/// Per dilation d: gate = spatial softmax of DWConv_d(MaxPool3×3(x)), branch
/// output = gate ⊗ GELU(DWConv(x)) + x. Branches are averaged and fused by a
/// pointwise convolution.
inline Tensor spacam_forward(const Tensor& x, const ModelParams& p, const ModelConfig& config,
                             const std::string& prefix) {
  const Tensor pooled = ops::maxpool2d(x, 3, 1, 1);
  Tensor acc;
  for (std::size_t j = 0; j < config.dilations.size(); ++j) {
    const std::string bp = prefix + ".branch" + std::to_string(j);
    const Tensor gate = ops::spatial_softmax(dwconv(pooled, p, bp + ".gate", config.dilations[j]));
    const Tensor value = ops::gelu(dwconv(x, p, bp + ".value"));
    const Tensor gated = ops::mul(gate, value);
    acc = acc.defined() ? ops::add(acc, gated) : gated;
  }
  // mean_j(gated_j + x), written so the residual passes through exactly
  const Tensor avg = ops::add(x, ops::scale(acc, 1.0 / static_cast<double>(config.dilations.size())));
  return ops::conv2d_pointwise(avg, p.at(prefix + ".fuse.weight"), p.at(prefix + ".fuse.bias"));
}

// --- spectral coordinate mixing ------------------------------------------------------

/// C×C interaction matrix (W₁z)(W₂z)ᵀ + diag(W₃z), with entries of magnitude
/// below `tau` set to exactly zero.
inline Tensor scm_expand(const Tensor& z_in, const Tensor& w1, const Tensor& w2, const Tensor& w3, double tau) {
  const Tensor full = ops::add(ops::outer(ops::linear(w1, z_in), ops::linear(w2, z_in)), ops::diag(ops::linear(w3, z_in)));
  return ops::threshold_zero(full, tau);
}

// Column indices of `m` ranked by L2 norm, descending, lower index on ties.
inline std::vector<std::size_t> scm_rank_columns(const Tensor& m, std::size_t k) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> norms(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) norms[c] += m[r * cols + c] * m[r * cols + c];
  for (auto& n : norms) n = std::sqrt(n);
  return ops::topk_indices(norms, k);
}

inline Tensor scm_topk_select(const Tensor& m_full, std::size_t k) {
  if (m_full.rank() != 2) throw DimensionError("scm_topk_select: expected a matrix, got " + shape_str(m_full.shape()));
  if (k < 1 || k > m_full.dim(1)) {
    throw ArgumentError("scm_topk_select: K=" + std::to_string(k) + " outside [1, " + std::to_string(m_full.dim(1)) + "]");
  }
  return ops::select_columns(m_full, scm_rank_columns(m_full, k));
}

/// Left-to-right accept-or-hold traversal: starting from z0, column k
/// overwrites channel c whenever M[c,k] ≠ 0. The gradient of each output
/// channel goes to the entry that last wrote it, or to z0 if none did.
inline Tensor scm_traverse(const Tensor& m, const Tensor& z0) {
  if (m.rank() != 2 || z0.numel() != m.dim(0)) {
    throw DimensionError("scm_traverse: M " + shape_str(m.shape()) + " incompatible with z0 of " +
                         std::to_string(z0.numel()));
  }
  const std::size_t channels = m.dim(0), k = m.dim(1);
  constexpr std::size_t kFromInit = std::numeric_limits<std::size_t>::max();
  std::vector<double> z(z0.values());
  std::vector<std::size_t> source(channels, kFromInit);
  for (std::size_t col = 0; col < k; ++col) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double candidate = m[c * k + col];
      if (candidate != 0.0) {
        z[c] = candidate;
        source[c] = c * k + col;
      }
    }
  }
  Tensor result({channels}, std::move(z));
  if (cofusion::detail::should_record({&m, &z0})) {
    cofusion::detail::record("scm_traverse", result, [m, z0, source](std::span<const double> g) {
      std::vector<double> gm(m.numel(), 0.0), gz(z0.numel(), 0.0);
      for (std::size_t c = 0; c < source.size(); ++c) {
        if (source[c] == kFromInit) {
          gz[c] += g[c];
        } else {
          gm[source[c]] += g[c];
        }
      }
      m.accumulate_grad(gm);
      z0.accumulate_grad(gz);
    });
  }
  return result;
}

// --- SpeCAM --------------------------------------------------------------------------

struct SpecamTrace {
  Tensor f_low, f_high, z_in, m, z, attention;
};

/// Haar split into low band and averaged detail bands, channel saliency via
/// global max pooling, coordinate mixing to a channel attention vector, α-
/// weighted recombination, and inverse Haar back to full resolution with a
/// residual connection.
inline Tensor specam_forward(const Tensor& x, const ModelParams& p, const ModelConfig& config,
                             const std::string& prefix, SpecamTrace* trace = nullptr) {
  if (x.rank() != 3 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw DimensionError("specam_forward: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(0);
  const auto bands = ops::haar_dwt2(x);
  const Tensor detail_avg = ops::scale(ops::add(ops::add(bands.lh, bands.hl), bands.hh), 1.0 / 3.0);
  const Tensor f_low = ops::gelu(dwconv(bands.ll, p, prefix + ".low"));
  const Tensor f_high = ops::gelu(dwconv(detail_avg, p, prefix + ".high"));
  const Tensor v_low = ops::reshape(ops::global_maxpool(f_low), {d});
  const Tensor v_high = ops::reshape(ops::global_maxpool(f_high), {d});

  const Tensor z_in = ops::linear(p.at(prefix + ".g.weight"), ops::concat({v_low, v_high}), p.at(prefix + ".g.bias"));
  const Tensor m_full = scm_expand(z_in, p.at(prefix + ".expand.w1.weight"), p.at(prefix + ".expand.w2.weight"),
                                   p.at(prefix + ".expand.w3.weight"), config.scm_threshold);
  const Tensor m = scm_topk_select(m_full, config.scm_topk);
  const Tensor z = scm_traverse(m, p.at(prefix + ".z0"));
  const Tensor a = ops::sigmoid(ops::linear(p.at(prefix + ".map.weight"), z, p.at(prefix + ".map.bias")));

  const Tensor alpha = ops::sigmoid(p.at(prefix + ".alpha"));
  const Tensor low = ops::mul(ops::mul_channel(f_low, a), alpha);
  const Tensor high = ops::mul(ops::mul_channel(f_high, a), ops::one_minus(alpha));
  const Tensor mid = ops::gelu(dwconv(ops::add(low, high), p, prefix + ".mid"));
  const Tensor zeros = Tensor::zeros(mid.shape());
  const Tensor restored = ops::haar_idwt2(mid, zeros, zeros, zeros);
  if (trace) *trace = {f_low, f_high, z_in, m, z, a};
  return ops::add(restored, x);
}

// --- SSCFM ---------------------------------------------------------------------------

struct StreamAttention {
  std::vector<Tensor> masks;  // one spatial softmax mask per LKA kernel
  Tensor excitation;          // [D] channel vector
};

inline StreamAttention sscfm_stream(const Tensor& x, const ModelParams& p, const ModelConfig& config,
                                    const std::string& prefix) {
  const std::size_t d = x.dim(0);
  StreamAttention out;
  const Tensor normed = ops::layernorm(x, p.at(prefix + ".norm.gamma"), p.at(prefix + ".norm.beta"));
  for (auto k : config.lka_kernels) {
    out.masks.push_back(ops::spatial_softmax(dwconv(normed, p, prefix + ".lka" + std::to_string(k))));
  }
  const Tensor pooled = ops::reshape(ops::global_maxpool(x), {d});
  const Tensor hidden = ops::relu(ops::linear(p.at(prefix + ".sse.fc1.weight"), pooled, p.at(prefix + ".sse.fc1.bias")));
  out.excitation = ops::relu(ops::linear(p.at(prefix + ".sse.fc2.weight"), hidden, p.at(prefix + ".sse.fc2.bias")));
  return out;
}

// LKA kernel index used by channel segment g.
inline std::size_t segment_mask_index(std::size_t segment, const ModelConfig& config) {
  return segment * config.lka_kernels.size() / config.split_groups;
}

/// Cross-fusion: per channel segment, the (dropout-masked) spatial mask of
/// one stream multiplies the channel-excited features of the other. Both
/// directions are concatenated, refined by a 3×3 convolution, and added to
/// the mean of the two inputs.
inline Tensor sscfm_forward(const Tensor& spa, const Tensor& spe, const ModelParams& p, const ModelConfig& config,
                            ForwardContext& ctx, const std::string& prefix) {
  if (spa.shape() != spe.shape()) {
    throw DimensionError("sscfm_forward: stream shapes differ " + shape_str(spa.shape()) + " vs " +
                         shape_str(spe.shape()));
  }
  const std::size_t d = spa.dim(0);
  if (d % config.split_groups != 0) {
    throw ConfigError("sscfm_forward: D=" + std::to_string(d) + " not divisible by " +
                      std::to_string(config.split_groups) + " segments");
  }
  const StreamAttention att_spa = sscfm_stream(spa, p, config, prefix + ".spa");
  const StreamAttention att_spe = sscfm_stream(spe, p, config, prefix + ".spe");
  const Tensor excited_spe = ops::mul_channel(spe, att_spe.excitation);
  const Tensor excited_spa = ops::mul_channel(spa, att_spa.excitation);

  const std::size_t seg = d / config.split_groups;
  std::vector<Tensor> to_spa, to_spe;
  for (std::size_t g = 0; g < config.split_groups; ++g) {
    const std::size_t lo = g * seg, hi = lo + seg;
    const std::size_t mi = segment_mask_index(g, config);
    const Tensor mask_spa = ops::dropout_mask(ops::slice(att_spa.masks[mi], lo, hi), config.dropout_rate,
                                              ctx.next_seed(), ctx.mode());
    const Tensor mask_spe = ops::dropout_mask(ops::slice(att_spe.masks[mi], lo, hi), config.dropout_rate,
                                              ctx.next_seed(), ctx.mode());
    to_spa.push_back(ops::mul(mask_spa, ops::slice(excited_spe, lo, hi)));
    to_spe.push_back(ops::mul(mask_spe, ops::slice(excited_spa, lo, hi)));
  }
  std::vector<Tensor> parts = std::move(to_spa);
  parts.insert(parts.end(), to_spe.begin(), to_spe.end());
  const Tensor refined = conv(ops::concat(parts), p, prefix + ".out");
  return ops::add(refined, ops::scale(ops::add(spa, spe), 0.5));
}

// --- reconstruction ----------------------------------------------------------------

/// Coarse-to-fine aggregation R_l = fused_l + DWConv(↑²R_{l+1}), then a 3×3
/// head to the hyperspectral bands plus the upsampled LRHSI as a global
/// residual. The head output is cropped to out_h×out_w first.
inline Tensor reconstruct(const std::vector<Tensor>& fused, const Tensor& lrhsi, std::size_t out_h, std::size_t out_w,
                          const ModelParams& p) {
  if (fused.empty()) throw ArgumentError("reconstruct: no fused features");
  Tensor r = fused.back();
  for (std::size_t l = fused.size() - 1; l >= 1; --l) {
    r = ops::add(fused[l - 1], dwconv(ops::upsample2(r), p, "recon.up" + std::to_string(l)));
  }
  const Tensor head = ops::crop(conv(r, p, "recon.head"), out_h, out_w);
  return ops::add(head, ops::bilinear_resize(lrhsi, out_h, out_w));
}

/// End-to-end fusion: [C,h,w] LRHSI and [c,H,W] HRMSI to a [C,H,W] estimate.
inline Tensor cofusion_forward(const Tensor& lrhsi, const Tensor& hrmsi, const ModelParams& p,
                               const ModelConfig& config, ForwardContext& ctx) {
  const PyramidFeatures pyr = msg_build_pyramid(lrhsi, hrmsi, p, config);
  std::vector<Tensor> fused;
  for (std::size_t l = 1; l <= config.levels; ++l) {
    const std::string lp = model_detail::level_prefix(l);
    const Tensor& local = pyr.local[l - 1];
    const Tensor& global = pyr.global[l - 1];
    const Tensor spa = config.ablation.disable_spacam ? residual_block(local, p, lp + ".spacam_res")
                                                      : spacam_forward(local, p, config, lp + ".spacam");
    const Tensor spe = config.ablation.disable_specam ? residual_block(global, p, lp + ".specam_res")
                                                      : specam_forward(global, p, config, lp + ".specam");
    fused.push_back(config.ablation.disable_sscfm
                        ? residual_block(ops::scale(ops::add(spa, spe), 0.5), p, lp + ".sscfm_res")
                        : sscfm_forward(spa, spe, p, config, ctx, lp + ".sscfm"));
  }
  return reconstruct(fused, lrhsi, hrmsi.dim(1), hrmsi.dim(2), p);
}

inline Tensor cofusion_forward(const Tensor& lrhsi, const Tensor& hrmsi, const ModelParams& p,
                               const ModelConfig& config, Mode mode = Mode::inference, std::uint64_t seed = 0) {
  ForwardContext ctx(mode, seed);
  return cofusion_forward(lrhsi, hrmsi, p, config, ctx);
}

// --- CFM1 container ----------------------------------------------------------------
//
// "CFM1" | u64 config length | config JSON (sorted keys, compact)
// | u32 parameter count | per parameter, in sorted path order:
//   u32 path length | path bytes | u32 rank | rank × u64 dims | numel × f64
// All integers and floats little-endian.

inline constexpr std::string_view kModelMagic = "CFM1";

namespace model_detail {

inline void put_le(std::string& buf, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(IoError::Kind::truncated_payload, "truncated model file '" + source_ + "': needed " +
                                                          std::to_string(n) + " more bytes at offset " +
                                                          std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace model_detail

inline std::string canonical_config_json(const ModelConfig& config) { return nlohmann::json(config).dump(); }

inline std::string encode_model(const ModelConfig& config, const ModelParams& params) {
  using model_detail::put_le;
  std::string out(kModelMagic);
  const std::string cfg = canonical_config_json(config);
  put_le(out, cfg.size(), 8);
  out += cfg;
  put_le(out, params.size(), 4);
  for (const auto& [path, t] : params) {
    put_le(out, path.size(), 4);
    out += path;
    put_le(out, t.rank(), 4);
    for (auto d : t.shape()) put_le(out, d, 8);
    for (double v : t.data()) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

struct LoadedModel {
  ModelConfig config;
  ModelParams params;
};

inline LoadedModel decode_model(std::string_view bytes, const std::string& source = "<memory>") {
  if (bytes.substr(0, 4) != kModelMagic) {
    throw IoError(IoError::Kind::bad_magic, "bad magic in '" + source + "': expected CFM1");
  }
  model_detail::Reader in(bytes.substr(4), source);
  LoadedModel model;
  const auto cfg_len = in.le(8);
  try {
    model.config = nlohmann::json::parse(in.take(cfg_len)).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::bad_header, "invalid config block in '" + source + "': " + e.what());
  }
  const auto count = in.le(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string path(in.take(in.le(4)));
    Shape shape(in.le(4));
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = in.le(8);
      numel = d == 0 || numel <= in.remaining() / d ? numel * d : in.remaining() + 1;
    }
    if (numel > in.remaining() / 8) {
      throw IoError(IoError::Kind::truncated_payload, "truncated model file '" + source + "': parameter '" + path +
                                                          "' needs " + std::to_string(numel) + " values");
    }
    std::vector<double> values(numel);
    for (auto& v : values) v = std::bit_cast<double>(in.le(8));
    model.params.set(std::move(path), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw IoError(IoError::Kind::size_mismatch, "trailing bytes after parameters in '" + source + "'");
  return model;
}

inline void save_model(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  detail::write_file(path, encode_model(config, params));
}

inline LoadedModel load_model(const std::filesystem::path& path) {
  return decode_model(detail::read_file(path), path.string());
}

}  // namespace cofusion
