#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cofusion/model.hpp"
#include "cofusion/objective.hpp"
#include "cofusion/ops.hpp"
#include "cofusion/rng.hpp"
#include "cofusion/tensor.hpp"

namespace cofusion {

/// Central-difference gradient checking.
///
/// A non-scalar output is reduced to a scalar with a fixed random projection,
/// so every output element contributes to the checked gradient.
struct GradcheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
};

struct GradInput {
  Tensor tensor;
  std::size_t max_elements = 0;  // 0 checks every element
  bool skip_zeros = false;       // exact zeros sit on a branch boundary
};

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t elements = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;
  double h = 1e-5;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
  }

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!e.passed) out.push_back(e.op);
    return out;
  }
};

inline nlohmann::ordered_json to_json(const GradcheckReport& r) {
  nlohmann::ordered_json j;
  j["passed"] = r.passed();
  j["tolerance"] = r.tolerance;
  j["h"] = r.h;
  j["max_rel_error"] = r.max_rel_error();
  j["seconds"] = r.seconds;
  j["ops"] = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    nlohmann::ordered_json o;
    o["op"] = e.op;
    o["max_rel_error"] = e.max_rel_error;
    o["elements"] = e.elements;
    o["passed"] = e.passed;
    j["ops"].push_back(o);
  }
  return j;
}

inline GradcheckEntry check_gradient(const std::string& name, std::vector<GradInput> inputs,
                                     const std::function<Tensor()>& fn, const GradcheckOptions& opts = {}) {
  Rng rng(splitmix64(opts.seed ^ std::hash<std::string>{}(name)));
  Tensor projection;
  auto objective = [&](const Tensor& out) {
    if (!projection.defined()) {
      std::vector<double> r(out.numel());
      for (auto& v : r) v = rng.uniform(-1.0, 1.0);
      projection = Tensor(out.shape(), std::move(r));
    }
    return ops::sum(ops::mul(out, projection));
  };

  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.clear_grad();
  }
  {
    Graph graph(Mode::training);
    graph.backward(objective(fn()));
  }
  auto evaluate = [&] {
    Graph graph(Mode::inference);
    return objective(fn()).item();
  };

  GradcheckEntry entry{name, 0.0, 0, true};
  for (auto& in : inputs) {
    const std::vector<double> analytic = in.tensor.grad_or_zeros();
    std::vector<std::size_t> order(in.tensor.numel());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (in.skip_zeros) {
      std::erase_if(order, [&](std::size_t i) { return in.tensor[i] == 0.0; });
    }
    if (in.max_elements != 0 && order.size() > in.max_elements) {
      for (std::size_t i = 0; i < in.max_elements; ++i) {
        std::swap(order[i], order[i + rng.below(order.size() - i)]);
      }
      order.resize(in.max_elements);
    }
    auto data = in.tensor.mutable_data();
    for (std::size_t i : order) {
      const double saved = data[i];
      data[i] = saved + opts.h;
      const double up = evaluate();
      data[i] = saved - opts.h;
      const double down = evaluate();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * opts.h);
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      if (!(err <= entry.max_rel_error)) entry.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      ++entry.elements;
    }
    in.tensor.clear_grad();
  }
  entry.passed = entry.max_rel_error < opts.tolerance;
  return entry;
}

namespace gradcheck_detail {

// Values with magnitude in [0.2, 1], random sign: clear of kinks at zero.
inline Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor flatten(const std::vector<Tensor>& parts) {
  std::vector<Tensor> flat;
  for (const auto& t : parts) flat.push_back(ops::reshape(t, {t.numel()}));
  return ops::concat(flat);
}

inline std::vector<GradInput> with_params(std::vector<GradInput> inputs, const ModelParams& params,
                                          std::size_t per_tensor) {
  for (const auto& [path, t] : params) inputs.push_back({t, per_tensor, false});
  return inputs;
}

}  // namespace gradcheck_detail

/// Model configuration used by the suite: D=8, C=6, c=3, K=3, ×2 scale.
inline ModelConfig gradcheck_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.hsi_bands = 6;
  c.msi_bands = 3;
  c.scm_topk = 3;
  c.scale_factor = 2;
  return c;
}

/// Every primitive, every module, and the end-to-end loss on 8×8 inputs.
inline GradcheckReport run_gradcheck_suite(std::uint64_t seed = 7, std::size_t size = 8,
                                           const GradcheckOptions& base = {}) {
  using namespace gradcheck_detail;
  const auto start = std::chrono::steady_clock::now();
  GradcheckOptions opts = base;
  opts.seed = seed;
  Rng rng(seed);
  GradcheckReport report;
  report.tolerance = opts.tolerance;
  report.h = opts.h;
  auto run = [&](const std::string& name, std::vector<GradInput> inputs, const std::function<Tensor()>& fn) {
    report.entries.push_back(check_gradient(name, std::move(inputs), fn, opts));
  };

  const std::size_t n = size;
  const Shape img{3, n, n};

  // elementwise and reductions
  {
    Tensor a = uniform(rng, img), b = uniform(rng, img), s = uniform(rng, {1});
    run("add", {{a}, {b}}, [=] { return ops::add(a, b); });
    run("sub", {{a}, {b}}, [=] { return ops::sub(a, b); });
    run("mul", {{a}, {b}, {s}}, [=] { return ops::add(ops::mul(a, b), ops::mul(s, a)); });
    run("scale", {{a}}, [=] { return ops::scale(a, -1.7); });
    run("add_scalar", {{a}}, [=] { return ops::add_scalar(a, 0.3); });
    run("one_minus", {{a}}, [=] { return ops::one_minus(a); });
    Tensor c = away_from_zero(rng, img);
    run("abs", {{c}}, [=] { return ops::abs(c); });
    run("sum", {{a}}, [=] { return ops::sum(a); });
    run("mean", {{a}}, [=] { return ops::mean(a); });
    Tensor g = uniform(rng, img, -3.0, 3.0);
    run("gelu", {{g}}, [=] { return ops::gelu(g); });
    run("relu", {{c}}, [=] { return ops::relu(c); });
    run("sigmoid", {{g}}, [=] { return ops::sigmoid(g); });
  }

  // shape manipulation and linear algebra
  {
    Tensor a = uniform(rng, {4, n, n}), b = uniform(rng, {2, n, n});
    run("reshape", {{a}}, [=] { return ops::reshape(a, {4 * n * n}); });
    run("concat", {{a}, {b}}, [=] { return ops::concat({a, b}); });
    run("slice", {{a}}, [=] { return ops::slice(a, 1, 3); });
    Tensor v = uniform(rng, {4});
    run("mul_channel", {{a}, {v}}, [=] { return ops::mul_channel(a, v); });
    Tensor w = uniform(rng, {5, 4}), bias = uniform(rng, {5});
    run("linear", {{w}, {v}, {bias}}, [=] { return ops::linear(w, v, bias); });
    Tensor u = uniform(rng, {5});
    run("outer", {{u}, {v}}, [=] { return ops::outer(u, v); });
    run("diag", {{v}}, [=] { return ops::diag(v); });
    std::vector<double> tv(6 * 6);
    for (auto& x : tv) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (rng.uniform() < 0.5 ? rng.uniform(0.0, 0.05) : rng.uniform(0.2, 1.0));
    Tensor t({6, 6}, tv, true);
    run("threshold_zero", {{t}}, [=] { return ops::threshold_zero(t, 0.1); });
    Tensor m = uniform(rng, {6, 6});
    run("select_columns", {{m}}, [=] { return ops::select_columns(m, {4, 0, 2}); });
    run("topk", {{u}}, [=] { return ops::topk(u, 3).values; });
  }

  // convolution, pooling, normalization
  {
    Tensor x = uniform(rng, {4, n, n});
    Tensor k3 = uniform(rng, {4, 3, 3}), k5 = uniform(rng, {4, 5, 5});
    run("conv2d_depthwise", {{x}, {k3}, {k5}}, [=] {
      return flatten({ops::conv2d_depthwise(x, k3, 2), ops::conv2d_depthwise(x, k5, 1),
                      ops::conv2d_depthwise(x, k3, 1, 2)});
    });
    Tensor pw = uniform(rng, {5, 4}), pb = uniform(rng, {5});
    run("conv2d_pointwise", {{x}, {pw}, {pb}}, [=] { return ops::conv2d_pointwise(x, pw, pb); });
    Tensor cw = uniform(rng, {3, 4, 3, 3}), cb = uniform(rng, {3});
    run("conv2d", {{x}, {cw}, {cb}}, [=] { return ops::conv2d(x, cw, cb); });
    run("maxpool2d", {{x}}, [=] {
      return flatten({ops::maxpool2d(x, 3, 1, 1), ops::maxpool2d(x, 2, 2)});
    });
    run("global_maxpool", {{x}}, [=] { return ops::global_maxpool(x); });
    run("softmax", {{x}}, [=] { return ops::concat({ops::softmax(x, 0), ops::softmax(x, 2)}); });
    run("spatial_softmax", {{x}}, [=] { return ops::spatial_softmax(x); });
    Tensor gamma = uniform(rng, {4}), beta = uniform(rng, {4});
    run("layernorm", {{x}, {gamma}, {beta}}, [=] { return ops::layernorm(x, gamma, beta); });
    run("dropout_mask", {{x}}, [=] { return ops::dropout_mask(x, 0.3, 11, Mode::training); });
  }

  // resampling and wavelets
  {
    Tensor x = uniform(rng, {2, n, n}), small = uniform(rng, {2, n / 2, n / 2});
    run("bilinear_resize", {{x}, {small}}, [=] {
      return flatten({ops::bilinear_resize(x, 5, 7), ops::bilinear_resize(small, n, n)});
    });
    run("upsample2", {{small}}, [=] { return ops::upsample2(small); });
    run("downsample2", {{x}}, [=] { return ops::downsample2(x); });
    run("pad_reflect", {{x}}, [=] { return ops::pad_reflect(x, 3, 2); });
    run("crop", {{x}}, [=] { return ops::crop(x, n - 3, n - 1); });
    run("haar_dwt2", {{x}}, [=] {
      const auto b = ops::haar_dwt2(x);
      return ops::concat({b.ll, b.lh, b.hl, b.hh});
    });
    Tensor ll = uniform(rng, {2, n / 2, n / 2}), lh = uniform(rng, {2, n / 2, n / 2});
    Tensor hl = uniform(rng, {2, n / 2, n / 2}), hh = uniform(rng, {2, n / 2, n / 2});
    run("haar_idwt2", {{ll}, {lh}, {hl}, {hh}}, [=] { return ops::haar_idwt2(ll, lh, hl, hh); });
  }

  // spectral coordinate mixing
  {
    const std::size_t c = 6;
    Tensor z = uniform(rng, {c}), w1 = uniform(rng, {c, c}), w2 = uniform(rng, {c, c}), w3 = uniform(rng, {c, c});
    run("scm_expand", {{z}, {w1}, {w2}, {w3}}, [=] { return scm_expand(z, w1, w2, w3, 1e-3); });
    Tensor m = uniform(rng, {c, c});
    run("scm_topk_select", {{m}}, [=] { return scm_topk_select(m, 3); });
    std::vector<double> mv(c * 3);
    for (auto& v : mv) v = rng.uniform() < 0.5 ? 0.0 : rng.uniform(-1.0, 1.0);
    for (std::size_t k = 0; k < 3; ++k) mv[0 * 3 + k] = 0.0;  // all-zero row keeps z0
    Tensor sparse({c, 3}, mv, true);
    Tensor z0 = uniform(rng, {c});
    run("scm_traverse", {{sparse, 0, true}, {z0}}, [=] { return scm_traverse(sparse, z0); });
  }

  // losses
  {
    Tensor pred = uniform(rng, {2, n, n}, 0.0, 1.0), ref = uniform(rng, {2, n, n}, 0.0, 1.0);
    run("l1_loss", {{pred}, {ref}}, [=] { return l1_loss(pred, ref); });
    run("ssim", {{pred}, {ref}}, [=] { return ssim_mean(pred, ref, ssim_options_for(n, n)); });
    run("total_loss", {{pred}, {ref}}, [=] { return total_loss(pred, ref).total_tensor; });
  }

  // modules
  {
    const ModelConfig config = gradcheck_config();
    const std::size_t d = config.hidden_dim, per_tensor = 4;
    const ModelParams params = init_params(config, seed);
    Tensor lrhsi = uniform(rng, {config.hsi_bands, n / config.scale_factor, n / config.scale_factor}, 0.0, 1.0);
    Tensor hrmsi = uniform(rng, {config.msi_bands, n, n}, 0.0, 1.0);
    Tensor gt = uniform(rng, {config.hsi_bands, n, n}, 0.0, 1.0);
    Tensor x = uniform(rng, {d, n, n}), y = uniform(rng, {d, n, n});
    auto subset = [&](const std::string& prefix) {
      ModelParams sub;
      for (const auto& [path, t] : params)
        if (path.starts_with(prefix)) sub.set(path, t);
      return sub;
    };
    run("msg_pyramid", with_params({{lrhsi}, {hrmsi}}, subset("msg."), per_tensor), [=] {
      const auto f = msg_build_pyramid(lrhsi, hrmsi, params, config);
      std::vector<Tensor> all = f.local;
      all.insert(all.end(), f.global.begin(), f.global.end());
      return flatten(all);
    });
    run("spacam", with_params({{x}}, subset("level1.spacam."), per_tensor),
        [=] { return spacam_forward(x, params, config, "level1.spacam"); });
    run("specam", with_params({{x}}, subset("level1.specam."), per_tensor),
        [=] { return specam_forward(x, params, config, "level1.specam"); });
    run("sscfm", with_params({{x}, {y}}, subset("level1.sscfm."), per_tensor), [=] {
      ForwardContext ctx(Mode::training, seed);
      return sscfm_forward(x, y, params, config, ctx, "level1.sscfm");
    });
    std::vector<Tensor> fused;
    for (std::size_t l = 0; l < config.levels; ++l) fused.push_back(uniform(rng, {d, n >> l, n >> l}));
    std::vector<GradInput> recon_inputs{{lrhsi}};
    for (const auto& f : fused) recon_inputs.push_back({f});
    run("reconstruct", with_params(recon_inputs, subset("recon."), per_tensor),
        [=] { return reconstruct(fused, lrhsi, n, n, params); });
    run("cofusion_end_to_end", with_params({{lrhsi}, {hrmsi}}, params, 2), [=] {
      ForwardContext ctx(Mode::training, seed);
      return total_loss(cofusion_forward(lrhsi, hrmsi, params, config, ctx), gt).total_tensor;
    });
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cofusion
