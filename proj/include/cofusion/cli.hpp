#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cofusion/datasim.hpp"
#include "cofusion/error.hpp"
#include "cofusion/gradcheck.hpp"
#include "cofusion/io.hpp"
#include "cofusion/metrics.hpp"
#include "cofusion/model.hpp"
#include "cofusion/objective.hpp"

namespace cofusion::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Bad flag combinations or values detected after parsing.
class UsageError : public Error {
 public:
  using Error::Error;
};

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline fs::path manifest_path(const fs::path& primary_output) {
  return fs::path(primary_output.string() + ".manifest.json");
}

/// Records what a run consumed and produced, written next to its primary output.
class Manifest {
 public:
  explicit Manifest(std::string subcommand)
      : subcommand_(std::move(subcommand)), start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& path) { inputs_.push_back({path.string(), sha256_hex(detail::read_file(path))}); }
  void output(const fs::path& path) { outputs_.push_back(path.string()); }
  void seed(std::uint64_t s) { seed_ = s; }
  ordered_json& config() { return config_; }

  ordered_json to_json() const {
    ordered_json j;
    j["subcommand"] = subcommand_;
    j["tool_version"] = kToolVersion;
    j["seed"] = seed_ ? ordered_json(*seed_) : ordered_json(nullptr);
    j["config"] = config_.is_null() ? ordered_json::object() : config_;
    j["inputs"] = ordered_json::array();
    for (const auto& [path, hash] : inputs_) j["inputs"].push_back({{"path", path}, {"sha256", hash}});
    j["outputs"] = outputs_;
    j["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return j;
  }

  void write(const fs::path& primary_output) const {
    detail::write_file(manifest_path(primary_output), to_json().dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::string> outputs_;
  std::optional<std::uint64_t> seed_;
  ordered_json config_;
};

// --- PPM dump --------------------------------------------------------------------

inline std::array<std::size_t, 3> default_rgb_bands(std::size_t bands) { return {bands - 1, bands / 2, 0}; }

inline std::array<std::size_t, 3> parse_rgb_bands(const std::string& spec, std::size_t bands) {
  if (spec.empty() || spec == "auto") return default_rgb_bands(bands);
  std::array<std::size_t, 3> out{};
  std::stringstream in(spec);
  std::string item;
  std::size_t i = 0;
  while (std::getline(in, item, ',')) {
    if (i == 3) throw UsageError("--rgb-bands takes exactly three band indices");
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.empty()) throw UsageError("--rgb-bands: '" + item + "' is not a band index");
    if (v >= bands) throw UsageError("--rgb-bands: band " + item + " out of range for " + std::to_string(bands) + " bands");
    out[i++] = v;
  }
  if (i != 3) throw UsageError("--rgb-bands takes exactly three band indices");
  return out;
}

/// Binary PPM of three bands, values clipped to [0,1].
inline std::string encode_ppm(const HyperCube& cube, const std::array<std::size_t, 3>& rgb) {
  std::string out = "P6\n" + std::to_string(cube.width) + " " + std::to_string(cube.height) + "\n255\n";
  for (std::size_t r = 0; r < cube.height; ++r)
    for (std::size_t c = 0; c < cube.width; ++c)
      for (std::size_t b : rgb) {
        const double v = std::clamp(cube.at(b, r, c), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  return out;
}

// --- subcommands -----------------------------------------------------------------

struct SynthArgs {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t bands = 8;
  std::uint64_t seed = 0;
  std::string kind = "piecewise-materials";
  fs::path out;
};

inline void cmd_synth(const SynthArgs& a) {
  if (a.bands < 2) throw UsageError("--bands must be at least 2");
  if (a.height < 8 || a.width < 8) throw UsageError("--h and --w must be at least 8");
  Manifest m("synth");
  m.seed(a.seed);
  m.config() = {{"height", a.height}, {"width", a.width}, {"bands", a.bands}, {"kind", a.kind}};
  write_hsc(a.out, synth_cube(a.height, a.width, a.bands, a.seed, parse_scene_kind(a.kind)));
  m.output(a.out);
  m.write(a.out);
}

struct SimulateArgs {
  fs::path input;
  std::size_t scale = 4;
  std::string sigma = "auto";
  std::string srf = "default";
  std::size_t msi_bands = 3;
  fs::path out_lr;
  fs::path out_ms;
};

inline void cmd_simulate(const SimulateArgs& a) {
  if (a.scale != 2 && a.scale != 4 && a.scale != 8) {
    throw UsageError("--scale must be one of 2, 4, 8 (got " + std::to_string(a.scale) + ")");
  }
  DegradationSpec spec = DegradationSpec::for_scale(a.scale);
  if (a.sigma != "auto") {
    double sigma = 0.0;
    try {
      sigma = std::stod(a.sigma);
    } catch (const std::exception&) {
      throw UsageError("--sigma must be 'auto' or a positive number");
    }
    if (!(sigma > 0.0)) throw UsageError("--sigma must be positive");
    spec.blur_sigma = sigma;
    spec.kernel_size = min_kernel_size(sigma);
  }
  Manifest m("simulate");
  const HyperCube gt = read_hsc(a.input);
  gt.validate();
  m.input(a.input);
  if (a.srf == "default") {
    spec.srf = default_srf(gt.bands, std::min(a.msi_bands, gt.bands));
  } else {
    std::string text;
    try {
      text = detail::read_file(a.srf);
      spec.srf = srf_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("unreadable srf '" + a.srf + "': " + e.what());
    } catch (const IoError& e) {
      throw DataError("unreadable srf '" + a.srf + "': " + e.what());
    }
    m.input(a.srf);
  }
  const HyperCube lr = wald_degrade(gt, spec);
  const HyperCube ms = apply_srf(gt, spec.srf);
  write_hsc(a.out_lr, lr);
  write_hsc(a.out_ms, ms);
  m.config() = {{"scale", spec.scale},
                {"blur_sigma", spec.blur_sigma},
                {"kernel_size", spec.kernel_size},
                {"srf", spec.srf.weights},
                {"msi_bands", spec.srf.msi_bands}};
  m.output(a.out_lr);
  m.output(a.out_ms);
  m.write(a.out_lr);
}

struct TrainArgs {
  fs::path lr, ms, gt;
  std::size_t steps = 300;
  std::uint64_t seed = 42;
  std::optional<fs::path> config;
  std::optional<std::size_t> hidden_dim, topk;
  std::optional<double> learning_rate, lr_min, weight_decay, lambda;
  std::optional<std::string> schedule;
  fs::path out;
  std::optional<fs::path> log;
};

/// Config file (if any) overlaid on defaults, then flag overrides; band
/// counts and scale always come from the data.
inline ModelConfig resolve_config(const TrainArgs& a, const HyperCube& lr, const HyperCube& ms) {
  ModelConfig config;
  if (a.config) {
    try {
      nlohmann::json::parse(detail::read_file(*a.config)).get_to(config);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config '" + a.config->string() + "': " + e.what());
    }
  }
  if (a.hidden_dim) config.hidden_dim = *a.hidden_dim;
  if (a.topk) config.scm_topk = *a.topk;
  config.hsi_bands = lr.bands;
  config.msi_bands = ms.bands;
  if (lr.height == 0 || ms.height % lr.height != 0 || ms.width % lr.width != 0 ||
      ms.height / lr.height != ms.width / lr.width) {
    throw DataError("hrmsi " + ms.dims() + " is not an integer multiple of lrhsi " + lr.dims());
  }
  config.scale_factor = ms.height / lr.height;
  config.validate();
  return config;
}

inline void cmd_train(const TrainArgs& a, std::ostream& progress = std::cerr) {
  Manifest m("train");
  const HyperCube lr = read_hsc(a.lr), ms = read_hsc(a.ms), gt = read_hsc(a.gt);
  for (const auto* c : {&lr, &ms, &gt}) c->validate();
  m.input(a.lr);
  m.input(a.ms);
  m.input(a.gt);
  if (a.config) m.input(*a.config);
  if (gt.bands != lr.bands || gt.height != ms.height || gt.width != ms.width) {
    throw DataError("gt " + gt.dims() + " inconsistent with lrhsi " + lr.dims() + " and hrmsi " + ms.dims());
  }
  const ModelConfig config = resolve_config(a, lr, ms);
  TrainOptions opts;
  opts.steps = a.steps;
  opts.seed = a.seed;
  if (a.learning_rate) opts.lr = *a.learning_rate;
  if (a.lr_min) opts.lr_min = *a.lr_min;
  if (a.weight_decay) opts.weight_decay = *a.weight_decay;
  if (a.lambda) opts.lambda = *a.lambda;
  if (a.schedule) opts.schedule = parse_schedule(*a.schedule);

  std::ofstream log;
  if (a.log) {
    log.open(*a.log, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError(IoError::Kind::open_failed, "cannot open " + a.log->string() + " for writing");
  }
  const std::vector<Sample> data{{to_tensor(lr), to_tensor(ms), to_tensor(gt)}};
  const TrainResult result = train_loop(data, config, opts, std::nullopt, [&](const LossRecord& r) {
    if (log.is_open()) log << to_ndjson(r) << '\n';
    if (r.step % 50 == 0 || r.step + 1 == opts.steps) {
      progress << "step " << r.step << "  loss " << r.total << "  (l1 " << r.l1 << ", ssim " << r.ssim_loss
               << ")\n";
    }
  });
  save_model(a.out, config, result.params);

  m.seed(a.seed);
  m.config() = ordered_json::parse(canonical_config_json(config));
  m.config()["steps"] = opts.steps;
  m.config()["learning_rate"] = opts.lr;
  m.config()["lr_min"] = opts.lr_min;
  m.config()["schedule"] = opts.schedule == Schedule::cosine ? "cosine" : "constant";
  m.config()["weight_decay"] = opts.weight_decay;
  m.config()["lambda"] = opts.lambda;
  m.output(a.out);
  if (a.log) m.output(*a.log);
  m.write(a.out);
}

struct InferArgs {
  fs::path model, lr, ms, out;
  std::optional<fs::path> dump_rgb;
  std::string rgb_bands = "auto";
};

inline HyperCube fuse(const LoadedModel& model, const HyperCube& lr, const HyperCube& ms) {
  const ModelConfig& c = model.config;
  if (lr.bands != c.hsi_bands || ms.bands != c.msi_bands) {
    throw DataError("model expects " + std::to_string(c.hsi_bands) + " hyperspectral and " +
                    std::to_string(c.msi_bands) + " multispectral bands, got " + std::to_string(lr.bands) + " and " +
                    std::to_string(ms.bands));
  }
  try {
    return to_cube(cofusion_forward(to_tensor(lr), to_tensor(ms), model.params, c, Mode::inference), true);
  } catch (const DimensionError& e) {
    throw DataError(e.what());
  }
}

inline void cmd_infer(const InferArgs& a) {
  Manifest m("infer");
  const LoadedModel model = load_model(a.model);
  const HyperCube lr = read_hsc(a.lr), ms = read_hsc(a.ms);
  lr.validate();
  ms.validate();
  m.input(a.model);
  m.input(a.lr);
  m.input(a.ms);
  const HyperCube fused = fuse(model, lr, ms);
  write_hsc(a.out, fused);
  m.config() = ordered_json::parse(canonical_config_json(model.config));
  m.output(a.out);
  if (a.dump_rgb) {
    detail::write_file(*a.dump_rgb, encode_ppm(fused, parse_rgb_bands(a.rgb_bands, fused.bands)));
    m.output(*a.dump_rgb);
  }
  m.write(a.out);
}

struct EvalArgs {
  fs::path fused;
  std::optional<fs::path> ref, lr, ms;
  bool no_ref = false;
  std::optional<std::size_t> scale;
  fs::path out = "metrics.json";
  std::optional<fs::path> dump_rgb;
  std::string rgb_bands = "auto";
};

inline MetricsReport cmd_eval(const EvalArgs& a, std::ostream& out = std::cout) {
  if (a.no_ref == a.ref.has_value()) throw UsageError("eval needs exactly one of --ref or --no-ref");
  if (a.no_ref && (!a.lr || !a.ms)) throw UsageError("--no-ref needs --lr and --ms");
  Manifest m("eval");
  const HyperCube fused = read_hsc(a.fused);
  m.input(a.fused);
  MetricsReport report;
  if (a.ref) {
    const HyperCube ref = read_hsc(*a.ref);
    m.input(*a.ref);
    std::size_t scale = a.scale.value_or(4);
    if (!a.scale && a.lr) {
      const HyperCube lr = read_hsc(*a.lr);
      m.input(*a.lr);
      scale = resolution_ratio(fused, lr, "eval");
    }
    if (scale == 0) throw UsageError("--scale must be positive");
    report = full_reference_report(fused, ref, 1.0 / static_cast<double>(scale));
    m.config()["scale_ratio"] = 1.0 / static_cast<double>(scale);
  } else {
    const HyperCube lr = read_hsc(*a.lr), ms = read_hsc(*a.ms);
    m.input(*a.lr);
    m.input(*a.ms);
    report = no_reference_report(fused, lr, ms);
  }
  m.config()["mode"] = to_string(report.mode);
  const std::string text = to_json(report);
  out << text << '\n';
  detail::write_file(a.out, text + "\n");
  m.output(a.out);
  if (a.dump_rgb) {
    detail::write_file(*a.dump_rgb, encode_ppm(fused, parse_rgb_bands(a.rgb_bands, fused.bands)));
    m.output(*a.dump_rgb);
  }
  m.write(a.out);
  return report;
}

struct GradcheckArgs {
  std::string size = "small";
  std::uint64_t seed = 7;
  std::optional<fs::path> out;
  std::string inject_fault;
};

inline GradcheckReport cmd_gradcheck(const GradcheckArgs& a, std::ostream& out = std::cout) {
  if (a.size != "small") throw UsageError("--size supports only 'small'");
  Manifest m("gradcheck");
#ifdef COFUSION_FAULT_INJECTION
  Graph::fault_op() = a.inject_fault;
#endif
  const GradcheckReport report = run_gradcheck_suite(a.seed);
#ifdef COFUSION_FAULT_INJECTION
  Graph::fault_op().clear();
#endif
  const std::string text = to_json(report).dump(2);
  out << text << '\n';
  if (a.out) {
    detail::write_file(*a.out, text + "\n");
    m.seed(a.seed);
    m.config() = {{"size", a.size}, {"hidden_dim", 8}, {"hsi_bands", 6}, {"scm_topk", 3}, {"height", 8}, {"width", 8}};
    m.output(*a.out);
    m.write(*a.out);
  }
  return report;
}

// --- entry point -------------------------------------------------------------------

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ArgumentError*>(&e) ||
      dynamic_cast<const ConfigError*>(&e)) {
    return kUsage;
  }
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  return kData;
}

/// Parses and runs one subcommand. JSON goes to `out`, progress and errors to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hyperspectral/multispectral image fusion toolkit", "cofusion"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  SynthArgs synth;
  auto* sc_synth = app.add_subcommand("synth", "generate a synthetic hyperspectral cube");
  sc_synth->set_help_flag("--help", "print this help message and exit");  // -h would clash with --h
  sc_synth->add_option("--h", synth.height, "height")->capture_default_str();
  sc_synth->add_option("--w", synth.width, "width")->capture_default_str();
  sc_synth->add_option("--bands", synth.bands, "band count (>= 2)")->capture_default_str();
  sc_synth->add_option("--seed", synth.seed)->capture_default_str();
  sc_synth->add_option("--kind", synth.kind)
      ->check(CLI::IsMember({"gaussian-blobs", "piecewise-materials"}))
      ->capture_default_str();
  sc_synth->add_option("--out", synth.out)->required();

  SimulateArgs sim;
  auto* sc_sim = app.add_subcommand("simulate", "Wald-protocol degradation of a ground-truth cube");
  sc_sim->add_option("--input", sim.input)->required();
  sc_sim->add_option("--scale", sim.scale, "2, 4 or 8")->capture_default_str();
  sc_sim->add_option("--sigma", sim.sigma, "'auto' (scale/2) or a value in pixels")->capture_default_str();
  sc_sim->add_option("--srf", sim.srf, "'default' or a JSON file")->capture_default_str();
  sc_sim->add_option("--msi-bands", sim.msi_bands, "bands of the default srf")->capture_default_str();
  sc_sim->add_option("--out-lr", sim.out_lr)->required();
  sc_sim->add_option("--out-ms", sim.out_ms)->required();

  TrainArgs train;
  auto* sc_train = app.add_subcommand("train", "train a fusion model on one LRHSI/HRMSI/GT triple");
  sc_train->add_option("--lr", train.lr, "low-resolution hyperspectral cube")->required();
  sc_train->add_option("--ms", train.ms, "high-resolution multispectral cube")->required();
  sc_train->add_option("--gt", train.gt, "ground truth cube")->required();
  sc_train->add_option("--steps", train.steps)->capture_default_str();
  sc_train->add_option("--seed", train.seed)->capture_default_str();
  sc_train->add_option("--config", train.config, "model config JSON");
  sc_train->add_option("--hidden-dim", train.hidden_dim);
  sc_train->add_option("--topk", train.topk);
  sc_train->add_option("--learning-rate", train.learning_rate);
  sc_train->add_option("--lr-min", train.lr_min);
  sc_train->add_option("--schedule", train.schedule)->check(CLI::IsMember({"constant", "cosine"}));
  sc_train->add_option("--weight-decay", train.weight_decay);
  sc_train->add_option("--lambda", train.lambda, "SSIM loss weight");
  sc_train->add_option("--out", train.out)->required();
  sc_train->add_option("--log", train.log, "NDJSON loss log");

  InferArgs infer;
  auto* sc_infer = app.add_subcommand("infer", "fuse an LRHSI/HRMSI pair with a trained model");
  sc_infer->add_option("--model", infer.model)->required();
  sc_infer->add_option("--lr", infer.lr)->required();
  sc_infer->add_option("--ms", infer.ms)->required();
  sc_infer->add_option("--out", infer.out)->required();
  sc_infer->add_option("--dump-rgb", infer.dump_rgb, "write a PPM false-colour composite");
  sc_infer->add_option("--rgb-bands", infer.rgb_bands, "three band indices, e.g. 7,4,0")->capture_default_str();

  EvalArgs eval;
  auto* sc_eval = app.add_subcommand("eval", "quality metrics of a fused cube");
  sc_eval->add_option("--fused", eval.fused)->required();
  sc_eval->add_option("--ref", eval.ref);
  sc_eval->add_flag("--no-ref", eval.no_ref);
  sc_eval->add_option("--lr", eval.lr);
  sc_eval->add_option("--ms", eval.ms);
  sc_eval->add_option("--scale", eval.scale, "resolution ratio for ERGAS (default: from --lr, else 4)");
  sc_eval->add_option("--out", eval.out)->capture_default_str();
  sc_eval->add_option("--dump-rgb", eval.dump_rgb);
  sc_eval->add_option("--rgb-bands", eval.rgb_bands)->capture_default_str();

  GradcheckArgs gc;
  auto* sc_gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient rule");
  sc_gc->add_option("--size", gc.size)->capture_default_str();
  sc_gc->add_option("--seed", gc.seed)->capture_default_str();
  sc_gc->add_option("--out", gc.out, "also write the report here");
#ifdef COFUSION_FAULT_INJECTION
  sc_gc->add_option("--inject-fault", gc.inject_fault, "corrupt the gradient of this op");
#endif

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sc_synth) cmd_synth(synth);
    if (*sc_sim) cmd_simulate(sim);
    if (*sc_train) cmd_train(train, err);
    if (*sc_infer) cmd_infer(infer);
    if (*sc_eval) cmd_eval(eval, out);
    if (*sc_gc) {
      const GradcheckReport report = cmd_gradcheck(gc, out);
      if (!report.passed()) {
        err << "gradcheck failed:";
        for (const auto& op : report.failing()) err << ' ' << op;
        err << '\n';
        return kNumerical;
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kOk;
}

}  // namespace cofusion::cli
