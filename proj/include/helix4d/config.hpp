#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "helix4d/attention_masks.hpp"
#include "helix4d/common.hpp"
#include "helix4d/flow_model.hpp"
#include "helix4d/rope4d.hpp"
#include "helix4d/seq_io.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

/// Every tunable of the toolkit. File format: `key = value` per line,
/// dotted section keys, `#` comments.
struct RunConfig {
  // geometry / rotary
  int grid_n = 16;
  int frames_t = 8;
  int d_model = 96;
  int heads = 4;
  int layers = 4;
  int mlp_hidden = 192;
  double alpha = 0.75;
  double theta = 10000.0;

  // attention
  std::string attention_pattern = "anchor";
  int window_halfwidth = 2;
  int blocks_per_axis = 8;
  int block_edge = 0;

  // flow
  int flow_steps = 32;
  std::string time_convention = "noise_level";

  // training
  double lr = 2e-4;
  int train_steps = 2000;
  int batch = 8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;

  // synthetic data
  double blob_radius = 1.0;
  double blob_shell = 1.0;
  double blob_speed = 1.0;
  double blob_curvature = 0.15;

  // benchmark / sweep / eval
  int bench_frames = 16;
  int bench_frame_tokens = 256;
  int bench_repeats = 5;
  std::string sweep_alphas = "0,0.2,0.4,0.6,0.8,1";
  int sweep_items = 8;
  int eval_sequences = 8;
  int icp_iters = 100;
  double icp_tolerance = 1e-10;
  std::string chamfer = "average";

  std::uint64_t seed = 0;
  bool deterministic = true;
  int threads = 1;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  int d_head() const { return d_model / heads; }

  DenoiserConfig denoiser() const {
    DenoiserConfig c;
    c.latent_dim = 4;
    c.d_model = d_model;
    c.heads = heads;
    c.layers = layers;
    c.mlp_hidden = mlp_hidden;
    return c;
  }

  MaskSettings mask() const {
    MaskSettings m;
    m.pattern = parse_pattern(attention_pattern);
    m.window_halfwidth = window_halfwidth;
    m.blocks_per_axis = blocks_per_axis;
    m.block_edge = block_edge;
    return m;
  }

  Rotary4D rotary() const { return Rotary4D::make(d_head(), alpha, theta, grid_n, frames_t); }

  SyntheticConfig synthetic(std::uint64_t data_seed) const {
    SyntheticConfig s;
    s.grid_n = grid_n;
    s.frames = frames_t;
    s.radius = blob_radius;
    s.shell = blob_shell;
    s.speed = blob_speed;
    s.curvature = blob_curvature;
    s.feature_dim = 4;
    s.seed = data_seed;
    return s;
  }

  FlowSettings flow() const {
    FlowSettings f;
    f.convention = time_convention == "data_fraction" ? TimeConvention::DataFraction : TimeConvention::NoiseLevel;
    f.exec.deterministic = deterministic;
    f.exec.threads = threads;
    return f;
  }

  AdamWSettings optimizer() const {
    AdamWSettings a;
    a.lr = lr;
    a.weight_decay = weight_decay;
    a.clip_norm = clip_norm;
    return a;
  }

  std::vector<double> alphas() const {
    std::vector<double> out;
    std::stringstream ss(sweep_alphas);
    std::string item;
    while (std::getline(ss, item, ',')) {
      double v = 0.0;
      const auto b = item.find_first_not_of(' ');
      const auto e = item.find_last_not_of(' ');
      if (b == std::string::npos) continue;
      const auto res = std::from_chars(item.data() + b, item.data() + e + 1, v);
      if (res.ec != std::errc{} || res.ptr != item.data() + e + 1 || v < 0.0 || v > 1.0) {
        throw ConfigError("sweep.alphas: '" + item + "' is not a ratio in [0, 1]");
      }
      out.push_back(v);
    }
    return out;
  }

  /// Checks every cross-key constraint; throws ConfigError naming the keys.
  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (grid_n < 1 || (grid_n & (grid_n - 1)) != 0) fail("grid_n=" + std::to_string(grid_n) + " must be a power of two");
    if (frames_t < 1) fail("frames_t must be >= 1");
    if (heads < 1 || d_model % heads != 0) {
      fail("d_model=" + std::to_string(d_model) + " must be divisible by heads=" + std::to_string(heads));
    }
    if (d_head() % 6 != 0) {
      fail("d_head = d_model/heads = " + std::to_string(d_head()) + " must be divisible by 6 (three rotary axes of M pairs)");
    }
    if (!(alpha > 0.0) || alpha > 1.0) fail("alpha must lie in (0, 1]");
    if (std::abs(alpha - 0.75) < 1e-12 && d_head() % 24 != 0) {
      fail("d_head=" + std::to_string(d_head()) + " must be divisible by 24 when alpha=0.75");
    }
    if (!(theta > 1.0)) fail("theta must exceed 1");
    if (layers < 1 || mlp_hidden < 1) fail("layers and mlp_hidden must be >= 1");
    (void)parse_pattern(attention_pattern);
    if (window_halfwidth < 0) fail("attention.window_halfwidth must be >= 0");
    if (block_edge > 0 ? grid_n % block_edge != 0 : (blocks_per_axis < 1 || grid_n % blocks_per_axis != 0)) {
      fail("attention block size does not divide grid_n=" + std::to_string(grid_n));
    }
    if (flow_steps < 1) fail("flow.steps must be >= 1");
    if (time_convention != "noise_level" && time_convention != "data_fraction") {
      fail("flow.time_convention must be noise_level or data_fraction");
    }
    if (!(lr > 0.0) || train_steps < 0 || batch < 1) fail("train.lr > 0, train.steps >= 0 and train.batch >= 1 required");
    if (blob_radius < 0.0 || blob_shell < 0.0) fail("data.radius and data.shell must be >= 0");
    if (bench_frames < 1 || bench_frame_tokens < 1 || bench_repeats < 1) fail("bench.* values must be >= 1");
    if (static_cast<long long>(bench_frame_tokens) > static_cast<long long>(grid_n) * grid_n * grid_n) {
      fail("bench.frame_tokens exceeds the number of voxels in the grid");
    }
    if (chamfer != "average" && chamfer != "sum") fail("eval.chamfer must be average or sum");
    if (threads < 1) fail("threads must be >= 1");
    (void)alphas();
  }

  /// Applies one `key=value` assignment.
  void set(const std::string& key, const std::string& value) {
    auto as_int = [&](int& dst) { dst = parse_number<int>(key, value); };
    auto as_double = [&](double& dst) { dst = parse_number<double>(key, value); };
    if (key == "grid_n") as_int(grid_n);
    else if (key == "frames_t") as_int(frames_t);
    else if (key == "d_model") as_int(d_model);
    else if (key == "heads") as_int(heads);
    else if (key == "layers") as_int(layers);
    else if (key == "mlp_hidden") as_int(mlp_hidden);
    else if (key == "d_head") {
      // Accepted for the rotary section; d_model follows from heads.
      d_model = parse_number<int>(key, value) * heads;
    }
    else if (key == "alpha") as_double(alpha);
    else if (key == "theta") as_double(theta);
    else if (key == "attention.pattern") attention_pattern = value;
    else if (key == "attention.window_halfwidth") as_int(window_halfwidth);
    else if (key == "attention.blocks_per_axis") as_int(blocks_per_axis);
    else if (key == "attention.block_edge") as_int(block_edge);
    else if (key == "flow.steps") as_int(flow_steps);
    else if (key == "flow.time_convention") time_convention = value;
    else if (key == "train.lr") as_double(lr);
    else if (key == "train.steps") as_int(train_steps);
    else if (key == "train.batch") as_int(batch);
    else if (key == "train.weight_decay") as_double(weight_decay);
    else if (key == "train.clip_norm") as_double(clip_norm);
    else if (key == "data.radius") as_double(blob_radius);
    else if (key == "data.shell") as_double(blob_shell);
    else if (key == "data.speed") as_double(blob_speed);
    else if (key == "data.curvature") as_double(blob_curvature);
    else if (key == "bench.frames") as_int(bench_frames);
    else if (key == "bench.frame_tokens") as_int(bench_frame_tokens);
    else if (key == "bench.repeats") as_int(bench_repeats);
    else if (key == "sweep.alphas") sweep_alphas = value;
    else if (key == "sweep.items") as_int(sweep_items);
    else if (key == "eval.sequences") as_int(eval_sequences);
    else if (key == "eval.icp_iters") as_int(icp_iters);
    else if (key == "eval.icp_tolerance") as_double(icp_tolerance);
    else if (key == "eval.chamfer") chamfer = value;
    else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
    else if (key == "deterministic") deterministic = parse_bool(key, value);
    else if (key == "threads") as_int(threads);
    else throw ConfigError("unknown config key '" + key + "'");
  }

  std::vector<std::pair<std::string, std::string>> entries() const {
    auto g = [](double v) {  // shortest form that parses back to v
      char buf[32];
      return std::string(buf, std::to_chars(buf, buf + sizeof(buf), v).ptr);
    };
    return {
        {"grid_n", std::to_string(grid_n)},
        {"frames_t", std::to_string(frames_t)},
        {"d_model", std::to_string(d_model)},
        {"heads", std::to_string(heads)},
        {"layers", std::to_string(layers)},
        {"mlp_hidden", std::to_string(mlp_hidden)},
        {"alpha", g(alpha)},
        {"theta", g(theta)},
        {"attention.pattern", attention_pattern},
        {"attention.window_halfwidth", std::to_string(window_halfwidth)},
        {"attention.blocks_per_axis", std::to_string(blocks_per_axis)},
        {"attention.block_edge", std::to_string(block_edge)},
        {"flow.steps", std::to_string(flow_steps)},
        {"flow.time_convention", time_convention},
        {"train.lr", g(lr)},
        {"train.steps", std::to_string(train_steps)},
        {"train.batch", std::to_string(batch)},
        {"train.weight_decay", g(weight_decay)},
        {"train.clip_norm", g(clip_norm)},
        {"data.radius", g(blob_radius)},
        {"data.shell", g(blob_shell)},
        {"data.speed", g(blob_speed)},
        {"data.curvature", g(blob_curvature)},
        {"bench.frames", std::to_string(bench_frames)},
        {"bench.frame_tokens", std::to_string(bench_frame_tokens)},
        {"bench.repeats", std::to_string(bench_repeats)},
        {"sweep.alphas", sweep_alphas},
        {"sweep.items", std::to_string(sweep_items)},
        {"eval.sequences", std::to_string(eval_sequences)},
        {"eval.icp_iters", std::to_string(icp_iters)},
        {"eval.icp_tolerance", g(icp_tolerance)},
        {"eval.chamfer", chamfer},
        {"seed", std::to_string(seed)},
        {"deterministic", deterministic ? "true" : "false"},
        {"threads", std::to_string(threads)},
    };
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
  }

  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      if (trim(line).empty()) continue;
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = detail::read_file(path);
    } catch (const IoError&) {
      throw ConfigError("cannot read config file " + path.string());
    }
    return parse(text);
  }

 private:
  template <typename T>
  static T parse_number(const std::string& key, const std::string& value) {
    T v{};
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
      throw ConfigError("config key '" + key + "': '" + value + "' is not a valid number");
    }
    return v;
  }

  static bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
  }
};

}  // namespace helix4d
