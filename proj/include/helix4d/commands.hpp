#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "helix4d/attention_engine.hpp"
#include "helix4d/attention_masks.hpp"
#include "helix4d/checkpoint.hpp"
#include "helix4d/config.hpp"
#include "helix4d/eval_metrics.hpp"
#include "helix4d/point_io.hpp"
#include "helix4d/seq_io.hpp"
#include "helix4d/training.hpp"

namespace helix4d {

// ---------------------------------------------------------------------------
// bench-attention

struct BenchRow {
  std::string pattern;
  std::uint64_t pair_count = 0;
  double median_ms = 0.0;
  double pair_ratio = 0.0;  // relative to the anchor pattern
  double time_ratio = 0.0;
};

struct BenchInstance {
  SpacetimeSequence sequence;
  AttentionLayerParams<double> params;
};

/// F frames of S_f distinct, uniformly placed voxels with N(0,1) features.
inline BenchInstance make_bench_instance(const RunConfig& cfg) {
  auto rng = substream(cfg.seed, "bench");
  const int n = cfg.grid_n;
  const std::size_t voxels = static_cast<std::size_t>(n) * n * n;
  std::vector<std::uint32_t> ids(voxels);
  std::vector<std::vector<SpacetimeToken>> frames(static_cast<std::size_t>(cfg.bench_frames));
  for (auto& frame : frames) {
    std::iota(ids.begin(), ids.end(), 0u);
    for (int s = 0; s < cfg.bench_frame_tokens; ++s) {
      const std::size_t j = static_cast<std::size_t>(s) + uniform_index(rng, voxels - static_cast<std::size_t>(s));
      std::swap(ids[static_cast<std::size_t>(s)], ids[j]);
      const std::uint32_t id = ids[static_cast<std::size_t>(s)];
      SpacetimeToken tok;
      tok.coord = {static_cast<int>(id / (n * n)), static_cast<int>((id / n) % n), static_cast<int>(id % n)};
      tok.feature.resize(static_cast<std::size_t>(cfg.d_model));
      for (auto& v : tok.feature) v = standard_normal(rng);
      frame.push_back(std::move(tok));
    }
  }
  BenchInstance inst;
  inst.sequence = concatenate_frames(std::move(frames), n);
  inst.params.heads = cfg.heads;
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (Mat<double>* w : {&inst.params.wq, &inst.params.wk, &inst.params.wv, &inst.params.wo}) {
    *w = gaussian_like<double>(cfg.d_model, cfg.d_model, rng) * sd;
  }
  return inst;
}

inline std::vector<AttentionMask> all_pattern_masks(const RunConfig& cfg, const SpacetimeSequence& seq) {
  MaskSettings s = cfg.mask();
  std::vector<AttentionMask> out;
  for (const auto p : {MaskPattern::Full, MaskPattern::Causal, MaskPattern::SlidingWindow, MaskPattern::SpatialBlock,
                       MaskPattern::SlidingWindowAnchor}) {
    s.pattern = p;
    out.push_back(make_mask(s, seq));
  }
  return out;
}

/// Exact pair counts and median forward wall-clock per pattern.
inline std::vector<BenchRow> cmd_bench_attention(const RunConfig& cfg) {
  cfg.validate();
  const auto inst = make_bench_instance(cfg);
  const auto rotary = Rotary4D::make(cfg.d_head(), cfg.alpha, cfg.theta, cfg.grid_n, cfg.bench_frames);
  const RotaryTable table = make_rotary_table(inst.sequence, rotary);
  const Mat<double> x = inst.sequence.feature_matrix();
  const ExecutionOptions exec{cfg.deterministic, cfg.threads};

  std::vector<BenchRow> rows;
  for (const auto& mask : all_pattern_masks(cfg, inst.sequence)) {
    const auto groups = mask.groups();
    std::vector<double> times;
    for (int r = 0; r < cfg.bench_repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Mat<double> y = attention_forward<double>(x, inst.params, groups, table, nullptr, exec);
      const auto t1 = std::chrono::steady_clock::now();
      if (!y.allFinite()) throw NumericError("bench: non-finite attention output");
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
    rows.push_back({pattern_name(mask.pattern()), mask.pair_count(), times[times.size() / 2], 0.0, 0.0});
  }
  const auto anchor = std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) { return r.pattern == "anchor"; });
  for (auto& r : rows) {
    r.pair_ratio = static_cast<double>(r.pair_count) / static_cast<double>(anchor->pair_count);
    r.time_ratio = r.median_ms / anchor->median_ms;
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "pattern,pair_count,median_ms,pair_ratio_vs_anchor,time_ratio_vs_anchor\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.4f,%.6f,%.6f\n", r.pattern.c_str(),
                  static_cast<unsigned long long>(r.pair_count), r.median_ms, r.pair_ratio, r.time_ratio);
    out += buf;
  }
  return out;
}

inline std::string bench_table(const std::vector<BenchRow>& rows) {
  std::string out = "pattern      pairs        median_ms   pairs/anchor  time/anchor\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %12llu %12.3f %12.3fx %11.3fx\n", r.pattern.c_str(),
                  static_cast<unsigned long long>(r.pair_count), r.median_ms, r.pair_ratio, r.time_ratio);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// rope-sweep

/// Output deviation of a frozen network as the spatial rotary is truncated.
/// Uses the checkpoint when given, otherwise a fully random frozen network.
inline std::vector<AblationRow> cmd_rope_sweep(const RunConfig& cfg,
                                               const std::optional<std::filesystem::path>& checkpoint = std::nullopt) {
  cfg.validate();
  DenoiserParams<double> params;
  if (checkpoint) {
    params = load_checkpoint<double>(*checkpoint, cfg.denoiser());
  } else {
    auto rng = substream(cfg.seed, "sweep-init");
    params = random_frozen_denoiser<double>(cfg.denoiser(), rng);
  }
  return rope_ratio_ablation(params, cfg.alphas(), ablation_items(cfg, cfg.sweep_items), cfg.mask(), cfg.theta);
}

inline std::string sweep_csv(const std::vector<AblationRow>& rows) {
  std::string out = "alpha,mean_deviation\n";
  for (const auto& r : rows) {
    char alpha[32];
    const auto end = std::to_chars(alpha, alpha + sizeof(alpha), r.alpha).ptr;  // shortest round-trip form
    out += std::string(alpha, end) + "," + detail::format_g17(r.mean_deviation) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  double final_loss = 0.0;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& log, bool deterministic) {
  std::string out = "step,loss,grad_norm,wall_ms\n";
  for (const auto& r : log) {
    // Timings are not reproducible; deterministic runs log 0 in that column.
    out += std::to_string(r.step) + "," + detail::format_g17(r.loss) + "," + detail::format_g17(r.grad_norm) + "," +
           (deterministic ? std::string("0") : detail::format_g17(r.wall_ms)) + "\n";
  }
  return out;
}

inline TrainSummary cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir,
                              const std::function<void(const TrainLogRow&)>& on_step = {}) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  auto res = train_denoiser(cfg, on_step);
  TrainSummary s;
  s.final_loss = res.log.empty() ? 0.0 : res.log.back().loss;
  s.checkpoint = out_dir / "checkpoint.hlx4d";
  s.log = out_dir / "train_log.csv";
  save_checkpoint(s.checkpoint, res.params);
  detail::write_atomically(s.log, train_log_csv(res.log, cfg.deterministic));
  detail::write_atomically(out_dir / "config.txt", cfg.serialize());
  return s;
}

// ---------------------------------------------------------------------------
// sample / synth

/// Voxel centres rescaled to [-0.5, 0.5]^3.
inline Vec3 voxel_center(const VoxelCoord& v, int n) {
  return Vec3((v.x + 0.5) / n - 0.5, (v.y + 0.5) / n - 0.5, (v.z + 0.5) / n - 0.5);
}

/// Writes one XYZ file per frame (occupied voxel centres) plus manifest.txt.
template <typename Derived>
std::filesystem::path write_occupancy_clouds(const SpacetimeSequence& layout, const Eigen::MatrixBase<Derived>& features,
                                             const std::filesystem::path& out_dir, const std::string& stem,
                                             double threshold = 0.5) {
  std::vector<std::string> files;
  const auto& off = layout.frame_offsets();
  for (int f = 0; f < layout.num_frames(); ++f) {
    PointCloud pts;
    for (std::size_t i = off[static_cast<std::size_t>(f)]; i < off[static_cast<std::size_t>(f) + 1]; ++i) {
      if (static_cast<double>(features(static_cast<Eigen::Index>(i), 0)) > threshold) {
        pts.push_back(voxel_center(layout[i].coord, layout.grid_resolution()));
      }
    }
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%03d.xyz", stem.c_str(), f);
    write_xyz(out_dir / name, pts);
    files.emplace_back(name);
  }
  const auto manifest = out_dir / (stem + "_manifest.txt");
  write_manifest(manifest, files);
  return manifest;
}

/// `anchor_path` is a HELIX-SEQ file giving the token layout of every frame;
/// only its frame-0 features (the clean anchor latent) are used.
inline std::filesystem::path cmd_sample(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                        const std::filesystem::path& anchor_path, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const auto params = load_checkpoint<float>(checkpoint, cfg.denoiser());
  const auto layout = read_sequence(anchor_path);
  if (layout.feature_dim() != cfg.denoiser().latent_dim) {
    throw IoError("anchor sequence has feature dimension " + std::to_string(layout.feature_dim()) + ", model expects " +
                  std::to_string(cfg.denoiser().latent_dim));
  }
  if (layout.num_frames() > cfg.frames_t) throw ConfigError("anchor sequence has more frames than frames_t");
  const Mat<float> anchor =
      layout.feature_matrix().topRows(static_cast<Eigen::Index>(layout.frame_lengths()[0])).cast<float>();
  auto rng = substream(cfg.seed, "sample-noise");
  const Mat<float> gen = sample_sequence(layout, anchor, params, cfg.mask(), cfg.rotary(), cfg.flow_steps, rng, cfg.flow());
  if (!gen.allFinite()) throw NumericError("sampling produced non-finite latents");
  // The anchor is pinned during integration; restore its exact double values.
  Mat<double> out = gen.cast<double>();
  out.topRows(anchor.rows()) = layout.feature_matrix().topRows(anchor.rows());
  write_sequence(out_dir / "generated.helixseq", layout.with_features(out));
  return write_occupancy_clouds(layout, out, out_dir, "pred");
}

/// Synthetic moving-blob sequence (HELIX-SEQ) and its ground-truth clouds.
inline std::filesystem::path cmd_synth(const RunConfig& cfg, std::uint64_t data_seed, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const auto sample = synthesize_moving_blob(cfg.synthetic(data_seed));
  write_sequence(out_dir / "sequence.helixseq", sample.sequence);
  return write_occupancy_clouds(sample.sequence, sample.sequence.feature_matrix(), out_dir, "gt");
}

// ---------------------------------------------------------------------------
// eval

inline MetricOptions metric_options(const RunConfig& cfg) {
  MetricOptions m;
  m.icp.max_iters = cfg.icp_iters;
  m.icp.tolerance = cfg.icp_tolerance;
  m.chamfer = cfg.chamfer == "sum" ? ChamferConvention::Sum : ChamferConvention::Average;
  return m;
}

/// {"cd3d": ..., "cd4d": ..., "per_frame": [{"frame", "cd3d", "cd4d"}, ...]}
inline nlohmann::ordered_json cmd_eval(const std::filesystem::path& pred_manifest, const std::filesystem::path& gt_manifest,
                                       const RunConfig& cfg) {
  const auto pred = read_manifest(pred_manifest);
  const auto gt = read_manifest(gt_manifest);
  const auto opt = metric_options(cfg);
  const auto m3 = cd3d(pred, gt, opt);
  const auto m4 = cd4d(pred, gt, opt);
  nlohmann::ordered_json out;
  out["cd3d"] = m3.value;
  out["cd4d"] = m4.value;
  out["per_frame"] = nlohmann::ordered_json::array();
  for (std::size_t f = 0; f < m3.per_frame.size(); ++f) {
    out["per_frame"].push_back({{"frame", f}, {"cd3d", m3.per_frame[f]}, {"cd4d", m4.per_frame[f]}});
  }
  return out;
}

}  // namespace helix4d
