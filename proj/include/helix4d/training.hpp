#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "helix4d/config.hpp"
#include "helix4d/flow_model.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  DenoiserParams<float> params;
  std::vector<TrainLogRow> log;
};

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index) {
  return substream(root, stream, index)();
}

/// Held-out synthetic sequences; never drawn by the training stream.
inline std::vector<SyntheticSample> heldout_samples(const RunConfig& cfg, int count) {
  std::vector<SyntheticSample> out;
  for (int i = 0; i < count; ++i) out.push_back(synthesize_moving_blob(cfg.synthetic(derive_seed(cfg.seed, "heldout", i))));
  return out;
}

/// Flow-matching loss of `params` on a fixed held-out set (fixed u and noise
/// per item) so that losses before and after training are comparable.
template <typename Scalar>
double evaluate_loss(const DenoiserParams<Scalar>& params, const RunConfig& cfg, int count, int draws_per_item = 4) {
  const auto rotary = cfg.rotary();
  const auto settings = cfg.flow();
  double total = 0.0;
  int n = 0;
  for (const auto& sample : heldout_samples(cfg, count)) {
    const auto ctx = SequenceContext::build(sample.sequence, make_mask(cfg.mask(), sample.sequence), rotary);
    const Mat<Scalar> z1 = sample.sequence.feature_matrix().template cast<Scalar>();
    auto rng = substream(cfg.seed, "heldout-flow", static_cast<std::uint64_t>(n));
    for (int k = 0; k < draws_per_item; ++k) {
      // Stratified u keeps the estimate stable with few draws.
      const double u = (k + uniform01(rng)) / draws_per_item;
      const Mat<Scalar> z0 = gaussian_like<Scalar>(z1.rows(), z1.cols(), rng);
      total += flow_state_loss<Scalar>(params, make_flow_state(z1, ctx.frames, u, z0, settings.convention), ctx, nullptr,
                                       1.0, settings.exec);
      ++n;
    }
  }
  return total / n;
}

/// Mean occupancy IoU over frames >= 1 of `count` held-out sequences,
/// sampling with cfg.flow_steps Euler steps from the ground-truth anchor.
template <typename Scalar>
double evaluate_iou(const DenoiserParams<Scalar>& params, const RunConfig& cfg, int count) {
  const auto rotary = cfg.rotary();
  double total = 0.0;
  int frames = 0;
  int idx = 0;
  for (const auto& sample : heldout_samples(cfg, count)) {
    const auto& seq = sample.sequence;
    const Mat<Scalar> z1 = seq.feature_matrix().template cast<Scalar>();
    const Mat<Scalar> anchor = z1.topRows(static_cast<Eigen::Index>(seq.frame_lengths()[0]));
    auto rng = substream(cfg.seed, "heldout-sample", static_cast<std::uint64_t>(idx++));
    const Mat<Scalar> gen = sample_sequence(seq, anchor, params, cfg.mask(), rotary, cfg.flow_steps, rng, cfg.flow());
    for (int f = 1; f < seq.num_frames(); ++f) {
      total += occupancy_iou(seq, gen, sample.occupancy[static_cast<std::size_t>(f)], f);
      ++frames;
    }
  }
  return frames == 0 ? 0.0 : total / frames;
}

/// Trains the toy denoiser on freshly synthesized moving-blob batches.
/// Randomness: "init" for weights, "data"/"flow-time"/"noise" per step.
inline TrainResult train_denoiser(const RunConfig& cfg, const std::function<void(const TrainLogRow&)>& on_step = {}) {
  cfg.validate();
  auto init_rng = substream(cfg.seed, "init");
  TrainResult res{init_denoiser<float>(cfg.denoiser(), init_rng), {}};
  AdamW<float> opt(res.params, cfg.optimizer());
  const auto rotary = cfg.rotary();
  const auto mask = cfg.mask();
  const auto settings = cfg.flow();

  for (int step = 1; step <= cfg.train_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<SpacetimeSequence> batch;
    const std::uint64_t batch_seed = derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(step));
    for (int b = 0; b < cfg.batch; ++b) {
      batch.push_back(synthesize_moving_blob(cfg.synthetic(derive_seed(batch_seed, "sequence", static_cast<std::uint64_t>(b)))).sequence);
    }
    auto time_rng = substream(cfg.seed, "flow-time", static_cast<std::uint64_t>(step));
    auto noise_rng = substream(cfg.seed, "noise", static_cast<std::uint64_t>(step));
    auto out = flow_training_step(batch, res.params, mask, rotary, time_rng, noise_rng, settings, batch_seed);
    const double gnorm = opt.step(res.params, out.grads);
    const auto t1 = std::chrono::steady_clock::now();
    TrainLogRow row{step, out.loss, gnorm, std::chrono::duration<double, std::milli>(t1 - t0).count()};
    res.log.push_back(row);
    if (on_step) on_step(row);
  }
  return res;
}

/// A frozen network with every tensor random (including the heads that
/// init_denoiser zeroes), for sweeps that need a non-trivial fixed function.
template <typename Scalar>
DenoiserParams<Scalar> random_frozen_denoiser(const DenoiserConfig& cfg, std::mt19937_64& rng) {
  auto p = init_denoiser<Scalar>(cfg, rng);
  p.visit([&](const std::string& name, Mat<Scalar>& m) {
    const bool zeroed = name.starts_with("final.") || name.starts_with("out.") || name.ends_with("mod.w");
    if (!zeroed) return;
    const double sd = 0.5 / std::sqrt(static_cast<double>(m.rows()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(sd * standard_normal(rng));
  });
  return p;
}

/// Eval items for the RoPE-ratio sweep: held-out blob layouts with noisy
/// latents at a fixed mid-trajectory u.
inline std::vector<AblationItem> ablation_items(const RunConfig& cfg, int count, double u = 0.5) {
  std::vector<AblationItem> items;
  const auto conv = cfg.flow().convention;
  int idx = 0;
  for (auto& sample : heldout_samples(cfg, count)) {
    auto rng = substream(cfg.seed, "sweep-noise", static_cast<std::uint64_t>(idx++));
    const Mat<double> z1 = sample.sequence.feature_matrix();
    std::vector<int> frames;
    for (const auto& t : sample.sequence.tokens()) frames.push_back(t.frame);
    const auto st = make_flow_state<double>(z1, frames, u, gaussian_like<double>(z1.rows(), z1.cols(), rng), conv);
    items.push_back({std::move(sample.sequence), st.z_u, st.timestep});
  }
  return items;
}

}  // namespace helix4d
