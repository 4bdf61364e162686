#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "helix4d/attention_engine.hpp"
#include "helix4d/attention_masks.hpp"
#include "helix4d/common.hpp"
#include "helix4d/rope4d.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

struct DenoiserConfig {
  int latent_dim = 4;
  int d_model = 96;
  int heads = 4;
  int layers = 4;
  int mlp_hidden = 192;
  int time_embed = 32;
};

/// Which end of the interpolation the network's timestep input calls zero.
/// NoiseLevel feeds tau = 1 - u, so the clean anchor sits at timestep 0.
enum class TimeConvention { NoiseLevel, DataFraction };

inline double network_time(double u, TimeConvention conv) { return conv == TimeConvention::NoiseLevel ? 1.0 - u : u; }
inline double clean_time(TimeConvention conv) { return network_time(1.0, conv); }

template <typename Scalar>
struct DenoiserParams {
  DenoiserConfig cfg;
  Mat<Scalar> in_w, in_b;
  Mat<Scalar> time_w1, time_b1, time_w2, time_b2;
  std::vector<BlockParams<Scalar>> blocks;
  std::vector<Mat<Scalar>> mod_w, mod_b;  // per block: D x 4D, 1 x 4D
  Mat<Scalar> final_mod_w, final_mod_b;   // D x 2D, 1 x 2D
  Mat<Scalar> out_w, out_b;

  static DenoiserParams zeros(const DenoiserConfig& cfg) {
    if (cfg.layers < 1) throw ConfigError("denoiser needs at least one layer");
    if (cfg.heads < 1 || cfg.d_model % cfg.heads != 0) {
      throw ConfigError("d_model=" + std::to_string(cfg.d_model) + " is not divisible by heads=" + std::to_string(cfg.heads));
    }
    if (cfg.time_embed < 2 || cfg.time_embed % 2 != 0) throw ConfigError("time embedding width must be even");
    const int d = cfg.d_model;
    DenoiserParams p;
    p.cfg = cfg;
    p.in_w = Mat<Scalar>::Zero(cfg.latent_dim, d);
    p.in_b = Mat<Scalar>::Zero(1, d);
    p.time_w1 = Mat<Scalar>::Zero(cfg.time_embed, d);
    p.time_b1 = Mat<Scalar>::Zero(1, d);
    p.time_w2 = Mat<Scalar>::Zero(d, d);
    p.time_b2 = Mat<Scalar>::Zero(1, d);
    for (int l = 0; l < cfg.layers; ++l) {
      BlockParams<Scalar> b;
      b.attn.heads = cfg.heads;
      b.attn.wq = b.attn.wk = b.attn.wv = b.attn.wo = Mat<Scalar>::Zero(d, d);
      b.w1 = Mat<Scalar>::Zero(d, cfg.mlp_hidden);
      b.b1 = Mat<Scalar>::Zero(1, cfg.mlp_hidden);
      b.w2 = Mat<Scalar>::Zero(cfg.mlp_hidden, d);
      b.b2 = Mat<Scalar>::Zero(1, d);
      p.blocks.push_back(std::move(b));
      p.mod_w.push_back(Mat<Scalar>::Zero(d, 4 * d));
      p.mod_b.push_back(Mat<Scalar>::Zero(1, 4 * d));
    }
    p.final_mod_w = Mat<Scalar>::Zero(d, 2 * d);
    p.final_mod_b = Mat<Scalar>::Zero(1, 2 * d);
    p.out_w = Mat<Scalar>::Zero(d, cfg.latent_dim);
    p.out_b = Mat<Scalar>::Zero(1, cfg.latent_dim);
    return p;
  }

  /// Calls f(name, tensor) for every parameter in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename To>
  DenoiserParams<To> cast() const {
    auto out = DenoiserParams<To>::zeros(cfg);
    std::vector<const Mat<Scalar>*> src;
    visit([&](const std::string&, const Mat<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<To>& m) { m = src[i++]->template cast<To>(); });
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    f("in.w", s.in_w);
    f("in.b", s.in_b);
    f("time.w1", s.time_w1);
    f("time.b1", s.time_b1);
    f("time.w2", s.time_w2);
    f("time.b2", s.time_b2);
    for (std::size_t l = 0; l < s.blocks.size(); ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      auto& b = s.blocks[l];
      f(pre + "attn.wq", b.attn.wq);
      f(pre + "attn.wk", b.attn.wk);
      f(pre + "attn.wv", b.attn.wv);
      f(pre + "attn.wo", b.attn.wo);
      f(pre + "mlp.w1", b.w1);
      f(pre + "mlp.b1", b.b1);
      f(pre + "mlp.w2", b.w2);
      f(pre + "mlp.b2", b.b2);
      f(pre + "mod.w", s.mod_w[l]);
      f(pre + "mod.b", s.mod_b[l]);
    }
    f("final.mod.w", s.final_mod_w);
    f("final.mod.b", s.final_mod_b);
    f("out.w", s.out_w);
    f("out.b", s.out_b);
  }
};

/// Random init. Modulation and the output head start at zero, so the
/// untrained network predicts zero velocity.
template <typename Scalar>
DenoiserParams<Scalar> init_denoiser(const DenoiserConfig& cfg, std::mt19937_64& rng) {
  auto p = DenoiserParams<Scalar>::zeros(cfg);
  const double depth_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
  p.visit([&](const std::string& name, Mat<Scalar>& m) {
    const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
    if (is_bias || name.starts_with("final.") || name.starts_with("out.") || name.ends_with("mod.w")) return;
    double std_dev = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) std_dev *= depth_scale;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(std_dev * standard_normal(rng));
  });
  return p;
}

namespace detail {

template <typename Scalar>
Scalar silu(Scalar x) {
  return x / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
  const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

template <typename Scalar>
Mat<Scalar> timestep_embedding(const std::vector<double>& times, int width) {
  Mat<Scalar> emb(static_cast<Eigen::Index>(times.size()), width);
  const int half = width / 2;
  for (std::size_t g = 0; g < times.size(); ++g) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = 1000.0 * times[g] * freq;
      emb(static_cast<Eigen::Index>(g), k) = static_cast<Scalar>(std::sin(arg));
      emb(static_cast<Eigen::Index>(g), half + k) = static_cast<Scalar>(std::cos(arg));
    }
  }
  return emb;
}

template <typename Scalar>
Mat<Scalar> broadcast_rows(const Mat<Scalar>& per_group, const std::vector<int>& group_of, Eigen::Index col0,
                           Eigen::Index width) {
  Mat<Scalar> out(static_cast<Eigen::Index>(group_of.size()), width);
  for (std::size_t i = 0; i < group_of.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = per_group.row(group_of[i]).segment(col0, width);
  }
  return out;
}

template <typename Scalar>
void reduce_rows_into(Mat<Scalar>& per_group, const Mat<Scalar>& per_token, const std::vector<int>& group_of,
                      Eigen::Index col0) {
  for (std::size_t i = 0; i < group_of.size(); ++i) {
    per_group.row(group_of[i]).segment(col0, per_token.cols()) += per_token.row(static_cast<Eigen::Index>(i));
  }
}

}  // namespace detail

template <typename Scalar>
struct DenoiserCache {
  Mat<Scalar> z;
  std::vector<int> group_of;
  Mat<Scalar> emb, time_pre, time_hid, cond, cond_act;
  std::vector<Mat<Scalar>> mods;  // per block, G x 4D
  std::vector<BlockModulation<Scalar>> token_mods;
  std::vector<BlockCache<Scalar>> blocks;
  Mat<Scalar> final_mod, xhat_f, hf;
  Vec<Scalar> inv_f;
};

/// Everything the network needs about one sequence besides its latents.
struct SequenceContext {
  std::vector<AttentionGroup> groups;
  RotaryTable rotary;
  std::vector<int> frames;  // frame index per token

  template <RotaryEncoding Encoding>
  static SequenceContext build(const SpacetimeSequence& seq, const AttentionMask& mask, const Encoding& enc) {
    if (mask.frame_lengths() != seq.frame_lengths()) throw std::invalid_argument("mask does not match sequence");
    SequenceContext ctx;
    ctx.groups = mask.groups();
    ctx.rotary = make_rotary_table(seq, enc);
    ctx.frames.reserve(seq.total_length());
    for (const auto& t : seq.tokens()) ctx.frames.push_back(t.frame);
    return ctx;
  }
};

/// Velocity prediction for latents z (S x latent) with one network timestep
/// per token.
template <typename Scalar>
Mat<Scalar> denoiser_forward(const DenoiserParams<Scalar>& p, const Mat<Scalar>& z, const std::vector<double>& token_time,
                             const SequenceContext& ctx, DenoiserCache<Scalar>* cache = nullptr,
                             const ExecutionOptions& exec = {}) {
  const Eigen::Index d = p.cfg.d_model;
  if (z.cols() != p.cfg.latent_dim) throw std::invalid_argument("denoiser: latent width mismatch");
  if (static_cast<std::size_t>(z.rows()) != token_time.size()) throw std::invalid_argument("denoiser: one timestep per token required");

  std::vector<double> times;
  std::vector<int> group_of(token_time.size());
  for (std::size_t i = 0; i < token_time.size(); ++i) {
    const auto it = std::find(times.begin(), times.end(), token_time[i]);
    group_of[i] = static_cast<int>(it - times.begin());
    if (it == times.end()) times.push_back(token_time[i]);
  }

  Mat<Scalar> emb = detail::timestep_embedding<Scalar>(times, p.cfg.time_embed);
  Mat<Scalar> time_pre = (emb * p.time_w1).rowwise() + p.time_b1.row(0);
  Mat<Scalar> time_hid = time_pre.unaryExpr([](Scalar x) { return detail::silu(x); });
  Mat<Scalar> cond = (time_hid * p.time_w2).rowwise() + p.time_b2.row(0);
  Mat<Scalar> cond_act = cond.unaryExpr([](Scalar x) { return detail::silu(x); });

  Mat<Scalar> h = (z * p.in_w).rowwise() + p.in_b.row(0);
  std::vector<Mat<Scalar>> mods;
  std::vector<BlockModulation<Scalar>> token_mods;
  std::vector<BlockCache<Scalar>> block_caches(cache ? p.blocks.size() : 0);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    Mat<Scalar> m = (cond_act * p.mod_w[l]).rowwise() + p.mod_b[l].row(0);
    BlockModulation<Scalar> tm{detail::broadcast_rows(m, group_of, 0, d), detail::broadcast_rows(m, group_of, d, d),
                               detail::broadcast_rows(m, group_of, 2 * d, d), detail::broadcast_rows(m, group_of, 3 * d, d)};
    h = transformer_block(h, p.blocks[l], tm, ctx.groups, ctx.rotary, cache ? &block_caches[l] : nullptr, exec);
    if (!h.allFinite()) throw NumericError("non-finite activations after transformer block " + std::to_string(l));
    mods.push_back(std::move(m));
    token_mods.push_back(std::move(tm));
  }

  Mat<Scalar> final_mod = (cond_act * p.final_mod_w).rowwise() + p.final_mod_b.row(0);
  Vec<Scalar> inv_f;
  Mat<Scalar> xhat_f = detail::layer_norm(h, &inv_f);
  Mat<Scalar> hf = (xhat_f.array() * (detail::broadcast_rows(final_mod, group_of, d, d).array() + Scalar(1)) +
                    detail::broadcast_rows(final_mod, group_of, 0, d).array())
                       .matrix();
  Mat<Scalar> v = (hf * p.out_w).rowwise() + p.out_b.row(0);

  if (cache != nullptr) {
    cache->z = z;
    cache->group_of = std::move(group_of);
    cache->emb = std::move(emb);
    cache->time_pre = std::move(time_pre);
    cache->time_hid = std::move(time_hid);
    cache->cond = std::move(cond);
    cache->cond_act = std::move(cond_act);
    cache->mods = std::move(mods);
    cache->token_mods = std::move(token_mods);
    cache->blocks = std::move(block_caches);
    cache->final_mod = std::move(final_mod);
    cache->xhat_f = std::move(xhat_f);
    cache->inv_f = std::move(inv_f);
    cache->hf = std::move(hf);
  }
  return v;
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(velocity).
template <typename Scalar>
void denoiser_backward(const DenoiserParams<Scalar>& p, const DenoiserCache<Scalar>& c, const Mat<Scalar>& dv,
                       const SequenceContext& ctx, DenoiserParams<Scalar>& grads) {
  const Eigen::Index d = p.cfg.d_model;
  const auto& group_of = c.group_of;
  const Eigen::Index groups = c.cond.rows();

  grads.out_w += c.hf.transpose() * dv;
  grads.out_b += dv.colwise().sum();
  const Mat<Scalar> dhf = dv * p.out_w.transpose();

  Mat<Scalar> dcond_act = Mat<Scalar>::Zero(groups, d);
  {
    Mat<Scalar> dfinal = Mat<Scalar>::Zero(groups, 2 * d);
    detail::reduce_rows_into(dfinal, dhf, group_of, 0);
    detail::reduce_rows_into(dfinal, Mat<Scalar>(dhf.cwiseProduct(c.xhat_f)), group_of, d);
    grads.final_mod_w += c.cond_act.transpose() * dfinal;
    grads.final_mod_b += dfinal.colwise().sum();
    dcond_act += dfinal * p.final_mod_w.transpose();
  }
  const Mat<Scalar> scale_f = detail::broadcast_rows(c.final_mod, group_of, d, d);
  Mat<Scalar> dh = detail::layer_norm_backward(Mat<Scalar>(dhf.array() * (scale_f.array() + Scalar(1))), c.xhat_f, c.inv_f);

  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    auto bg = transformer_block_backward(dh, p.blocks[li], c.token_mods[li], c.blocks[li], ctx.rotary);
    auto& gb = grads.blocks[li];
    gb.attn.wq += bg.attn.wq;
    gb.attn.wk += bg.attn.wk;
    gb.attn.wv += bg.attn.wv;
    gb.attn.wo += bg.attn.wo;
    gb.w1 += bg.w1;
    gb.b1 += bg.b1;
    gb.w2 += bg.w2;
    gb.b2 += bg.b2;
    Mat<Scalar> dm = Mat<Scalar>::Zero(groups, 4 * d);
    detail::reduce_rows_into(dm, bg.mod.shift1, group_of, 0);
    detail::reduce_rows_into(dm, bg.mod.scale1, group_of, d);
    detail::reduce_rows_into(dm, bg.mod.shift2, group_of, 2 * d);
    detail::reduce_rows_into(dm, bg.mod.scale2, group_of, 3 * d);
    grads.mod_w[li] += c.cond_act.transpose() * dm;
    grads.mod_b[li] += dm.colwise().sum();
    dcond_act += dm * p.mod_w[li].transpose();
    dh = std::move(bg.dx);
  }

  grads.in_w += c.z.transpose() * dh;
  grads.in_b += dh.colwise().sum();

  const Mat<Scalar> dcond = dcond_act.cwiseProduct(c.cond.unaryExpr([](Scalar x) { return detail::silu_grad(x); }));
  grads.time_w2 += c.time_hid.transpose() * dcond;
  grads.time_b2 += dcond.colwise().sum();
  const Mat<Scalar> dhid = dcond * p.time_w2.transpose();
  const Mat<Scalar> dpre = dhid.cwiseProduct(c.time_pre.unaryExpr([](Scalar x) { return detail::silu_grad(x); }));
  grads.time_w1 += c.emb.transpose() * dpre;
  grads.time_b1 += dpre.colwise().sum();
}

// ---------------------------------------------------------------------------
// Flow matching with first-frame conditioning

/// z_u = (1 - u) z0 + u z1 on frames >= 1; frame 0 carries the clean anchor
/// latent at the clean timestep.
template <typename Scalar>
struct FlowState {
  Mat<Scalar> z1, z0, z_u;
  Mat<Scalar> anchor;  // frame-0 rows
  double u = 0.0;
  std::vector<double> timestep;
  std::vector<int> frames;

  /// Velocity target z1 - z0 (frame-0 rows are present but never scored).
  Mat<Scalar> target() const { return z1 - z0; }
};

template <typename Scalar>
FlowState<Scalar> make_flow_state(const Mat<Scalar>& z1, const std::vector<int>& frames, double u, const Mat<Scalar>& z0,
                                  TimeConvention conv = TimeConvention::NoiseLevel) {
  FlowState<Scalar> st;
  st.z1 = z1;
  st.z0 = z0;
  st.u = u;
  st.frames = frames;
  st.z_u = (Scalar(1) - static_cast<Scalar>(u)) * z0 + static_cast<Scalar>(u) * z1;
  const auto anchor_rows = static_cast<Eigen::Index>(std::count(frames.begin(), frames.end(), 0));
  st.anchor = z1.topRows(anchor_rows);
  st.z_u.topRows(anchor_rows) = st.anchor;
  st.timestep.resize(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) st.timestep[i] = frames[i] == 0 ? clean_time(conv) : network_time(u, conv);
  return st;
}

template <typename Scalar, typename Engine>
Mat<Scalar> gaussian_like(Eigen::Index rows, Eigen::Index cols, Engine& rng) {
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(standard_normal(rng));
  return m;
}

/// Mean squared velocity error over tokens with frame >= 1 and all latent
/// channels. Writes d(loss)/d(pred) when requested.
template <typename Scalar>
double flow_matching_loss(const Mat<Scalar>& pred, const Mat<Scalar>& target, const std::vector<int>& frames,
                          Mat<Scalar>* dpred = nullptr) {
  Eigen::Index scored = 0;
  for (const int f : frames) scored += f >= 1 ? 1 : 0;
  if (dpred != nullptr) *dpred = Mat<Scalar>::Zero(pred.rows(), pred.cols());
  if (scored == 0) return 0.0;
  const double denom = static_cast<double>(scored) * static_cast<double>(pred.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (frames[static_cast<std::size_t>(i)] < 1) continue;
    const auto diff = (pred.row(i) - target.row(i)).template cast<double>();
    loss += diff.squaredNorm();
    if (dpred != nullptr) dpred->row(i) = (diff * (2.0 / denom)).template cast<Scalar>();
  }
  return loss / denom;
}

struct FlowSettings {
  TimeConvention convention = TimeConvention::NoiseLevel;
  ExecutionOptions exec;
};

template <typename Scalar>
struct StepResult {
  double loss = 0.0;
  DenoiserParams<Scalar> grads;
};

/// Loss and gradients for one flow state, accumulated (with weight `weight`)
/// into `grads`.
template <typename Scalar>
double flow_state_loss(const DenoiserParams<Scalar>& params, const FlowState<Scalar>& st, const SequenceContext& ctx,
                       DenoiserParams<Scalar>* grads, double weight = 1.0, const ExecutionOptions& exec = {}) {
  DenoiserCache<Scalar> cache;
  const Mat<Scalar> pred = denoiser_forward(params, st.z_u, st.timestep, ctx, grads ? &cache : nullptr, exec);
  Mat<Scalar> dpred;
  const double loss = flow_matching_loss(pred, st.target(), st.frames, grads ? &dpred : nullptr);
  if (grads != nullptr) {
    dpred *= static_cast<Scalar>(weight);
    denoiser_backward(params, cache, dpred, ctx, *grads);
  }
  return loss;
}

/// One batch of rectified-flow training: u ~ U(0,1) per sequence, z0 ~ N(0, I),
/// loss averaged over sequences. `batch_seed` is reported if the loss is not finite.
template <typename Scalar, RotaryEncoding Encoding>
StepResult<Scalar> flow_training_step(const std::vector<SpacetimeSequence>& batch, const DenoiserParams<Scalar>& params,
                                      const MaskSettings& mask, const Encoding& rotary, std::mt19937_64& time_rng,
                                      std::mt19937_64& noise_rng, const FlowSettings& settings = {},
                                      std::uint64_t batch_seed = 0) {
  StepResult<Scalar> res{0.0, DenoiserParams<Scalar>::zeros(params.cfg)};
  if (batch.empty()) throw std::invalid_argument("flow_training_step: empty batch");
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& seq : batch) {
    const auto ctx = SequenceContext::build(seq, make_mask(mask, seq), rotary);
    const Mat<Scalar> z1 = seq.feature_matrix().template cast<Scalar>();
    const double u = uniform01(time_rng);
    const Mat<Scalar> z0 = gaussian_like<Scalar>(z1.rows(), z1.cols(), noise_rng);
    const auto st = make_flow_state(z1, ctx.frames, u, z0, settings.convention);
    res.loss += w * flow_state_loss(params, st, ctx, &res.grads, w, settings.exec);
  }
  if (!std::isfinite(res.loss)) {
    throw NumericError("non-finite training loss (batch seed " + std::to_string(batch_seed) + ")");
  }
  return res;
}

/// Euler integration of a velocity field from u = 0 (noise z0) to u = 1 in
/// `steps` uniform steps, with the frame-0 rows pinned to `anchor`.
/// `velocity(z, token_time)` returns S x latent.
template <typename Scalar, typename Velocity>
Mat<Scalar> integrate_flow(Mat<Scalar> z, const Mat<Scalar>& anchor, const std::vector<int>& frames, int steps,
                           Velocity&& velocity, TimeConvention conv = TimeConvention::NoiseLevel) {
  if (steps < 1) throw std::invalid_argument("sampling needs at least one step");
  const Eigen::Index na = anchor.rows();
  const Scalar dt = Scalar(1) / static_cast<Scalar>(steps);
  std::vector<double> t(frames.size());
  for (int k = 0; k < steps; ++k) {
    const double u = static_cast<double>(k) / steps;
    for (std::size_t i = 0; i < frames.size(); ++i) t[i] = frames[i] == 0 ? clean_time(conv) : network_time(u, conv);
    z.topRows(na) = anchor;
    const Mat<Scalar> v = velocity(static_cast<const Mat<Scalar>&>(z), static_cast<const std::vector<double>&>(t));
    z.bottomRows(z.rows() - na) += dt * v.bottomRows(z.rows() - na);
  }
  z.topRows(na) = anchor;
  return z;
}

/// Generates frames 1..F-1 on the layout of `layout` given the clean frame-0
/// latent. Returns all S rows (frame-0 rows equal the anchor).
template <typename Scalar, RotaryEncoding Encoding>
Mat<Scalar> sample_sequence(const SpacetimeSequence& layout, const Mat<Scalar>& anchor, const DenoiserParams<Scalar>& params,
                            const MaskSettings& mask, const Encoding& rotary, int steps, std::mt19937_64& noise_rng,
                            const FlowSettings& settings = {}) {
  const auto ctx = SequenceContext::build(layout, make_mask(mask, layout), rotary);
  if (anchor.rows() != static_cast<Eigen::Index>(layout.frame_lengths()[0]) || anchor.cols() != params.cfg.latent_dim) {
    throw std::invalid_argument("sample_sequence: anchor must be S_0 x latent_dim");
  }
  Mat<Scalar> z0 = gaussian_like<Scalar>(static_cast<Eigen::Index>(layout.total_length()), params.cfg.latent_dim, noise_rng);
  auto field = [&](const Mat<Scalar>& z, const std::vector<double>& t) {
    return denoiser_forward<Scalar>(params, z, t, ctx, nullptr, settings.exec);
  };
  return integrate_flow(std::move(z0), anchor, ctx.frames, steps, field, settings.convention);
}

/// IoU of {tokens in `frame` whose occupancy channel exceeds 0.5} against
/// the rasterized ground-truth occupancy of that frame.
template <typename Derived>
double occupancy_iou(const SpacetimeSequence& layout, const Eigen::MatrixBase<Derived>& features,
                     const std::vector<std::uint8_t>& truth, int frame, double threshold = 0.5) {
  const int n = layout.grid_resolution();
  std::size_t inter = 0, pred = 0;
  const auto& off = layout.frame_offsets();
  for (std::size_t i = off[static_cast<std::size_t>(frame)]; i < off[static_cast<std::size_t>(frame) + 1]; ++i) {
    if (static_cast<double>(features(static_cast<Eigen::Index>(i), 0)) <= threshold) continue;
    ++pred;
    inter += truth[layout[i].coord.key(n)] ? 1 : 0;
  }
  std::size_t gt = 0;
  for (const auto v : truth) gt += v ? 1 : 0;
  const std::size_t uni = pred + gt - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWSettings {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

template <typename Scalar>
class AdamW {
 public:
  AdamW(const DenoiserParams<Scalar>& like, AdamWSettings s)
      : s_(s), m_(DenoiserParams<Scalar>::zeros(like.cfg)), v_(DenoiserParams<Scalar>::zeros(like.cfg)) {}

  /// Applies one update; returns the pre-clip global gradient norm.
  double step(DenoiserParams<Scalar>& params, DenoiserParams<Scalar>& grads) {
    double sq = 0.0;
    grads.visit([&](const std::string&, const Mat<Scalar>& g) { sq += g.template cast<double>().squaredNorm(); });
    const double norm = std::sqrt(sq);
    const double clip = (s_.clip_norm > 0.0 && norm > s_.clip_norm) ? s_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(s_.beta1, t_);
    const double bc2 = 1.0 - std::pow(s_.beta2, t_);

    std::vector<Mat<Scalar>*> ps, gs, ms, vs;
    params.visit([&](const std::string& name, Mat<Scalar>& m) {
      ps.push_back(&m);
      decays_.push_back(!(name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")));
    });
    grads.visit([&](const std::string&, Mat<Scalar>& m) { gs.push_back(&m); });
    m_.visit([&](const std::string&, Mat<Scalar>& m) { ms.push_back(&m); });
    v_.visit([&](const std::string&, Mat<Scalar>& m) { vs.push_back(&m); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      const auto g = (gs[i]->array() * static_cast<Scalar>(clip)).eval();
      ms[i]->array() = static_cast<Scalar>(s_.beta1) * ms[i]->array() + static_cast<Scalar>(1 - s_.beta1) * g;
      vs[i]->array() = static_cast<Scalar>(s_.beta2) * vs[i]->array() + static_cast<Scalar>(1 - s_.beta2) * g.square();
      if (decays_[i]) p.array() *= static_cast<Scalar>(1.0 - s_.lr * s_.weight_decay);
      p.array() -= static_cast<Scalar>(s_.lr) * (ms[i]->array() / static_cast<Scalar>(bc1)) /
                   ((vs[i]->array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(s_.eps));
    }
    decays_.clear();
    return norm;
  }

 private:
  AdamWSettings s_;
  DenoiserParams<Scalar> m_, v_;
  std::vector<bool> decays_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// RoPE-ratio ablation

struct AblationItem {
  SpacetimeSequence sequence;
  Mat<double> z;
  std::vector<double> timestep;
};

struct AblationRow {
  double alpha = 1.0;
  int kept_per_axis = 0;
  double mean_deviation = 0.0;
  std::vector<double> per_item;
};

/// Runs the frozen network with the spatial rotary truncated to the top
/// round(alpha * M) planes per axis and reports the mean per-token L2
/// distance of its output to the untruncated run.
inline std::vector<AblationRow> rope_ratio_ablation(const DenoiserParams<double>& params, const std::vector<double>& alphas,
                                                    const std::vector<AblationItem>& eval_set, const MaskSettings& mask,
                                                    double theta = 10000.0) {
  const int d_head = params.cfg.d_model / params.cfg.heads;
  if (d_head % 6 != 0) throw ConfigError("rope ablation: head dimension must be a multiple of 6");
  const auto schedule = build_schedule(d_head / 6, theta);
  const TruncatedSpatialRotary full(schedule, schedule.pairs);

  std::vector<Mat<double>> reference;
  for (const auto& item : eval_set) {
    const auto ctx = SequenceContext::build(item.sequence, make_mask(mask, item.sequence), full);
    reference.push_back(denoiser_forward(params, item.z, item.timestep, ctx));
  }

  std::vector<AblationRow> rows;
  for (const double alpha : alphas) {
    const auto rot = TruncatedSpatialRotary::from_ratio(schedule, alpha);
    AblationRow row;
    row.alpha = alpha;
    row.kept_per_axis = rot.kept_per_axis();
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
      const auto& item = eval_set[i];
      const auto ctx = SequenceContext::build(item.sequence, make_mask(mask, item.sequence), rot);
      const Mat<double> out = denoiser_forward(params, item.z, item.timestep, ctx);
      row.per_item.push_back((out - reference[i]).rowwise().norm().mean());
    }
    double sum = 0.0;
    for (const double v : row.per_item) sum += v;
    row.mean_deviation = eval_set.empty() ? 0.0 : sum / static_cast<double>(eval_set.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace helix4d
