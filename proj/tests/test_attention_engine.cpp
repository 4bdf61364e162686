#include <gtest/gtest.h>

#include <random>

#include "helix4d/attention_engine.hpp"
#include "oracles.hpp"

using namespace helix4d;

namespace {

struct Instance {
  SpacetimeSequence seq;
  AttentionLayerParams<double> params;
};

Instance make_instance(std::mt19937_64& rng, int frames, int max_len, int d_model, int heads) {
  return {oracle::random_sequence(rng, frames, max_len, 16, d_model), oracle::random_attention(rng, d_model, heads, 0.3)};
}

double max_abs(const Mat<double>& a, const Mat<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Attention, SingleTokenIsValueProjection) {
  std::mt19937_64 rng(1);
  const auto inst = make_instance(rng, 1, 1, 24, 1);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 1);
  const Mat<double> y = masked_attention(inst.seq, inst.params, full_mask({1}), rot);
  EXPECT_LE(max_abs(y, inst.seq.feature_matrix() * inst.params.wv * inst.params.wo), 1e-14);
}

TEST(Attention, UniformFeaturesGiveUniformWeights) {
  std::mt19937_64 rng(2);
  auto seq = oracle::random_sequence(rng, 3, 5, 16, 24);
  Mat<double> x = Mat<double>::Constant(static_cast<Eigen::Index>(seq.total_length()), 24, 0.7);
  seq = seq.with_features(x);
  const auto params = oracle::random_attention(rng, 24, 2, 0.3);
  const TruncatedSpatialRotary identity(build_schedule(2), 0);
  const auto mask = full_mask(seq.frame_lengths());
  AttentionCache<double> cache;
  attention_forward<double>(x, params, mask.groups(), make_rotary_table(seq, identity), &cache);
  for (const auto& p : cache.probs) EXPECT_LE((p.array() - 1.0 / static_cast<double>(seq.total_length())).abs().maxCoeff(), 1e-15);
}

TEST(Attention, SparseMatchesDenseFixedInstance) {
  std::mt19937_64 rng(11);
  std::vector<std::vector<SpacetimeToken>> frames(3);
  const int lengths[3] = {2, 3, 2};
  for (int f = 0; f < 3; ++f)
    for (int s = 0; s < lengths[f]; ++s) frames[static_cast<std::size_t>(f)].push_back({0, 1, {s, 2 * f, 3}, oracle::normal_vector(rng, 48)});
  const auto seq = concatenate_frames(frames, 16);
  const auto params = oracle::random_attention(rng, 48, 2, 0.3);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 3);
  const auto mask = anchor_mask(seq.frame_lengths(), 1);
  const auto dense = dense_reference_attention(seq, params, mask, rot);
  EXPECT_LE(max_abs(masked_attention(seq, params, mask, rot), dense.output), 1e-10);
  for (const auto& w : dense.weights) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-12);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        if (!mask.allowed(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) EXPECT_EQ(w(i, j), 0.0);
    }
  }
}

TEST(Attention, SparseMatchesDenseAllPatterns) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 6; ++trial) {
    const auto inst = make_instance(rng, 1 + static_cast<int>(rng() % 6), 30, 48, 2);
    const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, inst.seq.num_frames());
    MaskSettings s;
    s.window_halfwidth = 1;
    s.block_edge = 8;
    for (const auto p : {MaskPattern::Full, MaskPattern::Causal, MaskPattern::SlidingWindow, MaskPattern::SpatialBlock,
                         MaskPattern::SlidingWindowAnchor}) {
      s.pattern = p;
      const auto mask = make_mask(s, inst.seq);
      EXPECT_LE(max_abs(masked_attention(inst.seq, inst.params, mask, rot),
                        dense_reference_attention(inst.seq, inst.params, mask, rot).output),
                1e-10)
          << pattern_name(p);
    }
  }
}

TEST(Attention, RowStochasticSparseWeights) {
  std::mt19937_64 rng(13);
  const auto inst = make_instance(rng, 5, 20, 24, 1);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 5);
  AttentionCache<double> cache;
  attention_forward<double>(inst.seq.feature_matrix(), inst.params, anchor_mask(inst.seq.frame_lengths(), 1).groups(),
                            make_rotary_table(inst.seq, rot), &cache);
  for (const auto& p : cache.probs)
    for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-10);
}

TEST(Attention, MaskedKeysHaveNoInfluence) {
  std::mt19937_64 rng(14);
  const auto inst = make_instance(rng, 5, 8, 48, 2);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 5);
  const auto mask = sliding_mask(inst.seq.frame_lengths(), 1);
  const Mat<double> base = masked_attention(inst.seq, inst.params, mask, rot);
  // Perturb every token of the last frame; frames 0..2 cannot see it.
  Mat<double> x = inst.seq.feature_matrix();
  const auto& off = inst.seq.frame_offsets();
  for (std::size_t i = off[4]; i < off[5]; ++i) x.row(static_cast<Eigen::Index>(i)).array() += 3.0;
  const Mat<double> moved = masked_attention(inst.seq.with_features(x), inst.params, mask, rot);
  for (std::size_t i = 0; i < off[3]; ++i) EXPECT_EQ(moved.row(static_cast<Eigen::Index>(i)), base.row(static_cast<Eigen::Index>(i)));
  const auto dense_a = dense_reference_attention(inst.seq, inst.params, mask, rot).output;
  const auto dense_b = dense_reference_attention(inst.seq.with_features(x), inst.params, mask, rot).output;
  for (std::size_t i = 0; i < off[3]; ++i)
    EXPECT_LE((dense_a.row(static_cast<Eigen::Index>(i)) - dense_b.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, PermutationWithinFrame) {
  std::mt19937_64 rng(15);
  const auto inst = make_instance(rng, 3, 6, 24, 1);
  auto frames = inst.seq.frames();
  std::reverse(frames[1].begin(), frames[1].end());
  const auto perm = concatenate_frames(frames, 16);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 3);
  const Mat<double> a = masked_attention(inst.seq, inst.params, anchor_mask(inst.seq.frame_lengths(), 1), rot);
  const Mat<double> b = masked_attention(perm, inst.params, anchor_mask(perm.frame_lengths(), 1), rot);
  const auto& off = inst.seq.frame_offsets();
  for (std::size_t i = 0; i < inst.seq.total_length(); ++i) {
    std::size_t j = i;
    if (i >= off[1] && i < off[2]) j = off[1] + (off[2] - 1 - i);
    EXPECT_LE((a.row(static_cast<Eigen::Index>(i)) - b.row(static_cast<Eigen::Index>(j))).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Attention, TranslationLeavesWeightsUnchanged) {
  std::mt19937_64 rng(16);
  auto seq = oracle::random_sequence(rng, 3, 6, 8, 24);
  const auto params = oracle::random_attention(rng, 24, 1, 0.5);
  auto frames = seq.frames();
  for (auto& fr : frames)
    for (auto& t : fr) t.coord = {t.coord.x + 5, t.coord.y + 3, t.coord.z + 7};
  const auto shifted = concatenate_frames(frames, 16);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 4);
  const auto mask = full_mask(seq.frame_lengths());
  const auto a = dense_reference_attention(seq, params, mask, rot);
  const auto b = dense_reference_attention(shifted, params, mask, rot);
  for (std::size_t h = 0; h < a.weights.size(); ++h) EXPECT_LE(max_abs(a.weights[h], b.weights[h]), 1e-8);
}

TEST(Attention, ThreadedMatchesSerial) {
  std::mt19937_64 rng(17);
  const auto inst = make_instance(rng, 6, 40, 48, 2);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 6);
  const auto mask = anchor_mask(inst.seq.frame_lengths(), 1);
  const Mat<double> a = masked_attention(inst.seq, inst.params, mask, rot);
  const Mat<double> b = masked_attention(inst.seq, inst.params, mask, rot, ExecutionOptions{false, 3});
  EXPECT_EQ(a, b);
}

TEST(Attention, FloatPathAgreesWithDouble) {
  std::mt19937_64 rng(18);
  const auto inst = make_instance(rng, 4, 30, 48, 2);
  const auto rot = Rotary4D::make(24, 0.75, 1e4, 16, 4);
  const auto mask = anchor_mask(inst.seq.frame_lengths(), 1);
  const auto table = make_rotary_table(inst.seq, rot);
  AttentionLayerParams<float> pf{inst.params.wq.cast<float>(), inst.params.wk.cast<float>(), inst.params.wv.cast<float>(),
                                 inst.params.wo.cast<float>(), 2};
  const Mat<float> yf = attention_forward<float>(inst.seq.feature_matrix().cast<float>(), pf, mask.groups(), table);
  const Mat<double> yd = dense_reference_attention(inst.seq, inst.params, mask, rot).output;
  EXPECT_LE(max_abs(yf.cast<double>(), yd), 1e-4);
}

TEST(Attention, DenseRefusesLargeSequences) {
  std::vector<std::vector<SpacetimeToken>> frames(2);
  for (int i = 0; i < 4096; ++i) frames[0].push_back({0, 1, {i / 256, (i / 16) % 16, i % 16}, {0.0}});
  frames[1].push_back({0, 1, {0, 0, 0}, {0.0}});
  const auto seq = concatenate_frames(frames, 16);
  AttentionLayerParams<double> p{Mat<double>::Zero(1, 1), Mat<double>::Zero(1, 1), Mat<double>::Zero(1, 1), Mat<double>::Zero(1, 1), 1};
  const auto rot = Rotary4D::make(6, 1.0, 1e4, 16, 2);
  EXPECT_THROW(dense_reference_attention(seq, p, full_mask(seq.frame_lengths()), rot), std::invalid_argument);
}

TEST(Attention, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(19);
  const auto inst = make_instance(rng, 3, 4, 12, 2);
  const auto rot = Rotary4D::make(6, 1.0, 1e4, 16, 3);
  const auto table = make_rotary_table(inst.seq, rot);
  const auto groups = anchor_mask(inst.seq.frame_lengths(), 1).groups();
  const Mat<double> x = inst.seq.feature_matrix();
  const Mat<double> r = oracle::normal_matrix(rng, static_cast<int>(x.rows()), 12);
  auto loss = [&](const Mat<double>& xx, const AttentionLayerParams<double>& p) {
    return attention_forward<double>(xx, p, groups, table).cwiseProduct(r).sum();
  };
  AttentionCache<double> cache;
  attention_forward<double>(x, inst.params, groups, table, &cache);
  const auto g = attention_backward<double>(r, inst.params, cache, table);
  const double h = 1e-6;
  auto check = [&](const Mat<double>& analytic, auto perturb) {
    for (Eigen::Index i = 0; i < analytic.size(); i += 5) {
      const double fd = (perturb(i, h) - perturb(i, -h)) / (2 * h);
      EXPECT_NEAR(analytic.data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
  };
  check(g.dx, [&](Eigen::Index i, double d) { Mat<double> xx = x; xx.data()[i] += d; return loss(xx, inst.params); });
  for (auto member : {&AttentionLayerParams<double>::wq, &AttentionLayerParams<double>::wk, &AttentionLayerParams<double>::wv,
                      &AttentionLayerParams<double>::wo}) {
    const Mat<double>& analytic = member == &AttentionLayerParams<double>::wq   ? g.wq
                                  : member == &AttentionLayerParams<double>::wk ? g.wk
                                  : member == &AttentionLayerParams<double>::wv ? g.wv
                                                                                : g.wo;
    check(analytic, [&](Eigen::Index i, double d) {
      auto p = inst.params;
      (p.*member).data()[i] += d;
      return loss(x, p);
    });
  }
}

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
  std::mt19937_64 rng(20);
  const auto inst = make_instance(rng, 2, 5, 12, 2);
  const auto rot = Rotary4D::make(6, 1.0, 1e4, 16, 2);
  BlockParams<double> p;
  p.attn = inst.params;
  p.attn.wo.setZero();
  p.w1 = oracle::normal_matrix(rng, 12, 20);
  p.b1 = oracle::normal_matrix(rng, 1, 20);
  p.w2 = Mat<double>::Zero(20, 12);
  p.b2 = Mat<double>::Zero(1, 12);
  const Mat<double> x = inst.seq.feature_matrix();
  const Mat<double> z = Mat<double>::Zero(x.rows(), x.cols());
  const BlockModulation<double> mod{z, z, z, z};
  const Mat<double> y = transformer_block<double>(x, p, mod, full_mask(inst.seq.frame_lengths()).groups(), make_rotary_table(inst.seq, rot));
  EXPECT_EQ(y, x);
}

TEST(Block, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const auto inst = make_instance(rng, 3, 4, 12, 2);
  const auto rot = Rotary4D::make(6, 1.0, 1e4, 16, 3);
  const auto table = make_rotary_table(inst.seq, rot);
  const auto groups = anchor_mask(inst.seq.frame_lengths(), 1).groups();
  const Mat<double> x = inst.seq.feature_matrix();
  const auto rows = static_cast<int>(x.rows());
  BlockParams<double> p;
  p.attn = inst.params;
  p.w1 = oracle::normal_matrix(rng, 12, 16, 0.3);
  p.b1 = oracle::normal_matrix(rng, 1, 16, 0.3);
  p.w2 = oracle::normal_matrix(rng, 16, 12, 0.3);
  p.b2 = oracle::normal_matrix(rng, 1, 12, 0.3);
  BlockModulation<double> mod{oracle::normal_matrix(rng, rows, 12, 0.2), oracle::normal_matrix(rng, rows, 12, 0.2),
                              oracle::normal_matrix(rng, rows, 12, 0.2), oracle::normal_matrix(rng, rows, 12, 0.2)};
  const Mat<double> r = oracle::normal_matrix(rng, rows, 12);
  auto loss = [&](const Mat<double>& xx, const BlockParams<double>& pp, const BlockModulation<double>& mm) {
    return transformer_block<double>(xx, pp, mm, groups, table).cwiseProduct(r).sum();
  };
  BlockCache<double> cache;
  transformer_block<double>(x, p, mod, groups, table, &cache);
  const auto g = transformer_block_backward<double>(r, p, mod, cache, table);
  const double h = 1e-6;
  auto check = [&](const Mat<double>& analytic, auto perturb, const char* what) {
    for (Eigen::Index i = 0; i < analytic.size(); i += 3) {
      const double fd = (perturb(i, h) - perturb(i, -h)) / (2 * h);
      EXPECT_NEAR(analytic.data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << what << "[" << i << "]";
    }
  };
  check(g.dx, [&](Eigen::Index i, double d) { Mat<double> xx = x; xx.data()[i] += d; return loss(xx, p, mod); }, "x");
  check(g.w1, [&](Eigen::Index i, double d) { auto q = p; q.w1.data()[i] += d; return loss(x, q, mod); }, "w1");
  check(g.b2, [&](Eigen::Index i, double d) { auto q = p; q.b2.data()[i] += d; return loss(x, q, mod); }, "b2");
  check(g.attn.wk, [&](Eigen::Index i, double d) { auto q = p; q.attn.wk.data()[i] += d; return loss(x, q, mod); }, "wk");
  check(g.mod.scale1, [&](Eigen::Index i, double d) { auto m = mod; m.scale1.data()[i] += d; return loss(x, p, m); }, "scale1");
  check(g.mod.shift2, [&](Eigen::Index i, double d) { auto m = mod; m.shift2.data()[i] += d; return loss(x, p, m); }, "shift2");
}
