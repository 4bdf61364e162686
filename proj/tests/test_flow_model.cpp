#include <gtest/gtest.h>

#include <random>

#include "flow_checks.hpp"
#include "helix4d/checkpoint.hpp"
#include "helix4d/flow_model.hpp"
#include "helix4d/training.hpp"
#include "oracles.hpp"

using namespace helix4d;

TEST(Flow, InterpolationAndAnchor) {
  std::mt19937_64 rng(1);
  const Mat<double> z1 = oracle::normal_matrix(rng, 6, 4), z0 = oracle::normal_matrix(rng, 6, 4);
  const std::vector<int> frames{0, 0, 1, 1, 2, 2};
  const auto st = make_flow_state<double>(z1, frames, 0.25, z0);
  for (Eigen::Index i = 2; i < 6; ++i) EXPECT_EQ(st.z_u.row(i), (0.75 * z0.row(i) + 0.25 * z1.row(i)).eval());
  EXPECT_EQ(st.z_u.topRows(2), z1.topRows(2));
  EXPECT_EQ(st.timestep[0], 0.0);  // clean anchor at network time 0
  EXPECT_EQ(st.timestep[2], 0.75);
  const auto alt = make_flow_state<double>(z1, frames, 0.25, z0, TimeConvention::DataFraction);
  EXPECT_EQ(alt.timestep[0], 1.0);
  EXPECT_EQ(alt.timestep[2], 0.25);
}

TEST(Flow, PerfectVelocityHasZeroLoss) {
  std::mt19937_64 rng(2);
  const Mat<double> z1 = oracle::normal_matrix(rng, 6, 4), z0 = oracle::normal_matrix(rng, 6, 4);
  const std::vector<int> frames{0, 1, 1, 2, 2, 2};
  EXPECT_EQ(flow_matching_loss<double>(z1 - z0, z1 - z0, frames), 0.0);
}

TEST(Flow, ZeroNetworkLossIsTwo) {
  // Monte-Carlo estimate of E||z1 - z0||^2 / dim for independent N(0, I).
  std::mt19937_64 rng(3);
  double total = 0.0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const Mat<double> z1 = oracle::normal_matrix(rng, 2, 4), z0 = oracle::normal_matrix(rng, 2, 4);
    total += flow_matching_loss<double>(Mat<double>::Zero(2, 4), z1 - z0, {0, 1});
  }
  EXPECT_NEAR(total / draws, 2.0, 0.06);

  // The untrained model predicts zero velocity, so its loss is the same quantity.
  auto t = flowcheck::tiny_problem(4, 2);
  auto init_rng = substream(0, "init");
  const auto p = init_denoiser<double>(t.cfg, init_rng);
  const auto ctx = SequenceContext::build(t.seq, anchor_mask(t.seq.frame_lengths(), 2), t.rotary);
  const Mat<double> z1 = t.seq.feature_matrix();
  const auto st = make_flow_state<double>(z1, ctx.frames, 0.3, oracle::normal_matrix(rng, static_cast<int>(z1.rows()), 4));
  EXPECT_EQ(denoiser_forward(p, st.z_u, st.timestep, ctx), (Mat<double>::Zero(z1.rows(), 4)));
}

TEST(Flow, FrameZeroCarriesNoLoss) {
  std::mt19937_64 rng(5);
  const Mat<double> pred = oracle::normal_matrix(rng, 5, 4);
  Mat<double> target = oracle::normal_matrix(rng, 5, 4);
  const std::vector<int> frames{0, 0, 1, 1, 1};
  Mat<double> grad;
  const double base = flow_matching_loss<double>(pred, target, frames, &grad);
  EXPECT_EQ(grad.topRows(2), (Mat<double>::Zero(2, 4)));
  target.topRows(2).array() += 10.0;
  EXPECT_EQ(flow_matching_loss<double>(pred, target, frames), base);
}

TEST(Flow, GradientsMatchFiniteDifferences) {
  const auto rep = flowcheck::gradient_check(7);
  EXPECT_GT(rep.checked, 100);
  EXPECT_LT(rep.max_rel, 1e-4) << rep.worst;
}

TEST(Flow, AnchorReachesEveryFrameUnderAnchorMask) {
  const auto t = flowcheck::tiny_problem(8, 1, 5, 3);
  const auto sens = flowcheck::anchor_sensitivity(t, anchor_mask(t.seq.frame_lengths(), 1));
  for (double s : sens) EXPECT_GT(s, 0.0);
  const auto local = flowcheck::anchor_sensitivity(t, sliding_mask(t.seq.frame_lengths(), 1));
  for (std::size_t f = 0; f < local.size(); ++f) {
    if (f <= 1) EXPECT_GT(local[f], 0.0) << f;
    else EXPECT_EQ(local[f], 0.0) << f;
  }
}

TEST(Flow, NonFiniteActivationNamesBlock) {
  auto t = flowcheck::tiny_problem(9, 2);
  t.params.blocks[1].w1(0, 0) = std::numeric_limits<double>::infinity();
  const auto ctx = SequenceContext::build(t.seq, full_mask(t.seq.frame_lengths()), t.rotary);
  const std::vector<double> time(t.seq.total_length(), 0.5);
  try {
    denoiser_forward<double>(t.params, t.seq.feature_matrix(), time, ctx);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos) << e.what();
  }
}

TEST(Sampling, OneStepAndConstantField) {
  std::mt19937_64 rng(10);
  const std::vector<int> frames{0, 1, 1, 2};
  const Mat<double> z0 = oracle::normal_matrix(rng, 4, 3), z1 = oracle::normal_matrix(rng, 4, 3);
  const Mat<double> anchor = z1.topRows(1);
  Mat<double> seen_t;
  auto field = [&](const Mat<double>& z, const std::vector<double>& t) {
    seen_t = Eigen::Map<const Vec<double>>(t.data(), static_cast<Eigen::Index>(t.size()));
    return Mat<double>(2.0 * z);
  };
  const Mat<double> one = integrate_flow(z0, anchor, frames, 1, field);
  Mat<double> expect = z0 + 2.0 * z0;
  expect.topRows(1) = anchor;
  EXPECT_EQ(one.bottomRows(3), expect.bottomRows(3));
  EXPECT_EQ(one.topRows(1), anchor);
  EXPECT_EQ(seen_t(0), 0.0);
  EXPECT_EQ(seen_t(1), 1.0);  // u = 0 is pure noise, network time 1

  auto oracle_field = [&](const Mat<double>&, const std::vector<double>&) { return Mat<double>(z1 - z0); };
  for (int steps : {1, 3, 32}) {
    const Mat<double> out = integrate_flow(z0, anchor, frames, steps, oracle_field);
    EXPECT_LE((out - z1).cwiseAbs().maxCoeff(), 1e-12) << steps;
  }
  EXPECT_THROW(integrate_flow(z0, anchor, frames, 0, oracle_field), std::invalid_argument);
}

TEST(Sampling, IouOracle) {
  SyntheticConfig cfg;
  cfg.radius = 2.0;
  cfg.shell = 1.0;
  cfg.seed = 4;
  const auto s = synthesize_moving_blob(cfg);
  const Mat<double> truth = s.sequence.feature_matrix();
  for (int f = 0; f < cfg.frames; ++f) EXPECT_EQ(occupancy_iou(s.sequence, truth, s.occupancy[static_cast<std::size_t>(f)], f), 1.0);
  const Mat<double> none = Mat<double>::Zero(truth.rows(), truth.cols());
  EXPECT_EQ(occupancy_iou(s.sequence, none, s.occupancy[1], 1), 0.0);
  Mat<double> all = none;
  all.col(0).setOnes();
  const auto& off = s.sequence.frame_offsets();
  std::size_t occupied = 0;
  for (auto v : s.occupancy[1]) occupied += v;
  EXPECT_DOUBLE_EQ(occupancy_iou(s.sequence, all, s.occupancy[1], 1),
                   static_cast<double>(occupied) / static_cast<double>(off[2] - off[1]));
}

TEST(Optimizer, FirstStepMatchesClosedForm) {
  DenoiserConfig cfg{2, 6, 1, 1, 4, 4};
  auto p = DenoiserParams<double>::zeros(cfg);
  auto g = DenoiserParams<double>::zeros(cfg);
  p.in_w.setConstant(1.0);
  p.in_b.setConstant(1.0);
  g.in_w.setConstant(0.01);
  g.in_b.setConstant(-0.01);
  AdamWSettings s;
  s.lr = 0.1;
  s.weight_decay = 0.5;
  AdamW<double> opt(p, s);
  const double norm = opt.step(p, g);
  EXPECT_NEAR(norm, std::sqrt(0.0001 * (12 + 6)), 1e-15);
  // m_hat = g, v_hat = g^2 on step one; bias terms are not decayed.
  const double step = 0.1 * 0.01 / (0.01 + 1e-8);
  EXPECT_NEAR(p.in_w(0, 0), 1.0 * (1 - 0.1 * 0.5) - step, 1e-12);
  EXPECT_NEAR(p.in_b(0, 0), 1.0 + step, 1e-12);
}

TEST(Optimizer, ClipsGlobalNorm) {
  DenoiserConfig cfg{2, 6, 1, 1, 4, 4};
  auto p = DenoiserParams<double>::zeros(cfg);
  auto g = DenoiserParams<double>::zeros(cfg);
  g.out_b.setConstant(100.0);
  AdamW<double> opt(p, AdamWSettings{});
  EXPECT_NEAR(opt.step(p, g), 100.0 * std::sqrt(2.0), 1e-12);
  EXPECT_TRUE(p.out_b.allFinite());
}

TEST(Ablation, AlphaOneIsExactAndZeroIsWorst) {
  RunConfig cfg;
  cfg.layers = 1;
  auto rng = substream(5, "sweep-init");
  const auto params = random_frozen_denoiser<double>(cfg.denoiser(), rng);
  const auto items = ablation_items(cfg, 3);
  const auto rows = rope_ratio_ablation(params, {0.0, 0.4, 1.0}, items, cfg.mask(), cfg.theta);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].mean_deviation, 0.0);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_GE(rows[0].per_item[i], rows[1].per_item[i]);
  EXPECT_EQ(rows[0].kept_per_axis, 0);
  EXPECT_EQ(rows[2].kept_per_axis, 4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto rng = substream(1, "init");
  const auto p = random_frozen_denoiser<double>(DenoiserConfig{4, 24, 2, 2, 16, 8}, rng);
  const auto bytes = encode_tensors(to_tensors(p));
  const auto back = from_tensors<double>(decode_tensors(bytes), p.cfg);
  EXPECT_EQ(encode_tensors(to_tensors(back)), bytes);
  EXPECT_EQ(bytes.substr(0, 6), std::string("HLX4D\0", 6));

  EXPECT_THROW(decode_tensors("HLX4E" + bytes.substr(5)), IoError);
  EXPECT_THROW(decode_tensors(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(decode_tensors(bytes + "x"), IoError);
  EXPECT_THROW(from_tensors<double>(decode_tensors(bytes), DenoiserConfig{4, 24, 2, 3, 16, 8}), IoError);

  const auto path = std::filesystem::temp_directory_path() / "helix4d_ckpt_test.hlx4d";
  save_checkpoint(path, p);
  EXPECT_EQ(encode_tensors(to_tensors(load_checkpoint<double>(path, p.cfg))), bytes);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<double>(path, p.cfg), IoError);
}

TEST(Training, ShortRunIsDeterministic) {
  RunConfig cfg;
  cfg.train_steps = 3;
  cfg.batch = 2;
  cfg.layers = 1;
  const auto a = train_denoiser(cfg);
  const auto b = train_denoiser(cfg);
  EXPECT_EQ(encode_tensors(to_tensors(a.params)), encode_tensors(to_tensors(b.params)));
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_EQ(a.log[i].grad_norm, b.log[i].grad_norm);
  }
  EXPECT_LT(a.log.back().loss, 10.0);
}
