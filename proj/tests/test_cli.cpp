#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "helix4d/commands.hpp"
#include "oracles.hpp"

using namespace helix4d;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("helix4d_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return detail::read_file(p, true); }

RunConfig small_config() {
  RunConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 48;
  cfg.heads = 2;
  cfg.mlp_hidden = 32;
  cfg.train_steps = 4;
  cfg.batch = 2;
  cfg.flow_steps = 3;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HELIX4D_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST(Config, RoundTripPreservesEveryKey) {
  RunConfig cfg;
  cfg.alpha = 0.5;
  cfg.theta = 12345.678901234567;
  cfg.attention_pattern = "sliding";
  cfg.seed = 18446744073709551615ull;
  cfg.deterministic = false;
  cfg.lr = 3.3e-5;
  const auto text = cfg.serialize();
  const auto back = RunConfig::parse(text);
  EXPECT_TRUE(back == cfg);
  EXPECT_EQ(back.serialize(), text);
}

TEST(Config, ParseAndDiagnostics) {
  const auto cfg = RunConfig::parse("# comment\n\ngrid_n = 32  # trailing\nattention.pattern=full\nd_head = 48\n");
  EXPECT_EQ(cfg.grid_n, 32);
  EXPECT_EQ(cfg.attention_pattern, "full");
  EXPECT_EQ(cfg.d_head(), 48);
  EXPECT_THROW(RunConfig::parse("bogus.key = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("grid_n = sixteen\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("just words\n"), ConfigError);
  EXPECT_THROW(RunConfig::load("/nonexistent/helix.cfg"), ConfigError);

  RunConfig bad;
  bad.d_model = 72;
  bad.heads = 2;  // d_head 36: divisible by 6, not by 24
  try {
    bad.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 24"), std::string::npos) << e.what();
  }
  RunConfig odd;
  odd.grid_n = 12;
  EXPECT_THROW(odd.validate(), ConfigError);
  RunConfig alphas;
  alphas.sweep_alphas = "0,1.5";
  EXPECT_THROW(alphas.validate(), ConfigError);
}

TEST(PointIo, XyzAndManifestRoundTrip) {
  const auto dir = scratch_dir("xyz");
  std::mt19937_64 rng(1);
  const auto a = oracle::random_cloud(rng, 30), b = oracle::random_cloud(rng, 20);
  write_xyz(dir / "a.xyz", a);
  write_xyz(dir / "b.xyz", b);
  write_manifest(dir / "m.txt", {"a.xyz", (dir / "b.xyz").string()});
  const auto seq = read_manifest(dir / "m.txt");
  ASSERT_EQ(seq.frames.size(), 2u);
  EXPECT_EQ(seq.frames[0], a);
  EXPECT_EQ(seq.frames[1], b);
  EXPECT_THROW(parse_xyz("1 2\n"), IoError);
  EXPECT_EQ(parse_xyz("# c\n\n1 2 3\n").size(), 1u);
  EXPECT_THROW(read_manifest(dir / "missing.txt"), IoError);
  fs::remove_all(dir);
}

TEST(Commands, BenchOrderingAtSmallScale) {
  RunConfig cfg;
  cfg.bench_frames = 16;
  cfg.bench_frame_tokens = 32;
  cfg.bench_repeats = 1;
  const auto rows = cmd_bench_attention(cfg);
  ASSERT_EQ(rows.size(), 5u);
  std::map<std::string, BenchRow> by;
  for (const auto& r : rows) by[r.pattern] = r;
  EXPECT_EQ(by["full"].pair_count, 256u * 32u * 32u);
  EXPECT_EQ(by["anchor"].pair_count, 87u * 32u * 32u);
  EXPECT_EQ(by["sliding"].pair_count, 74u * 32u * 32u);
  EXPECT_EQ(by["causal"].pair_count, 136u * 32u * 32u);
  EXPECT_LT(by["spatial"].pair_count, by["sliding"].pair_count);
  EXPECT_NEAR(by["full"].pair_ratio, 256.0 / 87.0, 1e-12);
  EXPECT_EQ(by["anchor"].time_ratio, 1.0);
  EXPECT_NE(bench_csv(rows).find("pattern,pair_count"), std::string::npos);
}

TEST(Commands, SingleFrameBenchIsUniform) {
  RunConfig cfg;
  cfg.bench_frames = 1;
  cfg.bench_frame_tokens = 40;
  cfg.bench_repeats = 1;
  cfg.blocks_per_axis = 1;  // one spatial block covering the grid
  for (const auto& r : cmd_bench_attention(cfg)) EXPECT_EQ(r.pair_count, 1600u) << r.pattern;
}

TEST(Commands, SweepCsv) {
  auto cfg = small_config();
  cfg.sweep_items = 2;
  cfg.sweep_alphas = "0,0.5,1";
  const auto rows = cmd_rope_sweep(cfg);
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, 21), "alpha,mean_deviation\n");
  EXPECT_EQ(rows.back().mean_deviation, 0.0);
}

TEST(Commands, TrainSampleEvalPipeline) {
  const auto dir = scratch_dir("pipeline");
  const auto cfg = small_config();
  const auto s = cmd_train(cfg, dir / "run");
  EXPECT_TRUE(fs::exists(s.checkpoint));
  EXPECT_TRUE(std::isfinite(s.final_loss));
  const auto log = slurp(s.log);
  EXPECT_EQ(log.substr(0, 28), "step,loss,grad_norm,wall_ms\n");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), cfg.train_steps + 1);

  const auto gt_manifest = cmd_synth(cfg, 42, dir / "data");
  const auto pred_manifest = cmd_sample(cfg, s.checkpoint, dir / "data" / "sequence.helixseq", dir / "sample");
  EXPECT_TRUE(fs::exists(dir / "sample" / "generated.helixseq"));
  const auto generated = read_sequence(dir / "sample" / "generated.helixseq");
  const auto original = read_sequence(dir / "data" / "sequence.helixseq");
  ASSERT_EQ(generated.total_length(), original.total_length());
  for (std::size_t i = 0; i < original.frame_lengths()[0]; ++i) EXPECT_EQ(generated[i].feature, original[i].feature);

  const auto self = cmd_eval(gt_manifest, gt_manifest, cfg);
  EXPECT_EQ(self["cd3d"].get<double>(), 0.0);
  EXPECT_EQ(self["cd4d"].get<double>(), 0.0);
  EXPECT_EQ(self["per_frame"].size(), static_cast<std::size_t>(cfg.frames_t));
  fs::remove_all(dir);
}

TEST(Commands, TrainIsByteReproducible) {
  const auto dir = scratch_dir("repro");
  const auto cfg = small_config();
  const auto a = cmd_train(cfg, dir / "a");
  const auto b = cmd_train(cfg, dir / "b");
  EXPECT_EQ(slurp(a.checkpoint), slurp(b.checkpoint));
  EXPECT_EQ(slurp(a.log), slurp(b.log));
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  const auto out = " --out-dir " + (dir / "out").string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("rope-sweep --set layers=1 --set sweep.items=1 --alphas 0,1" + out), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "rope_sweep.csv"));
  EXPECT_EQ(run_cli("rope-sweep --set heads=5" + out), 2);
  EXPECT_EQ(run_cli("rope-sweep --set nope=1" + out), 2);
  EXPECT_EQ(run_cli("rope-sweep --config /nonexistent.cfg" + out), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("eval --pred /nonexistent/p.txt --gt /nonexistent/g.txt" + out), 4);
  {
    std::ofstream(dir / "bad.hlx4d") << "garbage";
  }
  EXPECT_EQ(run_cli("synth --data-seed 1" + out), 0);
  EXPECT_EQ(run_cli("sample --checkpoint " + (dir / "bad.hlx4d").string() + " --anchor " +
                    (dir / "out" / "sequence.helixseq").string() + out),
            4);
  // Inf learning rate explodes the weights on the first update.
  EXPECT_EQ(run_cli("train --set layers=1 --set train.steps=3 --set train.batch=1 --set train.lr=1e300 --set train.clip_norm=0" + out), 3);
  fs::remove_all(dir);
}
