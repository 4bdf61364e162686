// helix4d command-line driver.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "helix4d/commands.hpp"

namespace fs = std::filesystem;
using namespace helix4d;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::load(config);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value config file");
  sub->add_option("--seed", c.seed, "root seed (overrides the config)");
  sub->add_option("--out-dir", c.out_dir, "directory for output files");
  sub->add_option("--set", c.overrides, "override a config key, e.g. --set train.steps=200");
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  detail::write_atomically(path, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"helix4d: sparse 4D rotary attention and rectified-flow toy pipeline"};
  app.require_subcommand(1);
  Common common;

  auto* bench = app.add_subcommand("bench-attention", "pair counts and forward timings for the five mask patterns");
  add_common(bench, common);

  std::string alphas;
  std::string sweep_ckpt;
  auto* sweep = app.add_subcommand("rope-sweep", "output deviation of a frozen network vs spatial rotary ratio");
  add_common(sweep, common);
  sweep->add_option("--alphas", alphas, "comma-separated ratios (default from config)");
  sweep->add_option("--checkpoint", sweep_ckpt, "frozen network to probe (default: random network)");

  auto* train = app.add_subcommand("train", "train the toy denoiser on synthetic moving blobs");
  add_common(train, common);

  std::string ckpt, anchor;
  auto* sample = app.add_subcommand("sample", "generate a sequence from an anchor frame");
  add_common(sample, common);
  sample->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  sample->add_option("--anchor", anchor, "HELIX-SEQ layout; frame-0 features are the anchor")->required();

  std::string pred, gt;
  auto* eval = app.add_subcommand("eval", "CD-3D / CD-4D between two point-cloud sequences");
  add_common(eval, common);
  eval->add_option("--pred", pred, "predicted manifest")->required();
  eval->add_option("--gt", gt, "ground-truth manifest")->required();

  std::uint64_t data_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic moving-blob sequence and its point clouds");
  add_common(synth, common);
  synth->add_option("--data-seed", data_seed, "seed of the generated sequence");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    const fs::path out(common.out_dir);
    if (bench->parsed()) {
      const auto cfg = common.resolve();
      const auto rows = cmd_bench_attention(cfg);
      write_text(out / "bench_attention.csv", bench_csv(rows));
      std::cout << bench_table(rows);
    } else if (sweep->parsed()) {
      auto cfg = common.resolve();
      if (!alphas.empty()) cfg.set("sweep.alphas", alphas);
      std::optional<fs::path> cp;
      if (!sweep_ckpt.empty()) cp = sweep_ckpt;
      const auto csv = sweep_csv(cmd_rope_sweep(cfg, cp));
      write_text(out / "rope_sweep.csv", csv);
      std::cout << csv;
    } else if (train->parsed()) {
      const auto cfg = common.resolve();
      const int every = std::max(1, cfg.train_steps / 20);
      const auto s = cmd_train(cfg, out, [&](const TrainLogRow& r) {
        if (r.step % every == 0 || r.step == cfg.train_steps) {
          std::printf("step %5d  loss %.6f  grad_norm %.4f  %.1f ms\n", r.step, r.loss, r.grad_norm, r.wall_ms);
          std::fflush(stdout);
        }
      });
      std::printf("final loss %.6f\ncheckpoint %s\nlog %s\n", s.final_loss, s.checkpoint.string().c_str(),
                  s.log.string().c_str());
    } else if (sample->parsed()) {
      const auto cfg = common.resolve();
      const auto manifest = cmd_sample(cfg, ckpt, anchor, out);
      std::printf("wrote %s and %s\n", (out / "generated.helixseq").string().c_str(), manifest.string().c_str());
    } else if (eval->parsed()) {
      const auto cfg = common.resolve();
      const auto text = cmd_eval(pred, gt, cfg).dump(2) + "\n";
      write_text(out / "eval.json", text);
      std::cout << text;
    } else if (synth->parsed()) {
      const auto cfg = common.resolve();
      const auto manifest = cmd_synth(cfg, data_seed, out);
      std::printf("wrote %s and %s\n", (out / "sequence.helixseq").string().c_str(), manifest.string().c_str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
