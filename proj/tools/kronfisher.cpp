// kronfisher command-line driver.
//
// Precedence for every setting: built-in default < config file < flag.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "kronfisher/data.hpp"
#include "kronfisher/experiment.hpp"

using namespace kronfisher;

namespace {

struct TrainFlags {
  std::string config;
  std::optional<std::string> method;
  std::optional<double> lr, damping, clip;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<long> max_iterations;
  std::optional<std::string> out;
  bool synthetic = false;
};

void add_common(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config")->required()->check(CLI::ExistingFile);
  cmd->add_option("--method", f.method, "sgd|adam|kfac|kpsvd|deflation|lanczos|kfac_corrected");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--damping", f.damping, "Tikhonov damping lambda");
  cmd->add_option("--clip", f.clip, "KL clipping budget c");
  cmd->add_option("--seed", f.seed, "optimizer / initialisation seed");
  cmd->add_option("--epochs", f.epochs);
  cmd->add_option("--max-iterations", f.max_iterations, "stop after this many iterations");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_flag("--synthetic", f.synthetic, "use Gaussian-blob images for the faces preset");
}

ExperimentConfig resolve(const TrainFlags& f) {
  ExperimentConfig c = load_config(f.config);
  if (f.method) c.optimizer.method = parse_method(*f.method);
  if (f.lr) c.optimizer.learning_rate = *f.lr;
  if (f.damping) c.optimizer.damping = *f.damping;
  if (f.clip) c.optimizer.clip = *f.clip;
  if (f.seed) c.optimizer.seed = *f.seed;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.max_iterations) c.max_iterations = *f.max_iterations;
  if (f.out) c.out_dir = *f.out;
  if (f.synthetic) c.synthetic = true;
  c.validate();
  return c;
}

void print_summary(const ExperimentSummary& s, const std::string& out_dir) {
  std::printf("iterations %ld  initial loss %.6g  final train loss %.6g  final val loss %.6g  (%.1f s)\n",
              s.iterations, s.initial_train_loss, s.final_train_loss, s.final_val_loss, s.seconds);
  if (s.diverged) std::printf("diverged: %s\n", s.failure.c_str());
  std::printf("outputs in %s\n", out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kronecker-factored Fisher approximations and natural-gradient training"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train an autoencoder and write metrics");
  add_common(train, train_flags);

  TrainFlags probe_flags;
  long probe_layer = 0;
  long probe_every = 1;
  auto* probe = app.add_subcommand("probe-fim", "train while comparing each approximation to the exact Fisher block");
  add_common(probe, probe_flags);
  probe->add_option("--layer", probe_layer, "1-based layer index")->required()->check(CLI::PositiveNumber);
  probe->add_option("--every", probe_every, "probe period in iterations")->check(CLI::PositiveNumber);

  TrainFlags grid_flags;
  auto* grid = app.add_subcommand("gridsearch", "tune lr / damping / clip on the config grid");
  add_common(grid, grid_flags);

  std::string kind = "curves";
  Index n = 1000;
  std::uint64_t seed = 0;
  Index side = 28;
  std::string out_path;
  auto* gen = app.add_subcommand("gen-data", "write synthetic images as an IDX file");
  gen->add_option("--kind", kind)->check(CLI::IsMember({"curves", "blobs"}));
  gen->add_option("--n", n)->required()->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", seed)->required();
  gen->add_option("--side", side, "image side in pixels")->check(CLI::Range(2, 4096));
  gen->add_option("--out", out_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const ExperimentConfig c = resolve(train_flags);
      const ExperimentResult r = run_experiment(c);
      print_summary(r.summary, c.out_dir);
      return r.summary.diverged ? 2 : 0;
    }
    if (*probe) {
      ExperimentConfig c = resolve(probe_flags);
      ProbeSpec spec = c.probe.value_or(ProbeSpec{});
      spec.layer = static_cast<std::size_t>(probe_layer - 1);
      spec.every = probe_every;
      if (spec.methods.empty()) spec.methods = curvature_methods();
      c.probe = spec;
      c.validate();
      const ExperimentResult r = run_experiment(c);
      const auto& methods = curvature_methods();
      std::printf("%-16s %14s %14s %8s\n", "method", "mean error1", "mean error2", "probes");
      for (std::size_t m = 0; m < methods.size(); ++m) {
        double e1 = 0, e2 = 0;
        int count = 0;
        for (const MetricRecord& rec : r.records) {
          if (std::isnan(rec.error1[m])) continue;
          e1 += rec.error1[m];
          e2 += rec.error2[m];
          ++count;
        }
        if (count == 0) continue;
        std::printf("%-16s %14.6g %14.6g %8d\n", to_string(methods[m]).c_str(), e1 / count, e2 / count, count);
      }
      print_summary(r.summary, c.out_dir);
      return r.summary.diverged ? 2 : 0;
    }
    if (*grid) {
      const ExperimentConfig c = resolve(grid_flags);
      const GridSearchResult g = run_gridsearch(c);
      const GridPoint& best = g.points[g.best];
      std::printf("%zu grid points; best lr %g damping %g clip %g -> final train loss %.6g\n",
                  g.points.size(), best.learning_rate, best.damping, best.clip, best.final_train_loss);
      std::printf("outputs in %s\n", c.out_dir.c_str());
      return 0;
    }
    if (*gen) {
      const Matrix images = kind == "curves" ? gen_synthetic_curves(n, seed, side) : gen_gaussian_blobs(n, seed, side);
      if (const auto parent = std::filesystem::path(out_path).parent_path(); !parent.empty()) {
        std::filesystem::create_directories(parent);
      }
      save_idx_images(out_path, images, side, side);
      std::printf("wrote %ld %s images (%ldx%ld) to %s\n", static_cast<long>(n), kind.c_str(),
                  static_cast<long>(side), static_cast<long>(side), out_path.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
