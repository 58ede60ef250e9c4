#pragma once

#include <functional>
#include <limits>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kronfisher/mlp.hpp"
#include "kronfisher/optim.hpp"

namespace kronfisher {

enum class DatasetKind { SyntheticCurves, Mnist, FacesConfigOnly };

std::string to_string(DatasetKind k);
DatasetKind parse_dataset(const std::string& name);

struct Architecture {
  std::string preset;  // empty for a custom layer list
  std::vector<Index> layers;
  std::vector<Activation> activations;
  Loss loss = Loss::BinaryCrossEntropy;
};

/// Autoencoder presets: "mnist", "faces", "curves" (full size) and
/// "desk_curves" (64-32-16-6-16-32-64, the default).
Architecture preset_architecture(const std::string& name);
std::vector<std::string> preset_names();

struct ProbeSpec {
  std::size_t layer = 0;  // 0-based
  long every = 1;
  std::vector<Method> methods;
  SvdSettings svd{1e-10, 20000, 6, 500};
};

struct GridSpec {
  std::vector<double> learning_rates;
  std::vector<double> dampings;
  std::vector<double> clips;
};

/// The learning-rate / damping grid {1, 3} x 10^{-1..-4} and clip grid
/// {1e-2, 1e-3}.
GridSpec default_grid();

inline constexpr int kConfigSchemaVersion = 1;

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  DatasetKind dataset = DatasetKind::SyntheticCurves;
  bool synthetic = false;  // required to run the faces preset on blob images
  std::string mnist_images;
  Index n_train = 2000;
  Index n_val = 500;
  std::uint64_t data_seed = 1;
  Architecture architecture = preset_architecture("desk_curves");
  OptimizerConfig optimizer;
  int epochs = 10;
  long max_iterations = 0;  // 0 means no cap
  std::optional<ProbeSpec> probe;
  GridSpec grid = default_grid();
  std::string out_dir = "out";

  void validate() const;
};

/// JSON round trip. Missing keys keep their defaults; "schema_version" must
/// equal kConfigSchemaVersion when present.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

struct MetricRecord {
  long iteration = 0;
  int epoch = 0;
  double wall_clock_seconds = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();        // mini-batch loss before the update
  double epoch_train_loss = std::numeric_limits<double>::quiet_NaN();  // full training loss, on epoch-end rows
  double val_loss = std::numeric_limits<double>::quiet_NaN();          // on epoch-end rows
  double nu = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> error1;  // per curvature_methods(), NaN when not probed
  std::vector<double> error2;
  std::vector<LayerRefreshInfo> layers;  // NaN / 0 when no refresh happened

  static MetricRecord blank(std::size_t num_layers);
};

/// Column order: iteration, epoch, [wall_clock_seconds], train_loss,
/// epoch_train_loss, val_loss, nu, error1_<m>, error2_<m> for each method,
/// then layer<i>_sigma1, layer<i>_sigma2, layer<i>_svd_iters for i = 1..L.
std::vector<std::string> csv_header(std::size_t num_layers, bool include_wall_clock);
void write_metrics_csv(std::ostream& os, const std::vector<MetricRecord>& records,
                       std::size_t num_layers, bool include_wall_clock = true);
std::vector<MetricRecord> read_metrics_csv(std::istream& is);
void emit_csv(const std::vector<MetricRecord>& records, const std::string& path,
              std::size_t num_layers, bool include_wall_clock = true);

double column_value(const MetricRecord& r, const std::string& column);

enum class PlotAxis { Iteration, Epoch, WallClock };

struct PlotSpec {
  std::string title;
  PlotAxis x = PlotAxis::Iteration;
  std::vector<std::string> columns;
  std::vector<std::string> labels;  // defaults to column names
};

/// Self-contained SVG line chart, one polyline per series with at least
/// one finite point.
std::string render_svg(const std::vector<MetricRecord>& records, const PlotSpec& spec);
void emit_plot(const std::vector<MetricRecord>& records, const std::string& path,
               const PlotSpec& spec);

struct ExperimentSummary {
  bool diverged = false;
  std::string failure;
  long iterations = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  std::vector<double> epoch_train_loss;  // index 0 = before training
  std::vector<double> epoch_val_loss;
  double seconds = 0.0;
};

struct ExperimentResult {
  std::vector<MetricRecord> records;
  ExperimentSummary summary;
};

struct RunOptions {
  bool write_outputs = true;
  std::function<void(const MetricRecord&)> on_record;
};

/// Loads or generates the data, initialises the model, runs the optimizer
/// and, when write_outputs is set, writes into out_dir: config.json,
/// metrics.csv (deterministic columns only), timing.csv, summary.json and SVG
/// plots.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct GridPoint {
  double learning_rate = 0.0;
  double damping = 0.0;
  double clip = 0.0;
  double final_train_loss = 0.0;
  bool diverged = false;
};

struct GridSearchResult {
  std::vector<GridPoint> points;
  std::size_t best = 0;
};

/// Runs every grid point (damping/clip only for curvature methods) and picks
/// the lowest final training loss. Writes gridsearch.csv and the best run
/// under out_dir/best when write_outputs is set.
GridSearchResult run_gridsearch(const ExperimentConfig& config, bool write_outputs = true);

/// Training and validation inputs for a config.
std::pair<Matrix, Matrix> load_dataset(const ExperimentConfig& config);

}  // namespace kronfisher
