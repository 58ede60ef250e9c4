#include "kronfisher/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "kronfisher/data.hpp"
#include "kronfisher/log.hpp"

namespace kronfisher {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return kNaN;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::runtime_error("metrics CSV: bad number '" + s + "'");
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Index integer_side(Index pixels) {
  const Index side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(pixels))));
  if (side * side != pixels) {
    throw std::invalid_argument("input dimension " + std::to_string(pixels) + " is not a square image");
  }
  return side;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

json optimizer_to_json(const OptimizerConfig& o) {
  return {{"method", to_string(o.method)},
          {"lr", o.learning_rate},
          {"damping", o.damping},
          {"clip", o.clip},
          {"ema_decay", o.ema_decay},
          {"t1", o.t1},
          {"t2", o.t2},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"adam_eps", o.adam_eps},
          {"batch_size", o.batch_size},
          {"seed", o.seed},
          {"svd_eps", o.svd_eps},
          {"svd_max_iter", o.svd_max_iter},
          {"krylov_dim", o.krylov_dim},
          {"lanczos_max_restarts", o.lanczos_max_restarts}};
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

OptimizerConfig optimizer_from_json(const json& j, OptimizerConfig o) {
  if (j.contains("method")) o.method = parse_method(j.at("method").get<std::string>());
  read_if(j, "lr", o.learning_rate);
  read_if(j, "damping", o.damping);
  read_if(j, "clip", o.clip);
  read_if(j, "ema_decay", o.ema_decay);
  read_if(j, "t1", o.t1);
  read_if(j, "t2", o.t2);
  read_if(j, "momentum", o.momentum);
  read_if(j, "beta1", o.beta1);
  read_if(j, "beta2", o.beta2);
  read_if(j, "adam_eps", o.adam_eps);
  read_if(j, "batch_size", o.batch_size);
  read_if(j, "seed", o.seed);
  read_if(j, "svd_eps", o.svd_eps);
  read_if(j, "svd_max_iter", o.svd_max_iter);
  read_if(j, "krylov_dim", o.krylov_dim);
  read_if(j, "lanczos_max_restarts", o.lanczos_max_restarts);
  return o;
}

}  // namespace

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::SyntheticCurves: return "synthetic_curves";
    case DatasetKind::Mnist: return "mnist";
    case DatasetKind::FacesConfigOnly: return "faces_config_only";
  }
  return "?";
}

DatasetKind parse_dataset(const std::string& name) {
  if (name == "synthetic_curves" || name == "curves") return DatasetKind::SyntheticCurves;
  if (name == "mnist") return DatasetKind::Mnist;
  if (name == "faces_config_only" || name == "faces") return DatasetKind::FacesConfigOnly;
  throw std::invalid_argument("unknown dataset '" + name + "'");
}

Architecture preset_architecture(const std::string& name) {
  Architecture a;
  a.preset = name;
  auto relu_chain = [](std::size_t layers, Activation last) {
    std::vector<Activation> acts(layers - 1, Activation::ReLU);
    acts.push_back(last);
    return acts;
  };
  if (name == "mnist") {
    a.layers = {784, 1000, 500, 250, 30, 250, 500, 1000, 784};
    a.loss = Loss::BinaryCrossEntropy;
    a.activations = relu_chain(8, Activation::Sigmoid);
  } else if (name == "faces") {
    a.layers = {625, 2000, 1000, 500, 30, 500, 1000, 2000, 625};
    a.loss = Loss::MeanSquaredError;
    a.activations = relu_chain(8, Activation::Linear);
  } else if (name == "curves") {
    a.layers = {784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784};
    a.loss = Loss::BinaryCrossEntropy;
    a.activations = relu_chain(12, Activation::Sigmoid);
  } else if (name == "desk_curves") {
    a.layers = {64, 32, 16, 6, 16, 32, 64};
    a.loss = Loss::BinaryCrossEntropy;
    a.activations = relu_chain(6, Activation::Sigmoid);
  } else {
    throw std::invalid_argument("unknown architecture preset '" + name + "'");
  }
  return a;
}

std::vector<std::string> preset_names() { return {"mnist", "faces", "curves", "desk_curves"}; }

GridSpec default_grid() {
  const std::vector<double> values = {1e-1, 1e-2, 1e-3, 1e-4, 3e-1, 3e-2, 3e-3, 3e-4};
  return {values, values, {1e-2, 1e-3}};
}

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw std::invalid_argument("config: unsupported schema_version " + std::to_string(schema_version));
  }
  const Architecture& a = architecture;
  if (a.layers.size() < 2 || a.activations.size() != a.layers.size() - 1) {
    throw std::invalid_argument("config: architecture needs one activation per layer");
  }
  if (!a.preset.empty()) {
    const Architecture p = preset_architecture(a.preset);
    if (p.layers != a.layers || p.activations != a.activations || p.loss != a.loss) {
      throw std::invalid_argument("config: architecture does not match preset '" + a.preset + "'");
    }
  }
  optimizer.validate();
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  if (n_train < 1 || n_val < 0) throw std::invalid_argument("config: bad dataset sizes");
  if (probe) {
    if (probe->layer >= a.activations.size()) throw std::invalid_argument("config: probe layer out of range");
    if (probe->every < 1) throw std::invalid_argument("config: probe.every must be >= 1");
    const Index side = a.layers[probe->layer + 1] * (a.layers[probe->layer] + 1);
    if (side > kMaxDenseFisherSide) {
      throw std::invalid_argument("config: probe layer Fisher block (" + std::to_string(side) +
                                  ") is too large to materialise");
    }
  }
}

ExperimentConfig parse_config(const std::string& json_text) {
  const json j = json::parse(json_text);
  ExperimentConfig c;
  read_if(j, "schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) {
    throw std::invalid_argument("config: unsupported schema_version " + std::to_string(c.schema_version));
  }
  if (j.contains("dataset")) c.dataset = parse_dataset(j.at("dataset").get<std::string>());
  read_if(j, "synthetic", c.synthetic);
  read_if(j, "mnist_images", c.mnist_images);
  read_if(j, "n_train", c.n_train);
  read_if(j, "n_val", c.n_val);
  read_if(j, "data_seed", c.data_seed);
  if (j.contains("architecture")) {
    const json& a = j.at("architecture");
    if (a.is_string()) {
      c.architecture = preset_architecture(a.get<std::string>());
    } else {
      Architecture arch;
      read_if(a, "preset", arch.preset);
      arch.layers = a.at("layers").get<std::vector<Index>>();
      for (const auto& s : a.at("activations")) arch.activations.push_back(parse_activation(s.get<std::string>()));
      arch.loss = parse_loss(a.at("loss").get<std::string>());
      c.architecture = std::move(arch);
    }
  }
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"), c.optimizer);
  read_if(j, "epochs", c.epochs);
  read_if(j, "max_iterations", c.max_iterations);
  if (j.contains("probe") && !j.at("probe").is_null()) {
    const json& p = j.at("probe");
    ProbeSpec spec;
    spec.layer = c.architecture.activations.size() / 2;
    if (p.contains("layer")) {
      const long layer = p.at("layer").get<long>();
      if (layer < 1) throw std::invalid_argument("config: probe.layer is 1-based");
      spec.layer = static_cast<std::size_t>(layer - 1);
    }
    read_if(p, "every", spec.every);
    if (p.contains("methods")) {
      for (const auto& m : p.at("methods")) spec.methods.push_back(parse_method(m.get<std::string>()));
    } else {
      spec.methods = curvature_methods();
    }
    read_if(p, "svd_eps", spec.svd.eps);
    read_if(p, "svd_max_iter", spec.svd.k_max);
    read_if(p, "krylov_dim", spec.svd.krylov_dim);
    read_if(p, "lanczos_max_restarts", spec.svd.max_restarts);
    c.probe = std::move(spec);
  }
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    read_if(g, "lr", c.grid.learning_rates);
    read_if(g, "damping", c.grid.dampings);
    read_if(g, "clip", c.grid.clips);
  }
  read_if(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["dataset"] = to_string(c.dataset);
  j["synthetic"] = c.synthetic;
  j["mnist_images"] = c.mnist_images;
  j["n_train"] = c.n_train;
  j["n_val"] = c.n_val;
  j["data_seed"] = c.data_seed;
  json arch;
  arch["preset"] = c.architecture.preset;
  arch["layers"] = c.architecture.layers;
  std::vector<std::string> acts;
  for (Activation a : c.architecture.activations) acts.push_back(to_string(a));
  arch["activations"] = acts;
  arch["loss"] = to_string(c.architecture.loss);
  j["architecture"] = arch;
  j["optimizer"] = optimizer_to_json(c.optimizer);
  j["epochs"] = c.epochs;
  j["max_iterations"] = c.max_iterations;
  if (c.probe) {
    std::vector<std::string> methods;
    for (Method m : c.probe->methods) methods.push_back(to_string(m));
    j["probe"] = {{"layer", c.probe->layer + 1},
                  {"every", c.probe->every},
                  {"methods", methods},
                  {"svd_eps", c.probe->svd.eps},
                  {"svd_max_iter", c.probe->svd.k_max},
                  {"krylov_dim", c.probe->svd.krylov_dim},
                  {"lanczos_max_restarts", c.probe->svd.max_restarts}};
  }
  j["grid"] = {{"lr", c.grid.learning_rates}, {"damping", c.grid.dampings}, {"clip", c.grid.clips}};
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

MetricRecord MetricRecord::blank(std::size_t num_layers) {
  MetricRecord r;
  r.error1.assign(curvature_methods().size(), kNaN);
  r.error2.assign(curvature_methods().size(), kNaN);
  r.layers.assign(num_layers, LayerRefreshInfo{});
  return r;
}

std::vector<std::string> csv_header(std::size_t num_layers, bool include_wall_clock) {
  std::vector<std::string> h = {"iteration", "epoch"};
  if (include_wall_clock) h.push_back("wall_clock_seconds");
  for (const char* c : {"train_loss", "epoch_train_loss", "val_loss", "nu"}) h.push_back(c);
  for (Method m : curvature_methods()) {
    h.push_back("error1_" + to_string(m));
    h.push_back("error2_" + to_string(m));
  }
  for (std::size_t i = 1; i <= num_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + "_";
    h.push_back(p + "sigma1");
    h.push_back(p + "sigma2");
    h.push_back(p + "svd_iters");
  }
  return h;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricRecord>& records,
                       std::size_t num_layers, bool include_wall_clock) {
  const auto header = csv_header(num_layers, include_wall_clock);
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  const std::size_t nm = curvature_methods().size();
  for (const MetricRecord& r : records) {
    if (r.layers.size() != num_layers || r.error1.size() != nm || r.error2.size() != nm) {
      throw DimensionError("write_metrics_csv: record does not match header layout");
    }
    os << r.iteration << ',' << r.epoch;
    if (include_wall_clock) os << ',' << format_double(r.wall_clock_seconds);
    for (double x : {r.train_loss, r.epoch_train_loss, r.val_loss, r.nu}) os << ',' << format_double(x);
    for (std::size_t m = 0; m < nm; ++m) os << ',' << format_double(r.error1[m]) << ',' << format_double(r.error2[m]);
    for (const LayerRefreshInfo& l : r.layers) {
      os << ',' << format_double(l.sigma1) << ',' << format_double(l.sigma2) << ',' << l.svd_iterations;
    }
    os << '\n';
  }
}

std::vector<MetricRecord> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("metrics CSV: missing header");
  const auto header = split_csv_line(line);
  const bool wall = std::find(header.begin(), header.end(), "wall_clock_seconds") != header.end();
  const std::size_t fixed = (wall ? 7 : 6) + 2 * curvature_methods().size();
  if (header.size() < fixed || (header.size() - fixed) % 3 != 0) {
    throw std::runtime_error("metrics CSV: unexpected header");
  }
  const std::size_t num_layers = (header.size() - fixed) / 3;
  if (header != csv_header(num_layers, wall)) throw std::runtime_error("metrics CSV: unexpected header");

  std::vector<MetricRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw std::runtime_error("metrics CSV: ragged row");
    MetricRecord r = MetricRecord::blank(num_layers);
    std::size_t k = 0;
    r.iteration = std::stol(cells[k++]);
    r.epoch = std::stoi(cells[k++]);
    if (wall) r.wall_clock_seconds = parse_double(cells[k++]);
    r.train_loss = parse_double(cells[k++]);
    r.epoch_train_loss = parse_double(cells[k++]);
    r.val_loss = parse_double(cells[k++]);
    r.nu = parse_double(cells[k++]);
    for (std::size_t m = 0; m < curvature_methods().size(); ++m) {
      r.error1[m] = parse_double(cells[k++]);
      r.error2[m] = parse_double(cells[k++]);
    }
    for (auto& l : r.layers) {
      l.sigma1 = parse_double(cells[k++]);
      l.sigma2 = parse_double(cells[k++]);
      l.svd_iterations = std::stoi(cells[k++]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

void emit_csv(const std::vector<MetricRecord>& records, const std::string& path,
              std::size_t num_layers, bool include_wall_clock) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_metrics_csv(out, records, num_layers, include_wall_clock);
}

double column_value(const MetricRecord& r, const std::string& column) {
  if (column == "iteration") return static_cast<double>(r.iteration);
  if (column == "epoch") return r.epoch;
  if (column == "wall_clock_seconds") return r.wall_clock_seconds;
  if (column == "train_loss") return r.train_loss;
  if (column == "epoch_train_loss") return r.epoch_train_loss;
  if (column == "val_loss") return r.val_loss;
  if (column == "nu") return r.nu;
  const auto& methods = curvature_methods();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    if (column == "error1_" + to_string(methods[m])) return r.error1.at(m);
    if (column == "error2_" + to_string(methods[m])) return r.error2.at(m);
  }
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i + 1) + "_";
    if (column == p + "sigma1") return r.layers[i].sigma1;
    if (column == p + "sigma2") return r.layers[i].sigma2;
    if (column == p + "svd_iters") return r.layers[i].svd_iterations;
  }
  throw std::invalid_argument("unknown metric column '" + column + "'");
}

std::string render_svg(const std::vector<MetricRecord>& records, const PlotSpec& spec) {
  constexpr double W = 720, H = 440, left = 70, right = 170, top = 40, bottom = 50;
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const char* x_name = spec.x == PlotAxis::Iteration ? "iteration"
                       : spec.x == PlotAxis::Epoch   ? "epoch"
                                                     : "wall_clock_seconds";

  std::vector<std::vector<std::pair<double, double>>> series;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const std::string& col : spec.columns) {
    std::vector<std::pair<double, double>> pts;
    for (const MetricRecord& r : records) {
      const double x = column_value(r, x_name);
      const double y = column_value(r, col);
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts.emplace_back(x, y);
      x0 = std::min(x0, x); x1 = std::max(x1, x);
      y0 = std::min(y0, y); y1 = std::max(y1, y);
    }
    series.push_back(std::move(pts));
  }
  if (!(x1 > x0)) { x0 = std::isfinite(x0) ? x0 - 1 : 0; x1 = x0 + 2; }
  if (!(y1 > y0)) { y0 = std::isfinite(y0) ? y0 - 1 : 0; y1 = y0 + 2; }
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << xml_escape(spec.title) << "</text>\n"
     << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  auto label = [&](double x, double y, const std::string& text, const char* anchor) {
    os << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(text) << "</text>\n";
  };
  char buf[32];
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
    std::snprintf(buf, sizeof buf, "%.4g", fx);
    label(sx(fx), top + ph + 16, buf, "middle");
    std::snprintf(buf, sizeof buf, "%.4g", fy);
    label(left - 6, sy(fy) + 4, buf, "end");
  }
  label(left + pw / 2, H - 12, x_name, "middle");

  for (std::size_t s = 0; s < series.size(); ++s) {
    if (series[s].empty()) continue;
    const char* colour = palette[s % (sizeof palette / sizeof *palette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f", sx(series[s][i].first), sy(series[s][i].second));
      os << (i ? " " : "") << buf;
    }
    os << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << W - right + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - right + 36
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    label(W - right + 42, ly, s < spec.labels.size() ? spec.labels[s] : spec.columns[s], "start");
  }
  os << "</svg>\n";
  return os.str();
}

void emit_plot(const std::vector<MetricRecord>& records, const std::string& path, const PlotSpec& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << render_svg(records, spec);
}

std::pair<Matrix, Matrix> load_dataset(const ExperimentConfig& config) {
  const Index d0 = config.architecture.layers.front();
  const Index total = config.n_train + config.n_val;
  Matrix all;
  switch (config.dataset) {
    case DatasetKind::SyntheticCurves:
      all = gen_synthetic_curves(total, config.data_seed, integer_side(d0));
      break;
    case DatasetKind::FacesConfigOnly:
      if (!config.synthetic) {
        throw std::invalid_argument(
            "the faces dataset is not bundled; set \"synthetic\": true (or --synthetic) to train "
            "on Gaussian-blob stand-in images");
      }
      all = gen_gaussian_blobs(total, config.data_seed, integer_side(d0));
      break;
    case DatasetKind::Mnist: {
      if (config.mnist_images.empty()) throw std::invalid_argument("config: mnist_images path is required");
      all = load_idx(config.mnist_images);
      if (all.rows() < total) {
        throw std::invalid_argument("config: IDX file has " + std::to_string(all.rows()) +
                                    " images, need " + std::to_string(total));
      }
      break;
    }
  }
  if (all.cols() != d0) {
    throw DimensionError("dataset has " + std::to_string(all.cols()) + " features, network expects " +
                         std::to_string(d0));
  }
  return {all.topRows(config.n_train), all.middleRows(config.n_train, config.n_val)};
}

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  const auto [train, val] = load_dataset(config);
  const OptimizerConfig& oc = config.optimizer;
  Rng init_rng(oc.seed);
  MLPModel model = MLPModel::initialize(config.architecture.layers, config.architecture.activations,
                                        config.architecture.loss, init_rng);
  std::unique_ptr<Optimizer> opt = make_optimizer(oc, model);
  Rng shuffle_rng(oc.seed ^ 0x5eedf00dULL);
  Rng probe_rng(oc.seed ^ 0xb0beULL);
  const std::size_t L = model.num_layers();

  ExperimentResult result;
  ExperimentSummary& summary = result.summary;
  auto push = [&](MetricRecord r) {
    if (options.on_record) options.on_record(r);
    result.records.push_back(std::move(r));
  };
  auto full_losses = [&](MetricRecord& r) {
    r.epoch_train_loss = batch_loss(model, train, train);
    r.val_loss = val.rows() > 0 ? batch_loss(model, val, val) : kNaN;
    summary.epoch_train_loss.push_back(r.epoch_train_loss);
    summary.epoch_val_loss.push_back(r.val_loss);
  };

  MetricRecord initial = MetricRecord::blank(L);
  full_losses(initial);
  initial.wall_clock_seconds = elapsed();
  summary.initial_train_loss = initial.epoch_train_loss;
  push(std::move(initial));

  std::vector<Index> order(static_cast<std::size_t>(train.rows()));
  long iteration = 0;
  bool stop = false;
  try {
    for (int epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
      std::iota(order.begin(), order.end(), Index{0});
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(oc.batch_size)) {
        const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(oc.batch_size));
        const std::vector<Index> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
        const Matrix X = train(idx, Eigen::all);

        MetricRecord r = MetricRecord::blank(L);
        r.iteration = ++iteration;
        r.epoch = epoch;
        if (config.probe && (iteration - 1) % config.probe->every == 0) {
          const auto probes = fim_error_probe(model, X, config.probe->layer, config.probe->methods,
                                              probe_rng, config.probe->svd);
          const auto& methods = curvature_methods();
          for (const ProbeResult& p : probes) {
            const auto at = std::find(methods.begin(), methods.end(), p.method) - methods.begin();
            r.error1[at] = p.error1;
            r.error2[at] = p.error2;
          }
        }
        const StepMetrics m = opt->step(model, X, X);
        r.train_loss = m.loss;
        r.nu = m.nu;
        if (!m.layers.empty()) r.layers = m.layers;
        const bool last_in_epoch = end == order.size();
        stop = config.max_iterations > 0 && iteration >= config.max_iterations;
        if (last_in_epoch || stop) full_losses(r);
        r.wall_clock_seconds = elapsed();
        push(std::move(r));
        if (stop) break;
      }
    }
  } catch (const TrainingDiverged& e) {
    summary.diverged = true;
    summary.failure = e.what();
    log_warning(e.what());
  }
  summary.iterations = iteration;
  summary.final_train_loss = summary.diverged ? INFINITY : summary.epoch_train_loss.back();
  summary.final_val_loss = summary.diverged ? INFINITY : summary.epoch_val_loss.back();
  summary.seconds = elapsed();

  if (options.write_outputs) {
    namespace fs = std::filesystem;
    const fs::path dir(config.out_dir);
    fs::create_directories(dir);
    {
      std::ofstream out(dir / "config.json");
      out << config_to_json(config) << '\n';
    }
    emit_csv(result.records, (dir / "metrics.csv").string(), L, false);
    {
      std::ofstream out(dir / "timing.csv");
      out << "iteration,wall_clock_seconds\n";
      for (const auto& r : result.records) out << r.iteration << ',' << format_double(r.wall_clock_seconds) << '\n';
    }
    {
      json s = {{"diverged", summary.diverged},
                {"failure", summary.failure},
                {"iterations", summary.iterations},
                {"initial_train_loss", summary.initial_train_loss},
                {"final_train_loss", summary.final_train_loss},
                {"final_val_loss", summary.final_val_loss},
                {"epoch_train_loss", summary.epoch_train_loss},
                {"epoch_val_loss", summary.epoch_val_loss},
                {"seconds", summary.seconds}};
      std::ofstream out(dir / "summary.json");
      out << s.dump(2) << '\n';
    }
    const std::string method = to_string(oc.method);
    emit_plot(result.records, (dir / "loss_vs_epoch.svg").string(),
              {method + ": loss vs epoch", PlotAxis::Epoch, {"epoch_train_loss", "val_loss"}, {"train", "validation"}});
    emit_plot(result.records, (dir / "loss_vs_time.svg").string(),
              {method + ": loss vs time", PlotAxis::WallClock, {"epoch_train_loss", "val_loss"}, {"train", "validation"}});
    if (config.probe) {
      std::vector<std::string> e1, e2, labels;
      for (Method m : curvature_methods()) {
        e1.push_back("error1_" + to_string(m));
        e2.push_back("error2_" + to_string(m));
        labels.push_back(to_string(m));
      }
      emit_plot(result.records, (dir / "fim_error1.svg").string(),
                {"Fisher block error 1 (Frobenius)", PlotAxis::Iteration, e1, labels});
      emit_plot(result.records, (dir / "fim_error2.svg").string(),
                {"Fisher block error 2 (spectrum)", PlotAxis::Iteration, e2, labels});
    }
  }
  return result;
}

GridSearchResult run_gridsearch(const ExperimentConfig& config, bool write_outputs) {
  config.validate();
  GridSearchResult out;
  const bool second = is_second_order(config.optimizer.method);
  const std::vector<double> dampings = second ? config.grid.dampings : std::vector<double>{config.optimizer.damping};
  const std::vector<double> clips = second ? config.grid.clips : std::vector<double>{config.optimizer.clip};
  if (config.grid.learning_rates.empty() || dampings.empty() || clips.empty()) {
    throw std::invalid_argument("gridsearch: empty grid");
  }
  for (double lr : config.grid.learning_rates) {
    for (double damping : dampings) {
      for (double clip : clips) {
        ExperimentConfig c = config;
        c.optimizer.learning_rate = lr;
        c.optimizer.damping = damping;
        c.optimizer.clip = clip;
        c.probe.reset();
        const ExperimentResult r = run_experiment(c, {false, {}});
        GridPoint p{lr, damping, clip, r.summary.final_train_loss, r.summary.diverged};
        if (!std::isfinite(p.final_train_loss)) p.diverged = true;
        out.points.push_back(p);
      }
    }
  }
  auto score = [](const GridPoint& p) { return p.diverged ? INFINITY : p.final_train_loss; };
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    if (score(out.points[i]) < score(out.points[out.best])) out.best = i;
  }
  if (write_outputs) {
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);
    std::ofstream csv(fs::path(config.out_dir) / "gridsearch.csv");
    csv << "learning_rate,damping,clip,final_train_loss,diverged\n";
    for (const GridPoint& p : out.points) {
      csv << format_double(p.learning_rate) << ',' << format_double(p.damping) << ','
          << format_double(p.clip) << ',' << format_double(p.final_train_loss) << ','
          << (p.diverged ? 1 : 0) << '\n';
    }
    ExperimentConfig best = config;
    best.optimizer.learning_rate = out.points[out.best].learning_rate;
    best.optimizer.damping = out.points[out.best].damping;
    best.optimizer.clip = out.points[out.best].clip;
    best.out_dir = (fs::path(config.out_dir) / "best").string();
    run_experiment(best);
  }
  return out;
}

}  // namespace kronfisher
