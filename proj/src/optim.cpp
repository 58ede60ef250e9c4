#include "kronfisher/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>

namespace kronfisher {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_params(const std::vector<Matrix>& params, const GradientSet& grads) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: layer count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols()) {
      throw DimensionError("optimizer: gradient shape mismatch");
    }
  }
}

double checked_loss(const MLPModel& model, const ForwardPass& pass, const Matrix& Y) {
  const double loss = batch_loss(model, pass, Y);
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "training diverged: mini-batch loss is " << loss;
    throw TrainingDiverged(os.str());
  }
  return loss;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::SGD: return "sgd";
    case Method::Adam: return "adam";
    case Method::KFAC: return "kfac";
    case Method::KPSVD: return "kpsvd";
    case Method::Deflation: return "deflation";
    case Method::Lanczos: return "lanczos";
    case Method::KFACCorrected: return "kfac_corrected";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  std::replace(n.begin(), n.end(), '-', '_');
  for (Method m : {Method::SGD, Method::Adam, Method::KFAC, Method::KPSVD, Method::Deflation,
                   Method::Lanczos, Method::KFACCorrected}) {
    if (n == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + name + "'");
}

bool is_second_order(Method m) { return m != Method::SGD && m != Method::Adam; }

bool is_rank2(Method m) {
  return m == Method::Deflation || m == Method::Lanczos || m == Method::KFACCorrected;
}

const std::vector<Method>& curvature_methods() {
  static const std::vector<Method> methods = {Method::KFAC, Method::KPSVD, Method::Deflation,
                                              Method::Lanczos, Method::KFACCorrected};
  return methods;
}

void OptimizerConfig::validate() const {
  if (t1 < 1 || t2 < 1) throw std::invalid_argument("OptimizerConfig: T1 and T2 must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("OptimizerConfig: learning rate < 0");
  if (is_second_order(method)) {
    if (!(learning_rate > 0.0) || !(damping > 0.0)) {
      throw std::invalid_argument("OptimizerConfig: second-order methods need lr > 0 and damping > 0");
    }
    if (!(clip > 0.0)) throw std::invalid_argument("OptimizerConfig: clip must be positive");
    if (ema_decay < 0.0 || ema_decay > 1.0) throw std::invalid_argument("OptimizerConfig: ema_decay outside [0,1]");
  }
  if (batch_size < 1) throw std::invalid_argument("OptimizerConfig: batch_size must be >= 1");
  if (krylov_dim < 2) throw std::invalid_argument("OptimizerConfig: krylov_dim must be >= 2");
}

SvdSettings OptimizerConfig::svd_settings() const {
  return {svd_eps, svd_max_iter, krylov_dim, lanczos_max_restarts};
}

void sgd_step(std::vector<Matrix>& params, const GradientSet& grads, std::vector<Matrix>& velocity,
              double eta, double beta) {
  check_params(params, grads);
  if (velocity.empty()) {
    for (const Matrix& g : grads) velocity.push_back(Matrix::Zero(g.rows(), g.cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = beta * velocity[i] + grads[i];
    params[i] -= eta * velocity[i];
  }
}

void adam_step(std::vector<Matrix>& params, const GradientSet& grads, AdamMoments& moments,
               double eta, double beta1, double beta2, double eps) {
  check_params(params, grads);
  if (moments.first.empty()) {
    for (const Matrix& g : grads) {
      moments.first.push_back(Matrix::Zero(g.rows(), g.cols()));
      moments.second.push_back(Matrix::Zero(g.rows(), g.cols()));
    }
  }
  ++moments.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(moments.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(moments.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    moments.first[i] = beta1 * moments.first[i] + (1.0 - beta1) * grads[i];
    moments.second[i] = beta2 * moments.second[i] + (1.0 - beta2) * grads[i].cwiseAbs2();
    const Matrix m_hat = moments.first[i] / c1;
    const Matrix v_hat = moments.second[i] / c2;
    params[i].array() -= eta * m_hat.array() / (v_hat.array().sqrt() + eps);
  }
}

StepMetrics SgdOptimizer::step(MLPModel& model, const Matrix& X, const Matrix& Y) {
  const ForwardPass pass = forward(model, X);
  StepMetrics metrics;
  metrics.loss = checked_loss(model, pass, Y);
  const BackwardResult bw = backward(model, pass, Y);
  sgd_step(model.weights, bw.gradients, velocity_, config_.learning_rate, config_.momentum);
  return metrics;
}

StepMetrics AdamOptimizer::step(MLPModel& model, const Matrix& X, const Matrix& Y) {
  const ForwardPass pass = forward(model, X);
  StepMetrics metrics;
  metrics.loss = checked_loss(model, pass, Y);
  const BackwardResult bw = backward(model, pass, Y);
  adam_step(model.weights, bw.gradients, moments_, config_.learning_rate, config_.beta1,
            config_.beta2, config_.adam_eps);
  return metrics;
}

int refresh_thread_count() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("KRONFISHER_THREADS")) {
    const int requested = std::atoi(env);
    if (requested >= 1) n = requested;
  }
  return n;
}

NaturalGradientOptimizer::NaturalGradientOptimizer(OptimizerConfig config, const MLPModel& model)
    : config_(std::move(config)), rng_(sampling_rng(config_.seed)), threads_(refresh_thread_count()) {
  config_.validate();
  if (!is_second_order(config_.method)) {
    throw std::invalid_argument("NaturalGradientOptimizer: method is not a curvature method");
  }
  const auto kind = is_rank2(config_.method) ? KronApprox::Kind::Rank2 : KronApprox::Kind::Rank1;
  layers_.assign(model.num_layers(), KronApprox(kind));
  warm_.resize(model.num_layers());
}

LayerRefreshInfo NaturalGradientOptimizer::refresh_layer(std::size_t layer, const LayerStats& stats) {
  const SvdSettings settings = config_.svd_settings();
  LayerRefreshInfo info{kNaN, kNaN, 0, true};
  WarmStart& warm = warm_[layer];
  KronPair first;
  std::optional<KronPair> second;

  switch (config_.method) {
    case Method::KFAC:
      first = kfac_factors(stats);
      break;
    case Method::KPSVD: {
      Rank1Result r = kpsvd_factors(stats, settings, warm.v1);
      info = {r.triplet.sigma, kNaN, r.triplet.iterations, r.triplet.converged};
      warm.v1 = r.triplet.v;
      first = std::move(r.pair);
      break;
    }
    case Method::Deflation:
    case Method::Lanczos:
    case Method::KFACCorrected: {
      Rank2Result r = config_.method == Method::Deflation ? deflation_factors(stats, settings, warm)
                      : config_.method == Method::Lanczos ? lanczos_factors(stats, settings, warm)
                                                          : kfac_corrected_factors(stats, settings, warm);
      info = {r.triplet1.sigma, r.triplet2.sigma, r.iterations, r.converged};
      if (config_.method != Method::KFACCorrected) warm.v1 = r.triplet1.v;
      if (!r.degenerate) warm.v2 = r.triplet2.v;
      first = std::move(r.first);
      second = std::move(r.second);
      break;
    }
    default:
      throw std::logic_error("refresh_layer: not a curvature method");
  }
  layers_[layer].accumulate(first, second, iteration_ + 1, config_.ema_decay);
  return info;
}

StepMetrics NaturalGradientOptimizer::step(MLPModel& model, const Matrix& X, const Matrix& Y) {
  if (model.num_layers() != layers_.size()) throw DimensionError("NaturalGradientOptimizer: model depth changed");
  const ForwardPass pass = forward(model, X);
  StepMetrics metrics;
  metrics.loss = checked_loss(model, pass, Y);
  BackwardResult bw = backward(model, pass, Y);

  if (iteration_ % config_.t1 == 0) {
    const Matrix sampled = sample_targets(pass.activations.back(), model.loss, rng_);
    const BackwardResult fisher = backward(model, pass, sampled);
    metrics.layers.resize(layers_.size());
    const std::size_t n = layers_.size();
    const int workers = std::min<int>(threads_, static_cast<int>(n));
    if (workers <= 1) {
      for (std::size_t i = 0; i < n; ++i) metrics.layers[i] = refresh_layer(i, fisher.stats.layers[i]);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(workers);
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < n; i += workers) {
              metrics.layers[i] = refresh_layer(i, fisher.stats.layers[i]);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    metrics.refreshed_factors = true;
  }
  if (iteration_ % config_.t2 == 0) {
    for (auto& layer : layers_) layer.rebuild_inverse(config_.damping);
    metrics.rebuilt_inverse = true;
  }

  last_direction_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    last_direction_[i] = layers_[i].precondition(bw.gradients[i]);
  }
  const ClipResult clipped = kl_clip(last_direction_, bw.gradients, config_.clip);
  metrics.nu = clipped.nu;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    model.weights[i] -= config_.learning_rate * clipped.scaled[i];
  }
  last_gradient_ = std::move(bw.gradients);
  ++iteration_;
  return metrics;
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const MLPModel& model) {
  config.validate();
  switch (config.method) {
    case Method::SGD: return std::make_unique<SgdOptimizer>(config);
    case Method::Adam: return std::make_unique<AdamOptimizer>(config);
    default: return std::make_unique<NaturalGradientOptimizer>(config, model);
  }
}

std::pair<double, double> approximation_errors(const Matrix& F, const Matrix& F_hat) {
  if (F.rows() != F_hat.rows() || F.cols() != F_hat.cols()) {
    throw DimensionError("approximation_errors: shape mismatch");
  }
  const double fn = F.norm();
  const Vector sf = spectrum(F);
  const Vector sh = spectrum(F_hat);
  const double sn = sf.norm();
  return {fn > 0.0 ? (F - F_hat).norm() / fn : (F - F_hat).norm(),
          sn > 0.0 ? (sf - sh).norm() / sn : (sf - sh).norm()};
}

Matrix approximate_fisher_block(Method method, const LayerStats& stats, const SvdSettings& settings,
                                Rank2Result* details) {
  Rank2Result r;
  switch (method) {
    case Method::KFAC:
      r.first = kfac_factors(stats);
      r.degenerate = true;
      break;
    case Method::KPSVD: {
      Rank1Result k = kpsvd_factors(stats, settings);
      r.first = std::move(k.pair);
      r.triplet1 = std::move(k.triplet);
      r.iterations = r.triplet1.iterations;
      r.degenerate = true;
      break;
    }
    case Method::Deflation: r = deflation_factors(stats, settings); break;
    case Method::Lanczos: r = lanczos_factors(stats, settings); break;
    case Method::KFACCorrected: r = kfac_corrected_factors(stats, settings); break;
    default: throw std::invalid_argument("approximate_fisher_block: not a curvature method");
  }
  Matrix out = r.first.dense();
  if (is_rank2(method)) out += r.second.dense();
  if (details) *details = std::move(r);
  return out;
}

std::vector<ProbeResult> fim_error_probe(const MLPModel& model, const Matrix& X, std::size_t layer,
                                         const std::vector<Method>& methods, Rng& rng,
                                         const SvdSettings& settings) {
  if (layer >= model.num_layers()) throw std::out_of_range("fim_error_probe: layer index");
  const ForwardPass pass = forward(model, X);
  const Matrix sampled = sample_targets(pass.activations.back(), model.loss, rng);
  const BackwardResult bw = backward(model, pass, sampled);
  const LayerStats& stats = bw.stats.layers[layer];
  const Matrix F = exact_fim_block(stats);

  std::vector<ProbeResult> out;
  for (Method m : methods) {
    Rank2Result details;
    const Matrix F_hat = approximate_fisher_block(m, stats, settings, &details);
    const auto [e1, e2] = approximation_errors(F, F_hat);
    ProbeResult pr{m, e1, e2, kNaN, kNaN, details.iterations};
    if (m != Method::KFAC) pr.sigma1 = details.triplet1.sigma;
    if (is_rank2(m)) pr.sigma2 = details.triplet2.sigma;
    out.push_back(pr);
  }
  return out;
}

}  // namespace kronfisher
