#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "kronfisher/kron_approx.hpp"
#include "kronfisher/mlp.hpp"
#include "kronfisher/precond.hpp"

namespace kronfisher {

enum class Method { SGD, Adam, KFAC, KPSVD, Deflation, Lanczos, KFACCorrected };

std::string to_string(Method m);
Method parse_method(const std::string& name);
bool is_second_order(Method m);
bool is_rank2(Method m);
/// The five curvature methods in a fixed order.
const std::vector<Method>& curvature_methods();

struct OptimizerConfig {
  Method method = Method::KFAC;
  double learning_rate = 1e-2;
  double damping = 1e-2;
  double clip = 1e-2;
  double ema_decay = 0.95;
  long t1 = 100;  // factor refresh period
  long t2 = 100;  // inverse refresh period
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 256;
  std::uint64_t seed = 0;
  double svd_eps = 1e-6;
  int svd_max_iter = 500;
  int krylov_dim = 6;
  int lanczos_max_restarts = 100;

  void validate() const;
  SvdSettings svd_settings() const;
};

/// theta <- theta - eta * v with v <- beta v + g.
void sgd_step(std::vector<Matrix>& params, const GradientSet& grads, std::vector<Matrix>& velocity,
              double eta, double beta);

struct AdamMoments {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  long step = 0;
};

/// Bias-corrected Adam.
void adam_step(std::vector<Matrix>& params, const GradientSet& grads, AdamMoments& moments,
               double eta, double beta1, double beta2, double eps);

struct LayerRefreshInfo {
  double sigma1 = std::numeric_limits<double>::quiet_NaN();
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  int svd_iterations = 0;
  bool converged = true;
};

struct StepMetrics {
  double loss = 0.0;
  double nu = 1.0;
  bool refreshed_factors = false;
  bool rebuilt_inverse = false;
  std::vector<LayerRefreshInfo> layers;  // filled on factor refresh
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// One iteration on the mini-batch (X, Y). Reports the mini-batch loss
  /// before the update.
  virtual StepMetrics step(MLPModel& model, const Matrix& X, const Matrix& Y) = 0;
  virtual Method method() const = 0;
};

class SgdOptimizer final : public Optimizer {
 public:
  explicit SgdOptimizer(OptimizerConfig config) : config_(std::move(config)) {}
  StepMetrics step(MLPModel& model, const Matrix& X, const Matrix& Y) override;
  Method method() const override { return Method::SGD; }

 private:
  OptimizerConfig config_;
  std::vector<Matrix> velocity_;
};

class AdamOptimizer final : public Optimizer {
 public:
  explicit AdamOptimizer(OptimizerConfig config) : config_(std::move(config)) {}
  StepMetrics step(MLPModel& model, const Matrix& X, const Matrix& Y) override;
  Method method() const override { return Method::Adam; }

 private:
  OptimizerConfig config_;
  AdamMoments moments_;
};

/// Natural-gradient descent with a Kronecker-factored block-diagonal Fisher.
/// Iteration k (0-based count of steps taken):
///   forward; backward on true targets; if k % T1 == 0 a second backward on
///   targets sampled from the model, factorisation and EMA; if k % T2 == 0
///   inverse rebuild with damping; per-layer preconditioning; KL clipping;
///   theta <- theta - eta * nu * direction.
class NaturalGradientOptimizer final : public Optimizer {
 public:
  NaturalGradientOptimizer(OptimizerConfig config, const MLPModel& model);

  StepMetrics step(MLPModel& model, const Matrix& X, const Matrix& Y) override;
  Method method() const override { return config_.method; }

  const KronApprox& curvature(std::size_t layer) const { return layers_.at(layer); }
  /// Preconditioned gradient of the last step, before clipping.
  const GradientSet& last_direction() const { return last_direction_; }
  const GradientSet& last_gradient() const { return last_gradient_; }
  const WarmStart& warm_start(std::size_t layer) const { return warm_.at(layer); }
  long iteration() const { return iteration_; }

  /// Generator used for the Fisher targets of an optimizer built with `seed`.
  static Rng sampling_rng(std::uint64_t seed) { return Rng(seed ^ 0xf15e5ULL); }

 private:
  LayerRefreshInfo refresh_layer(std::size_t layer, const LayerStats& stats);

  OptimizerConfig config_;
  std::vector<KronApprox> layers_;
  std::vector<WarmStart> warm_;
  Rng rng_;
  long iteration_ = 0;
  GradientSet last_direction_;
  GradientSet last_gradient_;
  int threads_ = 1;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const MLPModel& model);

/// Worker count for per-layer refreshes: KRONFISHER_THREADS when set to a
/// positive integer, hardware concurrency otherwise.
int refresh_thread_count();

struct ProbeResult {
  Method method;
  double error1 = 0.0;  // ||F - F_hat||_F / ||F||_F
  double error2 = 0.0;  // ||spec F - spec F_hat||_2 / ||spec F||_2
  double sigma1 = std::numeric_limits<double>::quiet_NaN();
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
};

/// Relative Frobenius and spectrum errors of an approximation.
std::pair<double, double> approximation_errors(const Matrix& F, const Matrix& F_hat);

/// Dense approximation of one layer's Fisher block built by `method` from
/// stats of one mini-batch (no averaging).
Matrix approximate_fisher_block(Method method, const LayerStats& stats,
                                const SvdSettings& settings, Rank2Result* details = nullptr);

/// Exact Fisher block of `layer` from a forward pass on X and a backward pass
/// on targets sampled from the model, compared against every method.
std::vector<ProbeResult> fim_error_probe(const MLPModel& model, const Matrix& X, std::size_t layer,
                                         const std::vector<Method>& methods, Rng& rng,
                                         const SvdSettings& settings);

}  // namespace kronfisher
