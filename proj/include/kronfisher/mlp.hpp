#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kronfisher/linalg.hpp"

namespace kronfisher {

using Rng = std::mt19937_64;

enum class Activation { ReLU, Sigmoid, Linear };

/// BinaryCrossEntropy sums -[y log z + (1-y) log(1-z)] over output units;
/// MeanSquaredError sums (z-y)^2/2, the negative log-likelihood of a
/// unit-variance Gaussian up to a constant. Batch losses average over samples.
enum class Loss { BinaryCrossEntropy, MeanSquaredError };

std::string to_string(Activation a);
std::string to_string(Loss l);
Activation parse_activation(const std::string& name);
Loss parse_loss(const std::string& name);

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fully connected network. Layer i (1-based in the maths, 0-based here) maps
/// d_{i-1} inputs to d_i outputs through W_i of shape d_i x (d_{i-1}+1); column
/// 0 of W_i is the bias and multiplies the constant 1 of the augmented
/// activation.
struct MLPModel {
  std::vector<Index> layer_dims;  // d_0 .. d_L
  std::vector<Matrix> weights;    // L matrices
  std::vector<Activation> activations;
  Loss loss = Loss::BinaryCrossEntropy;

  std::size_t num_layers() const { return weights.size(); }
  Index parameter_count() const;
  void validate() const;

  /// Glorot-uniform weights, zero biases.
  static MLPModel initialize(std::vector<Index> layer_dims, std::vector<Activation> activations,
                             Loss loss, Rng& rng);
};

/// Samples are rows: activations[i] is m x d_i, preactivations[i] is the input
/// to activation of layer i+1 (m x d_{i+1}).
struct ForwardPass {
  std::vector<Matrix> activations;     // a_0 .. a_L
  std::vector<Matrix> preactivations;  // s_1 .. s_L
};

/// Per-sample augmented activations and preactivation derivatives, unaveraged.
/// These implicitly represent the diagonal Fisher blocks.
struct LayerStats {
  Matrix abar;  // m x (d_{i-1}+1), first column is 1
  Matrix g;     // m x d_i
};

struct LayerBatchStats {
  std::vector<LayerStats> layers;
  Index batch_size() const { return layers.empty() ? 0 : layers.front().abar.rows(); }
};

using GradientSet = std::vector<Matrix>;

struct BackwardResult {
  GradientSet gradients;  // batch-averaged dW_i
  LayerBatchStats stats;
};

Matrix augment(const Matrix& a);

ForwardPass forward(const MLPModel& model, const Matrix& X);
BackwardResult backward(const MLPModel& model, const ForwardPass& pass, const Matrix& Y);

double batch_loss(const MLPModel& model, const ForwardPass& pass, const Matrix& Y);
double batch_loss(const MLPModel& model, const Matrix& X, const Matrix& Y);

/// Draws y ~ P(y | z): Bernoulli(z) per unit for cross entropy, z + N(0, 1)
/// for squared loss. One draw per input.
Matrix sample_targets(const Matrix& z, Loss loss, Rng& rng);

/// Largest Fisher block side that exact_fim_block will materialise.
inline constexpr Index kMaxDenseFisherSide = 2600;

/// (1/m) sum_t vec(g_t abar_t^T) vec(g_t abar_t^T)^T for one layer.
Matrix exact_fim_block(const LayerBatchStats& stats, std::size_t layer);
Matrix exact_fim_block(const LayerStats& stats);

/// Z(F) v = (1/m) sum_t (g_t^T V g_t) vec(abar_t abar_t^T) with V = mat(v),
/// evaluated in O(m d^2) without forming F.
Vector zf_matvec(const LayerStats& stats, const Vector& v);
/// Z(F)^T u = (1/m) sum_t (abar_t^T U abar_t) vec(g_t g_t^T) with U = mat(u).
Vector zf_rmatvec(const LayerStats& stats, const Vector& u);

/// Count of dense Fisher-sized materialisations (exact_fim_block and
/// RearrangedOp::materialize). Algorithms must leave it untouched.
std::uint64_t dense_materialization_count();
void note_dense_materialization();

}  // namespace kronfisher
