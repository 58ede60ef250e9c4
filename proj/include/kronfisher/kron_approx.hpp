#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>

#include "kronfisher/linalg.hpp"
#include "kronfisher/mlp.hpp"

namespace kronfisher {

/// Matrix-free handle on a rearranged Fisher block Z(F) (rows = d^2,
/// cols = d'^2) or on any rectangular operator given by its products.
/// A dense operator has d == d' == 0, meaning no block structure.
class RearrangedOp {
 public:
  using Apply = std::function<Vector(const Vector&)>;

  RearrangedOp(Apply matvec, Apply rmatvec, Index rows, Index cols, Index d = 0, Index d_prime = 0);

  Vector matvec(const Vector& v) const;
  Vector rmatvec(const Vector& u) const;

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index d() const { return d_; }
  Index d_prime() const { return d_prime_; }
  bool has_block_structure() const { return d_ > 0 && d_prime_ > 0; }

  /// Total products (matvec + rmatvec) issued through this handle and its copies.
  std::uint64_t product_count() const { return *products_; }

  /// Dense rows x cols matrix by probing with unit vectors. Test/oracle use
  /// only; bumps dense_materialization_count().
  Matrix materialize() const;

 private:
  Apply matvec_;
  Apply rmatvec_;
  Index rows_, cols_, d_, d_prime_;
  std::shared_ptr<std::uint64_t> products_;
};

/// Z(F_ii) for one layer, through zf_matvec / zf_rmatvec. Keeps a copy of
/// the statistics.
RearrangedOp fisher_op(const LayerStats& stats);
/// A dense matrix seen through its products.
RearrangedOp dense_op(Matrix M);

/// Kronecker pair (left kron right), left on the activation side
/// ((d_{i-1}+1) x (d_{i-1}+1)), right on the derivative side (d_i x d_i).
struct KronPair {
  Matrix left;
  Matrix right;

  Matrix dense() const { return kron(left, right); }
  static KronPair zeros(Index d, Index d_prime) {
    return {Matrix::Zero(d, d), Matrix::Zero(d_prime, d_prime)};
  }
};

struct SingularTriplet {
  double sigma = 0.0;
  Vector u;  // left, length rows
  Vector v;  // right, length cols
  int iterations = 0;
  double residual = 0.0;  // ||A v - sigma u||
  bool converged = false;
};

/// Power SVD. Each sweep computes w = A v, u = w/|w|, z = A^T u,
/// v = z/|z|, sigma = |z| and stops once ||A v - sigma u|| <= eps * sigma.
/// A v of the stop test is reused as the next sweep's w, so a sweep costs one
/// product each way. Returns the last iterate (converged = false) after
/// k_max sweeps. v0 defaults to a seeded random unit vector.
SingularTriplet power_svd(const RearrangedOp& op, double eps, int k_max,
                          std::optional<Vector> v0 = std::nullopt);

/// Flips (u, v) so that trace(mat(u)) >= 0 when the operator has block
/// structure, and otherwise so that the largest-magnitude entry of u is positive.
void normalize_sign(SingularTriplet& t, Index d);

/// Replaces eigenvalues by their absolute values, keeping eigenvectors.
Matrix psd_select(const Matrix& M);

/// Z(F - R kron S) from Z(F): v -> Z(F) v - <vec S, v> vec R and the transpose.
RearrangedOp residual_op(const RearrangedOp& base, const KronPair& pair);

/// sqrt(sigma) * (mat(u), mat(v)), symmetrised.
KronPair pair_from_triplet(const SingularTriplet& t, Index d, Index d_prime);

struct SvdSettings {
  double eps = 1e-6;
  int k_max = 500;
  int krylov_dim = 6;
  int max_restarts = 100;
};

/// Warm-start vectors (right singular vectors, length d'^2) kept per layer.
struct WarmStart {
  std::optional<Vector> v1;
  std::optional<Vector> v2;
};

struct Rank1Result {
  KronPair pair;
  SingularTriplet triplet;
};

struct Rank2Result {
  KronPair first;
  KronPair second;
  SingularTriplet triplet1;
  SingularTriplet triplet2;
  bool degenerate = false;  // second pair is zero
  bool converged = true;
  int iterations = 0;  // power sweeps or Lanczos steps, summed
};

KronPair kfac_factors(const LayerStats& stats);

Rank1Result kpsvd_factors(const RearrangedOp& op, const SvdSettings& settings,
                          const std::optional<Vector>& warm = std::nullopt,
                          const std::optional<Vector>& cold_guess = std::nullopt);
Rank1Result kpsvd_factors(const LayerStats& stats, const SvdSettings& settings,
                          const std::optional<Vector>& warm = std::nullopt);

/// Dominant pair of Z(F - first kron ...). Symmetrised, not PSD-projected.
Rank1Result deflate_pair(const RearrangedOp& base, const KronPair& first,
                         const SvdSettings& settings, const std::optional<Vector>& warm);

Rank2Result deflation_factors(const RearrangedOp& op, const SvdSettings& settings,
                              const WarmStart& warm = {},
                              const std::optional<Vector>& cold_guess = std::nullopt);
Rank2Result deflation_factors(const LayerStats& stats, const SvdSettings& settings,
                              const WarmStart& warm = {});

struct LanczosBasis {
  Matrix P;  // rows x k, left basis
  Matrix Q;  // cols x k, right basis
  Matrix H;  // k x k upper bidiagonal
  Index rank = 0;
  bool breakdown = false;
};

/// Golub-Kahan bidiagonalization with full reorthogonalization of every new
/// p and q against the previous columns. Stops early when beta <= eps.
LanczosBasis lanczos_bidiag(const RearrangedOp& op, int K, double eps, const Vector& q0);

struct LanczosTop2 {
  SingularTriplet first;
  SingularTriplet second;
  bool converged = false;
  bool degenerate = false;
  int restarts = 0;
  int steps = 0;
};

/// Restarted Lanczos for the two dominant singular triplets. Restarts from
/// the normalised sum v1 + v2 until max(||A v_i - s_i u_i||,
/// ||A^T u_i - s_i v_i||) <= eps * s_1 for both triplets.
LanczosTop2 restarted_lanczos_rank2(const RearrangedOp& op, int K, double eps, int max_restarts,
                                    const std::optional<Vector>& q0 = std::nullopt);

Rank2Result lanczos_factors(const RearrangedOp& op, const SvdSettings& settings,
                            const WarmStart& warm = {},
                            const std::optional<Vector>& cold_guess = std::nullopt);
Rank2Result lanczos_factors(const LayerStats& stats, const SvdSettings& settings,
                            const WarmStart& warm = {});

/// KFAC pair plus the best Kronecker corrector of F - KFAC.
Rank2Result kfac_corrected_factors(const LayerStats& stats, const SvdSettings& settings,
                                   const WarmStart& warm = {});

}  // namespace kronfisher
