#pragma once

#include <cstdint>
#include <optional>
#include <variant>

#include "kronfisher/kron_approx.hpp"
#include "kronfisher/linalg.hpp"
#include "kronfisher/mlp.hpp"

namespace kronfisher {

/// rho * old + (1 - rho) * new with rho = min(1 - 1/k, alpha), k >= 1.
double ema_weight(long k, double alpha);
KronPair ema_update(const KronPair& old_pair, const KronPair& new_pair, long k, double alpha);

struct DampedPair {
  Matrix left;
  Matrix right;
  double pi = 1.0;
  bool pi_fallback = false;  // a trace was not positive, pi forced to 1
};

/// Factored Tikhonov damping: (A + pi sqrt(lambda) I, G + sqrt(lambda)/pi I)
/// with pi = sqrt((tr A / dim A) / (tr G / dim G)).
DampedPair damp_pair(const Matrix& A, const Matrix& G, double lambda);
double damping_pi(const Matrix& A, const Matrix& G);

/// Cached inverses of a damped Kronecker pair.
class Rank1Inverse {
 public:
  Rank1Inverse() = default;
  /// A, G symmetric positive definite; throws NotPositiveDefinite otherwise.
  Rank1Inverse(const Matrix& A, const Matrix& G);
  /// G^{-1} X A^{-1} == mat((A kron G)^{-1} vec X).
  Matrix apply(const Matrix& X) const;

  const Matrix& left_inverse() const { return a_inv_; }
  const Matrix& right_inverse() const { return g_inv_; }

 private:
  Matrix a_inv_;
  Matrix g_inv_;
};

Matrix apply_rank1_inverse(const Matrix& A, const Matrix& G, const Matrix& gradW);

/// Solver state for (A kron B + C kron D) u = v.
struct KronSumCache {
  Matrix K1;           // A^{-1/2} E1
  Matrix K2;           // B^{-1/2} E2
  Vector s1;           // eigenvalues of A^{-1/2} C A^{-1/2}
  Vector s2;           // eigenvalues of B^{-1/2} D B^{-1/2}
  Matrix denominator;  // 1 + s2 s1^T after safeguarding
  Index safeguarded = 0;

  double safeguarded_fraction() const {
    return denominator.size() == 0 ? 0.0
                                   : static_cast<double>(safeguarded) /
                                         static_cast<double>(denominator.size());
  }
};

inline constexpr double kDenominatorFloor = 1e-8;
inline constexpr double kMaxSafeguardedFraction = 0.01;

/// A, B symmetric positive definite, C, D symmetric.
KronSumCache kron_sum_prepare(const Matrix& A, const Matrix& B, const Matrix& C, const Matrix& D);
/// K2 [(K2^T V K1) / (1 1^T + s2 s1^T)] K1^T, i.e. mat of the solve for vec V.
Matrix kron_sum_apply(const KronSumCache& cache, const Matrix& V);

struct ClipResult {
  double nu = 1.0;
  double inner_sum = 0.0;
  GradientSet scaled;
};

/// nu = min(1, sqrt(c / sum_i |<G_i, grad_i>|)) with the elementwise (trace)
/// inner product per layer; every layer is scaled by the same nu.
ClipResult kl_clip(const GradientSet& preconditioned, const GradientSet& raw, double c);

/// Curvature state of one layer: EMA-averaged Kronecker factors and the
/// inverse representation built from them. Rank-2 approximations damp the
/// dominant pair with the factored rule and pass the second pair through
/// undamped as (C, D) of the Kronecker-sum solver.
class KronApprox {
 public:
  enum class Kind { Rank1, Rank2 };

  explicit KronApprox(Kind kind) : kind_(kind) {}

  Kind kind() const { return kind_; }

  /// Folds freshly computed factors into the running average. For Rank1 the
  /// second pair is ignored. k is the 1-based iteration number.
  void accumulate(const KronPair& first, const std::optional<KronPair>& second, long k,
                  double alpha);

  /// Rebuilds the inverse representation from the current factors.
  void rebuild_inverse(double lambda);

  /// Preconditioned gradient using the cached inverse (possibly stale).
  Matrix precondition(const Matrix& grad) const;

  bool has_factors() const { return first_.has_value(); }
  bool has_inverse() const { return !std::holds_alternative<std::monostate>(cache_); }
  bool cache_is_current() const { return has_inverse() && cache_version_ == version_; }
  std::uint64_t version() const { return version_; }

  const KronPair& first() const { return *first_; }
  const std::optional<KronPair>& second() const { return second_; }
  const DampedPair& damped() const { return damped_; }
  /// True when the last rebuild fell back to rank-1 because too many
  /// Kronecker-sum denominators were safeguarded.
  bool used_rank1_fallback() const { return rank1_fallback_; }
  std::uint64_t fallback_events() const { return fallback_events_; }

 private:
  Kind kind_;
  std::optional<KronPair> first_;
  std::optional<KronPair> second_;
  std::uint64_t version_ = 0;
  std::uint64_t cache_version_ = 0;
  DampedPair damped_;
  std::variant<std::monostate, Rank1Inverse, KronSumCache> cache_;
  bool rank1_fallback_ = false;
  std::uint64_t fallback_events_ = 0;
};

}  // namespace kronfisher
