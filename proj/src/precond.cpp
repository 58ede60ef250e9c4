#include "kronfisher/precond.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kronfisher/log.hpp"

namespace kronfisher {

namespace {

Matrix spd_inverse(const Matrix& M, const char* who) {
  Eigen::LLT<Matrix> llt(symmetrize(M));
  if (llt.info() != Eigen::Success) {
    const double smallest = spectrum(M).minCoeff();
    std::ostringstream os;
    os << who << ": matrix is not positive definite (smallest eigenvalue " << smallest << ")";
    throw NotPositiveDefinite(os.str(), smallest);
  }
  Matrix inv = llt.solve(Matrix::Identity(M.rows(), M.cols()));
  return symmetrize(inv);
}

}  // namespace

double ema_weight(long k, double alpha) {
  if (k < 1) throw std::invalid_argument("ema_weight: k must be >= 1");
  return std::min(1.0 - 1.0 / static_cast<double>(k), alpha);
}

KronPair ema_update(const KronPair& old_pair, const KronPair& new_pair, long k, double alpha) {
  const double rho = ema_weight(k, alpha);
  if (old_pair.left.rows() != new_pair.left.rows() ||
      old_pair.right.rows() != new_pair.right.rows()) {
    throw DimensionError("ema_update: factor shapes differ");
  }
  return {rho * old_pair.left + (1.0 - rho) * new_pair.left,
          rho * old_pair.right + (1.0 - rho) * new_pair.right};
}

double damping_pi(const Matrix& A, const Matrix& G) {
  const double ta = A.trace() / static_cast<double>(A.rows());
  const double tg = G.trace() / static_cast<double>(G.rows());
  if (!(ta > 0.0) || !(tg > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::sqrt(ta / tg);
}

DampedPair damp_pair(const Matrix& A, const Matrix& G, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("damp_pair: lambda must be non-negative");
  DampedPair out;
  out.pi = damping_pi(A, G);
  if (!std::isfinite(out.pi)) {
    log_warning("damp_pair: non-positive factor trace, using pi = 1");
    out.pi = 1.0;
    out.pi_fallback = true;
  }
  const double root = std::sqrt(lambda);
  out.left = A;
  out.right = G;
  out.left.diagonal().array() += out.pi * root;
  out.right.diagonal().array() += root / out.pi;
  return out;
}

Rank1Inverse::Rank1Inverse(const Matrix& A, const Matrix& G)
    : a_inv_(spd_inverse(A, "Rank1Inverse(A)")), g_inv_(spd_inverse(G, "Rank1Inverse(G)")) {}

Matrix Rank1Inverse::apply(const Matrix& X) const {
  if (X.rows() != g_inv_.rows() || X.cols() != a_inv_.rows()) {
    throw DimensionError("Rank1Inverse::apply: gradient shape mismatch");
  }
  return g_inv_ * X * a_inv_;
}

Matrix apply_rank1_inverse(const Matrix& A, const Matrix& G, const Matrix& gradW) {
  return Rank1Inverse(A, G).apply(gradW);
}

KronSumCache kron_sum_prepare(const Matrix& A, const Matrix& B, const Matrix& C, const Matrix& D) {
  if (A.rows() != C.rows() || A.cols() != C.cols() || B.rows() != D.rows() ||
      B.cols() != D.cols()) {
    throw DimensionError("kron_sum_prepare: (A, C) and (B, D) must have matching shapes");
  }
  const Matrix a_is = inv_sqrt(A);
  const Matrix b_is = inv_sqrt(B);
  const SymEig e1 = sym_eig(a_is * C * a_is);
  const SymEig e2 = sym_eig(b_is * D * b_is);

  KronSumCache cache;
  cache.K1 = a_is * e1.eigenvectors;
  cache.K2 = b_is * e2.eigenvectors;
  cache.s1 = e1.eigenvalues;
  cache.s2 = e2.eigenvalues;
  cache.denominator = Matrix::Ones(cache.s2.size(), cache.s1.size()) + cache.s2 * cache.s1.transpose();
  for (Index j = 0; j < cache.denominator.cols(); ++j) {
    for (Index i = 0; i < cache.denominator.rows(); ++i) {
      double& x = cache.denominator(i, j);
      if (std::abs(x) < kDenominatorFloor) {
        x = x < 0.0 ? -kDenominatorFloor : kDenominatorFloor;
        ++cache.safeguarded;
      }
    }
  }
  return cache;
}

Matrix kron_sum_apply(const KronSumCache& cache, const Matrix& V) {
  if (V.rows() != cache.K2.rows() || V.cols() != cache.K1.rows()) {
    throw DimensionError("kron_sum_apply: V shape mismatch");
  }
  const Matrix inner = (cache.K2.transpose() * V * cache.K1).cwiseQuotient(cache.denominator);
  return cache.K2 * inner * cache.K1.transpose();
}

ClipResult kl_clip(const GradientSet& preconditioned, const GradientSet& raw, double c) {
  if (preconditioned.size() != raw.size()) throw DimensionError("kl_clip: layer count mismatch");
  if (!(c > 0.0)) throw std::invalid_argument("kl_clip: c must be positive");
  ClipResult out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (preconditioned[i].rows() != raw[i].rows() || preconditioned[i].cols() != raw[i].cols()) {
      throw DimensionError("kl_clip: layer shape mismatch");
    }
    out.inner_sum += std::abs(preconditioned[i].cwiseProduct(raw[i]).sum());
  }
  if (out.inner_sum > c) out.nu = std::sqrt(c / out.inner_sum);
  out.scaled.reserve(preconditioned.size());
  for (const Matrix& g : preconditioned) out.scaled.push_back(out.nu * g);
  return out;
}

void KronApprox::accumulate(const KronPair& first, const std::optional<KronPair>& second, long k,
                            double alpha) {
  if (!first_) {
    first_ = first;
  } else {
    first_ = ema_update(*first_, first, k, alpha);
  }
  if (kind_ == Kind::Rank2) {
    const KronPair incoming =
        second ? *second : KronPair::zeros(first.left.rows(), first.right.rows());
    second_ = second_ ? ema_update(*second_, incoming, k, alpha) : incoming;
  }
  ++version_;
}

void KronApprox::rebuild_inverse(double lambda) {
  if (!first_) throw std::logic_error("KronApprox::rebuild_inverse: no factors accumulated");
  damped_ = damp_pair(first_->left, first_->right, lambda);
  rank1_fallback_ = false;
  if (kind_ == Kind::Rank1) {
    cache_ = Rank1Inverse(damped_.left, damped_.right);
  } else {
    KronSumCache sum = kron_sum_prepare(damped_.left, damped_.right, second_->left, second_->right);
    if (sum.safeguarded_fraction() > kMaxSafeguardedFraction) {
      std::ostringstream os;
      os << "Kronecker-sum solve: " << sum.safeguarded << " of " << sum.denominator.size()
         << " denominators safeguarded; falling back to rank-1 preconditioning";
      log_warning(os.str());
      rank1_fallback_ = true;
      ++fallback_events_;
      cache_ = Rank1Inverse(damped_.left, damped_.right);
    } else {
      cache_ = std::move(sum);
    }
  }
  cache_version_ = version_;
}

Matrix KronApprox::precondition(const Matrix& grad) const {
  if (const auto* r1 = std::get_if<Rank1Inverse>(&cache_)) return r1->apply(grad);
  if (const auto* r2 = std::get_if<KronSumCache>(&cache_)) return kron_sum_apply(*r2, grad);
  throw std::logic_error("KronApprox::precondition: inverse not built");
}

}  // namespace kronfisher
