#include "kronfisher/kron_approx.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "kronfisher/log.hpp"

namespace kronfisher {

namespace {

// Second singular values below this fraction of the first are treated as zero.
constexpr double kDegenerateRatio = 1e-12;

Vector seeded_unit_vector(Index n, std::uint64_t seed) {
  Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(n)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v / v.norm();
}

std::optional<Vector> usable_start(const std::optional<Vector>& v, Index n) {
  if (!v || v->size() != n || !v->allFinite()) return std::nullopt;
  const double norm = v->norm();
  if (!(norm > 0.0)) return std::nullopt;
  return Vector(*v / norm);
}

constexpr std::uint64_t kPowerSeed = 0x5eedULL;
constexpr std::uint64_t kLanczosSeed = 0x1a2c05ULL;

}  // namespace

RearrangedOp::RearrangedOp(Apply matvec, Apply rmatvec, Index rows, Index cols, Index d,
                           Index d_prime)
    : matvec_(std::move(matvec)),
      rmatvec_(std::move(rmatvec)),
      rows_(rows),
      cols_(cols),
      d_(d),
      d_prime_(d_prime),
      products_(std::make_shared<std::uint64_t>(0)) {
  if (rows <= 0 || cols <= 0) throw DimensionError("RearrangedOp: empty operator");
  if ((d > 0 || d_prime > 0) && (d * d != rows || d_prime * d_prime != cols)) {
    throw DimensionError("RearrangedOp: block dims do not match operator shape");
  }
}

Vector RearrangedOp::matvec(const Vector& v) const {
  if (v.size() != cols_) throw DimensionError("RearrangedOp::matvec: wrong input length");
  ++*products_;
  return matvec_(v);
}

Vector RearrangedOp::rmatvec(const Vector& u) const {
  if (u.size() != rows_) throw DimensionError("RearrangedOp::rmatvec: wrong input length");
  ++*products_;
  return rmatvec_(u);
}

Matrix RearrangedOp::materialize() const {
  note_dense_materialization();
  Matrix out(rows_, cols_);
  Vector e = Vector::Zero(cols_);
  for (Index j = 0; j < cols_; ++j) {
    e(j) = 1.0;
    out.col(j) = matvec_(e);
    e(j) = 0.0;
  }
  return out;
}

RearrangedOp fisher_op(const LayerStats& stats) {
  if (stats.abar.rows() == 0 || stats.abar.rows() != stats.g.rows()) {
    throw DimensionError("fisher_op: statistics are empty or inconsistent");
  }
  auto shared = std::make_shared<const LayerStats>(stats);
  const Index d = stats.abar.cols();
  const Index dp = stats.g.cols();
  return RearrangedOp([shared](const Vector& v) { return zf_matvec(*shared, v); },
                      [shared](const Vector& u) { return zf_rmatvec(*shared, u); }, d * d, dp * dp,
                      d, dp);
}

RearrangedOp dense_op(Matrix M) {
  auto shared = std::make_shared<const Matrix>(std::move(M));
  const Index rows = shared->rows();
  const Index cols = shared->cols();
  return RearrangedOp([shared](const Vector& v) -> Vector { return *shared * v; },
                      [shared](const Vector& u) -> Vector { return shared->transpose() * u; },
                      rows, cols);
}

SingularTriplet power_svd(const RearrangedOp& op, double eps, int k_max,
                          std::optional<Vector> v0) {
  if (!(eps > 0.0)) throw std::invalid_argument("power_svd: eps must be positive");
  if (k_max < 1) throw std::invalid_argument("power_svd: k_max must be >= 1");

  SingularTriplet t;
  t.v = usable_start(v0, op.cols()).value_or(seeded_unit_vector(op.cols(), kPowerSeed));
  t.u = Vector::Zero(op.rows());
  Vector w = op.matvec(t.v);

  for (int k = 1; k <= k_max; ++k) {
    t.iterations = k;
    const double wn = w.norm();
    if (!std::isfinite(wn)) throw NumericalError("power_svd: non-finite operator product");
    if (wn == 0.0) {
      t.sigma = 0.0;
      t.residual = 0.0;
      t.u.setZero();
      t.converged = false;
      return t;
    }
    t.u = w / wn;
    Vector z = op.rmatvec(t.u);
    t.sigma = z.norm();
    if (!std::isfinite(t.sigma)) throw NumericalError("power_svd: non-finite operator product");
    if (t.sigma == 0.0) {
      t.residual = 0.0;
      t.converged = false;
      return t;
    }
    t.v = z / t.sigma;
    w = op.matvec(t.v);
    t.residual = (w - t.sigma * t.u).norm();
    if (t.residual <= eps * t.sigma) {
      t.converged = true;
      return t;
    }
  }
  return t;
}

void normalize_sign(SingularTriplet& t, Index d) {
  if (t.u.size() == 0) return;
  double key = 0.0;
  if (d > 0 && t.u.size() == d * d) key = mat(t.u, d, d).trace();
  if (std::abs(key) <= 1e-14 * t.u.cwiseAbs().maxCoeff() * static_cast<double>(std::max<Index>(d, 1))) {
    Index arg = 0;
    t.u.cwiseAbs().maxCoeff(&arg);
    key = t.u(arg);
  }
  if (key < 0.0) {
    t.u = -t.u;
    t.v = -t.v;
  }
}

Matrix psd_select(const Matrix& M) {
  const SymEig eig = sym_eig(M);
  return eig.eigenvectors * eig.eigenvalues.cwiseAbs().asDiagonal() *
         eig.eigenvectors.transpose();
}

RearrangedOp residual_op(const RearrangedOp& base, const KronPair& pair) {
  const Vector r = vec(pair.left);
  const Vector s = vec(pair.right);
  if (r.size() != base.rows() || s.size() != base.cols()) {
    throw DimensionError("residual_op: pair does not match operator dimensions");
  }
  return RearrangedOp([base, r, s](const Vector& v) -> Vector { return base.matvec(v) - s.dot(v) * r; },
                      [base, r, s](const Vector& u) -> Vector { return base.rmatvec(u) - r.dot(u) * s; },
                      base.rows(), base.cols(), base.d(), base.d_prime());
}

KronPair pair_from_triplet(const SingularTriplet& t, Index d, Index d_prime) {
  if (t.sigma <= 0.0 || t.u.size() != d * d || t.v.size() != d_prime * d_prime) {
    return KronPair::zeros(d, d_prime);
  }
  const double root = std::sqrt(t.sigma);
  return {symmetrize(root * mat(t.u, d, d)), symmetrize(root * mat(t.v, d_prime, d_prime))};
}

KronPair kfac_factors(const LayerStats& stats) {
  const Index m = stats.abar.rows();
  if (m == 0 || stats.g.rows() != m) throw DimensionError("kfac_factors: empty batch");
  const double inv = 1.0 / static_cast<double>(m);
  return {stats.abar.transpose() * stats.abar * inv, stats.g.transpose() * stats.g * inv};
}

Rank1Result kpsvd_factors(const RearrangedOp& op, const SvdSettings& settings,
                          const std::optional<Vector>& warm,
                          const std::optional<Vector>& cold_guess) {
  if (!op.has_block_structure()) throw DimensionError("kpsvd_factors: operator has no block structure");
  std::optional<Vector> start = usable_start(warm, op.cols());
  if (!start) start = usable_start(cold_guess, op.cols());
  Rank1Result out;
  out.triplet = power_svd(op, settings.eps, settings.k_max, start);
  if (!out.triplet.converged && out.triplet.sigma > 0.0) {
    std::ostringstream os;
    os << "power SVD did not converge in " << settings.k_max << " sweeps (residual "
       << out.triplet.residual << ", sigma " << out.triplet.sigma << "); using last iterate";
    log_warning(os.str());
  }
  normalize_sign(out.triplet, op.d());
  KronPair pair = pair_from_triplet(out.triplet, op.d(), op.d_prime());
  out.pair = {psd_select(pair.left), psd_select(pair.right)};
  return out;
}

Rank1Result kpsvd_factors(const LayerStats& stats, const SvdSettings& settings,
                          const std::optional<Vector>& warm) {
  const KronPair kfac = kfac_factors(stats);
  return kpsvd_factors(fisher_op(stats), settings, warm, vec(kfac.right));
}

Rank1Result deflate_pair(const RearrangedOp& base, const KronPair& first,
                         const SvdSettings& settings, const std::optional<Vector>& warm) {
  const RearrangedOp residual = residual_op(base, first);
  Rank1Result out;
  std::optional<Vector> start = usable_start(warm, base.cols());
  out.triplet = power_svd(residual, settings.eps, settings.k_max, start);
  const double scale = first.left.norm() * first.right.norm();
  if (!out.triplet.converged && out.triplet.sigma > kDegenerateRatio * scale) {
    std::ostringstream os;
    os << "power SVD on the deflated operator did not converge in " << settings.k_max
       << " sweeps (residual " << out.triplet.residual << ", sigma " << out.triplet.sigma << ")";
    log_warning(os.str());
  }
  normalize_sign(out.triplet, base.d());
  out.pair = pair_from_triplet(out.triplet, base.d(), base.d_prime());
  return out;
}

Rank2Result deflation_factors(const RearrangedOp& op, const SvdSettings& settings,
                              const WarmStart& warm, const std::optional<Vector>& cold_guess) {
  Rank1Result r1 = kpsvd_factors(op, settings, warm.v1, cold_guess);
  Rank1Result r2 = deflate_pair(op, r1.pair, settings, warm.v2);
  Rank2Result out;
  out.degenerate = !(r2.triplet.sigma > kDegenerateRatio * r1.triplet.sigma);
  out.first = std::move(r1.pair);
  out.second = out.degenerate ? KronPair::zeros(op.d(), op.d_prime()) : std::move(r2.pair);
  out.converged = r1.triplet.converged && (r2.triplet.converged || out.degenerate);
  out.iterations = r1.triplet.iterations + r2.triplet.iterations;
  out.triplet1 = std::move(r1.triplet);
  out.triplet2 = std::move(r2.triplet);
  return out;
}

Rank2Result deflation_factors(const LayerStats& stats, const SvdSettings& settings,
                              const WarmStart& warm) {
  const KronPair kfac = kfac_factors(stats);
  return deflation_factors(fisher_op(stats), settings, warm, vec(kfac.right));
}

LanczosBasis lanczos_bidiag(const RearrangedOp& op, int K, double eps, const Vector& q0) {
  if (K < 1) throw std::invalid_argument("lanczos_bidiag: K must be >= 1");
  if (q0.size() != op.cols() || std::abs(q0.norm() - 1.0) > 1e-8) {
    throw DimensionError("lanczos_bidiag: q0 must be a unit vector of length cols");
  }
  const Index k_cap = std::min<Index>({static_cast<Index>(K), op.rows(), op.cols()});

  LanczosBasis b;
  b.P = Matrix::Zero(op.rows(), k_cap);
  b.Q = Matrix::Zero(op.cols(), k_cap);
  b.H = Matrix::Zero(k_cap, k_cap);

  b.Q.col(0) = q0;
  Vector w = op.matvec(q0);
  double alpha = w.norm();
  if (!std::isfinite(alpha)) throw NumericalError("lanczos_bidiag: non-finite product");
  if (alpha == 0.0) {
    b.rank = 0;
    b.breakdown = true;
    b.P.resize(op.rows(), 0);
    b.Q.resize(op.cols(), 0);
    b.H.resize(0, 0);
    return b;
  }
  b.P.col(0) = w / alpha;
  b.H(0, 0) = alpha;
  b.rank = 1;

  for (Index k = 0; k + 1 < k_cap; ++k) {
    Vector z = op.rmatvec(b.P.col(k)) - alpha * b.Q.col(k);
    for (int pass = 0; pass < 2; ++pass) {
      const auto Qk = b.Q.leftCols(k + 1);
      z -= Qk * (Qk.transpose() * z);
    }
    const double beta = z.norm();
    if (!std::isfinite(beta)) throw NumericalError("lanczos_bidiag: non-finite product");
    if (beta <= eps) {
      b.breakdown = true;
      break;
    }
    const Vector q = z / beta;
    w = op.matvec(q) - beta * b.P.col(k);
    for (int pass = 0; pass < 2; ++pass) {
      const auto Pk = b.P.leftCols(k + 1);
      w -= Pk * (Pk.transpose() * w);
    }
    alpha = w.norm();
    if (alpha <= eps) {
      b.breakdown = true;
      break;
    }
    b.Q.col(k + 1) = q;
    b.P.col(k + 1) = w / alpha;
    b.H(k, k + 1) = beta;
    b.H(k + 1, k + 1) = alpha;
    b.rank = k + 2;
  }
  if (b.rank < k_cap) {
    b.P.conservativeResize(Eigen::NoChange, b.rank);
    b.Q.conservativeResize(Eigen::NoChange, b.rank);
    b.H.conservativeResize(b.rank, b.rank);
  }
  return b;
}

LanczosTop2 restarted_lanczos_rank2(const RearrangedOp& op, int K, double eps, int max_restarts,
                                    const std::optional<Vector>& q0) {
  if (!(eps > 0.0)) throw std::invalid_argument("restarted_lanczos_rank2: eps must be positive");
  if (K < 2) throw std::invalid_argument("restarted_lanczos_rank2: K must be >= 2");
  Vector q = usable_start(q0, op.cols()).value_or(seeded_unit_vector(op.cols(), kLanczosSeed));

  LanczosTop2 out;
  double scale = 0.0;
  for (int restart = 0; restart <= max_restarts; ++restart) {
    out.restarts = restart;
    const double break_tol = std::max(1e-13 * scale, std::numeric_limits<double>::min());
    const LanczosBasis basis = lanczos_bidiag(op, K, break_tol, q);
    out.steps += static_cast<int>(basis.rank);
    if (basis.rank == 0) {
      out.first = {};
      out.first.u = Vector::Zero(op.rows());
      out.first.v = q;
      out.second = out.first;
      out.degenerate = true;
      out.converged = true;
      return out;
    }
    Eigen::JacobiSVD<Matrix> svd(basis.H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Matrix U = basis.P * svd.matrixU();
    const Matrix V = basis.Q * svd.matrixV();
    const Vector& s = svd.singularValues();

    auto triplet = [&](Index i) {
      SingularTriplet t;
      t.sigma = s(i);
      t.u = U.col(i);
      t.v = V.col(i);
      t.iterations = out.steps;
      const double r_left = (op.matvec(t.v) - t.sigma * t.u).norm();
      const double r_right = (op.rmatvec(t.u) - t.sigma * t.v).norm();
      t.residual = std::max(r_left, r_right);
      return t;
    };

    out.first = triplet(0);
    scale = out.first.sigma;
    if (basis.rank >= 2) {
      out.second = triplet(1);
    } else {
      out.second = {};
      out.second.u = Vector::Zero(op.rows());
      out.second.v = Vector::Zero(op.cols());
    }
    out.degenerate = !(out.second.sigma >= kDegenerateRatio * out.first.sigma);
    const double tol = eps * out.first.sigma;
    out.first.converged = out.first.residual <= tol;
    out.second.converged = out.degenerate || out.second.residual <= tol;
    out.converged = out.first.converged && out.second.converged;
    if (out.converged) return out;

    Vector next = out.first.v + (out.degenerate ? Vector::Zero(op.cols()) : out.second.v);
    const double n = next.norm();
    q = n > 0.0 ? Vector(next / n) : seeded_unit_vector(op.cols(), kLanczosSeed + restart + 1);
  }
  return out;
}

Rank2Result lanczos_factors(const RearrangedOp& op, const SvdSettings& settings,
                            const WarmStart& warm, const std::optional<Vector>& cold_guess) {
  if (!op.has_block_structure()) throw DimensionError("lanczos_factors: operator has no block structure");
  std::optional<Vector> start;
  if (warm.v1) {
    Vector s = *warm.v1;
    if (warm.v2 && warm.v2->size() == s.size()) s += *warm.v2;
    start = usable_start(s, op.cols());
  }
  if (!start) start = usable_start(cold_guess, op.cols());

  LanczosTop2 top = restarted_lanczos_rank2(op, settings.krylov_dim, settings.eps,
                                            settings.max_restarts, start);
  if (!top.converged) {
    std::ostringstream os;
    os << "restarted Lanczos did not converge after " << settings.max_restarts
       << " restarts; using last iterate";
    log_warning(os.str());
  }
  normalize_sign(top.first, op.d());
  normalize_sign(top.second, op.d());

  Rank2Result out;
  const KronPair first = pair_from_triplet(top.first, op.d(), op.d_prime());
  out.first = {psd_select(first.left), psd_select(first.right)};
  out.degenerate = top.degenerate;
  out.second = top.degenerate ? KronPair::zeros(op.d(), op.d_prime())
                              : pair_from_triplet(top.second, op.d(), op.d_prime());
  out.converged = top.converged;
  out.iterations = top.steps;
  out.triplet1 = std::move(top.first);
  out.triplet2 = std::move(top.second);
  return out;
}

Rank2Result lanczos_factors(const LayerStats& stats, const SvdSettings& settings,
                            const WarmStart& warm) {
  const KronPair kfac = kfac_factors(stats);
  return lanczos_factors(fisher_op(stats), settings, warm, vec(kfac.right));
}

Rank2Result kfac_corrected_factors(const LayerStats& stats, const SvdSettings& settings,
                                   const WarmStart& warm) {
  Rank2Result out;
  out.first = kfac_factors(stats);
  Rank1Result corr = deflate_pair(fisher_op(stats), out.first, settings, warm.v2);
  const double scale = out.first.left.norm() * out.first.right.norm();
  out.degenerate = !(corr.triplet.sigma > kDegenerateRatio * scale);
  out.second = out.degenerate ? KronPair::zeros(out.first.left.rows(), out.first.right.rows())
                              : std::move(corr.pair);
  out.converged = corr.triplet.converged || out.degenerate;
  out.iterations = corr.triplet.iterations;
  out.triplet1.sigma = std::numeric_limits<double>::quiet_NaN();
  out.triplet1.converged = true;
  out.triplet2 = std::move(corr.triplet);
  return out;
}

}  // namespace kronfisher
