#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kronfisher/kron_approx.hpp"
#include "kronfisher/log.hpp"
#include "oracles.hpp"

using namespace kronfisher;

namespace {

RearrangedOp block_op(const Matrix& F, Index d, Index dp) {
  auto Z = std::make_shared<const Matrix>(oracle::zigzag(F, d, dp));
  return RearrangedOp([Z](const Vector& v) -> Vector { return *Z * v; },
                      [Z](const Vector& u) -> Vector { return Z->transpose() * u; }, d * d, dp * dp, d, dp);
}

// Sum of three PSD Kronecker terms with decaying weights plus a little
// sampled curvature.
Matrix gapped_fisher(Index d, Index dp, oracle::Gen& g) {
  Matrix F = Matrix::Zero(d * dp, d * dp);
  const double w[] = {1.0, 0.45, 0.1};
  for (double wk : w) F += wk * oracle::kron(oracle::random_spd(d, g), oracle::random_spd(dp, g));
  const LayerStats s = oracle::random_stats(12, d - 1, dp, g);
  return F + 0.01 * oracle::exact_fim(s.abar, s.g);
}

double residual(const Matrix& F, const KronPair& p) { return (F - p.dense()).norm(); }

struct QuietLog {
  QuietLog() { set_log_sink([](LogLevel, std::string_view) {}); }
  ~QuietLog() { reset_log_sink(); }
};

}  // namespace

TEST_CASE("power SVD recovers the dominant triplet") {
  oracle::Gen g(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix M = oracle::random_matrix(7, 5, g);
    const auto ref = oracle::svd(M);
    const SingularTriplet t = power_svd(dense_op(M), 1e-12, 100000);
    CHECK(t.converged);
    CHECK(t.sigma == doctest::Approx(ref.sigma(0)).epsilon(1e-10));
    CHECK((M * t.v - t.sigma * t.u).norm() <= 1e-12 * t.sigma * 1.0001);
    CHECK(std::abs(t.v.dot(ref.V.col(0))) == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("power SVD edge cases") {
  QuietLog quiet;
  const SingularTriplet z = power_svd(dense_op(Matrix::Zero(4, 3)), 1e-8, 10);
  CHECK(z.sigma == 0.0);
  CHECK_FALSE(z.converged);
  Matrix bad = Matrix::Ones(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(power_svd(dense_op(bad), 1e-8, 10), NumericalError);
  CHECK_THROWS(power_svd(dense_op(Matrix::Ones(2, 2)), 0.0, 10));
  const SingularTriplet capped = power_svd(dense_op(Matrix::Identity(3, 3) + 1e-3 * Matrix::Ones(3, 3)), 1e-15, 2);
  CHECK(capped.iterations == 2);
}

TEST_CASE("operator counts products and checks lengths") {
  const RearrangedOp op = dense_op(Matrix::Ones(3, 2));
  op.matvec(Vector::Ones(2));
  op.rmatvec(Vector::Ones(3));
  CHECK(op.product_count() == 2);
  CHECK_THROWS_AS(op.matvec(Vector::Ones(3)), DimensionError);
}

TEST_CASE("KFAC factors are the second moments") {
  oracle::Gen g(2);
  const LayerStats s = oracle::random_stats(10, 3, 2, g);
  const KronPair p = kfac_factors(s);
  CHECK(oracle::rel(p.left, s.abar.transpose() * s.abar / 10.0) < 1e-14);
  CHECK(oracle::rel(p.right, s.g.transpose() * s.g / 10.0) < 1e-14);
}

TEST_CASE("KPSVD reaches the dense rank-one optimum without materialising F") {
  oracle::Gen g(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Index din = 1 + trial % 4, dout = 1 + trial % 3;
    const LayerStats s = oracle::random_stats(15, din, dout, g);
    const Matrix F = oracle::exact_fim(s.abar, s.g);
    const std::uint64_t before = dense_materialization_count();
    const Rank1Result r = kpsvd_factors(s, {1e-11, 100000, 6, 100});
    CHECK(dense_materialization_count() == before);
    const double best = oracle::best_rank_residual(oracle::zigzag(F, din + 1, dout), 1);
    CHECK(residual(F, r.pair) == doctest::Approx(best).epsilon(1e-8));
    CHECK(residual(F, r.pair) <= residual(F, kfac_factors(s)) + 1e-9);
    CHECK(r.pair.left.trace() >= 0.0);
  }
}

TEST_CASE("KPSVD factors are symmetric and psd_select never hurts") {
  oracle::Gen g(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 2 + trial % 3, dp = 2 + trial % 2;
    // An indefinite symmetric target exercises psd_select.
    Matrix F = oracle::kron(oracle::random_symmetric(d, g), oracle::random_symmetric(dp, g));
    F += 0.3 * oracle::kron(oracle::random_symmetric(d, g), oracle::random_symmetric(dp, g));
    const SingularTriplet t = power_svd(block_op(F, d, dp), 1e-12, 100000);
    const KronPair raw = pair_from_triplet(t, d, dp);
    CHECK((raw.left - raw.left.transpose()).norm() <= 1e-8);
    CHECK((raw.right - raw.right.transpose()).norm() <= 1e-8);
    const Matrix R = oracle::mat(t.u, d, d) * std::sqrt(t.sigma);
    CHECK((R - R.transpose()).norm() <= 1e-8 * std::max(1.0, R.norm()));

    const KronPair sel{psd_select(raw.left), psd_select(raw.right)};
    CHECK(oracle::min_eig(sel.left) >= -1e-8 * sel.left.trace() / d);
    CHECK(oracle::rel(sel.left, oracle::abs_eig(raw.left)) < 1e-12);

    // Against a PSD target the selection can only move closer.
    const LayerStats s = oracle::random_stats(8, d - 1, dp, g);
    const Matrix P = oracle::exact_fim(s.abar, s.g);
    CHECK(residual(P, sel) <= residual(P, raw) + 1e-10);
  }
}

TEST_CASE("residual operator subtracts the pair") {
  oracle::Gen g(5);
  const Matrix F = gapped_fisher(3, 2, g);
  const KronPair p{oracle::random_symmetric(3, g), oracle::random_symmetric(2, g)};
  const RearrangedOp r = residual_op(block_op(F, 3, 2), p);
  const Matrix Z = oracle::zigzag(F - oracle::kron(p.left, p.right), 3, 2);
  const Vector v = oracle::random_vector(4, g), u = oracle::random_vector(9, g);
  CHECK(oracle::rel(r.matvec(v), Z * v) < 1e-13);
  CHECK(oracle::rel(r.rmatvec(u), Z.transpose() * u) < 1e-13);
}

TEST_CASE("Lanczos bidiagonalisation is orthonormal and consistent") {
  oracle::Gen g(6);
  const Matrix A = oracle::random_matrix(16, 9, g);
  const LanczosBasis b = lanczos_bidiag(dense_op(A), 5, 1e-14, oracle::random_vector(9, g).normalized());
  REQUIRE(b.rank == 5);
  const Matrix P = b.P.leftCols(5), Q = b.Q.leftCols(5);
  CHECK((P.transpose() * P - Matrix::Identity(5, 5)).norm() < 1e-12);
  CHECK((Q.transpose() * Q - Matrix::Identity(5, 5)).norm() < 1e-12);
  CHECK((P.transpose() * A * Q - b.H.topLeftCorner(5, 5)).norm() < 1e-11);
  // Rank-one operator breaks down after one step.
  const Matrix one = oracle::random_vector(6, g) * oracle::random_vector(4, g).transpose();
  const LanczosBasis br = lanczos_bidiag(dense_op(one), 4, 1e-12, oracle::random_vector(4, g).normalized());
  CHECK(br.breakdown);
  CHECK(br.rank == 1);
}

TEST_CASE("restarted Lanczos finds the top two triplets") {
  oracle::Gen g(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix A = oracle::random_matrix(25, 16, g);
    const auto ref = oracle::svd(A);
    const LanczosTop2 top = restarted_lanczos_rank2(dense_op(A), 6, 1e-11, 2000);
    CHECK(top.converged);
    CHECK(top.first.sigma == doctest::Approx(ref.sigma(0)).epsilon(1e-9));
    CHECK(top.second.sigma == doctest::Approx(ref.sigma(1)).epsilon(1e-9));
  }
}

TEST_CASE("rank-two methods match the dense truncated SVD on gapped instances") {
  oracle::Gen g(8);
  const SvdSettings settings{1e-11, 200000, 6, 2000};
  int tested = 0;
  while (tested < 8) {
    const Index d = 3 + tested % 3, dp = 2 + tested % 3;
    const Matrix F = gapped_fisher(d, dp, g);
    const Matrix Z = oracle::zigzag(F, d, dp);
    const Vector s = oracle::svd(Z).sigma;
    if (!(s(1) - s(2) > 0.01 * s(0))) continue;
    ++tested;
    const double best = oracle::best_rank_residual(Z, 2);
    const Rank2Result def = deflation_factors(block_op(F, d, dp), settings);
    const Rank2Result lan = lanczos_factors(block_op(F, d, dp), settings);
    CHECK(def.converged);
    CHECK(lan.converged);
    CHECK((F - def.first.dense() - def.second.dense()).norm() == doctest::Approx(best).epsilon(1e-6));
    CHECK((F - lan.first.dense() - lan.second.dense()).norm() == doctest::Approx(best).epsilon(1e-6));
  }
}

TEST_CASE("deflation residual never exceeds the rank-one residual") {
  oracle::Gen g(9);
  for (int trial = 0; trial < 10; ++trial) {
    const LayerStats s = oracle::random_stats(10, 2 + trial % 3, 1 + trial % 3, g);
    const Matrix F = oracle::exact_fim(s.abar, s.g);
    const SvdSettings settings{1e-10, 100000, 6, 500};
    const Rank1Result one = kpsvd_factors(s, settings);
    const Rank2Result two = deflation_factors(s, settings);
    CHECK((F - two.first.dense() - two.second.dense()).norm() <= residual(F, one.pair) + 1e-9);
    const Rank2Result corr = kfac_corrected_factors(s, settings);
    CHECK((F - corr.first.dense() - corr.second.dense()).norm() <= residual(F, kfac_factors(s)) + 1e-9);
    CHECK(oracle::rel(corr.first.left, kfac_factors(s).left) < 1e-14);
  }
}

TEST_CASE("warm starts cut the sweep count") {
  oracle::Gen g(10);
  const LayerStats s = oracle::random_stats(30, 4, 3, g);
  const SvdSettings settings{1e-9, 100000, 6, 500};
  const Rank1Result cold = kpsvd_factors(s, settings);
  const Rank1Result warm = kpsvd_factors(s, settings, cold.triplet.v);
  CHECK(warm.triplet.iterations <= 2);
  CHECK(warm.triplet.iterations < cold.triplet.iterations);
}

TEST_CASE("rank-one Fisher gives a degenerate second pair") {
  QuietLog quiet;
  LayerStats s;
  s.abar = Matrix::Ones(1, 3);
  s.g = Matrix::Constant(1, 2, 0.5);
  const Rank2Result r = deflation_factors(s, {1e-10, 1000, 6, 100});
  CHECK(r.degenerate);
  CHECK(r.second.dense().norm() <= 1e-8);
  const Rank2Result l = lanczos_factors(s, {1e-10, 1000, 6, 100});
  CHECK(l.degenerate);
}
