#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace kronfisher {

/// Dense column-major matrix. Column-major storage means `vec` is a plain
/// reinterpretation of the entry buffer.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a matrix that must be positive definite is not. Carries the
/// offending smallest eigenvalue so callers can report how much damping is
/// missing.
class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(const std::string& what, double smallest_eigenvalue)
      : std::runtime_error(what), smallest_(smallest_eigenvalue) {}
  double smallest_eigenvalue() const noexcept { return smallest_; }

 private:
  double smallest_;
};

struct SymEig {
  Vector eigenvalues;   // descending
  Matrix eigenvectors;  // columns, orthonormal
};

struct DenseSvd {
  Matrix U;
  Vector sigma;  // descending
  Matrix V;
};

Matrix kron(const Matrix& A, const Matrix& B);

Vector vec(const Matrix& M);
Matrix mat(const Vector& v, Index rows, Index cols);

/// Rearranges a uniform-block matrix (a d x d grid of d' x d' blocks) into a
/// d^2 x d'^2 matrix whose row nu*d + mu is vec(M_{mu,nu})^T, so that
/// zigzag(kron(R, S)) == vec(R) vec(S)^T.
Matrix zigzag(const Matrix& M, Index d, Index d_prime);

/// (A kron B) vec(X) evaluated as vec(B X A^T), returned in matrix form.
Matrix kron_apply(const Matrix& A, const Matrix& B, const Matrix& X);

SymEig sym_eig(const Matrix& M);

/// M^{-1/2} through the eigendecomposition. Eigenvalues with
/// |lambda| < 1e-12 * max|lambda| are treated as zero, which makes such
/// matrices fail the definiteness check.
Matrix inv_sqrt(const Matrix& M);

double frobenius_norm(const Matrix& M);
Vector spectrum(const Matrix& M);
DenseSvd svd_dense(const Matrix& M);

Matrix symmetrize(const Matrix& M);

}  // namespace kronfisher
