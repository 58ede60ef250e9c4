#include "kronfisher/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kronfisher {

namespace {

void require_square(const Matrix& M, const char* who) {
  if (M.rows() != M.cols()) {
    std::ostringstream os;
    os << who << ": expected a square matrix, got " << M.rows() << "x" << M.cols();
    throw DimensionError(os.str());
  }
}

}  // namespace

Matrix kron(const Matrix& A, const Matrix& B) {
  Matrix out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Index j = 0; j < A.cols(); ++j) {
    for (Index i = 0; i < A.rows(); ++i) {
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    }
  }
  return out;
}

Vector vec(const Matrix& M) {
  return Eigen::Map<const Vector>(M.data(), M.size());
}

Matrix mat(const Vector& v, Index rows, Index cols) {
  if (rows < 0 || cols < 0 || v.size() != rows * cols) {
    std::ostringstream os;
    os << "mat: vector of length " << v.size() << " cannot be reshaped to " << rows << "x"
       << cols;
    throw DimensionError(os.str());
  }
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

Matrix zigzag(const Matrix& M, Index d, Index d_prime) {
  if (d <= 0 || d_prime <= 0 || M.rows() != d * d_prime || M.cols() != d * d_prime) {
    std::ostringstream os;
    os << "zigzag: " << M.rows() << "x" << M.cols() << " matrix is not a " << d << "x" << d
       << " grid of " << d_prime << "x" << d_prime << " blocks";
    throw DimensionError(os.str());
  }
  Matrix out(d * d, d_prime * d_prime);
  for (Index nu = 0; nu < d; ++nu) {
    for (Index mu = 0; mu < d; ++mu) {
      const Matrix block = M.block(mu * d_prime, nu * d_prime, d_prime, d_prime);
      out.row(nu * d + mu) = vec(block).transpose();
    }
  }
  return out;
}

Matrix kron_apply(const Matrix& A, const Matrix& B, const Matrix& X) {
  if (X.rows() != B.cols() || X.cols() != A.cols()) {
    std::ostringstream os;
    os << "kron_apply: X is " << X.rows() << "x" << X.cols() << ", expected " << B.cols()
       << "x" << A.cols();
    throw DimensionError(os.str());
  }
  return B * X * A.transpose();
}

SymEig sym_eig(const Matrix& M) {
  require_square(M, "sym_eig");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(symmetrize(M));
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("sym_eig: eigensolver did not converge");
  }
  // Eigen returns ascending order.
  SymEig out;
  out.eigenvalues = solver.eigenvalues().reverse();
  out.eigenvectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

Matrix inv_sqrt(const Matrix& M) {
  SymEig eig = sym_eig(M);
  if (eig.eigenvalues.size() == 0) return Matrix(0, 0);
  const double scale = eig.eigenvalues.cwiseAbs().maxCoeff();
  for (Index i = 0; i < eig.eigenvalues.size(); ++i) {
    if (std::abs(eig.eigenvalues(i)) < 1e-12 * scale) eig.eigenvalues(i) = 0.0;
  }
  const double smallest = eig.eigenvalues.minCoeff();
  if (!(smallest > 0.0)) {
    std::ostringstream os;
    os << "inv_sqrt: matrix is not positive definite (smallest eigenvalue " << smallest << ")";
    throw NotPositiveDefinite(os.str(), smallest);
  }
  const Vector scaled = eig.eigenvalues.cwiseSqrt().cwiseInverse();
  return eig.eigenvectors * scaled.asDiagonal() * eig.eigenvectors.transpose();
}

double frobenius_norm(const Matrix& M) { return M.norm(); }

Vector spectrum(const Matrix& M) { return sym_eig(M).eigenvalues; }

DenseSvd svd_dense(const Matrix& M) {
  Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

Matrix symmetrize(const Matrix& M) {
  require_square(M, "symmetrize");
  return 0.5 * (M + M.transpose());
}

}  // namespace kronfisher
