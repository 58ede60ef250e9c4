// Brute-force reference implementations used by the tests. Nothing here
// calls into the library except for plain data types.
#pragma once

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "kronfisher/mlp.hpp"

namespace oracle {

using kronfisher::Index;
using kronfisher::Matrix;
using kronfisher::Vector;
using Gen = std::mt19937_64;

inline Matrix random_matrix(Index r, Index c, Gen& g) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix M(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) M(i, j) = n(g);
  return M;
}

inline Vector random_vector(Index n, Gen& g) { return random_matrix(n, 1, g).col(0); }

inline Matrix random_symmetric(Index n, Gen& g) {
  const Matrix M = random_matrix(n, n, g);
  return 0.5 * (M + M.transpose());
}

inline Matrix random_spd(Index n, Gen& g, double shift = 0.5) {
  const Matrix M = random_matrix(n, n, g);
  return M * M.transpose() / static_cast<double>(n) + shift * Matrix::Identity(n, n);
}

inline Matrix kron(const Matrix& A, const Matrix& B) {
  Matrix K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Index i = 0; i < A.rows(); ++i)
    for (Index j = 0; j < A.cols(); ++j)
      for (Index k = 0; k < B.rows(); ++k)
        for (Index l = 0; l < B.cols(); ++l) K(i * B.rows() + k, j * B.cols() + l) = A(i, j) * B(k, l);
  return K;
}

// Column-major vec and its inverse, element by element.
inline Vector vec(const Matrix& M) {
  Vector v(M.size());
  for (Index j = 0; j < M.cols(); ++j)
    for (Index i = 0; i < M.rows(); ++i) v(j * M.rows() + i) = M(i, j);
  return v;
}

inline Matrix mat(const Vector& v, Index r, Index c) {
  Matrix M(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) M(i, j) = v(j * r + i);
  return M;
}

// M is d x d blocks of size d' x d'. Row nu*d + mu holds vec(block(mu, nu)).
inline Matrix zigzag(const Matrix& M, Index d, Index dp) {
  Matrix Z(d * d, dp * dp);
  for (Index mu = 0; mu < d; ++mu)
    for (Index nu = 0; nu < d; ++nu)
      for (Index a = 0; a < dp; ++a)
        for (Index b = 0; b < dp; ++b) Z(nu * d + mu, b * dp + a) = M(mu * dp + a, nu * dp + b);
  return Z;
}

// sum_t (abar_t kron g_t)(abar_t kron g_t)^T / m.
inline Matrix exact_fim(const Matrix& abar, const Matrix& g) {
  const Index m = abar.rows(), d = abar.cols(), dp = g.cols();
  Matrix F = Matrix::Zero(d * dp, d * dp);
  Vector x(d * dp);
  for (Index t = 0; t < m; ++t) {
    for (Index i = 0; i < d; ++i)
      for (Index k = 0; k < dp; ++k) x(i * dp + k) = abar(t, i) * g(t, k);
    for (Index r = 0; r < d * dp; ++r)
      for (Index c = 0; c < d * dp; ++c) F(r, c) += x(r) * x(c);
  }
  return F / static_cast<double>(m);
}

inline kronfisher::LayerStats random_stats(Index m, Index d_in, Index d_out, Gen& g) {
  kronfisher::LayerStats s;
  s.abar = Matrix(m, d_in + 1);
  s.abar.col(0).setOnes();
  s.abar.rightCols(d_in) = random_matrix(m, d_in, g);
  s.g = random_matrix(m, d_out, g);
  return s;
}

struct Svd {
  Vector sigma;
  Matrix U, V;
};

inline Svd svd(const Matrix& M) {
  Eigen::JacobiSVD<Matrix> s(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {s.singularValues(), s.matrixU(), s.matrixV()};
}

// Frobenius residual of the best rank-k approximation.
inline double best_rank_residual(const Matrix& M, Index k) {
  const Vector s = svd(M).sigma;
  double r = 0.0;
  for (Index i = k; i < s.size(); ++i) r += s(i) * s(i);
  return std::sqrt(r);
}

// Kronecker pair from the i-th singular triplet of zigzag(F), symmetrised.
inline std::pair<Matrix, Matrix> svd_pair(const Svd& s, Index i, Index d, Index dp) {
  const double r = std::sqrt(s.sigma(i));
  Matrix R = r * mat(s.U.col(i), d, d), S = r * mat(s.V.col(i), dp, dp);
  return {0.5 * (R + R.transpose()), 0.5 * (S + S.transpose())};
}

// |eigenvalue| reconstruction.
inline Matrix abs_eig(const Matrix& M) {
  Eigen::SelfAdjointEigenSolver<Matrix> e(0.5 * (M + M.transpose()));
  return e.eigenvectors() * e.eigenvalues().cwiseAbs().asDiagonal() * e.eigenvectors().transpose();
}

inline double min_eig(const Matrix& M) {
  return Eigen::SelfAdjointEigenSolver<Matrix>(0.5 * (M + M.transpose()), Eigen::EigenvaluesOnly)
      .eigenvalues()
      .minCoeff();
}

inline double act(kronfisher::Activation a, double s) {
  switch (a) {
    case kronfisher::Activation::ReLU: return s > 0 ? s : 0.0;
    case kronfisher::Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-s));
    case kronfisher::Activation::Linear: return s;
  }
  return s;
}

// Scalar-loop forward pass returning the output of every sample.
inline Matrix predict(const kronfisher::MLPModel& model, const Matrix& X) {
  Matrix a = X;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    const Matrix& W = model.weights[l];
    Matrix next(a.rows(), W.rows());
    for (Index t = 0; t < a.rows(); ++t) {
      for (Index o = 0; o < W.rows(); ++o) {
        double s = W(o, 0);
        for (Index i = 0; i < a.cols(); ++i) s += W(o, i + 1) * a(t, i);
        next(t, o) = act(model.activations[l], s);
      }
    }
    a = std::move(next);
  }
  return a;
}

inline double loss(const kronfisher::MLPModel& model, const Matrix& X, const Matrix& Y) {
  const Matrix Z = predict(model, X);
  double total = 0.0;
  for (Index t = 0; t < Z.rows(); ++t) {
    for (Index k = 0; k < Z.cols(); ++k) {
      const double z = Z(t, k), y = Y(t, k);
      if (model.loss == kronfisher::Loss::MeanSquaredError) {
        total += 0.5 * (z - y) * (z - y);
      } else {
        const double zc = std::clamp(z, 1e-300, 1.0 - 1e-16);
        total -= y * std::log(zc) + (1 - y) * std::log1p(-zc);
      }
    }
  }
  return total / static_cast<double>(Z.rows());
}

// Central differences of the loss with respect to every weight.
inline std::vector<Matrix> fd_gradient(kronfisher::MLPModel model, const Matrix& X, const Matrix& Y,
                                       double h = 1e-6) {
  std::vector<Matrix> out;
  for (auto& W : model.weights) {
    Matrix G(W.rows(), W.cols());
    for (Index i = 0; i < W.rows(); ++i) {
      for (Index j = 0; j < W.cols(); ++j) {
        const double w = W(i, j);
        W(i, j) = w + h;
        const double up = loss(model, X, Y);
        W(i, j) = w - h;
        const double down = loss(model, X, Y);
        W(i, j) = w;
        G(i, j) = (up - down) / (2 * h);
      }
    }
    out.push_back(std::move(G));
  }
  return out;
}

inline double rel(const Matrix& a, const Matrix& b) {
  const double n = b.norm();
  return n > 0 ? (a - b).norm() / n : (a - b).norm();
}

}  // namespace oracle
