#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kronfisher/mlp.hpp"
#include "oracles.hpp"

using namespace kronfisher;

namespace {

Matrix targets(Loss loss, Index m, Index d, oracle::Gen& g) {
  if (loss == Loss::MeanSquaredError) return oracle::random_matrix(m, d, g);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Matrix Y(m, d);
  for (Index i = 0; i < Y.size(); ++i) Y(i) = u(g);
  return Y;
}

}  // namespace

TEST_CASE("initialisation shapes and zero biases") {
  Rng rng(1);
  const MLPModel m = MLPModel::initialize({5, 4, 3}, {Activation::ReLU, Activation::Sigmoid},
                                          Loss::BinaryCrossEntropy, rng);
  REQUIRE(m.num_layers() == 2);
  CHECK(m.weights[0].rows() == 4);
  CHECK(m.weights[0].cols() == 6);
  CHECK(m.weights[0].col(0).norm() == 0.0);
  CHECK(m.parameter_count() == 4 * 6 + 3 * 5);
  const double limit = std::sqrt(6.0 / (5 + 4));
  CHECK(m.weights[0].rightCols(5).cwiseAbs().maxCoeff() <= limit);
  CHECK_THROWS_AS(MLPModel::initialize({5, 4}, {}, Loss::BinaryCrossEntropy, rng), DimensionError);
}

TEST_CASE("forward matches scalar loops") {
  oracle::Gen g(2);
  Rng rng(2);
  const MLPModel m = MLPModel::initialize(
      {4, 5, 3, 4}, {Activation::ReLU, Activation::Linear, Activation::Sigmoid}, Loss::BinaryCrossEntropy, rng);
  const Matrix X = oracle::random_matrix(7, 4, g);
  const ForwardPass p = forward(m, X);
  CHECK((p.activations.back() - oracle::predict(m, X)).norm() < 1e-13);
  CHECK_THROWS_AS(forward(m, oracle::random_matrix(3, 5, g)), DimensionError);
}

TEST_CASE("batch loss matches the reference formula") {
  oracle::Gen g(3);
  Rng rng(3);
  for (Loss loss : {Loss::BinaryCrossEntropy, Loss::MeanSquaredError}) {
    const Activation out = loss == Loss::BinaryCrossEntropy ? Activation::Sigmoid : Activation::Linear;
    const MLPModel m = MLPModel::initialize({3, 4, 3}, {Activation::ReLU, out}, loss, rng);
    const Matrix X = oracle::random_matrix(6, 3, g);
    const Matrix Y = targets(loss, 6, 3, g);
    CHECK(batch_loss(m, X, Y) == doctest::Approx(oracle::loss(m, X, Y)).epsilon(1e-12));
  }
}

TEST_CASE("backprop agrees with central differences") {
  struct Combo {
    Activation hidden, out;
    Loss loss;
  };
  const std::vector<Combo> combos = {
      {Activation::ReLU, Activation::Sigmoid, Loss::BinaryCrossEntropy},
      {Activation::Sigmoid, Activation::Sigmoid, Loss::BinaryCrossEntropy},
      {Activation::Linear, Activation::Sigmoid, Loss::BinaryCrossEntropy},
      {Activation::ReLU, Activation::Linear, Loss::MeanSquaredError},
      {Activation::Sigmoid, Activation::Sigmoid, Loss::MeanSquaredError},
      {Activation::Linear, Activation::ReLU, Loss::MeanSquaredError},
  };
  oracle::Gen g(4);
  Rng rng(4);
  for (const Combo& c : combos) {
    CAPTURE(to_string(c.hidden));
    CAPTURE(to_string(c.out));
    CAPTURE(to_string(c.loss));
    MLPModel m = MLPModel::initialize({4, 5, 3, 4}, {c.hidden, c.hidden, c.out}, c.loss, rng);
    for (auto& W : m.weights) W.col(0) = 0.1 * oracle::random_vector(W.rows(), g);
    const Matrix X = oracle::random_matrix(5, 4, g);
    const Matrix Y = targets(c.loss, 5, 4, g);
    const BackwardResult bw = backward(m, forward(m, X), Y);
    const auto fd = oracle::fd_gradient(m, X, Y);
    for (std::size_t l = 0; l < fd.size(); ++l) CHECK(oracle::rel(bw.gradients[l], fd[l]) < 1e-5);
  }
}

TEST_CASE("statistics reproduce the gradient") {
  oracle::Gen g(5);
  Rng rng(5);
  const MLPModel m = MLPModel::initialize({3, 4, 2}, {Activation::ReLU, Activation::Sigmoid},
                                          Loss::BinaryCrossEntropy, rng);
  const Matrix X = oracle::random_matrix(6, 3, g);
  const BackwardResult bw = backward(m, forward(m, X), targets(Loss::BinaryCrossEntropy, 6, 2, g));
  for (std::size_t l = 0; l < 2; ++l) {
    const LayerStats& s = bw.stats.layers[l];
    CHECK(s.abar.col(0).isOnes());
    Matrix grad = Matrix::Zero(s.g.cols(), s.abar.cols());
    for (Index t = 0; t < s.abar.rows(); ++t) grad += s.g.row(t).transpose() * s.abar.row(t);
    CHECK(oracle::rel(grad / 6.0, bw.gradients[l]) < 1e-13);
  }
}

TEST_CASE("exact Fisher block matches the outer-product sum") {
  oracle::Gen g(6);
  const LayerStats s = oracle::random_stats(9, 3, 2, g);
  const std::uint64_t before = dense_materialization_count();
  const Matrix F = exact_fim_block(s);
  CHECK(dense_materialization_count() == before + 1);
  CHECK(oracle::rel(F, oracle::exact_fim(s.abar, s.g)) < 1e-13);
  LayerStats huge;
  huge.abar = Matrix::Ones(1, 60);
  huge.g = Matrix::Ones(1, 60);
  CHECK_THROWS_AS(exact_fim_block(huge), std::length_error);
}

TEST_CASE("matrix-free products agree with the rearranged dense block") {
  oracle::Gen g(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Index din = 1 + trial % 5, dout = 1 + (trial / 5) % 5;
    const LayerStats s = oracle::random_stats(8, din, dout, g);
    const Matrix Z = oracle::zigzag(oracle::exact_fim(s.abar, s.g), din + 1, dout);
    const Vector v = oracle::random_vector(dout * dout, g);
    const Vector u = oracle::random_vector((din + 1) * (din + 1), g);
    CHECK(oracle::rel(zf_matvec(s, v), Z * v) < 1e-12);
    CHECK(oracle::rel(zf_rmatvec(s, u), Z.transpose() * u) < 1e-12);
  }
}

TEST_CASE("sampled targets") {
  Rng rng(8);
  const Matrix z = Matrix::Constant(4000, 1, 0.3);
  const Matrix y = sample_targets(z, Loss::BinaryCrossEntropy, rng);
  CHECK(((y.array() == 0.0) || (y.array() == 1.0)).all());
  CHECK(y.mean() == doctest::Approx(0.3).epsilon(0.1));
  const Matrix n = sample_targets(Matrix::Constant(4000, 1, 2.0), Loss::MeanSquaredError, rng);
  CHECK(n.mean() == doctest::Approx(2.0).epsilon(0.05));
  CHECK_THROWS_AS(sample_targets(Matrix::Constant(1, 1, 1.5), Loss::BinaryCrossEntropy, rng), std::domain_error);
}

TEST_CASE("non-finite derivatives are reported") {
  Rng rng(9);
  MLPModel m = MLPModel::initialize({2, 2}, {Activation::Linear}, Loss::MeanSquaredError, rng);
  m.weights[0](0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(backward(m, forward(m, Matrix::Ones(1, 2)), Matrix::Zero(1, 2)), NumericalError);
}

TEST_CASE("name round trips") {
  for (Activation a : {Activation::ReLU, Activation::Sigmoid, Activation::Linear})
    CHECK(parse_activation(to_string(a)) == a);
  CHECK(parse_loss("bce") == Loss::BinaryCrossEntropy);
  CHECK(parse_loss("mse") == Loss::MeanSquaredError);
  CHECK_THROWS(parse_activation("tanh"));
}
