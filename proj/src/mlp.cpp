#include "kronfisher/mlp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace kronfisher {

namespace {

std::atomic<std::uint64_t> g_materializations{0};

Matrix apply_activation(Activation act, const Matrix& s) {
  switch (act) {
    case Activation::ReLU:
      return s.cwiseMax(0.0);
    case Activation::Sigmoid:
      return s.unaryExpr([](double x) {
        // Split on sign so exp never overflows.
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
    case Activation::Linear:
      return s;
  }
  return s;
}

// sigma'(s), expressed through s or a = sigma(s) as convenient.
Matrix activation_derivative(Activation act, const Matrix& s, const Matrix& a) {
  switch (act) {
    case Activation::ReLU:
      return s.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Activation::Sigmoid:
      return a.cwiseProduct((1.0 - a.array()).matrix());
    case Activation::Linear:
      return Matrix::Ones(s.rows(), s.cols());
  }
  return Matrix::Ones(s.rows(), s.cols());
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_rows(const Matrix& M, Index rows, Index cols, const char* what) {
  if (M.rows() != rows || M.cols() != cols) {
    std::ostringstream os;
    os << what << ": expected " << rows << "x" << cols << ", got " << M.rows() << "x"
       << M.cols();
    throw DimensionError(os.str());
  }
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "ReLU";
    case Activation::Sigmoid: return "Sigmoid";
    case Activation::Linear: return "Linear";
  }
  return "?";
}

std::string to_string(Loss l) {
  return l == Loss::BinaryCrossEntropy ? "binary_cross_entropy" : "mean_squared_error";
}

Activation parse_activation(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "relu") return Activation::ReLU;
  if (n == "sigmoid") return Activation::Sigmoid;
  if (n == "linear") return Activation::Linear;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

Loss parse_loss(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  if (n == "bce" || n == "binary_cross_entropy") return Loss::BinaryCrossEntropy;
  if (n == "mse" || n == "mean_squared_error") return Loss::MeanSquaredError;
  throw std::invalid_argument("unknown loss '" + name + "'");
}

Index MLPModel::parameter_count() const {
  Index p = 0;
  for (std::size_t i = 1; i < layer_dims.size(); ++i) p += layer_dims[i] * (layer_dims[i - 1] + 1);
  return p;
}

void MLPModel::validate() const {
  if (layer_dims.size() < 2) throw DimensionError("MLPModel: need at least one layer");
  if (weights.size() != layer_dims.size() - 1 || activations.size() != weights.size()) {
    throw DimensionError("MLPModel: weights/activations do not match layer_dims");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    check_rows(weights[i], layer_dims[i + 1], layer_dims[i] + 1, "MLPModel weight");
  }
}

MLPModel MLPModel::initialize(std::vector<Index> layer_dims, std::vector<Activation> activations,
                              Loss loss, Rng& rng) {
  MLPModel model;
  model.layer_dims = std::move(layer_dims);
  model.activations = std::move(activations);
  model.loss = loss;
  if (model.layer_dims.size() < 2 || model.activations.size() != model.layer_dims.size() - 1) {
    throw DimensionError("MLPModel::initialize: need one activation per layer");
  }
  for (std::size_t i = 1; i < model.layer_dims.size(); ++i) {
    const Index fan_in = model.layer_dims[i - 1];
    const Index fan_out = model.layer_dims[i];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix W = Matrix::Zero(fan_out, fan_in + 1);
    // Column-major fill order keeps the draw sequence independent of Eigen.
    for (Index c = 1; c <= fan_in; ++c)
      for (Index r = 0; r < fan_out; ++r) W(r, c) = dist(rng);
    model.weights.push_back(std::move(W));
  }
  return model;
}

Matrix augment(const Matrix& a) {
  Matrix out(a.rows(), a.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(a.cols()) = a;
  return out;
}

ForwardPass forward(const MLPModel& model, const Matrix& X) {
  if (model.layer_dims.empty() || X.cols() != model.layer_dims.front()) {
    std::ostringstream os;
    os << "forward: input has " << X.cols() << " columns, model expects "
       << (model.layer_dims.empty() ? 0 : model.layer_dims.front());
    throw DimensionError(os.str());
  }
  ForwardPass pass;
  pass.activations.reserve(model.num_layers() + 1);
  pass.preactivations.reserve(model.num_layers());
  pass.activations.push_back(X);
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    Matrix s = augment(pass.activations.back()) * model.weights[i].transpose();
    pass.activations.push_back(apply_activation(model.activations[i], s));
    pass.preactivations.push_back(std::move(s));
  }
  return pass;
}

BackwardResult backward(const MLPModel& model, const ForwardPass& pass, const Matrix& Y) {
  const std::size_t L = model.num_layers();
  if (pass.activations.size() != L + 1 || pass.preactivations.size() != L) {
    throw DimensionError("backward: forward pass does not match model depth");
  }
  const Matrix& z = pass.activations.back();
  check_rows(Y, z.rows(), z.cols(), "backward targets");
  const Index m = z.rows();
  if (m == 0) throw DimensionError("backward: empty batch");

  BackwardResult out;
  out.gradients.resize(L);
  out.stats.layers.resize(L);

  // Output layer preactivation derivative.
  Matrix g;
  const Activation last = model.activations.back();
  if ((model.loss == Loss::BinaryCrossEntropy && last == Activation::Sigmoid) ||
      (model.loss == Loss::MeanSquaredError && last == Activation::Linear)) {
    g = z - Y;
  } else {
    Matrix dz;
    if (model.loss == Loss::MeanSquaredError) {
      dz = z - Y;
    } else {
      const Matrix zc = z.unaryExpr([](double v) { return std::clamp(v, 1e-12, 1.0 - 1e-12); });
      dz = (zc - Y).cwiseQuotient(zc.cwiseProduct((1.0 - zc.array()).matrix()));
    }
    g = dz.cwiseProduct(activation_derivative(last, pass.preactivations.back(), z));
  }
  if (!g.allFinite()) throw NumericalError("backward: non-finite loss derivative");

  for (std::size_t k = L; k-- > 0;) {
    Matrix abar = augment(pass.activations[k]);
    out.gradients[k] = g.transpose() * abar / static_cast<double>(m);
    if (k > 0) {
      const Matrix da = g * model.weights[k].rightCols(model.layer_dims[k]);
      Matrix next = da.cwiseProduct(activation_derivative(
          model.activations[k - 1], pass.preactivations[k - 1], pass.activations[k]));
      out.stats.layers[k] = {std::move(abar), std::move(g)};
      g = std::move(next);
    } else {
      out.stats.layers[k] = {std::move(abar), std::move(g)};
    }
  }
  return out;
}

double batch_loss(const MLPModel& model, const ForwardPass& pass, const Matrix& Y) {
  const Matrix& z = pass.activations.back();
  check_rows(Y, z.rows(), z.cols(), "batch_loss targets");
  const Index m = z.rows();
  if (m == 0) return 0.0;
  double total = 0.0;
  if (model.loss == Loss::MeanSquaredError) {
    total = 0.5 * (z - Y).squaredNorm();
  } else if (model.activations.back() == Activation::Sigmoid) {
    const Matrix& s = pass.preactivations.back();
    for (Index j = 0; j < s.cols(); ++j)
      for (Index i = 0; i < s.rows(); ++i) total += softplus(s(i, j)) - Y(i, j) * s(i, j);
  } else {
    for (Index j = 0; j < z.cols(); ++j) {
      for (Index i = 0; i < z.rows(); ++i) {
        const double zc = std::clamp(z(i, j), 1e-12, 1.0 - 1e-12);
        total -= Y(i, j) * std::log(zc) + (1.0 - Y(i, j)) * std::log(1.0 - zc);
      }
    }
  }
  return total / static_cast<double>(m);
}

double batch_loss(const MLPModel& model, const Matrix& X, const Matrix& Y) {
  return batch_loss(model, forward(model, X), Y);
}

Matrix sample_targets(const Matrix& z, Loss loss, Rng& rng) {
  Matrix y(z.rows(), z.cols());
  if (loss == Loss::BinaryCrossEntropy) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (Index j = 0; j < z.cols(); ++j) {
      for (Index i = 0; i < z.rows(); ++i) {
        const double p = z(i, j);
        if (!(p >= 0.0 && p <= 1.0)) {
          throw std::domain_error("sample_targets: Bernoulli mean outside [0,1]");
        }
        y(i, j) = unif(rng) < p ? 1.0 : 0.0;
      }
    }
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index j = 0; j < z.cols(); ++j) {
      for (Index i = 0; i < z.rows(); ++i) {
        if (!std::isfinite(z(i, j))) throw std::domain_error("sample_targets: non-finite mean");
        y(i, j) = z(i, j) + normal(rng);
      }
    }
  }
  return y;
}

Matrix exact_fim_block(const LayerStats& stats) {
  const Index m = stats.abar.rows();
  const Index d = stats.abar.cols();
  const Index dp = stats.g.cols();
  if (m == 0 || stats.g.rows() != m) throw DimensionError("exact_fim_block: bad statistics");
  const Index p = d * dp;
  if (p > kMaxDenseFisherSide) {
    std::ostringstream os;
    os << "exact_fim_block: block side " << p << " exceeds " << kMaxDenseFisherSide;
    throw std::length_error(os.str());
  }
  note_dense_materialization();
  // Row t holds vec(g_t abar_t^T) = abar_t kron g_t.
  Matrix D(m, p);
  for (Index t = 0; t < m; ++t) {
    for (Index a = 0; a < d; ++a) D.row(t).segment(a * dp, dp) = stats.abar(t, a) * stats.g.row(t);
  }
  Matrix F = D.transpose() * D / static_cast<double>(m);
  return F;
}

Matrix exact_fim_block(const LayerBatchStats& stats, std::size_t layer) {
  if (layer >= stats.layers.size()) throw std::out_of_range("exact_fim_block: layer index");
  return exact_fim_block(stats.layers[layer]);
}

Vector zf_matvec(const LayerStats& stats, const Vector& v) {
  const Index dp = stats.g.cols();
  const Matrix V = mat(v, dp, dp);
  const Vector c = (stats.g * V).cwiseProduct(stats.g).rowwise().sum();
  const Matrix out = stats.abar.transpose() * c.asDiagonal() * stats.abar;
  return vec(out) / static_cast<double>(stats.abar.rows());
}

Vector zf_rmatvec(const LayerStats& stats, const Vector& u) {
  const Index d = stats.abar.cols();
  const Matrix U = mat(u, d, d);
  const Vector c = (stats.abar * U).cwiseProduct(stats.abar).rowwise().sum();
  const Matrix out = stats.g.transpose() * c.asDiagonal() * stats.g;
  return vec(out) / static_cast<double>(stats.g.rows());
}

std::uint64_t dense_materialization_count() { return g_materializations.load(); }
void note_dense_materialization() { ++g_materializations; }

}  // namespace kronfisher
