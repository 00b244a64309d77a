#include "oseg/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oseg/errors.hpp"
#include "oseg/random.hpp"

namespace oseg {

Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0) return b;
  if (b.rows() == 0) return a;
  if (a.cols() != b.cols()) throw ArgumentError("vstack: column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

Matrix gaussian_kernel(const Matrix& a, const Matrix& b, double sigma) {
  const Vector na = a.rowwise().squaredNorm();
  const Vector nb = b.rowwise().squaredNorm();
  Matrix d = -2.0 * (a * b.transpose());
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  const double scale = -1.0 / (2.0 * sigma * sigma);
  return (d.array().max(0.0) * scale).exp().matrix();
}

KernelClassifier::KernelClassifier(Matrix centers, Vector weights, double sigma, double lambda)
    : centers_(std::move(centers)), weights_(std::move(weights)), sigma_(sigma), lambda_(lambda) {
  if (centers_.rows() < 1) throw ArgumentError("kernel classifier needs at least one center");
  if (weights_.size() != centers_.rows()) throw ArgumentError("kernel classifier: weights/centers size mismatch");
  if (!(sigma_ > 0)) throw ArgumentError("kernel classifier: sigma must be positive");
  if (!weights_.allFinite()) throw NumericalError("kernel classifier: non-finite weights");
}

double KernelClassifier::score(std::span<const double> x) const {
  if (x.size() != dim()) throw ArgumentError("score: feature dimension mismatch");
  const double scale = -1.0 / (2.0 * sigma_ * sigma_);
  double s = 0.0;
  for (Eigen::Index i = 0; i < centers_.rows(); ++i) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double diff = x[k] - centers_(i, static_cast<Eigen::Index>(k));
      d2 += diff * diff;
    }
    s += weights_[i] * std::exp(d2 * scale);
  }
  return s;
}

Vector KernelClassifier::score_rows(const Matrix& x) const {
  if (x.rows() == 0) return Vector(0);
  if (static_cast<std::size_t>(x.cols()) != dim()) throw ArgumentError("score: feature dimension mismatch");
  return gaussian_kernel(x, centers_, sigma_) * weights_;
}

bool KernelClassifier::operator==(const KernelClassifier& o) const {
  return sigma_ == o.sigma_ && lambda_ == o.lambda_ && centers_.rows() == o.centers_.rows() &&
         centers_.cols() == o.centers_.cols() && centers_ == o.centers_ && weights_ == o.weights_;
}

KernelClassifier fit_nystrom(const Matrix& x, const Vector& y, const KernelParams& params,
                             std::uint64_t seed, TrainCost* cost) {
  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t m = params.num_centers;
  if (n < 1) throw ArgumentError("train_kernel_classifier: no training samples");
  if (static_cast<std::size_t>(y.size()) != n) throw ArgumentError("train_kernel_classifier: label count mismatch");
  if (m < 1) throw ArgumentError("train_kernel_classifier: need at least one Nystrom center");
  if (m > n) {
    throw ArgumentError("train_kernel_classifier: " + std::to_string(m) + " centers requested but only " +
                        std::to_string(n) + " samples");
  }
  if (!(params.sigma > 0) || !std::isfinite(params.sigma)) throw ArgumentError("train_kernel_classifier: sigma must be positive");
  if (!(params.lambda >= 0)) throw ArgumentError("train_kernel_classifier: lambda must be non-negative");
  if (!x.allFinite() || !y.allFinite()) throw ArgumentError("train_kernel_classifier: non-finite input");

  Rng rng(seed);
  const auto picked = sample_indices(n, m, rng);
  Matrix centers(static_cast<Eigen::Index>(m), x.cols());
  for (std::size_t i = 0; i < m; ++i) centers.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(picked[i]));

  Matrix kmm = gaussian_kernel(centers, centers, params.sigma);
  const double jitter = 1e-10 * kmm.trace() / static_cast<double>(m);
  kmm.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> kmm_llt(kmm);
  if (kmm_llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "Nystrom center kernel not positive definite (M=" << m << ", sigma=" << params.sigma
        << ", jitter=" << jitter << ")";
    throw NumericalError(msg.str());
  }

  // Whitened design A = K_nm L^-T turns the Nystrom problem into plain ridge:
  // (A^T A + lambda n I) beta = A^T y, alpha = L^-T beta.
  // Rows are processed in blocks to bound memory at block x M.
  constexpr Eigen::Index kBlock = 4096;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  Vector aty = Vector::Zero(static_cast<Eigen::Index>(m));
  for (Eigen::Index start = 0; start < x.rows(); start += kBlock) {
    const Eigen::Index len = std::min(kBlock, x.rows() - start);
    const Matrix knm = gaussian_kernel(x.middleRows(start, len), centers, params.sigma);
    const Eigen::MatrixXd at = kmm_llt.matrixL().solve(Eigen::MatrixXd(knm.transpose()));
    h.selfadjointView<Eigen::Lower>().rankUpdate(at);
    aty += at * y.segment(start, len);
  }
  h.diagonal().array() += params.lambda * static_cast<double>(n);
  Eigen::LLT<Eigen::MatrixXd> h_llt(h);
  if (h_llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "regularized Nystrom system not positive definite (n=" << n << ", M=" << m
        << ", sigma=" << params.sigma << ", lambda=" << params.lambda << ")";
    throw NumericalError(msg.str());
  }
  const Vector beta = h_llt.solve(aty);
  Vector alpha = kmm_llt.matrixU().solve(beta);
  if (!alpha.allFinite()) throw NumericalError("Nystrom solve produced non-finite weights");

  if (cost) {
    const double dn = static_cast<double>(n), dm = static_cast<double>(m), df = static_cast<double>(x.cols());
    cost->flops += 2.0 * dn * dm * df + 2.0 * dm * dm * df + 2.0 * dn * dm * dm + dm * dm * dm;
  }
  return KernelClassifier(std::move(centers), std::move(alpha), params.sigma, params.lambda);
}

KernelClassifier train_kernel_classifier(const Matrix& positives, const Matrix& negatives,
                                         const KernelParams& params, std::uint64_t seed, TrainCost* cost) {
  if (positives.rows() < 1 || negatives.rows() < 1) {
    throw ArgumentError("train_kernel_classifier: need at least one positive and one negative");
  }
  if (positives.cols() != negatives.cols()) throw ArgumentError("train_kernel_classifier: feature dimension mismatch");
  Vector y(positives.rows() + negatives.rows());
  y.head(positives.rows()).setOnes();
  y.tail(negatives.rows()).setConstant(-1.0);
  return fit_nystrom(vstack(positives, negatives), y, params, seed, cost);
}

RlsRegressor::RlsRegressor(Matrix weights, Vector bias, double lambda)
    : weights_(std::move(weights)), bias_(std::move(bias)), lambda_(lambda) {
  if (weights_.cols() != 4 || bias_.size() != 4) throw ArgumentError("RLS regressor must have 4 outputs");
  if (!weights_.allFinite() || !bias_.allFinite()) throw NumericalError("RLS regressor: non-finite parameters");
}

RlsRegressor RlsRegressor::zeros(std::size_t dim) {
  return RlsRegressor(Matrix::Zero(static_cast<Eigen::Index>(dim), 4), Vector::Zero(4), 0.0);
}

RegressionTarget RlsRegressor::predict(std::span<const double> x) const {
  if (x.size() != static_cast<std::size_t>(weights_.rows())) throw ArgumentError("RLS predict: dimension mismatch");
  const Eigen::Map<const Vector> v(x.data(), static_cast<Eigen::Index>(x.size()));
  const Vector out = weights_.transpose() * v + bias_;
  return {out[0], out[1], out[2], out[3]};
}

Matrix RlsRegressor::predict_rows(const Matrix& x) const {
  if (x.cols() != weights_.rows()) throw ArgumentError("RLS predict: dimension mismatch");
  Matrix out = x * weights_;
  out.rowwise() += bias_.transpose();
  return out;
}

bool RlsRegressor::operator==(const RlsRegressor& o) const {
  return lambda_ == o.lambda_ && weights_.rows() == o.weights_.rows() && weights_ == o.weights_ && bias_ == o.bias_;
}

RlsRegressor train_rls(const Matrix& features, const Matrix& targets, double lambda) {
  if (features.rows() < 1) throw ArgumentError("train_rls: no samples");
  if (targets.rows() != features.rows() || targets.cols() != 4) throw ArgumentError("train_rls: targets must be n x 4");
  if (!(lambda >= 0)) throw ArgumentError("train_rls: lambda must be non-negative");
  const Eigen::RowVectorXd xm = features.colwise().mean();
  const Eigen::RowVectorXd tm = targets.colwise().mean();
  const Eigen::MatrixXd xc = features.rowwise() - xm;
  const Eigen::MatrixXd tc = targets.rowwise() - tm;
  Eigen::MatrixXd w;
  if (lambda > 0) {
    Eigen::MatrixXd g = xc.transpose() * xc;
    g.diagonal().array() += lambda;
    w = g.llt().solve(xc.transpose() * tc);
  } else {
    w = xc.completeOrthogonalDecomposition().solve(tc);
  }
  const Vector b = (tm - xm * w).transpose();
  return RlsRegressor(Matrix(w), b, lambda);
}

}  // namespace oseg
