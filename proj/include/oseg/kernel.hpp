#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>

#include "oseg/geometry.hpp"

namespace oseg {

/// Samples are rows.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Row-stacks a and b (either may be empty).
Matrix vstack(const Matrix& a, const Matrix& b);

/// Gaussian kernel matrix exp(-|a_i - b_j|^2 / (2 sigma^2)).
Matrix gaussian_kernel(const Matrix& a, const Matrix& b, double sigma);

struct KernelParams {
  std::size_t num_centers = 1000;
  double sigma = 2.0;
  double lambda = 1e-6;
};

/// Floating-point operation estimate for training work; feeds the modeled
/// timing in the orchestrator.
struct TrainCost {
  double flops = 0.0;
  TrainCost& operator+=(const TrainCost& o) {
    flops += o.flops;
    return *this;
  }
};

/// Nystrom Gaussian-kernel classifier: score(x) = sum_i w_i k(x, c_i).
class KernelClassifier {
 public:
  KernelClassifier() = default;
  KernelClassifier(Matrix centers, Vector weights, double sigma, double lambda);

  double score(std::span<const double> x) const;
  /// Scores every row of `x`.
  Vector score_rows(const Matrix& x) const;

  const Matrix& centers() const { return centers_; }
  const Vector& weights() const { return weights_; }
  double sigma() const { return sigma_; }
  double lambda() const { return lambda_; }
  std::size_t dim() const { return static_cast<std::size_t>(centers_.cols()); }

  bool operator==(const KernelClassifier& o) const;

 private:
  Matrix centers_;
  Vector weights_;
  double sigma_ = 1.0;
  double lambda_ = 0.0;
};

/// Nystrom kernel ridge regression with +1/-1 labels. Centers are drawn
/// uniformly without replacement from the training rows (seeded). With
/// num_centers equal to the sample count this reproduces exact kernel ridge
/// regression. Throws ArgumentError on bad shapes and NumericalError when
/// the regularized system is not positive definite.
KernelClassifier train_kernel_classifier(const Matrix& positives, const Matrix& negatives,
                                         const KernelParams& params, std::uint64_t seed,
                                         TrainCost* cost = nullptr);

/// Same fit on explicit real-valued targets.
KernelClassifier fit_nystrom(const Matrix& x, const Vector& y, const KernelParams& params,
                             std::uint64_t seed, TrainCost* cost = nullptr);

/// Linear ridge map from features to the four box offsets; the bias is not
/// regularized.
class RlsRegressor {
 public:
  RlsRegressor() = default;
  RlsRegressor(Matrix weights, Vector bias, double lambda);

  /// Zero map for `dim` inputs (used when a bank has no samples).
  static RlsRegressor zeros(std::size_t dim);

  RegressionTarget predict(std::span<const double> x) const;
  Matrix predict_rows(const Matrix& x) const;

  const Matrix& weights() const { return weights_; }
  const Vector& bias() const { return bias_; }
  double lambda() const { return lambda_; }

  bool operator==(const RlsRegressor& o) const;

 private:
  Matrix weights_;  // f x 4
  Vector bias_;     // 4
  double lambda_ = 0.0;
};

/// Minimizes |XW + b - T|^2 + lambda |W|^2 for n x 4 targets.
RlsRegressor train_rls(const Matrix& features, const Matrix& targets, double lambda);

}  // namespace oseg
