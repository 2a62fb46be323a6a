#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace supfactor {

// Orthonormal basis for the column span of `a` (thin QR).
Eigen::MatrixXd orthonormal_basis(const Eigen::MatrixXd& a);

// Principal angles (radians, ascending) between span(a) and span(b).
// Small angles are taken from the sine side so they stay accurate below 1e-8.
Eigen::VectorXd principal_angles(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

double max_principal_angle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

inline double softplus(double x) {
  return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

// -log sigmoid(x), stable for large |x|.
inline double log1p_exp_neg(double x) {
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

// Binary cross-entropy of label y in {0,1} against logit z.
inline double logistic_loss(double z, double y) {
  return y * log1p_exp_neg(z) + (1.0 - y) * log1p_exp_neg(-z);
}

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.allFinite();
}

}  // namespace supfactor
