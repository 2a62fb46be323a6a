#include "supfactor/linalg.hpp"

#include <algorithm>

namespace supfactor {

Eigen::MatrixXd orthonormal_basis(const Eigen::MatrixXd& a) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  return qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
}

Eigen::VectorXd principal_angles(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::MatrixXd qa = orthonormal_basis(a);
  const Eigen::MatrixXd qb = orthonormal_basis(b);
  const Eigen::Index k = std::min(qa.cols(), qb.cols());

  Eigen::JacobiSVD<Eigen::MatrixXd> cos_svd(qa.transpose() * qb);
  Eigen::VectorXd cosines = cos_svd.singularValues().head(k);

  // Sines from the residual of qb after projecting onto span(qa).
  const Eigen::MatrixXd residual = qb - qa * (qa.transpose() * qb);
  Eigen::JacobiSVD<Eigen::MatrixXd> sin_svd(residual);
  Eigen::VectorXd sines = sin_svd.singularValues();
  // Sines come out descending; pair the smallest sine with the largest cosine.
  std::vector<double> s(sines.data(), sines.data() + sines.size());
  std::sort(s.begin(), s.end());
  s.resize(static_cast<std::size_t>(k), 0.0);

  Eigen::VectorXd angles(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double c = std::clamp(cosines(i), 0.0, 1.0);
    const double sn = std::clamp(s[static_cast<std::size_t>(i)], 0.0, 1.0);
    angles(i) = c > 0.7 ? std::asin(sn) : std::acos(c);
  }
  std::sort(angles.data(), angles.data() + k);
  return angles;
}

double max_principal_angle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::VectorXd angles = principal_angles(a, b);
  return angles.size() == 0 ? 0.0 : angles.maxCoeff();
}

}  // namespace supfactor
