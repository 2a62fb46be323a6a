#include <string>

#include "supfactor/error.hpp"
#include "supfactor/linalg.hpp"
#include "supfactor/rng.hpp"
#include "supfactor/synth_data.hpp"

namespace supfactor::synth {

void validate(const LinearSynthConfig& c) {
  require(c.p >= 1 && c.q >= 1, ErrorKind::InvalidConfig, "p and q must be positive");
  require(c.L_true >= 1 && c.L_true <= c.p, ErrorKind::InvalidConfig,
          "L_true must lie in [1, p]");
  require(c.n_train >= 2 && c.n_test >= 2, ErrorKind::InvalidConfig,
          "observation counts must be at least 2");
  require(c.noise_x >= 0.0 && c.noise_y >= 0.0, ErrorKind::InvalidConfig,
          "noise std devs must be non-negative");
  require(c.loading_norms.empty() ||
              static_cast<Eigen::Index>(c.loading_norms.size()) == c.L_true,
          ErrorKind::InvalidConfig, "loading_norms must have L_true entries");
  for (double n : c.loading_norms)
    require(n > 0.0, ErrorKind::InvalidConfig, "loading norms must be positive");
}

LinearSynthData gen_linear(const LinearSynthConfig& c) {
  validate(c);
  Rng rng(c.seed);

  LinearSynthData out;
  // Orthonormal directions, then scaled: factor l carries norm_l^2 of the
  // predictor variance.
  out.W0 = orthonormal_basis(standard_normal(c.p, c.L_true, rng));
  for (Eigen::Index l = 0; l < c.L_true; ++l) {
    const double norm = c.loading_norms.empty() ? static_cast<double>(c.L_true - l)
                                                : c.loading_norms[static_cast<std::size_t>(l)];
    out.W0.col(l) *= norm;
  }
  out.D0 = standard_normal(c.q, c.L_true, rng);
  if (c.top_factor_unpredictive) out.D0.col(0).setZero();

  auto draw = [&](Eigen::Index n, Eigen::MatrixXd& X, Eigen::MatrixXd& Y, Eigen::MatrixXd& S) {
    S = standard_normal(c.L_true, n, rng);
    X = out.W0 * S + c.noise_x * standard_normal(c.p, n, rng);
    Y = out.D0 * S + c.noise_y * standard_normal(c.q, n, rng);
  };
  draw(c.n_train, out.X_train, out.Y_train, out.S_train);
  draw(c.n_test, out.X_test, out.Y_test, out.S_test);
  return out;
}

}  // namespace supfactor::synth
