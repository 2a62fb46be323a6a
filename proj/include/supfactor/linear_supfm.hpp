#pragma once

// Linear (L2-loss) supervised factor models.
//
// Both inference strategies reduce to an eigenproblem on a (p+q)x(p+q) block
// matrix built from the centered predictors X (p x N) and outcomes Y (q x N):
//
//   local:    [[X X^T, mu X Y^T], [Y X^T, mu Y Y^T]]
//   encoded:  [[X X^T, mu X Y^T], [Y X^T, mu Y P_X Y^T]],  P_X = X^T (X X^T)^-1 X
//
// Neither block matrix is symmetric when mu != 1. They are solved through the
// similar matrix T B T^-1 with T = diag(I_p, sqrt(mu) I_q), which is symmetric.

#include <Eigen/Dense>
#include <cstdint>
#include <optional>

namespace supfactor::linear {

// A p x N (or q x N) matrix whose rows have been mean-centered. `mean` holds the
// removed row means so reconstructions can be mapped back to data units.
struct CenteredMatrix {
  Eigen::MatrixXd values;
  Eigen::VectorXd mean;

  // Wraps a matrix that is already centered (mean recorded as zero).
  static CenteredMatrix as_is(Eigen::MatrixXd m);
};

using DataMatrix = CenteredMatrix;
using OutcomeMatrix = CenteredMatrix;

// Centers each row. Throws InvalidData on non-finite entries or N < 2.
CenteredMatrix center(const Eigen::MatrixXd& raw);

// Applies a previously computed centering (e.g. training means on test data).
CenteredMatrix center_with(const Eigen::MatrixXd& raw, const Eigen::VectorXd& mean);

enum class Mode { Local, Encoded };

struct LinearFactorModel {
  Eigen::MatrixXd W;       // p x L
  Eigen::MatrixXd D;       // q x L
  Eigen::MatrixXd A;       // L x p, empty unless mode == Encoded
  Eigen::VectorXd eigenvalues;  // length L, descending
  Eigen::VectorXd x_mean;
  Eigen::VectorXd y_mean;
  double mu = 1.0;
  Mode mode = Mode::Local;

  Eigen::Index predictors() const { return W.rows(); }
  Eigen::Index outcomes() const { return D.rows(); }
  Eigen::Index factors() const { return W.cols(); }
};

struct EigenSolution {
  Eigen::VectorXd eigenvalues;   // descending
  Eigen::MatrixXd eigenvectors;  // (p+q) x L, unit columns, largest-|entry| positive
};

Eigen::MatrixXd build_local_system(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                   double mu);

// `ridge` is added to the diagonal of X X^T before inversion. With ridge == 0 a
// singular X X^T raises SingularSystem.
Eigen::MatrixXd build_encoded_system(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                     double mu, double ridge);

// Ridge used when X X^T is singular and the caller did not choose one.
double default_ridge(const Eigen::MatrixXd& X);

// Top-L eigenpairs of a block system produced by either builder. `p` is the
// predictor dimension (size of the unscaled leading block).
EigenSolution symmetric_eigensolve(const Eigen::MatrixXd& B, Eigen::Index p, double mu,
                                   Eigen::Index L);

// Largest-magnitude entry made positive (ties: first index).
void apply_sign_convention(Eigen::Ref<Eigen::VectorXd> v);

struct FitOptions {
  // Ridge for X X^T in encoded mode. nullopt: none unless X X^T is singular,
  // in which case default_ridge(X) is used.
  std::optional<double> ridge;
};

LinearFactorModel fit(const DataMatrix& X, const OutcomeMatrix& Y, Eigen::Index L, double mu,
                      Mode mode, const FitOptions& options = {});

// Scores from predictors alone. Local: least-squares projection
// (W^T W)^-1 W^T X. Encoded: A X.
Eigen::MatrixXd encode_scores(const LinearFactorModel& model, const Eigen::MatrixXd& X);

// Joint fixed-point scores (W^T W + mu D^T D)^-1 (W^T X + mu D^T Y). For an
// encoded model the encoder ignores Y, so this returns encode_scores(X).
Eigen::MatrixXd scores_with_outcome(const LinearFactorModel& model, const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& Y);

// W S + x_mean and D S + y_mean.
Eigen::MatrixXd reconstruct(const LinearFactorModel& model, const Eigen::MatrixXd& S);
Eigen::MatrixXd predict(const LinearFactorModel& model, const Eigen::MatrixXd& S);

struct ObjectiveTerms {
  double recon_loss = 0.0;        // ||X - W S||_F^2
  double supervision_loss = 0.0;  // ||Y - D S||_F^2
  double total(double mu) const { return recon_loss + mu * supervision_loss; }
};

// X and Y are centered (the model means are not applied).
ObjectiveTerms evaluate_objective(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const LinearFactorModel& model, const Eigen::MatrixXd& S);

// Value of the fitted objective at its own optimal scores: joint scores for
// Local, A X for Encoded.
ObjectiveTerms fitted_objective(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                const LinearFactorModel& model);

struct OracleOptions {
  std::size_t steps = 400000;
  // Step size. Non-positive picks 1 / (4 max(1, mu) sigma), sigma being the
  // top singular value of [X; sqrt(mu) Y] estimated by power iteration.
  double rate = 0.0;
  std::uint64_t seed = 0;
  // Stop early once the relative objective change over 100 steps is below this.
  double tolerance = 1e-13;
};

struct OracleResult {
  LinearFactorModel model;
  Eigen::MatrixXd scores;  // free S for Local; empty for Encoded
  double objective = 0.0;
  std::size_t steps_taken = 0;
};

// Full-batch gradient descent on the L2 objective from a random start.
// Independent of the eigen-solution; used to verify it.
OracleResult oracle_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, Eigen::Index L,
                        double mu, Mode mode, const OracleOptions& options = {});

// Gradients of ||X - W S||^2 + mu ||Y - D S||^2 (Local, S free) or of the same
// objective with S = A X (Encoded). Exposed for finite-difference checks.
struct LinearGradients {
  Eigen::MatrixXd dW, dD, dLatent;  // dLatent is dS (Local) or dA (Encoded)
  double objective = 0.0;
};

LinearGradients oracle_gradients(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double mu,
                                 Mode mode, const Eigen::MatrixXd& W, const Eigen::MatrixXd& D,
                                 const Eigen::MatrixXd& latent);

}  // namespace supfactor::linear
