#include "supfactor/linear_supfm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "supfactor/error.hpp"
#include "supfactor/rng.hpp"

namespace supfactor::linear {

namespace {

void check_pair(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  require(X.rows() >= 1 && Y.rows() >= 1 && X.cols() >= 1, ErrorKind::ShapeError,
          "empty data matrix");
  require(X.cols() == Y.cols(), ErrorKind::ShapeError,
          "X has " + std::to_string(X.cols()) + " observations, Y has " +
              std::to_string(Y.cols()));
}

// Symmetric positive semidefinite matrix counted as singular when its
// condition number exceeds 1e12.
bool is_singular(const Eigen::MatrixXd& gram) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
  const double hi = es.eigenvalues().maxCoeff();
  const double lo = es.eigenvalues().minCoeff();
  return !(hi > 0.0) || lo <= 1e-12 * hi;
}

// Solves gram * out = rhs for a symmetric positive definite gram.
Eigen::MatrixXd spd_solve(const Eigen::MatrixXd& gram, const Eigen::MatrixXd& rhs,
                          const char* what) {
  if (is_singular(gram)) throw Error(ErrorKind::SingularSystem, what);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  return ldlt.solve(rhs);
}

double resolve_ridge(const Eigen::MatrixXd& X, const std::optional<double>& requested) {
  if (requested) {
    require(*requested >= 0.0, ErrorKind::InvalidConfig, "ridge must be non-negative");
    return *requested;
  }
  const Eigen::MatrixXd gram = X * X.transpose();
  return is_singular(gram) ? default_ridge(X) : 0.0;
}

}  // namespace

CenteredMatrix CenteredMatrix::as_is(Eigen::MatrixXd m) {
  CenteredMatrix out;
  out.mean = Eigen::VectorXd::Zero(m.rows());
  out.values = std::move(m);
  return out;
}

CenteredMatrix center(const Eigen::MatrixXd& raw) {
  require(raw.rows() >= 1, ErrorKind::InvalidData, "matrix has no rows");
  require(raw.cols() >= 2, ErrorKind::InvalidData, "centering needs at least 2 observations");
  require(raw.allFinite(), ErrorKind::InvalidData, "matrix contains non-finite entries");
  CenteredMatrix out;
  out.mean = raw.rowwise().mean();
  out.values = raw.colwise() - out.mean;
  return out;
}

CenteredMatrix center_with(const Eigen::MatrixXd& raw, const Eigen::VectorXd& mean) {
  require(raw.rows() == mean.size(), ErrorKind::ShapeError, "mean length does not match rows");
  require(raw.allFinite(), ErrorKind::InvalidData, "matrix contains non-finite entries");
  CenteredMatrix out;
  out.mean = mean;
  out.values = raw.colwise() - mean;
  return out;
}

Eigen::MatrixXd build_local_system(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                   double mu) {
  check_pair(X, Y);
  require(mu >= 0.0, ErrorKind::InvalidConfig, "mu must be non-negative");
  const Eigen::Index p = X.rows();
  const Eigen::Index q = Y.rows();
  const Eigen::MatrixXd xy = X * Y.transpose();
  Eigen::MatrixXd B(p + q, p + q);
  B.topLeftCorner(p, p) = X * X.transpose();
  B.topRightCorner(p, q) = mu * xy;
  B.bottomLeftCorner(q, p) = xy.transpose();
  B.bottomRightCorner(q, q) = mu * (Y * Y.transpose());
  return B;
}

double default_ridge(const Eigen::MatrixXd& X) {
  const double trace = X.squaredNorm();
  const double ridge = 1e-8 * trace / static_cast<double>(X.rows());
  return ridge > 0.0 ? ridge : 1e-8;
}

Eigen::MatrixXd build_encoded_system(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                     double mu, double ridge) {
  check_pair(X, Y);
  require(mu >= 0.0, ErrorKind::InvalidConfig, "mu must be non-negative");
  require(ridge >= 0.0, ErrorKind::InvalidConfig, "ridge must be non-negative");
  const Eigen::Index p = X.rows();
  const Eigen::Index q = Y.rows();

  Eigen::MatrixXd gram = X * X.transpose();
  gram.diagonal().array() += ridge;
  if (ridge == 0.0 && is_singular(gram))
    throw Error(ErrorKind::SingularSystem, "X X^T is singular; supply a ridge");

  const Eigen::MatrixXd xy = X * Y.transpose();  // p x q
  // Y P_X Y^T = (Y X^T)(X X^T)^-1 (X Y^T), formed without the N x N projector.
  Eigen::MatrixXd projected = xy.transpose() * gram.ldlt().solve(xy);
  projected = 0.5 * (projected + projected.transpose());

  Eigen::MatrixXd B(p + q, p + q);
  B.topLeftCorner(p, p) = X * X.transpose();
  B.topRightCorner(p, q) = mu * xy;
  B.bottomLeftCorner(q, p) = xy.transpose();
  B.bottomRightCorner(q, q) = mu * projected;
  return B;
}

void apply_sign_convention(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v(i)) > best) {
      best = std::abs(v(i));
      arg = i;
    }
  }
  if (v.size() > 0 && v(arg) < 0.0) v = -v;
}

EigenSolution symmetric_eigensolve(const Eigen::MatrixXd& B, Eigen::Index p, double mu,
                                   Eigen::Index L) {
  require(B.rows() == B.cols(), ErrorKind::ShapeError, "block system must be square");
  const Eigen::Index n = B.rows();
  require(p >= 1 && p <= n, ErrorKind::ShapeError, "predictor block size out of range");
  require(L >= 1 && L <= n, ErrorKind::ShapeError,
          "requested " + std::to_string(L) + " eigenpairs from a " + std::to_string(n) +
              "-dimensional system");
  require(mu > 0.0 && std::isfinite(mu), ErrorKind::InvalidConfig, "mu must be positive");
  const Eigen::Index q = n - p;
  const double root = std::sqrt(mu);

  // T B T^-1: outcome rows scale by sqrt(mu), outcome columns by 1/sqrt(mu).
  Eigen::MatrixXd sym = B;
  sym.bottomRows(q) *= root;
  sym.rightCols(q) /= root;
  sym = 0.5 * (sym + sym.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  require(es.info() == Eigen::Success, ErrorKind::NumericalError, "eigensolver failed");

  // Descending by value; equal values keep their solver order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::VectorXd& values = es.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });

  EigenSolution out;
  out.eigenvalues.resize(L);
  out.eigenvectors.resize(n, L);
  for (Eigen::Index l = 0; l < L; ++l) {
    const Eigen::Index src = order[static_cast<std::size_t>(l)];
    out.eigenvalues(l) = values(src);
    Eigen::VectorXd v = es.eigenvectors().col(src);
    v.tail(q) /= root;
    v.normalize();
    apply_sign_convention(v);
    out.eigenvectors.col(l) = v;
  }
  return out;
}

LinearFactorModel fit(const DataMatrix& X, const OutcomeMatrix& Y, Eigen::Index L, double mu,
                      Mode mode, const FitOptions& options) {
  check_pair(X.values, Y.values);
  const Eigen::Index p = X.values.rows();
  const Eigen::Index q = Y.values.rows();
  const Eigen::Index N = X.values.cols();
  require(L >= 1 && L <= std::min(p + q, N), ErrorKind::ShapeError,
          "factor count must lie in [1, min(p+q, N)]");

  double ridge = 0.0;
  Eigen::MatrixXd B;
  if (mode == Mode::Local) {
    B = build_local_system(X.values, Y.values, mu);
  } else {
    ridge = resolve_ridge(X.values, options.ridge);
    B = build_encoded_system(X.values, Y.values, mu, ridge);
  }
  const EigenSolution sol = symmetric_eigensolve(B, p, mu, L);

  LinearFactorModel model;
  model.W = sol.eigenvectors.topRows(p);
  model.D = sol.eigenvectors.bottomRows(q);
  model.eigenvalues = sol.eigenvalues;
  model.x_mean = X.mean;
  model.y_mean = Y.mean;
  model.mu = mu;
  model.mode = mode;

  if (mode == Mode::Encoded) {
    // A = (W^T W + mu D^T D)^-1 (W^T X + mu D^T Y) X^T (X X^T)^-1
    const Eigen::MatrixXd normal =
        model.W.transpose() * model.W + mu * model.D.transpose() * model.D;
    const Eigen::MatrixXd target =
        model.W.transpose() * X.values + mu * model.D.transpose() * Y.values;  // L x N
    Eigen::MatrixXd gram = X.values * X.values.transpose();
    gram.diagonal().array() += ridge;
    const Eigen::MatrixXd right =
        gram.ldlt().solve(X.values * target.transpose()).transpose();  // L x p
    model.A = spd_solve(normal, right, "W^T W + mu D^T D is singular");
  }
  return model;
}

Eigen::MatrixXd encode_scores(const LinearFactorModel& model, const Eigen::MatrixXd& X) {
  require(X.rows() == model.predictors(), ErrorKind::ShapeError,
          "data has " + std::to_string(X.rows()) + " rows, model expects " +
              std::to_string(model.predictors()));
  if (model.mode == Mode::Encoded) return model.A * X;
  return spd_solve(model.W.transpose() * model.W, model.W.transpose() * X,
                   "W^T W is singular");
}

Eigen::MatrixXd scores_with_outcome(const LinearFactorModel& model, const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& Y) {
  require(X.rows() == model.predictors() && Y.rows() == model.outcomes() && X.cols() == Y.cols(),
          ErrorKind::ShapeError, "data shapes do not match the model");
  if (model.mode == Mode::Encoded) return encode_scores(model, X);
  const Eigen::MatrixXd normal =
      model.W.transpose() * model.W + model.mu * model.D.transpose() * model.D;
  const Eigen::MatrixXd rhs = model.W.transpose() * X + model.mu * model.D.transpose() * Y;
  return spd_solve(normal, rhs, "W^T W + mu D^T D is singular");
}

Eigen::MatrixXd reconstruct(const LinearFactorModel& model, const Eigen::MatrixXd& S) {
  require(S.rows() == model.factors(), ErrorKind::ShapeError, "score rows must equal L");
  Eigen::MatrixXd out = model.W * S;
  if (model.x_mean.size() == out.rows()) out.colwise() += model.x_mean;
  return out;
}

Eigen::MatrixXd predict(const LinearFactorModel& model, const Eigen::MatrixXd& S) {
  require(S.rows() == model.factors(), ErrorKind::ShapeError, "score rows must equal L");
  Eigen::MatrixXd out = model.D * S;
  if (model.y_mean.size() == out.rows()) out.colwise() += model.y_mean;
  return out;
}

ObjectiveTerms evaluate_objective(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const LinearFactorModel& model, const Eigen::MatrixXd& S) {
  require(X.rows() == model.predictors() && Y.rows() == model.outcomes(), ErrorKind::ShapeError,
          "data shapes do not match the model");
  require(S.rows() == model.factors() && S.cols() == X.cols() && Y.cols() == X.cols(),
          ErrorKind::ShapeError, "score shape does not match the data");
  return {(X - model.W * S).squaredNorm(), (Y - model.D * S).squaredNorm()};
}

ObjectiveTerms fitted_objective(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                const LinearFactorModel& model) {
  return evaluate_objective(X, Y, model, scores_with_outcome(model, X, Y));
}

namespace {

// Second moments of the data; the encoded objective depends on X and Y only
// through these, so encoded descent steps cost O(p^2 L) regardless of N.
struct Moments {
  Eigen::MatrixXd xx;  // X X^T
  Eigen::MatrixXd yx;  // Y X^T
  double x_energy = 0.0;
  double y_energy = 0.0;

  Moments(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y)
      : xx(X * X.transpose()), yx(Y * X.transpose()),
        x_energy(X.squaredNorm()), y_energy(Y.squaredNorm()) {}
};

LinearGradients encoded_gradients(const Moments& m, double mu, const Eigen::MatrixXd& W,
                                  const Eigen::MatrixXd& D, const Eigen::MatrixXd& A) {
  const Eigen::MatrixXd xs = m.xx * A.transpose();  // X S^T, p x L
  const Eigen::MatrixXd ys = m.yx * A.transpose();  // Y S^T, q x L
  const Eigen::MatrixXd ss = A * xs;                // S S^T, L x L
  const Eigen::MatrixXd wtw = W.transpose() * W;
  const Eigen::MatrixXd dtd = D.transpose() * D;
  LinearGradients g;
  g.objective = m.x_energy - 2.0 * (W.transpose() * xs).trace() + (wtw * ss).trace() +
                mu * (m.y_energy - 2.0 * (D.transpose() * ys).trace() + (dtd * ss).trace());
  g.dW = 2.0 * (W * ss - xs);
  g.dD = 2.0 * mu * (D * ss - ys);
  g.dLatent = 2.0 * ((wtw + mu * dtd) * A * m.xx - W.transpose() * m.xx - mu * D.transpose() * m.yx);
  return g;
}

LinearGradients local_gradients(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double mu,
                                const Eigen::MatrixXd& W, const Eigen::MatrixXd& D,
                                const Eigen::MatrixXd& S) {
  const Eigen::MatrixXd rx = W * S - X;
  const Eigen::MatrixXd ry = D * S - Y;
  LinearGradients g;
  g.objective = rx.squaredNorm() + mu * ry.squaredNorm();
  g.dW = 2.0 * rx * S.transpose();
  g.dD = 2.0 * mu * ry * S.transpose();
  g.dLatent = 2.0 * (W.transpose() * rx + mu * D.transpose() * ry);
  return g;
}

}  // namespace

LinearGradients oracle_gradients(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double mu,
                                 Mode mode, const Eigen::MatrixXd& W, const Eigen::MatrixXd& D,
                                 const Eigen::MatrixXd& latent) {
  if (mode == Mode::Local) return local_gradients(X, Y, mu, W, D, latent);
  return encoded_gradients(Moments(X, Y), mu, W, D, latent);
}

namespace {

// Spectral radius of [X; sqrt(mu) Y][X; sqrt(mu) Y]^T by power iteration.
double stacked_spectral_radius(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double mu,
                               Rng& rng) {
  const double root = std::sqrt(mu);
  Eigen::VectorXd v = standard_normal(X.rows() + Y.rows(), 1, rng);
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    v.normalize();
    const Eigen::VectorXd t = X.transpose() * v.head(X.rows()) +
                              root * (Y.transpose() * v.tail(Y.rows()));
    Eigen::VectorXd next(v.size());
    next.head(X.rows()) = X * t;
    next.tail(Y.rows()) = root * (Y * t);
    const double estimate = v.dot(next);
    v = next;
    if (it > 10 && std::abs(estimate - lambda) <= 1e-10 * std::abs(estimate)) {
      lambda = estimate;
      break;
    }
    lambda = estimate;
  }
  return lambda;
}

}  // namespace

OracleResult oracle_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, Eigen::Index L,
                        double mu, Mode mode, const OracleOptions& options) {
  check_pair(X, Y);
  require(mu > 0.0, ErrorKind::InvalidConfig, "mu must be positive");
  const Eigen::Index p = X.rows();
  const Eigen::Index q = Y.rows();
  const Eigen::Index N = X.cols();
  require(L >= 1 && L <= std::min(p + q, N), ErrorKind::ShapeError, "factor count out of range");

  Rng rng(options.seed);
  const double lambda = stacked_spectral_radius(X, Y, mu, rng);
  require(lambda > 0.0, ErrorKind::InvalidData, "data has zero energy");
  const double sigma = std::sqrt(lambda);

  // Balanced start: loading columns and score rows both of norm ~ sigma^(1/2).
  Eigen::MatrixXd W = standard_normal(p, L, rng) * std::sqrt(sigma / static_cast<double>(p + q));
  Eigen::MatrixXd D = standard_normal(q, L, rng) * std::sqrt(sigma / static_cast<double>(p + q));
  Eigen::MatrixXd latent;
  if (mode == Mode::Local) {
    latent = standard_normal(L, N, rng) * std::sqrt(sigma / static_cast<double>(N));
  } else {
    latent = standard_normal(L, p, rng) * (std::sqrt(sigma / static_cast<double>(p)) / sigma);
  }

  // Curvature of the loading blocks is ~2 sigma (times mu for D); the encoder
  // block sees an extra factor of lambda from X X^T.
  const double curvature = 2.0 * std::max(1.0, mu) * sigma;
  const double rate = options.rate > 0.0 ? options.rate : 0.5 / curvature;
  const double latent_rate = mode == Mode::Local ? rate : rate / lambda;

  double previous = std::numeric_limits<double>::infinity();
  double checkpoint = std::numeric_limits<double>::infinity();
  std::size_t increases = 0;
  std::size_t step = 0;
  double objective = 0.0;
  const Moments moments(X, Y);
  for (; step < options.steps; ++step) {
    const LinearGradients g = mode == Mode::Local ? local_gradients(X, Y, mu, W, D, latent)
                                                  : encoded_gradients(moments, mu, W, D, latent);
    objective = g.objective;
    if (!std::isfinite(objective))
      throw Error(ErrorKind::OracleDiverged, "non-finite objective at step " + std::to_string(step));
    increases = objective > previous ? increases + 1 : 0;
    if (increases >= 100)
      throw Error(ErrorKind::OracleDiverged,
                  "objective increased for 100 consecutive steps at step " + std::to_string(step));
    previous = objective;
    if (step % 100 == 0) {
      if (std::abs(checkpoint - objective) <= options.tolerance * std::abs(objective)) break;
      checkpoint = objective;
    }
    W -= rate * g.dW;
    D -= rate * g.dD;
    latent -= latent_rate * g.dLatent;
  }

  OracleResult result;
  result.steps_taken = step;
  result.objective = objective;
  LinearFactorModel& model = result.model;
  model.mu = mu;
  model.mode = mode;
  model.x_mean = Eigen::VectorXd::Zero(p);
  model.y_mean = Eigen::VectorXd::Zero(q);
  model.W.resize(p, L);
  model.D.resize(q, L);
  for (Eigen::Index l = 0; l < L; ++l) {
    Eigen::VectorXd v(p + q);
    v << W.col(l), D.col(l);
    double norm = v.norm();
    require(norm > 0.0, ErrorKind::OracleDiverged, "collapsed loading column");
    v /= norm;
    // Keep the product W S unchanged under the sign flip as well.
    Eigen::VectorXd signed_v = v;
    apply_sign_convention(signed_v);
    if (signed_v.dot(v) < 0.0) norm = -norm;
    v = signed_v;
    model.W.col(l) = v.head(p);
    model.D.col(l) = v.tail(q);
    latent.row(l) *= norm;
  }
  if (mode == Mode::Local) {
    result.scores = latent;
  } else {
    model.A = latent;
  }
  return result;
}

}  // namespace supfactor::linear
