#include "supfactor/supervised_nmf.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include "supfactor/error.hpp"
#include "supfactor/linalg.hpp"
#include "supfactor/rng.hpp"

namespace supfactor::nmf {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kTiny = std::numeric_limits<double>::min();

MatrixXd softplus_of(const MatrixXd& a) { return a.unaryExpr([](double v) { return softplus(v); }); }
MatrixXd sigmoid_of(const MatrixXd& a) { return a.unaryExpr([](double v) { return sigmoid(v); }); }

void check_nonnegative(const MatrixXd& X) {
  require(X.size() > 0, ErrorKind::InvalidData, "empty data matrix");
  require(X.allFinite(), ErrorKind::InvalidData, "data contains non-finite entries");
  require(X.minCoeff() >= 0.0, ErrorKind::InvalidData, "data must be non-negative");
}

void check_labels(const VectorXd& labels, Index n) {
  require(labels.size() == n, ErrorKind::ShapeError, "label count does not match observations");
  Index pos = 0;
  for (Index i = 0; i < n; ++i) {
    require(labels(i) == 0.0 || labels(i) == 1.0, ErrorKind::InvalidData,
            "labels must be 0 or 1");
    pos += labels(i) == 1.0;
  }
  require(pos > 0 && pos < n, ErrorKind::InvalidData, "both label classes must be present");
}

struct Forward {
  MatrixXd A1, H, A2, S;
};

Forward forward(const Encoder& e, const MatrixXd& X) {
  require(X.rows() == e.input_dim(), ErrorKind::ShapeError, "encoder input dimension mismatch");
  Forward f;
  f.A1 = (e.V1 * X).colwise() + e.b1;
  if (e.layout == EncoderLayout::Affine) {
    f.S = softplus_of(f.A1);
  } else {
    f.H = softplus_of(f.A1);
    f.A2 = (e.V2 * f.H).colwise() + e.b2;
    f.S = softplus_of(f.A2);
  }
  return f;
}

Encoder backward(const Encoder& e, const Forward& f, const MatrixXd& X, const MatrixXd& dS) {
  Encoder g = e.zeros_like();
  if (e.layout == EncoderLayout::Affine) {
    const MatrixXd dA1 = dS.cwiseProduct(sigmoid_of(f.A1));
    g.V1 = dA1 * X.transpose();
    g.b1 = dA1.rowwise().sum();
    return g;
  }
  const MatrixXd dA2 = dS.cwiseProduct(sigmoid_of(f.A2));
  g.V2 = dA2 * f.H.transpose();
  g.b2 = dA2.rowwise().sum();
  const MatrixXd dA1 = (e.V2.transpose() * dA2).cwiseProduct(sigmoid_of(f.A1));
  g.V1 = dA1 * X.transpose();
  g.b1 = dA1.rowwise().sum();
  return g;
}

// Chain rule through W = normalized_loadings(W_u), column by column.
MatrixXd loadings_backward(const MatrixXd& W_u, const MatrixXd& dW) {
  const double root_p = std::sqrt(static_cast<double>(W_u.rows()));
  MatrixXd out(W_u.rows(), W_u.cols());
  for (Index k = 0; k < W_u.cols(); ++k) {
    VectorXd e = (W_u.col(k).array() - W_u.col(k).maxCoeff()).exp();
    e /= e.sum();
    const double n = e.norm();
    const VectorXd g = dW.col(k);
    const VectorXd ge = root_p * (g / n - e * (e.dot(g) / (n * n * n)));
    out.col(k) = e.cwiseProduct(ge) - e * e.dot(ge);
  }
  return out;
}

struct Terms {
  double recon = 0.0, ce = 0.0, loss = 0.0;
  MatrixXd dW, dS;
  VectorXd dbeta;
  double dintercept = 0.0;
};

Terms batch_terms(const MatrixXd& W, const MatrixXd& S, const VectorXd& beta, double intercept,
                  const MatrixXd& X, const VectorXd& y, double mu, double l1) {
  const double inv_n = 1.0 / static_cast<double>(X.cols());
  const MatrixXd R = X - W * S;
  const VectorXd z = (S.transpose() * beta).array() + intercept;
  Terms t;
  t.recon = R.squaredNorm() * inv_n;
  VectorXd resid(z.size());
  for (Index i = 0; i < z.size(); ++i) {
    t.ce += logistic_loss(z(i), y(i));
    resid(i) = sigmoid(z(i)) - y(i);
  }
  t.ce *= inv_n;
  t.loss = t.recon + mu * t.ce + l1 * beta.lpNorm<1>();
  t.dW = -2.0 * inv_n * R * S.transpose();
  t.dS = -2.0 * inv_n * W.transpose() * R + (mu * inv_n) * beta * resid.transpose();
  t.dbeta = (mu * inv_n) * S * resid + l1 * beta.unaryExpr([](double b) {
    return static_cast<double>((b > 0.0) - (b < 0.0));
  });
  t.dintercept = mu * inv_n * resid.sum();
  return t;
}

// Gradient of mu * mean CE with respect to the scores only.
MatrixXd supervision_score_gradient(const MatrixXd& S, const VectorXd& beta, double intercept,
                                    const VectorXd& y, double mu) {
  const double inv_n = 1.0 / static_cast<double>(S.cols());
  VectorXd resid(S.cols());
  for (Index i = 0; i < S.cols(); ++i) resid(i) = sigmoid(S.col(i).dot(beta) + intercept) - y(i);
  return (mu * inv_n) * beta * resid.transpose();
}

Encoder init_encoder(const EncoderSpec& spec, Index p, Index K, const VectorXd& score_means,
                     Rng& rng) {
  Encoder e;
  e.layout = spec.layout;
  VectorXd bias(K);
  for (Index k = 0; k < K; ++k) bias(k) = softplus_inverse(std::max(score_means(k), 1e-3));
  if (spec.layout == EncoderLayout::Affine) {
    e.V1 = standard_normal(K, p, rng) * (0.1 / std::sqrt(static_cast<double>(p)));
    e.b1 = bias;
  } else {
    const Index h = spec.hidden_units;
    e.V1 = standard_normal(h, p, rng) / std::sqrt(static_cast<double>(p));
    e.b1 = VectorXd::Zero(h);
    e.V2 = standard_normal(K, h, rng) * (0.1 / std::sqrt(static_cast<double>(h)));
    e.b2 = bias;
  }
  return e;
}

struct EncoderOptimizer {
  Nadam V1, b1, V2, b2;

  EncoderOptimizer() = default;
  EncoderOptimizer(const OptimizerConfig& c, const Encoder& e)
      : V1(c, e.V1.rows(), e.V1.cols()), b1(c, e.b1.size(), 1) {
    if (e.layout == EncoderLayout::OneHidden) {
      V2 = Nadam(c, e.V2.rows(), e.V2.cols());
      b2 = Nadam(c, e.b2.size(), 1);
    }
  }

  void step(Encoder& e, const Encoder& g) {
    V1.step(e.V1, g.V1);
    b1.step(e.b1, g.b1);
    if (e.layout == EncoderLayout::OneHidden) {
      V2.step(e.V2, g.V2);
      b2.step(e.b2, g.b2);
    }
  }
};

MatrixXd gather_columns(const MatrixXd& m, const std::vector<Index>& idx) {
  MatrixXd out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = m.col(idx[j]);
  return out;
}

VectorXd gather(const VectorXd& v, const std::vector<Index>& idx) {
  VectorXd out(static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out(static_cast<Index>(j)) = v(idx[j]);
  return out;
}

// Warm start shared by all modes: unsupervised NMF, loadings renormalized to
// column norm sqrt(p) and scores rescaled to compensate.
void warm_start(const MatrixXd& X, const FitConfig& c, MatrixXd& W_u, MatrixXd& scores,
                std::vector<double>* trace) {
  NMFResult base = fit_unsupervised(X, c.K, c.warm_start_iterations, c.optimizer.seed);
  W_u = loadings_parameters(base.W);
  const MatrixXd W = normalized_loadings(W_u);
  scores = base.H;
  for (Index k = 0; k < c.K; ++k) {
    const double wn = base.W.col(k).norm();
    if (wn > 0.0) scores.row(k) *= wn / W.col(k).norm();
  }
  if (trace) {
    const double n = static_cast<double>(X.cols());
    for (double l : base.loss) trace->push_back(l / n);
  }
}

void check_finite_loss(double loss, std::size_t it) {
  if (!std::isfinite(loss))
    throw Error(ErrorKind::NumericalError,
                "non-finite training loss at iteration " + std::to_string(it));
}

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), 8); }

void write_block(std::ostream& out, const MatrixXd& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) write_f64(out, m(i, j));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(in), ErrorKind::Io, "truncated model file");
  return v;
}

MatrixXd read_block(std::istream& in) {
  const auto rows = read_raw<std::uint64_t>(in);
  const auto cols = read_raw<std::uint64_t>(in);
  require(rows < (1u << 24) && cols < (1u << 24), ErrorKind::Io, "implausible block size");
  MatrixXd m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = read_raw<double>(in);
  return m;
}

}  // namespace

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::Sequential: return "sequential";
    case Mode::Local: return "local";
    case Mode::Encoded: return "encoded";
  }
  return "unknown";
}

Encoder Encoder::zeros_like() const {
  Encoder z;
  z.layout = layout;
  z.V1 = MatrixXd::Zero(V1.rows(), V1.cols());
  z.b1 = VectorXd::Zero(b1.size());
  z.V2 = MatrixXd::Zero(V2.rows(), V2.cols());
  z.b2 = VectorXd::Zero(b2.size());
  return z;
}

MatrixXd encoder_forward(const Encoder& encoder, const MatrixXd& X) {
  return forward(encoder, X).S;
}

NMFResult fit_unsupervised(const MatrixXd& X, Index K, std::size_t iterations,
                           std::uint64_t seed) {
  check_nonnegative(X);
  require(K >= 1, ErrorKind::InvalidConfig, "K must be at least 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double scale = std::sqrt(std::max(X.mean(), 1e-12) / static_cast<double>(K));
  NMFResult r;
  r.W.resize(X.rows(), K);
  r.H.resize(K, X.cols());
  for (Index j = 0; j < K; ++j)
    for (Index i = 0; i < X.rows(); ++i) r.W(i, j) = scale * unif(rng);
  for (Index j = 0; j < X.cols(); ++j)
    for (Index i = 0; i < K; ++i) r.H(i, j) = scale * unif(rng);

  r.loss.reserve(iterations);
  for (std::size_t it = 0; it < iterations; ++it) {
    const MatrixXd WtX = r.W.transpose() * X;
    const MatrixXd WtWH = (r.W.transpose() * r.W) * r.H;
    r.H.array() *= WtX.array() / (WtWH.array() + kTiny);
    const MatrixXd XHt = X * r.H.transpose();
    const MatrixXd WHHt = r.W * (r.H * r.H.transpose());
    r.W.array() *= XHt.array() / (WHHt.array() + kTiny);
    r.loss.push_back((X - r.W * r.H).squaredNorm());
  }
  return r;
}

void validate(const FitConfig& c) {
  require(c.K >= 1, ErrorKind::InvalidConfig, "K must be at least 1");
  require(c.mu >= 0.0 && std::isfinite(c.mu), ErrorKind::InvalidConfig, "mu must be >= 0");
  require(c.l1_weight >= 0.0, ErrorKind::InvalidConfig, "l1_weight must be >= 0");
  require(c.encoder.layout == EncoderLayout::Affine || c.encoder.hidden_units >= 1,
          ErrorKind::InvalidConfig, "hidden_units must be at least 1");
  validate(c.optimizer);
}

Index SupervisedNMFModel::nonzero_coefficients() const {
  return static_cast<Index>((beta.array() != 0.0).count());
}

MatrixXd normalized_loadings(const MatrixXd& W_u) {
  const double root_p = std::sqrt(static_cast<double>(W_u.rows()));
  MatrixXd W(W_u.rows(), W_u.cols());
  for (Index k = 0; k < W_u.cols(); ++k) {
    VectorXd e = (W_u.col(k).array() - W_u.col(k).maxCoeff()).exp();
    W.col(k) = e * (root_p / e.norm());
  }
  return W;
}

MatrixXd loadings_parameters(const MatrixXd& W) {
  MatrixXd W_u(W.rows(), W.cols());
  for (Index k = 0; k < W.cols(); ++k) {
    const double top = W.col(k).maxCoeff();
    const double floor = top > 0.0 ? 1e-12 * top : 1.0;
    W_u.col(k) = W.col(k).unaryExpr([floor](double w) { return std::log(std::max(w, floor)); });
  }
  return W_u;
}

VectorXd nnls(const MatrixXd& A, const VectorXd& b) {
  require(A.rows() == b.size(), ErrorKind::ShapeError, "nnls dimension mismatch");
  const Index n = A.cols();
  const MatrixXd AtA = A.transpose() * A;
  const VectorXd Atb = A.transpose() * b;
  const double tol = 1e-12 * std::max(1.0, AtA.diagonal().maxCoeff()) * std::max(1.0, b.norm());
  VectorXd x = VectorXd::Zero(n);
  std::vector<bool> passive(static_cast<std::size_t>(n), false);

  auto solve_passive = [&](VectorXd& z) {
    std::vector<Index> idx;
    for (Index i = 0; i < n; ++i)
      if (passive[static_cast<std::size_t>(i)]) idx.push_back(i);
    const Index m = static_cast<Index>(idx.size());
    MatrixXd sub(m, m);
    VectorXd rhs(m);
    for (Index i = 0; i < m; ++i) {
      rhs(i) = Atb(idx[i]);
      for (Index j = 0; j < m; ++j) sub(i, j) = AtA(idx[i], idx[j]);
    }
    const VectorXd sol = sub.ldlt().solve(rhs);
    z.setZero();
    for (Index i = 0; i < m; ++i) z(idx[i]) = sol(i);
  };

  for (Index outer = 0; outer < 3 * n + 10; ++outer) {
    const VectorXd w = Atb - AtA * x;
    Index best = -1;
    double best_w = tol;
    for (Index i = 0; i < n; ++i)
      if (!passive[static_cast<std::size_t>(i)] && w(i) > best_w) {
        best_w = w(i);
        best = i;
      }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;
    VectorXd z(n);
    for (Index inner = 0; inner < 3 * n + 10; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (Index i = 0; i < n; ++i)
        if (passive[static_cast<std::size_t>(i)] && z(i) <= 0.0) feasible = false;
      if (feasible) break;
      double alpha = 1.0;
      for (Index i = 0; i < n; ++i)
        if (passive[static_cast<std::size_t>(i)] && z(i) <= 0.0)
          alpha = std::min(alpha, x(i) / (x(i) - z(i)));
      x += alpha * (z - x);
      for (Index i = 0; i < n; ++i)
        if (passive[static_cast<std::size_t>(i)] && x(i) <= tol) {
          passive[static_cast<std::size_t>(i)] = false;
          x(i) = 0.0;
        }
    }
    x = z;
  }
  return x.cwiseMax(0.0);
}

MatrixXd encode(const SupervisedNMFModel& model, const MatrixXd& X) {
  require(X.rows() == model.predictors(), ErrorKind::ShapeError,
          "input dimension does not match the model");
  if (model.mode == Mode::Encoded) return encoder_forward(model.encoder, X);
  MatrixXd S(model.components(), X.cols());
  for (Index j = 0; j < X.cols(); ++j) S.col(j) = nnls(model.W, X.col(j));
  return S;
}

VectorXd predict_proba_from_scores(const VectorXd& beta, double intercept, const MatrixXd& S) {
  require(S.rows() == beta.size(), ErrorKind::ShapeError, "score dimension mismatch");
  VectorXd z = (S.transpose() * beta).array() + intercept;
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

VectorXd predict_proba(const SupervisedNMFModel& model, const MatrixXd& X) {
  return predict_proba_from_scores(model.beta, model.intercept, encode(model, X));
}

double auc(const VectorXd& scores, const VectorXd& labels) {
  require(scores.size() == labels.size(), ErrorKind::ShapeError, "auc size mismatch");
  const Index n = scores.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return scores(a) < scores(b); });
  // Mid-ranks: tied scores share the average of their positions.
  double pos_rank_sum = 0.0;
  Index n_pos = 0;
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j + 1 < n && scores(order[static_cast<std::size_t>(j + 1)]) ==
                            scores(order[static_cast<std::size_t>(i)]))
      ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index k = i; k <= j; ++k)
      if (labels(order[static_cast<std::size_t>(k)]) == 1.0) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    i = j + 1;
  }
  const Index n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::Undefined, "auc needs both classes");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

LogisticFit fit_l1_logistic(const MatrixXd& S, const VectorXd& labels, double l1_weight,
                            std::size_t iterations) {
  check_labels(labels, S.cols());
  require(l1_weight >= 0.0, ErrorKind::InvalidConfig, "l1_weight must be >= 0");
  const Index K = S.rows();
  const double n = static_cast<double>(S.cols());
  MatrixXd aug(K + 1, S.cols());
  aug.topRows(K) = S;
  aug.row(K).setOnes();
  const double lipschitz =
      0.25 * Eigen::SelfAdjointEigenSolver<MatrixXd>(aug * aug.transpose() / n,
                                                     Eigen::EigenvaluesOnly)
                 .eigenvalues()
                 .maxCoeff();
  const double step = 1.0 / std::max(lipschitz, 1e-12);

  auto objective = [&](const VectorXd& th) {
    const VectorXd z = aug.transpose() * th;
    double f = 0.0;
    for (Index i = 0; i < z.size(); ++i) f += logistic_loss(z(i), labels(i));
    return f / n + l1_weight * th.head(K).lpNorm<1>();
  };
  auto gradient = [&](const VectorXd& th) {
    const VectorXd z = aug.transpose() * th;
    VectorXd r(z.size());
    for (Index i = 0; i < z.size(); ++i) r(i) = sigmoid(z(i)) - labels(i);
    return VectorXd(aug * r / n);
  };
  auto prox = [&](VectorXd th) {
    const double t = step * l1_weight;
    for (Index k = 0; k < K; ++k)
      th(k) = th(k) > t ? th(k) - t : (th(k) < -t ? th(k) + t : 0.0);
    return th;
  };

  VectorXd theta = VectorXd::Zero(K + 1), prev = theta, look = theta;
  double momentum = 1.0, f_prev = objective(theta);
  for (std::size_t it = 0; it < iterations; ++it) {
    VectorXd next = prox(look - step * gradient(look));
    const double f_next = objective(next);
    if (f_next > f_prev) {
      // Restart momentum from the last iterate.
      momentum = 1.0;
      next = prox(theta - step * gradient(theta));
    }
    const double m_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    prev = theta;
    theta = next;
    look = theta + ((momentum - 1.0) / m_next) * (theta - prev);
    momentum = m_next;
    f_prev = objective(theta);
  }
  LogisticFit out;
  out.beta = theta.head(K);
  out.intercept = theta(K);
  return out;
}

EncodedGradients encoded_loss_gradients(const MatrixXd& W_u, const Encoder& encoder,
                                        const VectorXd& beta, double intercept,
                                        const MatrixXd& X, const VectorXd& labels, double mu,
                                        double l1_weight) {
  require(X.rows() == W_u.rows() && encoder.output_dim() == W_u.cols() &&
              beta.size() == W_u.cols() && labels.size() == X.cols(),
          ErrorKind::ShapeError, "encoded loss dimension mismatch");
  const MatrixXd W = normalized_loadings(W_u);
  const Forward f = forward(encoder, X);
  const Terms t = batch_terms(W, f.S, beta, intercept, X, labels, mu, l1_weight);
  EncodedGradients g;
  g.loss = t.loss;
  g.recon = t.recon;
  g.supervision = t.ce;
  g.dW_u = loadings_backward(W_u, t.dW);
  g.dEncoder = backward(encoder, f, X, t.dS);
  g.dbeta = t.dbeta;
  g.dintercept = t.dintercept;
  return g;
}

SupervisedNMFModel fit(const MatrixXd& X, const VectorXd& labels, const FitConfig& c) {
  validate(c);
  check_nonnegative(X);
  check_labels(labels, X.cols());
  const Index p = X.rows(), N = X.cols(), K = c.K;

  SupervisedNMFModel m;
  m.mu = c.mu;
  m.mode = c.mode;
  MatrixXd scores;
  warm_start(X, c, m.W_u, scores, c.mode == Mode::Sequential ? &m.loss_trace : nullptr);
  m.W = normalized_loadings(m.W_u);

  if (c.mode == Mode::Sequential) {
    m.scores = scores;
    const LogisticFit head = fit_l1_logistic(scores, labels, c.l1_weight, c.head_iterations);
    m.beta = head.beta;
    m.intercept = head.intercept;
    return m;
  }

  const OptimizerConfig& oc = c.optimizer;
  Rng rng(mix64(oc.seed ^ 0x5eedULL));
  m.beta = VectorXd::Zero(K);
  m.intercept = 0.0;
  Eigen::Matrix<double, 1, 1> b;
  b(0, 0) = 0.0;

  Nadam opt_W(oc, p, K), opt_beta(oc, K, 1), opt_b(oc, 1, 1);
  Nadam opt_scores;
  EncoderOptimizer opt_enc, opt_enc_sup;
  if (c.mode == Mode::Local) {
    m.scores = scores.cwiseMax(0.0);
    opt_scores = Nadam(oc, K, N);
  } else {
    m.encoder = init_encoder(c.encoder, p, K, scores.rowwise().mean(), rng);
    opt_enc = EncoderOptimizer(oc, m.encoder);
    opt_enc_sup = EncoderOptimizer(oc, m.encoder);
  }

  const Index B = std::min<Index>(oc.batch_size, N);
  std::vector<Index> idx(static_cast<std::size_t>(B));
  double block_sum = 0.0;
  std::size_t block_count = 0;
  for (std::size_t it = 0; it < oc.iterations; ++it) {
    for (Index j = 0; j < B; ++j)
      idx[static_cast<std::size_t>(j)] = static_cast<Index>(counter_index(
          oc.seed, static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(B) +
                       static_cast<std::uint64_t>(j),
          static_cast<std::size_t>(N)));
    const MatrixXd Xb = gather_columns(X, idx);
    const VectorXd yb = gather(labels, idx);

    double loss = 0.0;
    if (c.mode == Mode::Local) {
      const MatrixXd Sb = gather_columns(m.scores, idx);
      const Terms t = batch_terms(m.W, Sb, m.beta, m.intercept, Xb, yb, c.mu, c.l1_weight);
      loss = t.loss;
      check_finite_loss(loss, it);
      opt_W.step(m.W_u, loadings_backward(m.W_u, t.dW));
      opt_beta.step(m.beta, t.dbeta);
      b(0, 0) = m.intercept;
      opt_b.step(b, Eigen::Matrix<double, 1, 1>::Constant(t.dintercept));
      m.intercept = b(0, 0);
      // Repeated draws of the same column in one batch contribute one step
      // with the summed gradient.
      std::vector<Index> seen;
      for (Index j = 0; j < B; ++j) {
        const Index col = idx[static_cast<std::size_t>(j)];
        if (std::find(seen.begin(), seen.end(), col) != seen.end()) continue;
        seen.push_back(col);
        VectorXd g = VectorXd::Zero(K);
        for (Index jj = j; jj < B; ++jj)
          if (idx[static_cast<std::size_t>(jj)] == col) g += t.dS.col(jj);
        opt_scores.step_column(m.scores, col, g);
        m.scores.col(col) = m.scores.col(col).cwiseMax(0.0);
      }
    } else {
      const EncodedGradients g =
          encoded_loss_gradients(m.W_u, m.encoder, m.beta, m.intercept, Xb, yb, c.mu,
                                 c.l1_weight);
      loss = g.loss;
      check_finite_loss(loss, it);
      opt_W.step(m.W_u, g.dW_u);
      opt_enc.step(m.encoder, g.dEncoder);
      opt_beta.step(m.beta, g.dbeta);
      b(0, 0) = m.intercept;
      opt_b.step(b, Eigen::Matrix<double, 1, 1>::Constant(g.dintercept));
      m.intercept = b(0, 0);
      // Extra encoder-only step on the supervision term.
      if (c.mu > 0.0) {
        const Forward f = forward(m.encoder, Xb);
        const MatrixXd dS = supervision_score_gradient(f.S, m.beta, m.intercept, yb, c.mu);
        opt_enc_sup.step(m.encoder, backward(m.encoder, f, Xb, dS));
      }
    }
    m.W = normalized_loadings(m.W_u);

    block_sum += loss;
    if (++block_count == 100 || it + 1 == oc.iterations) {
      m.loss_trace.push_back(block_sum / static_cast<double>(block_count));
      block_sum = 0.0;
      block_count = 0;
    }
  }
  if (c.mode == Mode::Encoded) m.scores.resize(0, 0);
  return m;
}

void save(const SupervisedNMFModel& m, std::ostream& out) {
  out.write("SNMF", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<std::uint32_t>(m.mode));
  write_u32(out, static_cast<std::uint32_t>(m.encoder.layout));
  write_u64(out, static_cast<std::uint64_t>(m.predictors()));
  write_u64(out, static_cast<std::uint64_t>(m.components()));
  write_u64(out, static_cast<std::uint64_t>(m.encoder.V1.rows()));
  write_f64(out, m.mu);
  write_f64(out, m.intercept);
  write_block(out, m.W_u);
  write_block(out, m.encoder.V1);
  write_block(out, m.encoder.b1);
  write_block(out, m.encoder.V2);
  write_block(out, m.encoder.b2);
  write_block(out, m.beta);
  require(static_cast<bool>(out), ErrorKind::Io, "failed writing model");
}

SupervisedNMFModel load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, "SNMF", 4) == 0, ErrorKind::Io,
          "not a supervised NMF model file");
  require(read_raw<std::uint32_t>(in) == 1, ErrorKind::Io, "unsupported model version");
  SupervisedNMFModel m;
  const auto mode = read_raw<std::uint32_t>(in);
  const auto layout = read_raw<std::uint32_t>(in);
  require(mode <= 2 && layout <= 1, ErrorKind::Io, "corrupt model header");
  m.mode = static_cast<Mode>(mode);
  m.encoder.layout = static_cast<EncoderLayout>(layout);
  const auto p = read_raw<std::uint64_t>(in);
  const auto K = read_raw<std::uint64_t>(in);
  read_raw<std::uint64_t>(in);
  m.mu = read_raw<double>(in);
  m.intercept = read_raw<double>(in);
  m.W_u = read_block(in);
  m.encoder.V1 = read_block(in);
  m.encoder.b1 = read_block(in);
  m.encoder.V2 = read_block(in);
  m.encoder.b2 = read_block(in);
  m.beta = read_block(in);
  require(static_cast<std::uint64_t>(m.W_u.rows()) == p &&
              static_cast<std::uint64_t>(m.W_u.cols()) == K &&
              static_cast<std::uint64_t>(m.beta.size()) == K,
          ErrorKind::Io, "model blocks do not match header");
  m.W = normalized_loadings(m.W_u);
  return m;
}

void save(const SupervisedNMFModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path);
  save(model, out);
}

SupervisedNMFModel load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path);
  return load(in);
}

}  // namespace supfactor::nmf
