#include "supfactor/csm_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "supfactor/error.hpp"
#include "supfactor/linalg.hpp"

namespace supfactor::csm {

namespace {

using Eigen::Index;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using cplx = std::complex<double>;

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Kernel values k_q(t_n - t_m) for all time pairs.
MatrixXcd lag_table(const SpectralGaussian& sg, const VectorXd& t) {
  const Index N = t.size();
  MatrixXcd k(N, N);
  for (Index n = 0; n < N; ++n)
    for (Index m = 0; m < N; ++m) k(n, m) = spectral_gaussian_eval(sg, t(n) - t(m));
  return k;
}

// The inverse and the data term a = Sigma^-1 y from one factorization.
struct Solved {
  MatrixXd inv;
  VectorXd alpha;
  double nll = 0.0;
};

Solved solve_window(const MatrixXd& sigma, const VectorXd& y) {
  const Factorization f = factorize(sigma);
  Solved s;
  s.alpha = f.llt.solve(y);
  s.inv = f.llt.solve(MatrixXd::Identity(sigma.rows(), sigma.cols()));
  const double logdet = 2.0 * f.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  s.nll = 0.5 * (y.dot(s.alpha) + logdet + static_cast<double>(y.size()) * std::log(kTwoPi));
  return s;
}

// dNLL/dSigma = 0.5 (Sigma^-1 - a a^T).
MatrixXd nll_sigma_gradient(const Solved& s) {
  return 0.5 * (s.inv - s.alpha * s.alpha.transpose());
}

void check_samples(const MatrixXd& samples, Index nc) {
  require(samples.size() == nc, ErrorKind::ShapeError,
          "window shape does not match the covariance");
  require(samples.allFinite(), ErrorKind::InvalidData, "window contains non-finite samples");
}

// Flat parameter vector for the kernels and noise:
// per factor, per component: log centre, log bandwidth, Re Bt (col-major),
// Im Bt; then log eta.
VectorXd pack(const CSFAModel& m) {
  std::vector<double> v;
  for (const CSMParams& f : m.factors)
    for (const CSMComponent& c : f.components) {
      v.push_back(std::log(c.sg.center_hz));
      v.push_back(std::log(c.sg.bandwidth_hz));
      for (Index i = 0; i < c.B_tilde.size(); ++i) v.push_back(c.B_tilde.data()[i].real());
      for (Index i = 0; i < c.B_tilde.size(); ++i) v.push_back(c.B_tilde.data()[i].imag());
    }
  v.push_back(std::log(m.eta));
  return Eigen::Map<VectorXd>(v.data(), static_cast<Index>(v.size()));
}

void unpack(const VectorXd& v, CSFAModel& m) {
  Index pos = 0;
  for (CSMParams& f : m.factors)
    for (CSMComponent& c : f.components) {
      c.sg.center_hz = std::exp(v(pos++));
      c.sg.bandwidth_hz = std::exp(v(pos++));
      for (Index i = 0; i < c.B_tilde.size(); ++i) c.B_tilde.data()[i].real(v(pos++));
      for (Index i = 0; i < c.B_tilde.size(); ++i) c.B_tilde.data()[i].imag(v(pos++));
    }
  m.eta = std::exp(v(pos++));
}

VectorXd pack_gradients(const CSFAGradients& g) {
  std::vector<double> v;
  for (std::size_t l = 0; l < g.d_log_center.size(); ++l)
    for (std::size_t q = 0; q < g.d_log_center[l].size(); ++q) {
      v.push_back(g.d_log_center[l][q]);
      v.push_back(g.d_log_bandwidth[l][q]);
      const MatrixXcd& b = g.d_B_tilde[l][q];
      for (Index i = 0; i < b.size(); ++i) v.push_back(b.data()[i].real());
      for (Index i = 0; i < b.size(); ++i) v.push_back(b.data()[i].imag());
    }
  v.push_back(g.d_log_eta);
  return Eigen::Map<VectorXd>(v.data(), static_cast<Index>(v.size()));
}

struct Standardizer {
  VectorXd mean, scale;
};

}  // namespace

double SpectralGaussian::omega() const { return kTwoPi * center_hz; }
double SpectralGaussian::nu() const {
  const double w = kTwoPi * bandwidth_hz;
  return w * w;
}

Index CSMParams::channels() const {
  return components.empty() ? 0 : components.front().B_tilde.rows();
}
Index CSMParams::rank() const {
  return components.empty() ? 0 : components.front().B_tilde.cols();
}

MatrixXcd CSMParams::coregionalization(std::size_t q) const {
  const MatrixXcd& b = components.at(q).B_tilde;
  return b * b.adjoint();
}

void validate(const CSMParams& p) {
  require(!p.components.empty(), ErrorKind::InvalidConfig, "at least one component required");
  const Index C = p.channels(), R = p.rank();
  require(C >= 1 && R >= 1, ErrorKind::InvalidConfig, "coregionalization factor is empty");
  for (const CSMComponent& c : p.components) {
    require(c.sg.center_hz > 0.0 && c.sg.bandwidth_hz > 0.0 && std::isfinite(c.sg.center_hz) &&
                std::isfinite(c.sg.bandwidth_hz),
            ErrorKind::InvalidConfig, "spectral centre and bandwidth must be positive");
    require(c.B_tilde.rows() == C && c.B_tilde.cols() == R, ErrorKind::InvalidConfig,
            "all components must share C and R");
    require(c.B_tilde.allFinite(), ErrorKind::InvalidConfig, "non-finite coregionalization");
  }
}

cplx spectral_gaussian_eval(const SpectralGaussian& sg, double tau) {
  return std::exp(-0.5 * sg.nu() * tau * tau) * std::polar(1.0, sg.omega() * tau);
}

VectorXd sample_times(Index n, double fs) {
  VectorXd t(n);
  for (Index i = 0; i < n; ++i) t(i) = static_cast<double>(i) / fs;
  return t;
}

MatrixXd csm_kernel_matrix(const CSMParams& p, const VectorXd& t, Index size_limit) {
  validate(p);
  const Index C = p.channels(), N = t.size(), NC = N * C;
  if (NC > size_limit)
    throw Error(ErrorKind::SizeLimit, "kernel of size " + std::to_string(NC) +
                                          " exceeds the limit of " + std::to_string(size_limit));
  std::vector<MatrixXcd> B, k;
  for (std::size_t q = 0; q < p.components.size(); ++q) {
    B.push_back(p.coregionalization(q));
    k.push_back(lag_table(p.components[q].sg, t));
  }
  MatrixXd K(NC, NC);
  for (Index c = 0; c < C; ++c)
    for (Index n = 0; n < N; ++n) {
      const Index i = c * N + n;
      for (Index c2 = 0; c2 <= c; ++c2)
        for (Index m = 0; m < N; ++m) {
          const Index j = c2 * N + m;
          if (j > i) break;
          double v = 0.0;
          for (std::size_t q = 0; q < B.size(); ++q) v += (B[q](c, c2) * k[q](n, m)).real();
          K(i, j) = v;
          K(j, i) = v;
        }
    }
  return K;
}

CSMParams random_params(Index C, Index R, Index Q, double lo, double hi, Rng& rng) {
  require(C >= 1 && R >= 1 && R <= C && Q >= 1 && lo > 0.0 && hi >= lo,
          ErrorKind::InvalidConfig, "invalid random CSM parameter request");
  std::uniform_real_distribution<double> centre(lo, hi), width(0.5, 3.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  CSMParams p;
  for (Index q = 0; q < Q; ++q) {
    CSMComponent c;
    c.sg.center_hz = centre(rng);
    c.sg.bandwidth_hz = width(rng);
    c.B_tilde.resize(C, R);
    for (Index j = 0; j < R; ++j)
      for (Index i = 0; i < C; ++i) {
        const double re = normal(rng), im = normal(rng);
        c.B_tilde(i, j) = cplx(re, im) / std::sqrt(2.0 * static_cast<double>(R));
      }
    p.components.push_back(std::move(c));
  }
  return p;
}

std::vector<MatrixXd> factor_kernels(const CSFAModel& m, const VectorXd& t, Index size_limit) {
  std::vector<MatrixXd> out;
  for (const CSMParams& f : m.factors) out.push_back(csm_kernel_matrix(f, t, size_limit));
  return out;
}

MatrixXd covariance_from(const std::vector<MatrixXd>& kernels, const VectorXd& s, double eta) {
  require(!kernels.empty() && static_cast<Index>(kernels.size()) == s.size(),
          ErrorKind::ShapeError, "one score per factor kernel required");
  require(eta > 0.0, ErrorKind::InvalidConfig, "noise precision must be positive");
  MatrixXd sigma = MatrixXd::Identity(kernels[0].rows(), kernels[0].cols()) / eta;
  for (std::size_t l = 0; l < kernels.size(); ++l) {
    const double w = s(static_cast<Index>(l));
    if (w != 0.0) sigma += (w * w) * kernels[l];
  }
  return sigma;
}

MatrixXd window_covariance(const CSFAModel& m, const VectorXd& t, Index w) {
  require(w >= 0 && w < m.scores.cols() && m.scores.rows() == m.factor_count(),
          ErrorKind::ShapeError, "window index or score shape out of range");
  return covariance_from(factor_kernels(m, t), m.scores.col(w), m.eta);
}

Factorization factorize(const MatrixXd& sigma) {
  Factorization f;
  f.llt.compute(sigma);
  if (f.llt.info() == Eigen::Success) return f;
  const double scale = std::max(sigma.diagonal().mean(), 1e-300);
  for (double rel = 1e-10; rel <= 1e-6 * (1.0 + 1e-9); rel *= 10.0) {
    f.jitter = rel * scale;
    f.llt.compute(sigma + f.jitter * MatrixXd::Identity(sigma.rows(), sigma.cols()));
    if (f.llt.info() == Eigen::Success) return f;
  }
  throw Error(ErrorKind::NumericalError, "covariance is not positive definite at maximum jitter");
}

VectorXd flatten_window(const MatrixXd& samples) {
  VectorXd y(samples.size());
  const Index N = samples.cols();
  for (Index c = 0; c < samples.rows(); ++c) y.segment(c * N, N) = samples.row(c).transpose();
  return y;
}

double gp_nll(const MatrixXd& sigma, const MatrixXd& samples) {
  check_samples(samples, sigma.rows());
  return solve_window(sigma, flatten_window(samples)).nll;
}

double gp_nll(const CSFAModel& m, const VectorXd& t, const MatrixXd& samples, Index w) {
  return gp_nll(window_covariance(m, t, w), samples);
}

double gaussian_entropy(const MatrixXd& sigma) {
  const Factorization f = factorize(sigma);
  const double logdet = 2.0 * f.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const auto d = static_cast<double>(sigma.rows());
  return 0.5 * (d + logdet + d * std::log(kTwoPi));
}

ScoreGradient gp_nll_score_gradient(const std::vector<MatrixXd>& kernels, const VectorXd& s,
                                    double eta, const MatrixXd& samples) {
  const MatrixXd sigma = covariance_from(kernels, s, eta);
  check_samples(samples, sigma.rows());
  const Solved sol = solve_window(sigma, flatten_window(samples));
  const MatrixXd G = nll_sigma_gradient(sol);
  ScoreGradient out;
  out.nll = sol.nll;
  out.gradient.resize(s.size());
  for (Index l = 0; l < s.size(); ++l)
    out.gradient(l) = 2.0 * s(l) * G.cwiseProduct(kernels[static_cast<std::size_t>(l)]).sum();
  return out;
}

ScoreFit fit_scores(const std::vector<MatrixXd>& kernels, double eta, const MatrixXd& samples,
                    std::size_t iterations, double tolerance) {
  const auto L = static_cast<Index>(kernels.size());
  require(L >= 1, ErrorKind::InvalidConfig, "at least one factor kernel required");
  check_samples(samples, kernels[0].rows());
  const VectorXd y = flatten_window(samples);

  // Objective and gradient in v = s^2.
  auto eval = [&](const VectorXd& v, VectorXd* grad) {
    const Solved sol = solve_window(covariance_from(kernels, v.cwiseSqrt(), eta), y);
    if (!std::isfinite(sol.nll))
      throw Error(ErrorKind::OracleDiverged, "score fit produced a non-finite likelihood");
    if (grad) {
      const MatrixXd G = nll_sigma_gradient(sol);
      grad->resize(L);
      for (Index l = 0; l < L; ++l)
        (*grad)(l) = G.cwiseProduct(kernels[static_cast<std::size_t>(l)]).sum();
    }
    return sol.nll;
  };

  VectorXd v = VectorXd::Zero(L), g;
  double f = eval(v, &g);
  double step = 1.0 / std::max(g.norm(), 1e-12);
  ScoreFit out;
  std::size_t it = 0;
  for (; it < iterations; ++it) {
    bool moved = false;
    double f_new = f;
    VectorXd v_new = v;
    for (int ls = 0; ls < 60; ++ls) {
      v_new = (v - step * g).cwiseMax(0.0);
      const VectorXd d = v_new - v;
      if (d.squaredNorm() == 0.0) break;
      f_new = eval(v_new, nullptr);
      if (f_new <= f + g.dot(d) + d.squaredNorm() / (2.0 * step)) {
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
    const double change = f - f_new;
    v = v_new;
    f = eval(v, &g);
    step *= 2.0;
    if (change <= tolerance * std::max(1.0, std::abs(f))) {
      ++it;
      break;
    }
  }
  out.scores = v.cwiseSqrt();
  out.nll = f;
  out.iterations = it;
  return out;
}

MatrixXd encode_scores(const CSFAEncoder& e, const MatrixXd& features) {
  require(features.rows() == e.V.cols(), ErrorKind::ShapeError, "feature dimension mismatch");
  MatrixXd a = (e.V * features).colwise() + e.b;
  return a.unaryExpr([](double x) { return softplus(x); });
}

VectorXd predict_proba(const EncodedCSFA& fit, const MatrixXd& features) {
  const MatrixXd S = encode_scores(fit.encoder, features);
  VectorXd z = (S.transpose() * fit.beta).array() + fit.intercept;
  return z.unaryExpr([](double x) { return sigmoid(x); });
}

CSFAGradients encoded_csfa_gradients(const CSFAModel& m, const CSFAEncoder& e,
                                     const VectorXd& beta, double intercept,
                                     const std::vector<MatrixXd>& windows,
                                     const MatrixXd& features, const VectorXd& labels,
                                     const VectorXd& t, double mu) {
  const Index L = m.factor_count(), B = static_cast<Index>(windows.size());
  require(L >= 1 && B >= 1, ErrorKind::ShapeError, "need factors and windows");
  require(features.cols() == B && labels.size() == B && beta.size() == L &&
              e.V.rows() == L && e.b.size() == L,
          ErrorKind::ShapeError, "encoded CSFA dimension mismatch");
  const Index C = m.factors[0].channels(), N = t.size();
  const double inv_b = 1.0 / static_cast<double>(B);

  const std::vector<MatrixXd> kernels = factor_kernels(m, t);
  std::vector<std::vector<MatrixXcd>> lags(static_cast<std::size_t>(L)), coreg(lags.size());
  for (Index l = 0; l < L; ++l) {
    const CSMParams& f = m.factors[static_cast<std::size_t>(l)];
    for (std::size_t q = 0; q < f.components.size(); ++q) {
      lags[static_cast<std::size_t>(l)].push_back(lag_table(f.components[q].sg, t));
      coreg[static_cast<std::size_t>(l)].push_back(f.coregionalization(q));
    }
  }

  CSFAGradients g;
  g.d_log_center.resize(static_cast<std::size_t>(L));
  g.d_log_bandwidth.resize(static_cast<std::size_t>(L));
  g.d_B_tilde.resize(static_cast<std::size_t>(L));
  for (Index l = 0; l < L; ++l) {
    const auto Q = m.factors[static_cast<std::size_t>(l)].components.size();
    g.d_log_center[static_cast<std::size_t>(l)].assign(Q, 0.0);
    g.d_log_bandwidth[static_cast<std::size_t>(l)].assign(Q, 0.0);
    g.d_B_tilde[static_cast<std::size_t>(l)].assign(
        Q, MatrixXcd::Zero(C, m.factors[static_cast<std::size_t>(l)].rank()));
  }
  g.dV = MatrixXd::Zero(e.V.rows(), e.V.cols());
  g.db = VectorXd::Zero(L);
  g.dbeta = VectorXd::Zero(L);

  const MatrixXd A = (e.V * features).colwise() + e.b;
  for (Index w = 0; w < B; ++w) {
    VectorXd s(L), ds_da(L);
    for (Index l = 0; l < L; ++l) {
      s(l) = softplus(A(l, w));
      ds_da(l) = sigmoid(A(l, w));
    }
    const MatrixXd& samples = windows[static_cast<std::size_t>(w)];
    check_samples(samples, N * C);
    const Solved sol = solve_window(covariance_from(kernels, s, m.eta), flatten_window(samples));
    const MatrixXd G = nll_sigma_gradient(sol);
    const double z = s.dot(beta) + intercept;
    const double ce = logistic_loss(z, labels(w));
    const double resid = sigmoid(z) - labels(w);
    g.loss += inv_b * (sol.nll + mu * ce);

    VectorXd ds(L);
    for (Index l = 0; l < L; ++l)
      ds(l) = 2.0 * s(l) * G.cwiseProduct(kernels[static_cast<std::size_t>(l)]).sum() +
              mu * resid * beta(l);
    const VectorXd da = inv_b * ds.cwiseProduct(ds_da);
    g.dV += da * features.col(w).transpose();
    g.db += da;
    g.dbeta += inv_b * resid * s;
    g.dintercept += inv_b * resid;
    g.d_log_eta += inv_b * (-G.trace() / m.eta);

    for (Index l = 0; l < L; ++l) {
      const double weight = inv_b * s(l) * s(l);
      if (weight == 0.0) continue;
      const CSMParams& f = m.factors[static_cast<std::size_t>(l)];
      for (std::size_t q = 0; q < f.components.size(); ++q) {
        const MatrixXcd& k = lags[static_cast<std::size_t>(l)][q];
        const MatrixXcd& Bq = coreg[static_cast<std::size_t>(l)][q];
        MatrixXcd M = MatrixXcd::Zero(C, C);
        double d_omega = 0.0, d_nu = 0.0;
        for (Index c = 0; c < C; ++c)
          for (Index c2 = 0; c2 < C; ++c2) {
            cplx acc = 0.0, acc_tau = 0.0, acc_tau2 = 0.0;
            for (Index n = 0; n < N; ++n)
              for (Index mm = 0; mm < N; ++mm) {
                const double gv = G(c * N + n, c2 * N + mm);
                const double tau = t(n) - t(mm);
                const cplx gk = gv * k(n, mm);
                acc += gk;
                acc_tau += tau * gk;
                acc_tau2 += tau * tau * gk;
              }
            M(c, c2) = weight * acc;
            d_omega += weight * (Bq(c, c2) * cplx(0.0, 1.0) * acc_tau).real();
            d_nu += weight * (Bq(c, c2) * (-0.5) * acc_tau2).real();
          }
        const SpectralGaussian& sg = f.components[q].sg;
        g.d_log_center[static_cast<std::size_t>(l)][q] += d_omega * sg.omega();
        g.d_log_bandwidth[static_cast<std::size_t>(l)][q] += d_nu * 2.0 * sg.nu();
        g.d_B_tilde[static_cast<std::size_t>(l)][q] +=
            (M.transpose() + M.conjugate()) * f.components[q].B_tilde;
      }
    }
  }
  return g;
}

EncodedCSFA fit_encoded_csfa(const std::vector<MatrixXd>& windows, const MatrixXd& features,
                             const VectorXd& labels, double fs, const CSFAToyOptions& o) {
  validate(o.optimizer);
  const auto W = static_cast<Index>(windows.size());
  require(W >= 2 && features.cols() == W && labels.size() == W, ErrorKind::ShapeError,
          "one feature column and label per window required");
  require(o.factors >= 1 && o.components >= 1 && o.rank >= 1 && o.mu >= 0.0 &&
              o.lo_hz > 0.0 && o.hi_hz > o.lo_hz && o.init_bandwidth_hz > 0.0 &&
              o.init_eta > 0.0,
          ErrorKind::InvalidConfig, "invalid CSFA options");
  const Index C = windows[0].rows(), N = windows[0].cols();
  require(C <= 4 && N <= 64 && o.factors <= 4, ErrorKind::SizeLimit,
          "encoded CSFA is limited to C <= 4, N <= 64, L <= 4");
  require(o.rank <= C, ErrorKind::InvalidConfig, "rank must not exceed channel count");
  Index pos = 0;
  for (Index i = 0; i < W; ++i) {
    require(labels(i) == 0.0 || labels(i) == 1.0, ErrorKind::InvalidData, "labels must be 0/1");
    pos += labels(i) == 1.0;
  }
  require(pos > 0 && pos < W, ErrorKind::InvalidData, "both label classes must be present");

  const VectorXd t = sample_times(N, fs);
  double data_var = 0.0;
  for (const MatrixXd& w : windows) data_var += w.squaredNorm();
  data_var /= static_cast<double>(W * N * C);
  require(data_var > 0.0 && std::isfinite(data_var), ErrorKind::InvalidData,
          "windows must be finite and not all zero");

  Rng rng(o.optimizer.seed);
  EncodedCSFA out;
  CSFAModel& m = out.model;
  const Index L = o.factors, Q = o.components, R = o.rank;
  const double amp = std::sqrt(data_var / static_cast<double>(L * Q));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index l = 0; l < L; ++l) {
    CSMParams f;
    for (Index q = 0; q < Q; ++q) {
      CSMComponent c;
      const double frac = (static_cast<double>(l * Q + q) + 0.5) / static_cast<double>(L * Q);
      c.sg.center_hz = o.lo_hz + frac * (o.hi_hz - o.lo_hz);
      c.sg.bandwidth_hz = o.init_bandwidth_hz;
      c.B_tilde.resize(C, R);
      for (Index j = 0; j < R; ++j)
        for (Index i = 0; i < C; ++i)
          c.B_tilde(i, j) = cplx(normal(rng), normal(rng)) * (amp / std::sqrt(2.0 * R));
      f.components.push_back(std::move(c));
    }
    m.factors.push_back(std::move(f));
  }
  m.eta = o.init_eta / data_var;

  // Encoder inputs are standardized; the transform is folded into V and b at
  // the end so encode_scores takes raw features.
  const Index P = features.rows();
  const VectorXd f_mean = features.rowwise().mean();
  VectorXd f_scale = ((features.colwise() - f_mean).rowwise().squaredNorm() /
                      static_cast<double>(W))
                         .cwiseSqrt();
  for (Index i = 0; i < P; ++i)
    if (!(f_scale(i) > 0.0)) f_scale(i) = 1.0;
  const MatrixXd Z = (features.colwise() - f_mean).array().colwise() / f_scale.array();

  CSFAEncoder enc;
  enc.V = standard_normal(L, P, rng) * (0.1 / std::sqrt(static_cast<double>(P)));
  enc.b = VectorXd::Constant(L, softplus_inverse(1.0));
  VectorXd head = VectorXd::Zero(L + 1);

  const OptimizerConfig& oc = o.optimizer;
  VectorXd theta = pack(m);
  Nadam opt_theta(oc, theta.size(), 1), opt_V(oc, L, P), opt_b(oc, L, 1), opt_head(oc, L + 1, 1);
  Nadam sup_V(oc, L, P), sup_b(oc, L, 1);
  const Index batch = std::min<Index>(oc.batch_size, W);

  for (std::size_t it = 0; it < oc.iterations; ++it) {
    std::vector<MatrixXd> wb;
    MatrixXd fb(P, batch);
    VectorXd yb(batch);
    for (Index j = 0; j < batch; ++j) {
      const auto idx = static_cast<Index>(counter_index(
          oc.seed, static_cast<std::uint64_t>(it) * static_cast<std::uint64_t>(batch) +
                       static_cast<std::uint64_t>(j),
          static_cast<std::size_t>(W)));
      wb.push_back(windows[static_cast<std::size_t>(idx)]);
      fb.col(j) = Z.col(idx);
      yb(j) = labels(idx);
    }
    const CSFAGradients g = encoded_csfa_gradients(m, enc, head.head(L), head(L), wb, fb, yb, t,
                                                   o.mu);
    if (!std::isfinite(g.loss))
      throw Error(ErrorKind::NumericalError,
                  "non-finite CSFA loss at iteration " + std::to_string(it));
    out.loss_trace.push_back(g.loss);
    opt_theta.step(theta, pack_gradients(g));
    unpack(theta, m);
    opt_V.step(enc.V, g.dV);
    opt_b.step(enc.b, g.db);
    VectorXd dhead(L + 1);
    dhead << g.dbeta, g.dintercept;
    opt_head.step(head, dhead);

    if (o.mu > 0.0) {
      // Encoder-only step on mu * CE.
      const MatrixXd A = (enc.V * fb).colwise() + enc.b;
      MatrixXd dA(L, batch);
      for (Index j = 0; j < batch; ++j) {
        VectorXd s(L);
        for (Index l = 0; l < L; ++l) s(l) = softplus(A(l, j));
        const double resid = sigmoid(s.dot(head.head(L)) + head(L)) - yb(j);
        for (Index l = 0; l < L; ++l)
          dA(l, j) = o.mu * resid * head(l) * sigmoid(A(l, j)) / static_cast<double>(batch);
      }
      sup_V.step(enc.V, dA * fb.transpose());
      sup_b.step(enc.b, dA.rowwise().sum());
    }
  }

  out.encoder.V = enc.V.array().rowwise() / f_scale.transpose().array();
  out.encoder.b = enc.b - out.encoder.V * f_mean;
  out.beta = head.head(L);
  out.intercept = head(L);
  m.scores = encode_scores(out.encoder, features);
  return out;
}

}  // namespace supfactor::csm
