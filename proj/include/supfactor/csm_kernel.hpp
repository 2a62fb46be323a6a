#pragma once

// Cross-spectral mixture (CSM) kernels and the CSFA window likelihood.
//
// A factor's kernel between channel c at time t and channel c' at time t' is
//
//   K[(c,t),(c',t')] = Re( sum_q B_q(c,c') k_q(t - t') ),
//   k_q(tau) = exp(-nu_q tau^2 / 2 + i omega_q tau),   B_q = Bt_q Bt_q^H
//
// with omega_q = 2 pi center_hz and nu_q = (2 pi bandwidth_hz)^2, so the
// spectral density of k_q is a Gaussian in Hz with mean center_hz and standard
// deviation bandwidth_hz.
//
// Matrices over a window are indexed channel-major: row c * N + n.
//
// A window with scores s (one per factor) has covariance
//   Sigma = sum_l s_l^2 K_l + (1 / eta) I,
// since y = sum_l s_l f_l + noise with independent zero-mean draws f_l.

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <vector>

#include "supfactor/nadam.hpp"
#include "supfactor/rng.hpp"

namespace supfactor::csm {

struct SpectralGaussian {
  double center_hz = 10.0;
  double bandwidth_hz = 1.0;

  double omega() const;  // angular centre, rad/s
  double nu() const;     // angular variance, rad^2/s^2
};

struct CSMComponent {
  SpectralGaussian sg;
  Eigen::MatrixXcd B_tilde;  // C x R
};

struct CSMParams {
  std::vector<CSMComponent> components;

  Eigen::Index channels() const;
  Eigen::Index rank() const;
  // B_q = Bt_q Bt_q^H
  Eigen::MatrixXcd coregionalization(std::size_t q) const;
};

// Throws InvalidConfig on Q == 0, non-positive frequencies, or inconsistent
// channel counts.
void validate(const CSMParams& params);

std::complex<double> spectral_gaussian_eval(const SpectralGaussian& sg, double tau_seconds);

constexpr Eigen::Index kDefaultSizeLimit = 4096;

// Real NC x NC matrix. Each (i, j) entry is computed once and written to both
// triangles, so the result is exactly symmetric. Throws SizeLimit when
// N * C exceeds size_limit.
Eigen::MatrixXd csm_kernel_matrix(const CSMParams& params, const Eigen::VectorXd& times,
                                  Eigen::Index size_limit = kDefaultSizeLimit);

// Sample times n / fs for n = 0 .. N-1.
Eigen::VectorXd sample_times(Eigen::Index n, double sample_rate_hz);

// Random parameters: centres uniform in [lo_hz, hi_hz], bandwidths uniform in
// [0.5, 3] Hz, complex standard-normal Bt scaled by 1/sqrt(R).
CSMParams random_params(Eigen::Index C, Eigen::Index R, Eigen::Index Q, double lo_hz,
                        double hi_hz, Rng& rng);

struct CSFAModel {
  std::vector<CSMParams> factors;  // L factors
  double eta = 100.0;              // noise precision
  Eigen::MatrixXd scores;          // L x W, non-negative

  Eigen::Index factor_count() const { return static_cast<Eigen::Index>(factors.size()); }
};

std::vector<Eigen::MatrixXd> factor_kernels(const CSFAModel& model, const Eigen::VectorXd& times,
                                            Eigen::Index size_limit = kDefaultSizeLimit);

// sum_l s_l^2 K_l + I / eta
Eigen::MatrixXd covariance_from(const std::vector<Eigen::MatrixXd>& kernels,
                                const Eigen::VectorXd& scores, double eta);

Eigen::MatrixXd window_covariance(const CSFAModel& model, const Eigen::VectorXd& times,
                                  Eigen::Index w);

// Cholesky with jitter escalation: tries no jitter, then 1e-10 .. 1e-6 times
// the mean diagonal (factor 10 steps). Throws NumericalError when all fail.
struct Factorization {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;  // absolute value added to the diagonal
};
Factorization factorize(const Eigen::MatrixXd& sigma);

// Channel-major flattening of a C x N window.
Eigen::VectorXd flatten_window(const Eigen::MatrixXd& samples);

// Negative log density of the window under N(0, Sigma):
//   0.5 (y^T Sigma^-1 y + log det Sigma + NC log 2 pi).
// A density, so the value can be negative for small noise.
double gp_nll(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& samples);
double gp_nll(const CSFAModel& model, const Eigen::VectorXd& times, const Eigen::MatrixXd& samples,
              Eigen::Index w);

// Entropy of N(0, Sigma): the expected NLL of data drawn from the model.
double gaussian_entropy(const Eigen::MatrixXd& sigma);

// NLL and its gradient with respect to the scores s of one window.
struct ScoreGradient {
  double nll = 0.0;
  Eigen::VectorXd gradient;
};
ScoreGradient gp_nll_score_gradient(const std::vector<Eigen::MatrixXd>& kernels,
                                    const Eigen::VectorXd& scores, double eta,
                                    const Eigen::MatrixXd& samples);

struct ScoreFit {
  Eigen::VectorXd scores;
  double nll = 0.0;
  std::size_t iterations = 0;
};

// Projected gradient descent with backtracking, run on v = s^2 >= 0 (the
// likelihood depends on s only through s^2, and s >= 0 makes the map
// one-to-one). Starts from v = 0, so the result never scores worse than zero
// scores. Throws OracleDiverged on a non-finite objective.
ScoreFit fit_scores(const std::vector<Eigen::MatrixXd>& kernels, double eta,
                    const Eigen::MatrixXd& samples, std::size_t iterations = 500,
                    double tolerance = 1e-10);

// Encoded CSFA at toy scale: scores = softplus(V f + b) from per-window power
// features f, a logistic head on the scores, kernels and noise fitted to the
// raw windows.
struct CSFAToyOptions {
  Eigen::Index factors = 2;      // L
  Eigen::Index components = 3;   // Q per factor
  Eigen::Index rank = 2;         // R, at most the channel count
  double mu = 1.0;
  double lo_hz = 1.0;            // initial centres spread evenly over [lo, hi]
  double hi_hz = 30.0;
  double init_bandwidth_hz = 2.0;
  double init_eta = 10.0;
  OptimizerConfig optimizer;
};

struct CSFAEncoder {
  Eigen::MatrixXd V;  // L x P, applied to raw features
  Eigen::VectorXd b;  // L
};

struct EncodedCSFA {
  CSFAModel model;  // scores hold the encoder output on the training windows
  CSFAEncoder encoder;
  Eigen::VectorXd beta;
  double intercept = 0.0;
  std::vector<double> loss_trace;  // mean batch loss per iteration
};

Eigen::MatrixXd encode_scores(const CSFAEncoder& encoder, const Eigen::MatrixXd& features);
Eigen::VectorXd predict_proba(const EncodedCSFA& fit, const Eigen::MatrixXd& features);

// Loss on a batch of windows (mean over the batch):
//   nll_w + mu * CE(beta^T s_w + b, y_w).
// The head (beta, b) follows the unweighted cross-entropy; mu scales only the
// supervision gradient reaching the encoder. Each iteration takes one joint
// step, then one encoder-only step on mu * CE (skipped when mu = 0).
// Features are standardized internally; the returned encoder folds the
// standardization back in. Initial centres are spread evenly over
// [lo_hz, hi_hz] in factor-then-component order, Bt is scaled to the data
// variance, and eta starts at init_eta / variance.
EncodedCSFA fit_encoded_csfa(const std::vector<Eigen::MatrixXd>& windows,
                             const Eigen::MatrixXd& power_features, const Eigen::VectorXd& labels,
                             double sample_rate_hz, const CSFAToyOptions& options);

// Parameter gradients of the mean batch loss, exposed for finite-difference
// checks. dbeta and dintercept are gradients of the unweighted mean CE, so
// they match the loss gradient only at mu = 1. Kernel parameters are log centre (Hz), log bandwidth (Hz), and the
// real and imaginary parts of each Bt.
struct CSFAGradients {
  double loss = 0.0;
  std::vector<std::vector<double>> d_log_center, d_log_bandwidth;  // [l][q]
  std::vector<std::vector<Eigen::MatrixXcd>> d_B_tilde;            // Re: d/dRe, Im: d/dIm
  double d_log_eta = 0.0;
  Eigen::MatrixXd dV;
  Eigen::VectorXd db;
  Eigen::VectorXd dbeta;
  double dintercept = 0.0;
};

CSFAGradients encoded_csfa_gradients(const CSFAModel& model, const CSFAEncoder& encoder,
                                     const Eigen::VectorXd& beta, double intercept,
                                     const std::vector<Eigen::MatrixXd>& windows,
                                     const Eigen::MatrixXd& power_features,
                                     const Eigen::VectorXd& labels, const Eigen::VectorXd& times,
                                     double mu);

}  // namespace supfactor::csm
