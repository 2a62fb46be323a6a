#pragma once

// Non-negative matrix factorization with a logistic supervision head.
//
// Loss on a batch B of observations (x_i, y_i), y_i in {0, 1}:
//
//   (1/|B|) sum_i [ ||x_i - W s_i||^2 + mu * CE(beta^T s_i + b, y_i) ] + l1 ||beta||_1
//
// W is derived from unconstrained parameters W_u: each column is the softmax
// of the matching W_u column, rescaled to Euclidean norm sqrt(p).
// Scores s_i are free non-negative variables (Local), the output of an
// encoder s = softplus(...) applied to x_i (Encoded), or unsupervised NMF
// scores frozen before the head is trained (Sequential).

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "supfactor/nadam.hpp"

namespace supfactor::nmf {

struct NMFResult {
  Eigen::MatrixXd W;          // p x K
  Eigen::MatrixXd H;          // K x N
  std::vector<double> loss;   // ||X - W H||_F^2 after each sweep
};

// Multiplicative-update NMF (Lee & Seung) on ||X - W H||_F^2. Random uniform
// start scaled to the data mean. Throws InvalidData on negative input.
NMFResult fit_unsupervised(const Eigen::MatrixXd& X, Eigen::Index K, std::size_t iterations,
                           std::uint64_t seed);

enum class Mode { Sequential, Local, Encoded };
enum class EncoderLayout { Affine, OneHidden };

const char* mode_name(Mode mode);

struct EncoderSpec {
  EncoderLayout layout = EncoderLayout::OneHidden;
  Eigen::Index hidden_units = 30;
};

// Affine:    s = softplus(V1 x + b1)
// OneHidden: h = softplus(V1 x + b1), s = softplus(V2 h + b2)
struct Encoder {
  EncoderLayout layout = EncoderLayout::OneHidden;
  Eigen::MatrixXd V1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd V2;  // empty for Affine
  Eigen::VectorXd b2;  // empty for Affine

  Eigen::Index input_dim() const { return V1.cols(); }
  Eigen::Index output_dim() const {
    return layout == EncoderLayout::Affine ? V1.rows() : V2.rows();
  }
  // Same layout and shapes, all parameters zero.
  Encoder zeros_like() const;
};

Eigen::MatrixXd encoder_forward(const Encoder& encoder, const Eigen::MatrixXd& X);

struct FitConfig {
  Eigen::Index K = 5;
  Mode mode = Mode::Encoded;
  double mu = 10.0;
  EncoderSpec encoder;
  OptimizerConfig optimizer;
  double l1_weight = 1e-3;
  // Multiplicative-update sweeps for the unsupervised warm start.
  std::size_t warm_start_iterations = 200;
  // Proximal-gradient iterations for the Sequential head.
  std::size_t head_iterations = 5000;
};

void validate(const FitConfig& config);

struct SupervisedNMFModel {
  Eigen::MatrixXd W_u;  // p x K unconstrained
  Eigen::MatrixXd W;    // p x K, derived from W_u
  Encoder encoder;      // populated for Encoded
  Eigen::VectorXd beta;
  double intercept = 0.0;
  double mu = 10.0;
  Mode mode = Mode::Encoded;
  Eigen::MatrixXd scores;          // K x N training scores (Local, Sequential)
  std::vector<double> loss_trace;  // mean batch loss over each block of 100 iterations

  Eigen::Index predictors() const { return W.rows(); }
  Eigen::Index components() const { return W.cols(); }
  Eigen::Index nonzero_coefficients() const;
};

// Column-wise softmax rescaled to column norm sqrt(p).
Eigen::MatrixXd normalized_loadings(const Eigen::MatrixXd& W_u);

// Parameters whose normalized loadings point along the columns of a positive
// W. Entries below 1e-12 of the column max are floored first.
Eigen::MatrixXd loadings_parameters(const Eigen::MatrixXd& W);

// labels: N values in {0, 1}. Throws InvalidData for negative X or a single
// label class, NumericalError (with iteration index) on a non-finite loss.
SupervisedNMFModel fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& labels,
                       const FitConfig& config);

// Non-negative least squares min ||x - W s|| s.t. s >= 0 (Lawson-Hanson).
Eigen::VectorXd nnls(const Eigen::MatrixXd& W, const Eigen::VectorXd& x);

// Test-time scores. Encoded: the encoder. Local and Sequential: NNLS of each
// column against W.
Eigen::MatrixXd encode(const SupervisedNMFModel& model, const Eigen::MatrixXd& X);

Eigen::VectorXd predict_proba(const SupervisedNMFModel& model, const Eigen::MatrixXd& X);
Eigen::VectorXd predict_proba_from_scores(const Eigen::VectorXd& beta, double intercept,
                                          const Eigen::MatrixXd& S);

// Mann-Whitney AUC, ties count one half. Throws Undefined with a single class.
double auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

struct LogisticFit {
  Eigen::VectorXd beta;
  double intercept = 0.0;
};

// Minimizes mean CE(beta^T s + b, y) + l1 ||beta||_1 over the columns of S by
// accelerated proximal gradient (the intercept is not penalized).
LogisticFit fit_l1_logistic(const Eigen::MatrixXd& S, const Eigen::VectorXd& labels,
                            double l1_weight, std::size_t iterations);

// Full encoded loss and its gradients on the given batch (all columns of X).
// The L1 term uses sign(beta) as its gradient.
struct EncodedGradients {
  double loss = 0.0;
  double recon = 0.0;
  double supervision = 0.0;  // mean cross-entropy, before mu
  Eigen::MatrixXd dW_u;
  Encoder dEncoder;
  Eigen::VectorXd dbeta;
  double dintercept = 0.0;
};

EncodedGradients encoded_loss_gradients(const Eigen::MatrixXd& W_u, const Encoder& encoder,
                                        const Eigen::VectorXd& beta, double intercept,
                                        const Eigen::MatrixXd& X, const Eigen::VectorXd& labels,
                                        double mu, double l1_weight);

// Binary container: magic "SNMF", u32 version, u32 mode, u32 layout, then u64
// p, K, hidden, f64 mu, f64 intercept, and row-major f64 blocks W_u, V1, b1,
// V2, b2, beta. Scores and loss traces are not stored.
void save(const SupervisedNMFModel& model, std::ostream& out);
SupervisedNMFModel load(std::istream& in);
void save(const SupervisedNMFModel& model, const std::string& path);
SupervisedNMFModel load(const std::string& path);

}  // namespace supfactor::nmf
