#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "supfactor/csm_kernel.hpp"
#include "supfactor/error.hpp"
#include "supfactor/rng.hpp"
#include "supfactor/synth_data.hpp"

namespace supfactor::synth {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void validate(const CSMSynthConfig& c) {
  require(c.channels >= 1 && c.rank >= 1 && c.components >= 1 && c.window_length >= 1 &&
              c.windows >= 1,
          ErrorKind::InvalidConfig, "CSM synth counts must be at least 1");
  require(c.rank <= c.channels, ErrorKind::InvalidConfig, "rank must not exceed channel count");
  require(c.noise_precision > 0.0 && std::isfinite(c.noise_precision), ErrorKind::InvalidConfig,
          "noise precision must be positive");
  require(c.sample_rate_hz > 0.0 && std::isfinite(c.sample_rate_hz), ErrorKind::InvalidConfig,
          "sample rate must be positive");
}

namespace {

// Square root of a PSD matrix via pivoted LDL^T. Small negative pivots from
// rounding are clamped; anything below -1e-8 trace means the covariance is
// not PSD.
MatrixXd psd_root(const MatrixXd& sigma) {
  Eigen::LDLT<MatrixXd> ldlt(sigma);
  const double tol = 1e-8 * sigma.trace();
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() < -tol)
    throw Error(ErrorKind::NumericalError, "window covariance is not positive semidefinite");
  const VectorXd d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
  MatrixXd root = ldlt.matrixL().toDenseMatrix() * d.asDiagonal();
  return ldlt.transpositionsP().transpose() * root;
}

}  // namespace

std::vector<MatrixXd> gen_csm(const CSMSynthConfig& config,
                              const std::vector<csm::CSMParams>& factors,
                              const MatrixXd& scores) {
  validate(config);
  require(!factors.empty(), ErrorKind::InvalidConfig, "at least one factor required");
  for (const csm::CSMParams& f : factors) {
    csm::validate(f);
    require(f.channels() == config.channels && f.rank() == config.rank &&
                static_cast<Index>(f.components.size()) == config.components,
            ErrorKind::InvalidConfig, "factor parameters do not match the configured C, R, Q");
  }
  require(scores.rows() == static_cast<Index>(factors.size()) && scores.cols() == config.windows,
          ErrorKind::ShapeError, "scores must be L x W");
  require(scores.allFinite() && scores.minCoeff() >= 0.0, ErrorKind::InvalidData,
          "scores must be finite and non-negative");

  const Index C = config.channels, N = config.window_length;
  const VectorXd t = csm::sample_times(N, config.sample_rate_hz);
  std::vector<MatrixXd> kernels;
  for (const csm::CSMParams& f : factors) kernels.push_back(csm::csm_kernel_matrix(f, t));

  std::map<std::vector<double>, MatrixXd> roots;
  Rng rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<MatrixXd> out;
  out.reserve(static_cast<std::size_t>(config.windows));
  for (Index w = 0; w < config.windows; ++w) {
    const VectorXd s = scores.col(w);
    std::vector<double> key(s.data(), s.data() + s.size());
    auto it = roots.find(key);
    if (it == roots.end())
      it = roots.emplace(key, psd_root(csm::covariance_from(kernels, s, config.noise_precision)))
               .first;
    VectorXd z(N * C);
    for (Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
    const VectorXd y = it->second * z;
    MatrixXd win(C, N);
    for (Index c = 0; c < C; ++c) win.row(c) = y.segment(c * N, N).transpose();
    out.push_back(std::move(win));
  }
  return out;
}

CSFAToyData gen_csfa_toy(const CSFAToyConfig& config) {
  const auto L = static_cast<Index>(config.centers_hz.size());
  require(L >= 1 && config.train_windows >= 2 && config.test_windows >= 2,
          ErrorKind::InvalidConfig, "toy needs at least one factor and two windows per split");
  require(config.bandwidth_hz > 0.0, ErrorKind::InvalidConfig, "bandwidth must be positive");
  Rng rng(config.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), unit(0.0, 1.0);

  CSFAToyData d;
  for (Index l = 0; l < L; ++l) {
    csm::CSMParams f;
    csm::CSMComponent c;
    c.sg = {config.centers_hz[static_cast<std::size_t>(l)], config.bandwidth_hz};
    c.B_tilde.resize(config.channels, 1);
    for (Index ch = 0; ch < config.channels; ++ch) c.B_tilde(ch, 0) = std::polar(1.0, phase(rng));
    f.components.push_back(std::move(c));
    d.factors.push_back(std::move(f));
  }

  const Index W = config.train_windows + config.test_windows;
  VectorXd labels(W);
  MatrixXd scores(L, W);
  for (Index w = 0; w < W; ++w) {
    labels(w) = unit(rng) < 0.5 ? 0.0 : 1.0;
    for (Index l = 0; l + 1 < L; ++l) scores(l, w) = 0.5 + unit(rng);
    scores(L - 1, w) = labels(w) == 1.0 ? 1.2 + 0.6 * unit(rng) : 0.1 + 0.4 * unit(rng);
  }

  CSMSynthConfig sc;
  sc.channels = config.channels;
  sc.rank = 1;
  sc.components = 1;
  sc.window_length = config.window_length;
  sc.sample_rate_hz = config.sample_rate_hz;
  sc.windows = W;
  sc.noise_precision = config.noise_precision;
  sc.seed = mix64(config.seed);
  std::vector<MatrixXd> all = gen_csm(sc, d.factors, scores);

  const Index n = config.train_windows;
  d.train.assign(all.begin(), all.begin() + n);
  d.test.assign(all.begin() + n, all.end());
  d.train_labels = labels.head(n);
  d.test_labels = labels.tail(W - n);
  d.train_scores = scores.leftCols(n);
  d.test_scores = scores.rightCols(W - n);
  return d;
}

}  // namespace supfactor::synth
