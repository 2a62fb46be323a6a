#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "supfactor/error.hpp"

namespace supfactor {

struct OptimizerConfig {
  double step_size = 1e-3;
  double first_moment_decay = 0.9;
  double second_moment_decay = 0.999;
  bool nesterov = true;
  std::size_t iterations = 100000;
  Eigen::Index batch_size = 256;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

void validate(const OptimizerConfig& config);

// Adaptive moment estimation with optional Nesterov look-ahead (NADAM).
//
// Update order for step t (1-based), gradient g:
//   m <- b1 m + (1 - b1) g
//   v <- b2 v + (1 - b2) g^2
//   m_hat = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)    (nesterov)
//   m_hat = m / (1 - b1^t)                                        (plain Adam)
//   v_hat = v / (1 - b2^t)
//   theta <- theta - step * m_hat / (sqrt(v_hat) + eps)
//
// One instance holds the moments for one parameter matrix. Column-wise steps
// keep a counter per column so sparse updates (per-observation scores touched
// only when sampled) get their own bias correction.
class Nadam {
 public:
  Nadam() = default;
  Nadam(const OptimizerConfig& config, Eigen::Index rows, Eigen::Index cols)
      : cfg_(config),
        m_(Eigen::MatrixXd::Zero(rows, cols)),
        v_(Eigen::MatrixXd::Zero(rows, cols)),
        col_steps_(static_cast<std::size_t>(cols), 0) {}

  void step(Eigen::Ref<Eigen::MatrixXd> param, const Eigen::Ref<const Eigen::MatrixXd>& grad) {
    require(param.rows() == m_.rows() && param.cols() == m_.cols() &&
                grad.rows() == m_.rows() && grad.cols() == m_.cols(),
            ErrorKind::ShapeError, "optimizer state does not match parameter shape");
    ++steps_;
    update(param, grad, m_, v_, steps_);
  }

  void step_column(Eigen::Ref<Eigen::MatrixXd> param, Eigen::Index col,
                   const Eigen::Ref<const Eigen::VectorXd>& grad) {
    require(col >= 0 && col < m_.cols() && grad.size() == m_.rows(), ErrorKind::ShapeError,
            "optimizer column update out of range");
    const std::size_t t = ++col_steps_[static_cast<std::size_t>(col)];
    auto p = param.col(col);
    auto m = m_.col(col);
    auto v = v_.col(col);
    update(p, grad, m, v, t);
  }

  std::size_t steps() const { return steps_; }

 private:
  template <typename P, typename G, typename M, typename V>
  void update(P&& param, const G& grad, M&& m, V&& v, std::size_t t) const {
    const double b1 = cfg_.first_moment_decay, b2 = cfg_.second_moment_decay;
    const double td = static_cast<double>(t);
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const double v_corr = 1.0 / (1.0 - std::pow(b2, td));
    if (cfg_.nesterov) {
      const double c_next = b1 / (1.0 - std::pow(b1, td + 1.0));
      const double c_now = (1.0 - b1) / (1.0 - std::pow(b1, td));
      param.array() -= cfg_.step_size * (c_next * m.array() + c_now * grad.array()) /
                       ((v.array() * v_corr).sqrt() + cfg_.epsilon);
    } else {
      const double c = 1.0 / (1.0 - std::pow(b1, td));
      param.array() -=
          cfg_.step_size * (c * m.array()) / ((v.array() * v_corr).sqrt() + cfg_.epsilon);
    }
  }

  OptimizerConfig cfg_;
  Eigen::MatrixXd m_, v_;
  std::size_t steps_ = 0;
  std::vector<std::size_t> col_steps_;
};

inline void validate(const OptimizerConfig& c) {
  require(c.step_size > 0.0, ErrorKind::InvalidConfig, "step_size must be positive");
  require(c.first_moment_decay > 0.0 && c.first_moment_decay < 1.0, ErrorKind::InvalidConfig,
          "first_moment_decay must lie in (0, 1)");
  require(c.second_moment_decay > 0.0 && c.second_moment_decay < 1.0,
          ErrorKind::InvalidConfig, "second_moment_decay must lie in (0, 1)");
  require(c.iterations >= 1, ErrorKind::InvalidConfig, "iterations must be at least 1");
  require(c.batch_size >= 1, ErrorKind::InvalidConfig, "batch_size must be at least 1");
  require(c.epsilon > 0.0, ErrorKind::InvalidConfig, "epsilon must be positive");
}

}  // namespace supfactor
