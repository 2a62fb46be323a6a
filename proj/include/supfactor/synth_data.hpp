#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "supfactor/csm_kernel.hpp"

namespace supfactor::synth {

// Supervised probabilistic-PCA style generator: x = W0 s + e_x, y = D0 s + e_y
// with s ~ N(0, I).
struct LinearSynthConfig {
  Eigen::Index p = 20;
  Eigen::Index q = 1;
  Eigen::Index L_true = 3;
  Eigen::Index n_train = 1000;
  Eigen::Index n_test = 1000;
  double noise_x = 0.5;
  double noise_y = 0.5;
  bool top_factor_unpredictive = true;
  // Loading column norms; empty means L_true, L_true-1, ..., 1 (3:2:1 for L_true=3).
  std::vector<double> loading_norms;
  std::uint64_t seed = 0;
};

struct LinearSynthData {
  Eigen::MatrixXd X_train, Y_train, X_test, Y_test;  // raw (uncentered)
  Eigen::MatrixXd S_train, S_test;                   // true factor scores
  Eigen::MatrixXd W0;                                // p x L_true
  Eigen::MatrixXd D0;                                // q x L_true
};

void validate(const LinearSynthConfig& config);

// Loadings have orthogonal columns scaled to the configured norms, so factor
// variance shares follow the norm ratios exactly. With top_factor_unpredictive
// the outcome weight on factor 1 is exactly zero.
LinearSynthData gen_linear(const LinearSynthConfig& config);

enum class NMFTask { PulloverShirt, TshirtShirt, TshirtCoat };

// Class labels of the two categories in a task (Fashion-MNIST numbering). The
// second class is the positive label.
std::pair<int, int> task_classes(NMFTask task);
const char* task_name(NMFTask task);

struct NMFSynthConfig {
  Eigen::Index base_components = 40;
  Eigen::Index model_components = 5;
  // Absolute noise std. nullopt: 5% of the mean reconstruction magnitude.
  std::optional<double> noise_std;
  NMFTask task = NMFTask::PulloverShirt;
  std::size_t base_iterations = 300;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct NMFSynthData {
  Eigen::MatrixXd X;        // p x N synthetic images (reconstruction + clipped noise)
  Eigen::VectorXd labels;   // N binary labels
  Eigen::MatrixXd W_base;   // p x K ground-truth loadings
  Eigen::MatrixXd H_base;   // K x N ground-truth scores
  Eigen::MatrixXd reconstruction;  // W_base H_base
  std::vector<Eigen::Index> train_index, test_index;  // stratified split
  double noise_std = 0.0;
};

// images: p x N non-negative pixels; class_labels: original class ids. Only
// columns of the task's two classes are used.
NMFSynthData gen_nmf_pseudo(const Eigen::MatrixXd& images, const std::vector<int>& class_labels,
                            const NMFSynthConfig& config);

// Per-class stratified split; returns (train, test) column indices in
// ascending order.
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> stratified_split(
    const Eigen::VectorXd& labels, double test_fraction, std::uint64_t seed);

void validate(const NMFSynthConfig& config);

// IDX files (big-endian magic and dimensions, unsigned byte payload). Images
// come back as a (rows*cols) x N matrix scaled to [0, 1]. Missing files raise
// MissingInput, malformed ones Io.
Eigen::MatrixXd read_idx_images(const std::string& path);
std::vector<int> read_idx_labels(const std::string& path);

// Writers for the same format, used to build fixtures.
void write_idx_images(const std::string& path, const Eigen::MatrixXd& images, int rows, int cols);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

struct CSMSynthConfig {
  Eigen::Index channels = 2;
  Eigen::Index rank = 1;
  Eigen::Index components = 1;
  Eigen::Index window_length = 64;
  double sample_rate_hz = 64.0;
  Eigen::Index windows = 100;
  double noise_precision = 100.0;
  std::uint64_t seed = 0;
};

void validate(const CSMSynthConfig& config);

// Window w is a C x N draw from N(0, sum_l s_wl^2 K_l + I / eta). Windows with
// identical score columns share one Cholesky factor. The factors must match
// the configured C, R and Q; scores are L x W and non-negative.
std::vector<Eigen::MatrixXd> gen_csm(const CSMSynthConfig& config,
                                     const std::vector<csm::CSMParams>& factors,
                                     const Eigen::MatrixXd& scores);

// Two-class toy for encoded CSFA: L factors with one spectral component each,
// centres given in Hz. The label is planted on the last factor's score
// (high for class 1, low for class 0); the other scores are uniform in
// [0.5, 1.5] regardless of label.
struct CSFAToyConfig {
  Eigen::Index channels = 2;
  Eigen::Index window_length = 32;
  double sample_rate_hz = 64.0;
  Eigen::Index train_windows = 200;
  Eigen::Index test_windows = 200;
  std::vector<double> centers_hz{6.0, 18.0};
  double bandwidth_hz = 1.5;
  double noise_precision = 25.0;
  std::uint64_t seed = 0;
};

struct CSFAToyData {
  std::vector<Eigen::MatrixXd> train, test;
  Eigen::VectorXd train_labels, test_labels;
  Eigen::MatrixXd train_scores, test_scores;  // L x W generating scores
  std::vector<csm::CSMParams> factors;
};

CSFAToyData gen_csfa_toy(const CSFAToyConfig& config);

}  // namespace supfactor::synth
