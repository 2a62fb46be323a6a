#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "supfactor/error.hpp"
#include "supfactor/rng.hpp"
#include "supfactor/synth_data.hpp"

using namespace supfactor;
using namespace supfactor::synth;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double correlation(const VectorXd& a, const VectorXd& b) {
  const VectorXd ca = a.array() - a.mean();
  const VectorXd cb = b.array() - b.mean();
  return ca.dot(cb) / (ca.norm() * cb.norm());
}

Index numeric_rank(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  const VectorXd s = svd.singularValues();
  return (s.array() > 1e-10 * s(0)).count();
}

// Tiny two-class image set: class 2 has bright top rows, class 6 bright
// bottom rows, plus a class that must be ignored.
struct Images {
  MatrixXd X;
  std::vector<int> labels;
};

Images toy_images(Index n_per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Images im;
  im.X.resize(16, 3 * n_per_class);
  for (Index j = 0; j < 3 * n_per_class; ++j) {
    const int cls = j % 3 == 0 ? 2 : (j % 3 == 1 ? 6 : 9);
    im.labels.push_back(cls);
    for (Index i = 0; i < 16; ++i) {
      const bool top = i < 8;
      const double bright = (cls == 2 && top) || (cls == 6 && !top) ? 0.8 : 0.1;
      im.X(i, j) = std::min(1.0, bright * u(rng) + 0.1 * u(rng));
    }
  }
  return im;
}

std::filesystem::path temp_dir(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("gen_linear noiseless data has the planted rank") {
  LinearSynthConfig c;
  c.noise_x = c.noise_y = 0.0;
  c.n_train = c.n_test = 50;
  CHECK(numeric_rank(gen_linear(c).X_train) == 3);
  c.p = 4;
  c.L_true = 4;
  c.loading_norms = {4, 3, 2, 1};
  CHECK(numeric_rank(gen_linear(c).X_train) == 4);
}

TEST_CASE("gen_linear top factor carries no outcome signal") {
  LinearSynthConfig c;
  c.n_train = 10000;
  const LinearSynthData d = gen_linear(c);
  CHECK(d.D0(0, 0) == 0.0);
  CHECK(std::abs(correlation(d.Y_train.row(0).transpose(), d.S_train.row(0).transpose())) < 0.05);
  // Loading norms fix the variance shares at 3:2:1.
  CHECK(std::abs(d.W0.col(0).norm() - 3.0) < 1e-12);
  CHECK(std::abs(d.W0.col(1).norm() - 2.0) < 1e-12);
  CHECK(std::abs(d.W0.col(2).norm() - 1.0) < 1e-12);
  CHECK(std::abs(d.W0.col(0).dot(d.W0.col(1))) < 1e-12);
}

TEST_CASE("gen_linear is deterministic and validates its config") {
  LinearSynthConfig c;
  c.seed = 42;
  const LinearSynthData a = gen_linear(c);
  const LinearSynthData b = gen_linear(c);
  CHECK(a.X_train == b.X_train);
  CHECK(a.Y_test == b.Y_test);
  c.seed = 43;
  CHECK(gen_linear(c).X_train != a.X_train);

  LinearSynthConfig bad;
  bad.L_true = 21;
  CHECK_THROWS_AS(gen_linear(bad), Error);
  bad = LinearSynthConfig{};
  bad.noise_x = -1.0;
  CHECK_THROWS_AS(gen_linear(bad), Error);
  bad = LinearSynthConfig{};
  bad.n_test = 1;
  CHECK_THROWS_AS(gen_linear(bad), Error);
}

TEST_CASE("stratified_split keeps class proportions and partitions the indices") {
  VectorXd labels(103);
  for (Index i = 0; i < 103; ++i) labels(i) = i % 4 == 0;
  const auto [train, test] = stratified_split(labels, 0.2, 7);
  std::set<Index> all(train.begin(), train.end());
  for (Index i : test) CHECK(all.insert(i).second);
  CHECK(all.size() == 103);
  Index test_pos = 0;
  for (Index i : test) test_pos += labels(i) == 1.0;
  CHECK(test_pos == 5);                                   // round(0.2 * 26)
  CHECK(static_cast<Index>(test.size()) - test_pos == 15);  // round(0.2 * 77)
  CHECK(std::is_sorted(train.begin(), train.end()));
  CHECK(stratified_split(labels, 0.2, 7).second == test);
  CHECK(stratified_split(labels, 0.2, 8).second != test);
}

TEST_CASE("gen_nmf_pseudo without noise returns the reconstruction") {
  const Images im = toy_images(30, 1);
  NMFSynthConfig c;
  c.base_components = 4;
  c.model_components = 2;
  c.noise_std = 0.0;
  c.base_iterations = 100;
  const NMFSynthData d = gen_nmf_pseudo(im.X, im.labels, c);
  CHECK(d.X.cols() == 60);
  CHECK(d.X == d.W_base * d.H_base);
  CHECK(d.X == d.reconstruction);
  CHECK(d.labels.sum() == 30.0);
  CHECK(d.train_index.size() + d.test_index.size() == 60);
}

TEST_CASE("gen_nmf_pseudo noise is clipped and bounded") {
  const Images im = toy_images(30, 2);
  NMFSynthConfig c;
  c.base_components = 4;
  c.model_components = 2;
  c.base_iterations = 100;
  const NMFSynthData d = gen_nmf_pseudo(im.X, im.labels, c);
  CHECK(d.X.minCoeff() >= 0.0);
  CHECK(d.noise_std == doctest::Approx(0.05 * d.reconstruction.mean()));
  // Clipping only shrinks deviations, so the residual cannot exceed the
  // draw: its RMS stays at or below the noise scale (with sampling slack).
  const double rms = std::sqrt((d.X - d.reconstruction).squaredNorm() / d.X.size());
  CHECK(rms <= 1.1 * d.noise_std);
  CHECK(rms > 0.5 * d.noise_std);
  const NMFSynthData again = gen_nmf_pseudo(im.X, im.labels, c);
  CHECK(again.X == d.X);
}

TEST_CASE("gen_nmf_pseudo input validation") {
  Images im = toy_images(10, 3);
  NMFSynthConfig c;
  c.base_components = 3;
  c.model_components = 2;
  c.base_iterations = 10;
  for (int& l : im.labels)
    if (l == 6) l = 9;
  try {
    gen_nmf_pseudo(im.X, im.labels, c);
    FAIL("expected InvalidData");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidData);
  }
  c.model_components = 5;
  CHECK_THROWS_AS(gen_nmf_pseudo(im.X, im.labels, c), Error);
}

TEST_CASE("IDX files round-trip and report missing or malformed input") {
  const auto dir = temp_dir("supfactor_idx_test");
  const Images im = toy_images(5, 4);
  const MatrixXd quantized = (im.X * 255.0).array().round() / 255.0;
  write_idx_images((dir / "img.idx").string(), im.X, 4, 4);
  write_idx_labels((dir / "lab.idx").string(), im.labels);
  const MatrixXd back = read_idx_images((dir / "img.idx").string());
  CHECK(back.rows() == 16);
  CHECK((back - quantized).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(read_idx_labels((dir / "lab.idx").string()) == im.labels);

  try {
    read_idx_images((dir / "absent.idx").string());
    FAIL("expected MissingInput");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingInput);
  }
  try {
    read_idx_images((dir / "lab.idx").string());
    FAIL("expected Io");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
  std::ofstream((dir / "short.idx").string(), std::ios::binary) << "\x00\x00\x08\x03";
  CHECK_THROWS_AS(read_idx_images((dir / "short.idx").string()), Error);
}
