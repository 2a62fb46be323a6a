#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "supfactor/error.hpp"
#include "supfactor/rng.hpp"
#include "supfactor/supervised_nmf.hpp"
#include "supfactor/synth_data.hpp"

namespace supfactor::synth {

namespace {

using Eigen::Index;

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(static_cast<bool>(in), ErrorKind::Io, "truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_idx(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::MissingInput, "IDX file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path);
  return in;
}

}  // namespace

std::pair<int, int> task_classes(NMFTask task) {
  switch (task) {
    case NMFTask::PulloverShirt: return {2, 6};
    case NMFTask::TshirtShirt: return {0, 6};
    case NMFTask::TshirtCoat: return {0, 4};
  }
  throw Error(ErrorKind::InvalidConfig, "unknown task");
}

const char* task_name(NMFTask task) {
  switch (task) {
    case NMFTask::PulloverShirt: return "pullover_shirt";
    case NMFTask::TshirtShirt: return "tshirt_shirt";
    case NMFTask::TshirtCoat: return "tshirt_coat";
  }
  return "unknown";
}

void validate(const NMFSynthConfig& c) {
  require(c.base_components >= 1, ErrorKind::InvalidConfig, "base_components must be >= 1");
  require(c.model_components >= 1 && c.model_components <= c.base_components,
          ErrorKind::InvalidConfig, "model_components must lie in [1, base_components]");
  require(!c.noise_std || *c.noise_std >= 0.0, ErrorKind::InvalidConfig,
          "noise_std must be non-negative");
  require(c.test_fraction > 0.0 && c.test_fraction < 1.0, ErrorKind::InvalidConfig,
          "test_fraction must lie in (0, 1)");
}

std::pair<std::vector<Index>, std::vector<Index>> stratified_split(const Eigen::VectorXd& labels,
                                                                    double test_fraction,
                                                                    std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorKind::InvalidConfig,
          "test_fraction must lie in (0, 1)");
  std::vector<Index> train, test;
  std::uint64_t counter = 0;
  for (double cls : {0.0, 1.0}) {
    std::vector<Index> members;
    for (Index i = 0; i < labels.size(); ++i)
      if (labels(i) == cls) members.push_back(i);
    // Fisher-Yates with counter-based draws.
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[counter_index(seed, counter++, i)]);
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * members.size()));
    if (members.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    test.insert(test.end(), members.begin(), members.begin() + static_cast<long>(n_test));
    train.insert(train.end(), members.begin() + static_cast<long>(n_test), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

NMFSynthData gen_nmf_pseudo(const Eigen::MatrixXd& images, const std::vector<int>& class_labels,
                            const NMFSynthConfig& c) {
  validate(c);
  require(static_cast<Index>(class_labels.size()) == images.cols(), ErrorKind::ShapeError,
          "one class label per image column required");
  require(images.allFinite() && (images.size() == 0 || images.minCoeff() >= 0.0),
          ErrorKind::InvalidData, "images must be finite and non-negative");
  const auto [neg, pos] = task_classes(c.task);
  std::vector<Index> keep;
  Index n_pos = 0;
  for (std::size_t i = 0; i < class_labels.size(); ++i)
    if (class_labels[i] == neg || class_labels[i] == pos) {
      keep.push_back(static_cast<Index>(i));
      n_pos += class_labels[i] == pos;
    }
  const auto n = static_cast<Index>(keep.size());
  require(n_pos > 0 && n_pos < n, ErrorKind::InvalidData,
          "both task classes must be present in the image set");

  NMFSynthData out;
  Eigen::MatrixXd selected(images.rows(), n);
  out.labels.resize(n);
  for (Index j = 0; j < n; ++j) {
    selected.col(j) = images.col(keep[static_cast<std::size_t>(j)]);
    out.labels(j) = class_labels[static_cast<std::size_t>(keep[static_cast<std::size_t>(j)])] == pos;
  }

  nmf::NMFResult base = nmf::fit_unsupervised(selected, c.base_components, c.base_iterations, c.seed);
  out.W_base = std::move(base.W);
  out.H_base = std::move(base.H);
  out.reconstruction = out.W_base * out.H_base;
  out.noise_std = c.noise_std ? *c.noise_std : 0.05 * out.reconstruction.cwiseAbs().mean();
  out.X = out.reconstruction;
  if (out.noise_std > 0.0) {
    Rng rng(mix64(c.seed ^ 0x6e6f697365ULL));
    out.X += out.noise_std * standard_normal(out.X.rows(), out.X.cols(), rng);
    out.X = out.X.cwiseMax(0.0);
  }
  std::tie(out.train_index, out.test_index) = stratified_split(out.labels, c.test_fraction, c.seed);
  return out;
}

Eigen::MatrixXd read_idx_images(const std::string& path) {
  std::ifstream in = open_idx(path);
  require(read_be32(in) == 0x00000803u, ErrorKind::Io, "bad IDX image magic in " + path);
  const std::uint32_t count = read_be32(in), rows = read_be32(in), cols = read_be32(in);
  require(rows > 0 && cols > 0 && rows * cols <= (1u << 20), ErrorKind::Io,
          "implausible IDX image size in " + path);
  const std::size_t pixels = std::size_t{rows} * cols;
  std::vector<unsigned char> buf(pixels);
  Eigen::MatrixXd out(static_cast<Index>(pixels), static_cast<Index>(count));
  for (std::uint32_t j = 0; j < count; ++j) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
    require(static_cast<bool>(in), ErrorKind::Io, "truncated IDX image data in " + path);
    for (std::size_t i = 0; i < pixels; ++i)
      out(static_cast<Index>(i), static_cast<Index>(j)) = buf[i] / 255.0;
  }
  return out;
}

std::vector<int> read_idx_labels(const std::string& path) {
  std::ifstream in = open_idx(path);
  require(read_be32(in) == 0x00000801u, ErrorKind::Io, "bad IDX label magic in " + path);
  const std::uint32_t count = read_be32(in);
  std::vector<unsigned char> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
  require(static_cast<bool>(in), ErrorKind::Io, "truncated IDX label data in " + path);
  return std::vector<int>(buf.begin(), buf.end());
}

void write_idx_images(const std::string& path, const Eigen::MatrixXd& images, int rows, int cols) {
  require(images.rows() == static_cast<Index>(rows) * cols, ErrorKind::ShapeError,
          "image rows must equal rows * cols");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path);
  write_be32(out, 0x00000803u);
  write_be32(out, static_cast<std::uint32_t>(images.cols()));
  write_be32(out, static_cast<std::uint32_t>(rows));
  write_be32(out, static_cast<std::uint32_t>(cols));
  for (Index j = 0; j < images.cols(); ++j)
    for (Index i = 0; i < images.rows(); ++i) {
      const double v = std::clamp(images(i, j), 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path);
  write_be32(out, 0x00000801u);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.put(static_cast<char>(static_cast<unsigned char>(l)));
}

}  // namespace supfactor::synth
