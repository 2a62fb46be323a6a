#pragma once

// Experiment configuration, orchestration and run directories.
//
// A run directory holds:
//   config.snapshot  resolved configuration (JSON)
//   metrics.csv      long format: mode,metric,mu,value (values printed %.17g)
//   timings.csv      wall-clock seconds per step (not reproducible)
//   other artifacts  per experiment (table1.csv, features.csv, ...)
//   manifest         status line, then "sha256 <hex>  <file>" per file
//
// metrics.csv is byte-identical across reruns of the same config and seed.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "supfactor/csm_kernel.hpp"
#include "supfactor/error.hpp"
#include "supfactor/spectral_features.hpp"
#include "supfactor/supervised_nmf.hpp"
#include "supfactor/synth_data.hpp"

namespace supfactor::harness {

enum class Experiment { SweepMu, SensitivityMu, NMFTable1, CSFAToy, ExtractFeatures };

// CLI spelling: sweep-mu, sensitivity-mu, nmf-table1, csfa-toy, extract-features.
const char* experiment_name(Experiment e);
std::optional<Experiment> parse_experiment(const std::string& name);

struct MuGrid {
  double min = 1e-2;
  double max = 1e3;
  Eigen::Index points = 40;
};

// Log-spaced grid; a single point gives {min}.
std::vector<double> mu_values(const MuGrid& grid);

struct LinearExperiment {
  synth::LinearSynthConfig data;
  Eigen::Index L = 2;
  MuGrid grid;
};

struct NMFExperiment {
  std::string images;  // IDX image file
  std::string labels;  // IDX label file
  std::vector<synth::NMFTask> tasks{synth::NMFTask::PulloverShirt, synth::NMFTask::TshirtShirt,
                                    synth::NMFTask::TshirtCoat};
  synth::NMFSynthConfig data;
  nmf::FitConfig fit;
  // Ground-truth reference: L1 logistic regression on the base scores.
  double reference_l1 = 1e-3;
  std::size_t reference_iterations = 5000;
};

struct CSFAFeatures {
  Eigen::Index segment_length = 16;
  spectral::BandLayout bands{2.0, 4.0, 7};
};

struct CSFAExperiment {
  synth::CSFAToyConfig data;
  csm::CSFAToyOptions fit;
  CSFAFeatures features;
};

struct FeatureExperiment {
  std::string windows;  // raw float64 file
  std::string sidecar;  // key=value metadata
  double saturation_threshold = 0.05;
  spectral::BandLayout bands;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::SweepMu;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  // A fixed mu replaces the grid (sweeps) or the fit mu (nmf, csfa).
  std::optional<double> mu;
  bool mu_auto = false;
  LinearExperiment linear;
  NMFExperiment nmf;
  CSFAExperiment csfa;
  FeatureExperiment features;
};

// Defaults for an experiment: sensitivity-mu uses L = 3 on L_true = 3 with
// n_train = 200; sweep-mu uses L = 2.
ExperimentConfig default_config(Experiment e);

// Parses a JSON object over default_config(e). Unknown keys at any level,
// wrong types and invalid values raise InvalidConfig. Only the section of the
// selected experiment may appear. The seed is propagated to every generator
// and optimizer.
ExperimentConfig parse_config(const nlohmann::json& j, Experiment e);
ExperimentConfig load_config(const std::string& path, Experiment e);

// Resolved configuration, the content of config.snapshot.
nlohmann::json to_json(const ExperimentConfig& config);

// Overrides the seed everywhere it is used.
void set_seed(ExperimentConfig& config, std::uint64_t seed);

struct MetricRow {
  std::string mode;
  std::string metric;
  double mu = 0.0;  // NaN when the metric has no mu
  double value = 0.0;
};

struct Timing {
  std::string step;
  double seconds = 0.0;
};

struct Artifact {
  std::string name;
  std::string content;
};

struct ExperimentOutput {
  std::vector<MetricRow> metrics;
  std::vector<Artifact> artifacts;
  std::vector<Timing> timings;
};

// Metric names of the linear sweeps, held-out MSE per entry.
inline constexpr const char* kReconKnown = "recon_mse_y_known";
inline constexpr const char* kReconUnknown = "recon_mse_y_unknown";
inline constexpr const char* kPredKnown = "pred_mse_y_known";
inline constexpr const char* kPredUnknown = "pred_mse_y_unknown";
inline constexpr const char* kDragging = "factor_dragging";

// Local and Encoded fits over the grid. With `dragging`, also records
// ||S_known - S_unknown||_F / N per mu.
std::vector<MetricRow> linear_sweep(const LinearExperiment& config, bool dragging);

// Table-1 data for the configured tasks: rows ground_truth, sequential,
// local, encoded.
ExperimentOutput nmf_table1(const NMFExperiment& config);

ExperimentOutput csfa_toy(const CSFAExperiment& config);
ExperimentOutput extract_features(const FeatureExperiment& config);

// Bisects log mu over [1e-4, 1e4] until mu * supervision and reconstruction
// loss magnitudes agree within 10% (at most 40 steps). Supported for the
// linear sweeps, nmf-table1 (first task, encoded mode) and csfa-toy.
double auto_mu(const ExperimentConfig& config);

ExperimentOutput run(const ExperimentConfig& config);

std::string metrics_csv(const std::vector<MetricRow>& rows);

// Runs the experiment into `dir`, which must not exist or be empty. On failure
// the manifest is written with status FAILED and the error is rethrown.
void run_to_directory(const ExperimentConfig& config, const std::filesystem::path& dir);

std::string sha256_hex(const std::string& bytes);

struct Verification {
  bool ok = false;
  std::string status;                 // FINALIZED or FAILED
  std::vector<std::string> problems;  // mismatched, missing or extra files
};

Verification verify(const std::filesystem::path& dir);

// CLI exit code for an error kind: 2 config, 3 missing input, 4 numerical.
int exit_code(ErrorKind kind);

}  // namespace supfactor::harness
