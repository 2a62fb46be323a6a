#pragma once

// Power and coherence features from multichannel time-series windows.
//
// Flattened feature layout (part of the file format):
//   power      channel-major, then band:      pow_ch{c}_{f}Hz
//   coherence  pairs (i < j) lexicographic, then band: coh_ch{i}_ch{j}_{f}Hz
// Channels are numbered from 0; f is the lower band edge in Hz.

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace supfactor::spectral {

struct TimeSeriesWindow {
  Eigen::MatrixXd samples;  // C x N
  double sample_rate_hz = 1000.0;
  std::int64_t window_id = 0;
};

enum class Taper { Hamming, Hann, Rect };

struct WelchConfig {
  Eigen::Index segment_length = 0;
  double overlap_fraction = 0.5;
  Taper taper = Taper::Hamming;
  Eigen::Index fft_length = 0;
};

// Segment N/8 (rounded), 50% overlap, Hamming taper, FFT length the next power
// of two >= max(segment, fs) so bins are at most 1 Hz wide.
WelchConfig default_welch(Eigen::Index n_samples, double sample_rate_hz);

// Throws InvalidConfig when the configuration does not fit n_samples.
void validate(const WelchConfig& config, Eigen::Index n_samples);

Eigen::Index segment_count(const WelchConfig& config, Eigen::Index n_samples);

struct Spectrum {
  Eigen::VectorXd freqs_hz;  // one-sided bins 0 .. fs/2
  Eigen::MatrixXd values;    // rows x bins
};

// One-sided power spectral density (units^2 / Hz): averaged tapered
// periodograms, with interior bins doubled so sum(values) * df approximates
// the signal variance.
Spectrum welch_psd(const TimeSeriesWindow& window, const WelchConfig& config);

// Magnitude-squared coherence |S_xy|^2 / (S_xx S_yy) with Welch-averaged
// spectra, one row per channel pair (i < j, lexicographic). Requires at least
// two segments. Bins where either auto-spectrum vanishes are 0.
Spectrum ms_coherence(const TimeSeriesWindow& window, const WelchConfig& config);

// Coherence of one ordered pair (used to check symmetry).
Eigen::VectorXd pair_coherence(const TimeSeriesWindow& window, const WelchConfig& config,
                               Eigen::Index i, Eigen::Index j);

std::vector<std::pair<Eigen::Index, Eigen::Index>> channel_pairs(Eigen::Index channels);

// Mean of the bins whose centre lies in [k, k + width) for k = first, first +
// width, ..., up to band `count`. Default: 56 bands of 1 Hz from 1 Hz.
struct BandLayout {
  double first_hz = 1.0;
  double width_hz = 1.0;
  Eigen::Index count = 56;
};

Eigen::MatrixXd band_aggregate(const Spectrum& spectrum, const BandLayout& bands = {});

struct Rejection {
  std::int64_t window_id = 0;
  Eigen::Index channel = 0;
  double run_fraction = 0.0;  // longest run at the extreme / N
};

struct FilterResult {
  std::vector<TimeSeriesWindow> retained;
  std::vector<Rejection> rejected;  // one entry per offending channel
};

// A window is rejected when some channel sits at its extreme magnitude
// (within 1e-9 relative) for more than threshold_fraction of N consecutive
// samples.
FilterResult saturation_filter(const std::vector<TimeSeriesWindow>& windows,
                               double threshold_fraction);

struct SpectralFeatureVector {
  Eigen::MatrixXd power;      // C x F
  Eigen::MatrixXd coherence;  // C(C-1)/2 x F
  Eigen::VectorXd band_edges_hz;  // F + 1 edges
};

Eigen::Index feature_length(Eigen::Index channels, Eigen::Index bands);

Eigen::VectorXd assemble_features(const Eigen::MatrixXd& power, const Eigen::MatrixXd& coherence);
SpectralFeatureVector unflatten(const Eigen::VectorXd& features, Eigen::Index channels,
                                Eigen::Index bands, const BandLayout& layout = {});

std::vector<std::string> feature_names(Eigen::Index channels, const BandLayout& layout = {});

// Full per-window pipeline: Welch power and coherence, banded and flattened.
Eigen::VectorXd window_features(const TimeSeriesWindow& window, const WelchConfig& config,
                                const BandLayout& layout = {});

// Log band power per window (channel-major, then band), one column per
// window. Powers are floored at 1e-12 before the log.
Eigen::MatrixXd log_power_features(const std::vector<Eigen::MatrixXd>& windows,
                                   double sample_rate_hz, const WelchConfig& config,
                                   const BandLayout& layout);

// Raw windows: float64 little-endian, window after window, each channel-major
// (C rows of N samples). The sidecar is key=value text: channels, samples,
// sample_rate_hz, windows, window_ids (comma separated).
std::vector<TimeSeriesWindow> read_windows(const std::string& binary_path,
                                           const std::string& sidecar_path);
void write_windows(const std::string& binary_path, const std::string& sidecar_path,
                   const std::vector<TimeSeriesWindow>& windows);

// Header row of names, then one row per window: window_id followed by the
// features printed with %.17g.
void write_feature_file(std::ostream& out, const std::vector<std::string>& names,
                        const std::vector<std::int64_t>& window_ids,
                        const std::vector<Eigen::VectorXd>& rows);
void write_feature_file(const std::string& path, const std::vector<std::string>& names,
                        const std::vector<std::int64_t>& window_ids,
                        const std::vector<Eigen::VectorXd>& rows);

}  // namespace supfactor::spectral
