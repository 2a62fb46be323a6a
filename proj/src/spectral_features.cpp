#include "supfactor/spectral_features.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "supfactor/error.hpp"

namespace supfactor::spectral {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using cplx = std::complex<double>;

Index next_pow2(Index n) {
  Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

VectorXd taper_weights(Taper t, Index n) {
  VectorXd w(n);
  if (t == Taper::Rect || n == 1) return VectorXd::Ones(n);
  const double denom = static_cast<double>(n - 1);
  for (Index i = 0; i < n; ++i) {
    const double c = std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / denom);
    w(i) = t == Taper::Hamming ? 0.54 - 0.46 * c : 0.5 - 0.5 * c;
  }
  return w;
}

Index step_of(const WelchConfig& c) {
  const auto overlap = static_cast<Index>(std::llround(c.overlap_fraction * c.segment_length));
  return std::max<Index>(1, c.segment_length - overlap);
}

VectorXd frequencies(Index nfft, double fs) {
  const Index bins = nfft / 2 + 1;
  VectorXd f(bins);
  for (Index k = 0; k < bins; ++k) f(k) = fs * static_cast<double>(k) / static_cast<double>(nfft);
  return f;
}

void check_window(const TimeSeriesWindow& w) {
  require(w.samples.rows() >= 1 && w.samples.cols() >= 2, ErrorKind::ShapeError,
          "window needs at least one channel and two samples");
  require(w.samples.allFinite(), ErrorKind::InvalidData, "window contains non-finite samples");
  require(w.sample_rate_hz > 0.0, ErrorKind::InvalidConfig, "sample rate must be positive");
}

// Tapered, zero-padded FFT of every segment for every channel:
// result[s](c, k) for one-sided bins k.
std::vector<Eigen::MatrixXcd> segment_spectra(const TimeSeriesWindow& w, const WelchConfig& c) {
  const Index C = w.samples.rows();
  const Index segs = segment_count(c, w.samples.cols());
  const Index step = step_of(c);
  const Index bins = c.fft_length / 2 + 1;
  const VectorXd taper = taper_weights(c.taper, c.segment_length);
  Eigen::FFT<double> fft;
  std::vector<double> in(static_cast<std::size_t>(c.fft_length), 0.0);
  std::vector<cplx> out;
  std::vector<Eigen::MatrixXcd> result;
  result.reserve(static_cast<std::size_t>(segs));
  for (Index s = 0; s < segs; ++s) {
    Eigen::MatrixXcd m(C, bins);
    for (Index ch = 0; ch < C; ++ch) {
      std::fill(in.begin(), in.end(), 0.0);
      for (Index i = 0; i < c.segment_length; ++i)
        in[static_cast<std::size_t>(i)] = taper(i) * w.samples(ch, s * step + i);
      fft.fwd(out, in);
      for (Index k = 0; k < bins; ++k) m(ch, k) = out[static_cast<std::size_t>(k)];
    }
    result.push_back(std::move(m));
  }
  return result;
}

double density_scale(const WelchConfig& c, double fs) {
  return 1.0 / (fs * taper_weights(c.taper, c.segment_length).squaredNorm());
}

// Auto-spectra (unscaled) and the segment spectra they came from.
struct Accumulated {
  std::vector<Eigen::MatrixXcd> spectra;
  MatrixXd auto_sum;  // C x bins, sum over segments of |X|^2
};

Accumulated accumulate(const TimeSeriesWindow& w, const WelchConfig& c) {
  Accumulated a;
  a.spectra = segment_spectra(w, c);
  a.auto_sum = MatrixXd::Zero(w.samples.rows(), c.fft_length / 2 + 1);
  for (const auto& m : a.spectra) a.auto_sum += m.cwiseAbs2();
  return a;
}

VectorXd coherence_from(const Accumulated& a, Index i, Index j) {
  const Index bins = a.auto_sum.cols();
  Eigen::VectorXcd cross = Eigen::VectorXcd::Zero(bins);
  for (const auto& m : a.spectra)
    for (Index k = 0; k < bins; ++k) cross(k) += m(i, k) * std::conj(m(j, k));
  VectorXd out(bins);
  for (Index k = 0; k < bins; ++k) {
    const double den = a.auto_sum(i, k) * a.auto_sum(j, k);
    out(k) = den > 0.0 ? std::clamp(std::norm(cross(k)) / den, 0.0, 1.0) : 0.0;
  }
  return out;
}

Index longest_extreme_run(const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  const double top = x.cwiseAbs().maxCoeff();
  const double tol = 1e-9 * std::max(1.0, top);
  Index best = 0, run = 0;
  for (Index i = 0; i < x.size(); ++i) {
    run = std::abs(x(i)) >= top - tol ? run + 1 : 0;
    best = std::max(best, run);
  }
  return best;
}

std::map<std::string, std::string> read_sidecar(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::MissingInput, "sidecar not found: " + path);
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::Io, "malformed sidecar line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string& sidecar_value(const std::map<std::string, std::string>& kv,
                                 const std::string& key) {
  const auto it = kv.find(key);
  require(it != kv.end(), ErrorKind::Io, "sidecar is missing key " + key);
  return it->second;
}

}  // namespace

WelchConfig default_welch(Index n_samples, double sample_rate_hz) {
  WelchConfig c;
  c.segment_length = std::max<Index>(2, static_cast<Index>(std::llround(n_samples / 8.0)));
  c.overlap_fraction = 0.5;
  c.taper = Taper::Hamming;
  c.fft_length = next_pow2(std::max<Index>(
      c.segment_length, static_cast<Index>(std::ceil(sample_rate_hz))));
  return c;
}

void validate(const WelchConfig& c, Index n) {
  require(c.segment_length >= 2, ErrorKind::InvalidConfig, "segment_length must be >= 2");
  require(c.segment_length <= n, ErrorKind::InvalidConfig,
          "segment_length exceeds the window length");
  require(c.overlap_fraction >= 0.0 && c.overlap_fraction < 1.0, ErrorKind::InvalidConfig,
          "overlap_fraction must lie in [0, 1)");
  require(c.fft_length >= c.segment_length, ErrorKind::InvalidConfig,
          "fft_length must be >= segment_length");
}

Index segment_count(const WelchConfig& c, Index n) {
  validate(c, n);
  return (n - c.segment_length) / step_of(c) + 1;
}

Spectrum welch_psd(const TimeSeriesWindow& w, const WelchConfig& c) {
  check_window(w);
  const Accumulated a = accumulate(w, c);
  const Index segs = static_cast<Index>(a.spectra.size());
  Spectrum s;
  s.freqs_hz = frequencies(c.fft_length, w.sample_rate_hz);
  s.values = a.auto_sum * (density_scale(c, w.sample_rate_hz) / static_cast<double>(segs));
  const Index bins = s.values.cols();
  const Index last = c.fft_length % 2 == 0 ? bins - 1 : bins;  // Nyquist bin is not doubled
  for (Index k = 1; k < last; ++k) s.values.col(k) *= 2.0;
  return s;
}

std::vector<std::pair<Index, Index>> channel_pairs(Index channels) {
  std::vector<std::pair<Index, Index>> pairs;
  for (Index i = 0; i < channels; ++i)
    for (Index j = i + 1; j < channels; ++j) pairs.emplace_back(i, j);
  return pairs;
}

Spectrum ms_coherence(const TimeSeriesWindow& w, const WelchConfig& c) {
  check_window(w);
  require(segment_count(c, w.samples.cols()) >= 2, ErrorKind::InvalidConfig,
          "coherence needs at least two averaged segments");
  const Accumulated a = accumulate(w, c);
  const auto pairs = channel_pairs(w.samples.rows());
  Spectrum s;
  s.freqs_hz = frequencies(c.fft_length, w.sample_rate_hz);
  s.values.resize(static_cast<Index>(pairs.size()), s.freqs_hz.size());
  for (std::size_t r = 0; r < pairs.size(); ++r)
    s.values.row(static_cast<Index>(r)) = coherence_from(a, pairs[r].first, pairs[r].second);
  return s;
}

VectorXd pair_coherence(const TimeSeriesWindow& w, const WelchConfig& c, Index i, Index j) {
  check_window(w);
  require(i >= 0 && j >= 0 && i < w.samples.rows() && j < w.samples.rows(),
          ErrorKind::ShapeError, "channel index out of range");
  require(segment_count(c, w.samples.cols()) >= 2, ErrorKind::InvalidConfig,
          "coherence needs at least two averaged segments");
  return coherence_from(accumulate(w, c), i, j);
}

MatrixXd band_aggregate(const Spectrum& s, const BandLayout& b) {
  require(s.freqs_hz.size() >= 2 && s.values.cols() == s.freqs_hz.size(), ErrorKind::ShapeError,
          "spectrum and frequency grid disagree");
  require(b.width_hz > 0.0 && b.count >= 1, ErrorKind::InvalidConfig, "invalid band layout");
  const double df = s.freqs_hz(1) - s.freqs_hz(0);
  require(df <= b.width_hz * (1.0 + 1e-12), ErrorKind::InvalidConfig,
          "spectral resolution is coarser than the band width");
  MatrixXd out(s.values.rows(), b.count);
  for (Index k = 0; k < b.count; ++k) {
    const double lo = b.first_hz + static_cast<double>(k) * b.width_hz, hi = lo + b.width_hz;
    VectorXd sum = VectorXd::Zero(s.values.rows());
    Index n = 0;
    for (Index f = 0; f < s.freqs_hz.size(); ++f)
      if (s.freqs_hz(f) >= lo && s.freqs_hz(f) < hi) {
        sum += s.values.col(f);
        ++n;
      }
    require(n > 0, ErrorKind::InvalidConfig, "band holds no spectral bins");
    out.col(k) = sum / static_cast<double>(n);
  }
  return out;
}

FilterResult saturation_filter(const std::vector<TimeSeriesWindow>& windows,
                               double threshold_fraction) {
  require(threshold_fraction > 0.0 && threshold_fraction <= 1.0, ErrorKind::InvalidConfig,
          "threshold_fraction must lie in (0, 1]");
  FilterResult r;
  for (const TimeSeriesWindow& w : windows) {
    bool bad = false;
    const double n = static_cast<double>(w.samples.cols());
    for (Index ch = 0; ch < w.samples.rows(); ++ch) {
      const double frac = static_cast<double>(longest_extreme_run(w.samples.row(ch))) / n;
      if (frac > threshold_fraction) {
        r.rejected.push_back({w.window_id, ch, frac});
        bad = true;
      }
    }
    if (!bad) r.retained.push_back(w);
  }
  return r;
}

Index feature_length(Index channels, Index bands) {
  return channels * bands + bands * channels * (channels - 1) / 2;
}

VectorXd assemble_features(const MatrixXd& power, const MatrixXd& coherence) {
  const Index C = power.rows(), F = power.cols();
  require(coherence.rows() == C * (C - 1) / 2 && coherence.cols() == F, ErrorKind::ShapeError,
          "coherence shape does not match power");
  VectorXd v(feature_length(C, F));
  Index pos = 0;
  for (Index c = 0; c < C; ++c)
    for (Index f = 0; f < F; ++f) v(pos++) = power(c, f);
  for (Index r = 0; r < coherence.rows(); ++r)
    for (Index f = 0; f < F; ++f) v(pos++) = coherence(r, f);
  return v;
}

SpectralFeatureVector unflatten(const VectorXd& v, Index C, Index F, const BandLayout& layout) {
  require(v.size() == feature_length(C, F), ErrorKind::ShapeError,
          "feature vector length does not match channels and bands");
  SpectralFeatureVector out;
  out.power.resize(C, F);
  out.coherence.resize(C * (C - 1) / 2, F);
  Index pos = 0;
  for (Index c = 0; c < C; ++c)
    for (Index f = 0; f < F; ++f) out.power(c, f) = v(pos++);
  for (Index r = 0; r < out.coherence.rows(); ++r)
    for (Index f = 0; f < F; ++f) out.coherence(r, f) = v(pos++);
  out.band_edges_hz.resize(F + 1);
  for (Index k = 0; k <= F; ++k)
    out.band_edges_hz(k) = layout.first_hz + static_cast<double>(k) * layout.width_hz;
  return out;
}

std::vector<std::string> feature_names(Index C, const BandLayout& b) {
  std::vector<std::string> names;
  auto band = [&](Index k) {
    std::ostringstream os;
    os << b.first_hz + static_cast<double>(k) * b.width_hz << "Hz";
    return os.str();
  };
  for (Index c = 0; c < C; ++c)
    for (Index k = 0; k < b.count; ++k)
      names.push_back("pow_ch" + std::to_string(c) + "_" + band(k));
  for (const auto& [i, j] : channel_pairs(C))
    for (Index k = 0; k < b.count; ++k)
      names.push_back("coh_ch" + std::to_string(i) + "_ch" + std::to_string(j) + "_" + band(k));
  return names;
}

VectorXd window_features(const TimeSeriesWindow& w, const WelchConfig& c, const BandLayout& b) {
  const MatrixXd power = band_aggregate(welch_psd(w, c), b);
  const MatrixXd coh = w.samples.rows() > 1 ? band_aggregate(ms_coherence(w, c), b)
                                            : MatrixXd(0, b.count);
  return assemble_features(power, coh);
}

std::vector<TimeSeriesWindow> read_windows(const std::string& binary_path,
                                           const std::string& sidecar_path) {
  const auto kv = read_sidecar(sidecar_path);
  const Index C = std::stol(sidecar_value(kv, "channels"));
  const Index N = std::stol(sidecar_value(kv, "samples"));
  const double fs = std::stod(sidecar_value(kv, "sample_rate_hz"));
  const Index W = std::stol(sidecar_value(kv, "windows"));
  require(C >= 1 && N >= 2 && W >= 0 && fs > 0.0, ErrorKind::Io, "invalid sidecar values");
  std::vector<std::int64_t> ids;
  {
    std::stringstream ss(kv.count("window_ids") ? kv.at("window_ids") : "");
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) ids.push_back(std::stoll(tok));
  }
  if (ids.empty())
    for (Index w = 0; w < W; ++w) ids.push_back(w);
  require(static_cast<Index>(ids.size()) == W, ErrorKind::Io,
          "window_ids count does not match windows");

  if (!std::filesystem::exists(binary_path))
    throw Error(ErrorKind::MissingInput, "window file not found: " + binary_path);
  const auto expected = static_cast<std::uintmax_t>(C * N * W) * sizeof(double);
  require(std::filesystem::file_size(binary_path) == expected, ErrorKind::Io,
          "window file size does not match the sidecar");
  std::ifstream in(binary_path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + binary_path);
  std::vector<TimeSeriesWindow> out;
  std::vector<double> buf(static_cast<std::size_t>(N));
  for (Index w = 0; w < W; ++w) {
    TimeSeriesWindow tw;
    tw.sample_rate_hz = fs;
    tw.window_id = ids[static_cast<std::size_t>(w)];
    tw.samples.resize(C, N);
    for (Index c = 0; c < C; ++c) {
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(N * 8));
      require(static_cast<bool>(in), ErrorKind::Io, "truncated window file");
      for (Index i = 0; i < N; ++i) tw.samples(c, i) = buf[static_cast<std::size_t>(i)];
    }
    out.push_back(std::move(tw));
  }
  return out;
}

void write_windows(const std::string& binary_path, const std::string& sidecar_path,
                   const std::vector<TimeSeriesWindow>& windows) {
  require(!windows.empty(), ErrorKind::InvalidData, "no windows to write");
  const Index C = windows[0].samples.rows(), N = windows[0].samples.cols();
  std::ofstream bin(binary_path, std::ios::binary);
  require(static_cast<bool>(bin), ErrorKind::Io, "cannot open " + binary_path);
  std::string ids;
  for (const auto& w : windows) {
    require(w.samples.rows() == C && w.samples.cols() == N &&
                w.sample_rate_hz == windows[0].sample_rate_hz,
            ErrorKind::ShapeError, "windows must share shape and sample rate");
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < N; ++i) {
        const double v = w.samples(c, i);
        bin.write(reinterpret_cast<const char*>(&v), 8);
      }
    ids += (ids.empty() ? "" : ",") + std::to_string(w.window_id);
  }
  std::ofstream side(sidecar_path);
  require(static_cast<bool>(side), ErrorKind::Io, "cannot open " + sidecar_path);
  char fs[64];
  std::snprintf(fs, sizeof fs, "%.17g", windows[0].sample_rate_hz);
  side << "channels=" << C << "\nsamples=" << N << "\nsample_rate_hz=" << fs
       << "\nwindows=" << windows.size() << "\nwindow_ids=" << ids << "\n";
}

void write_feature_file(std::ostream& out, const std::vector<std::string>& names,
                        const std::vector<std::int64_t>& window_ids,
                        const std::vector<VectorXd>& rows) {
  require(window_ids.size() == rows.size(), ErrorKind::ShapeError, "one id per feature row");
  out << "window_id";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r].size() == static_cast<Index>(names.size()), ErrorKind::ShapeError,
            "feature row length does not match the header");
    out << window_ids[r];
    for (Index i = 0; i < rows[r].size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", rows[r](i));
      out << ',' << buf;
    }
    out << '\n';
  }
}

void write_feature_file(const std::string& path, const std::vector<std::string>& names,
                        const std::vector<std::int64_t>& window_ids,
                        const std::vector<VectorXd>& rows) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path);
  write_feature_file(out, names, window_ids, rows);
}

MatrixXd log_power_features(const std::vector<MatrixXd>& windows, double fs,
                            const WelchConfig& config, const BandLayout& layout) {
  require(!windows.empty(), ErrorKind::InvalidData, "no windows");
  const Index C = windows[0].rows();
  MatrixXd F(C * layout.count, static_cast<Index>(windows.size()));
  for (std::size_t w = 0; w < windows.size(); ++w) {
    require(windows[w].rows() == C, ErrorKind::ShapeError, "windows differ in channel count");
    const TimeSeriesWindow tw{windows[w], fs, static_cast<std::int64_t>(w)};
    const MatrixXd banded = band_aggregate(welch_psd(tw, config), layout);
    for (Index c = 0; c < C; ++c)
      for (Index b = 0; b < layout.count; ++b)
        F(c * layout.count + b, static_cast<Index>(w)) = std::log(std::max(banded(c, b), 1e-12));
  }
  return F;
}

}  // namespace supfactor::spectral
