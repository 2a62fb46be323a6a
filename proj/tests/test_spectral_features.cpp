#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "supfactor/error.hpp"
#include "supfactor/rng.hpp"
#include "supfactor/spectral_features.hpp"

using namespace supfactor;
using namespace supfactor::spectral;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

TimeSeriesWindow make_window(const MatrixXd& samples, double fs = 1000.0, std::int64_t id = 0) {
  TimeSeriesWindow w;
  w.samples = samples;
  w.sample_rate_hz = fs;
  w.window_id = id;
  return w;
}

MatrixXd sine(Index n, double freq, double fs, double amp = 1.0, double phase = 0.0) {
  MatrixXd m(1, n);
  for (Index i = 0; i < n; ++i)
    m(0, i) = amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / fs + phase);
  return m;
}

// Welch density by direct O(n^2) DFT, written out from the definition.
VectorXd naive_welch(const VectorXd& x, const WelchConfig& c, double fs) {
  const Index L = c.segment_length, nfft = c.fft_length;
  const Index step = L - static_cast<Index>(std::llround(c.overlap_fraction * L));
  VectorXd w(L);
  for (Index i = 0; i < L; ++i) w(i) = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (L - 1.0));
  const Index bins = nfft / 2 + 1;
  VectorXd acc = VectorXd::Zero(bins);
  Index segs = 0;
  for (Index start = 0; start + L <= x.size(); start += step, ++segs)
    for (Index k = 0; k < bins; ++k) {
      std::complex<double> s = 0.0;
      for (Index i = 0; i < L; ++i)
        s += w(i) * x(start + i) * std::polar(1.0, -2.0 * kPi * k * i / nfft);
      acc(k) += std::norm(s);
    }
  acc /= fs * w.squaredNorm() * segs;
  for (Index k = 1; k < bins - 1; ++k) acc(k) *= 2.0;
  return acc;
}

double median(VectorXd v) {
  std::sort(v.data(), v.data() + v.size());
  return v(v.size() / 2);
}

}  // namespace

TEST_CASE("default Welch configuration") {
  const WelchConfig c = default_welch(1000, 1000.0);
  CHECK(c.segment_length == 125);
  CHECK(c.overlap_fraction == 0.5);
  CHECK(c.taper == Taper::Hamming);
  CHECK(c.fft_length == 1024);
  CHECK(segment_count(c, 1000) == 15);
}

TEST_CASE("welch_psd matches a direct DFT") {
  Rng rng(1);
  const MatrixXd x = standard_normal(1, 400, rng);
  WelchConfig c = default_welch(400, 200.0);
  const Spectrum s = welch_psd(make_window(x, 200.0), c);
  const VectorXd ref = naive_welch(x.row(0).transpose(), c, 200.0);
  CHECK(s.values.cols() == ref.size());
  CHECK((s.values.row(0).transpose() - ref).norm() / ref.norm() < 1e-10);
  CHECK(s.freqs_hz(1) == doctest::Approx(200.0 / c.fft_length));
  CHECK(s.values.minCoeff() >= 0.0);
}

TEST_CASE("sine peaks at its frequency") {
  const TimeSeriesWindow w = make_window(sine(1000, 10.0, 1000.0));
  const Spectrum s = welch_psd(w, default_welch(1000, 1000.0));
  Index peak;
  s.values.row(0).maxCoeff(&peak);
  const double df = s.freqs_hz(1);
  CHECK(std::abs(s.freqs_hz(peak) - 10.0) <= df / 2.0);
  CHECK(s.values(0, peak) >= 20.0 * median(s.values.row(0).transpose()));
}

TEST_CASE("white-noise PSD integrates to the variance") {
  Rng rng(2);
  const double sigma = 2.0;
  const WelchConfig c = default_welch(1000, 1000.0);
  double total = 0.0;
  for (int w = 0; w < 100; ++w) {
    const Spectrum s = welch_psd(make_window(sigma * standard_normal(1, 1000, rng)), c);
    total += s.values.sum() * s.freqs_hz(1);
  }
  CHECK(std::abs(total / 100.0 - sigma * sigma) < 0.1 * sigma * sigma);
}

TEST_CASE("zero signal and configuration errors") {
  const Spectrum s = welch_psd(make_window(MatrixXd::Zero(2, 256)), default_welch(256, 256.0));
  CHECK(s.values.cwiseAbs().maxCoeff() == 0.0);

  WelchConfig c = default_welch(256, 256.0);
  c.segment_length = 300;
  c.fft_length = 512;
  try {
    welch_psd(make_window(MatrixXd::Ones(1, 256)), c);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidConfig);
  }

  WelchConfig one = default_welch(256, 256.0);
  one.segment_length = 256;
  one.fft_length = 256;
  try {
    ms_coherence(make_window(MatrixXd::Random(2, 256)), one);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidConfig);
  }
}

TEST_CASE("coherence of duplicated and independent channels") {
  Rng rng(3);
  const WelchConfig c = default_welch(1000, 1000.0);
  MatrixXd dup(2, 1000);
  dup.row(0) = standard_normal(1, 1000, rng);
  dup.row(1) = dup.row(0);
  const MatrixXd banded = band_aggregate(ms_coherence(make_window(dup), c));
  CHECK((banded.array() - 1.0).abs().maxCoeff() < 1e-12);

  WelchConfig eight = c;
  eight.overlap_fraction = 0.0;
  CHECK(segment_count(eight, 1000) == 8);
  double mean = 0.0;
  for (int t = 0; t < 20; ++t)
    mean += ms_coherence(make_window(standard_normal(2, 1000, rng)), eight).values.mean();
  CHECK(mean / 20.0 < 0.25);
}

TEST_CASE("coherence is invariant to a constant delay") {
  Rng rng(4);
  const MatrixXd long_signal = standard_normal(1, 1003, rng);
  MatrixXd x(2, 1000);
  x.row(0) = long_signal.block(0, 3, 1, 1000);
  x.row(1) = long_signal.block(0, 0, 1, 1000);
  const MatrixXd banded = band_aggregate(ms_coherence(make_window(x), default_welch(1000, 1000.0)));
  CHECK(banded.minCoeff() > 0.9);
}

TEST_CASE("coherence symmetry and scale invariance") {
  Rng rng(5);
  MatrixXd x = standard_normal(3, 800, rng);
  x.row(1) += 0.7 * x.row(0);
  const WelchConfig c = default_welch(800, 400.0);
  const TimeSeriesWindow w = make_window(x, 400.0);
  CHECK(pair_coherence(w, c, 0, 1) == pair_coherence(w, c, 1, 0));
  CHECK(pair_coherence(w, c, 2, 0) == pair_coherence(w, c, 0, 2));

  MatrixXd scaled = x;
  scaled.row(1) *= 3.7;
  const TimeSeriesWindow ws = make_window(scaled, 400.0);
  const Spectrum a = ms_coherence(w, c), b = ms_coherence(ws, c);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() < 1e-10);
  const Spectrum pa = welch_psd(w, c), pb = welch_psd(ws, c);
  CHECK((pb.values.row(1) - 3.7 * 3.7 * pa.values.row(1)).norm() <
        1e-12 * pb.values.row(1).norm());
  CHECK(pb.values.row(0) == pa.values.row(0));
  CHECK(a.values.minCoeff() >= 0.0);
  CHECK(a.values.maxCoeff() <= 1.0);
}

TEST_CASE("band aggregation") {
  Spectrum flat;
  flat.freqs_hz = VectorXd::LinSpaced(513, 0.0, 500.0);
  flat.values = MatrixXd::Constant(2, 513, 3.0);
  const MatrixXd b = band_aggregate(flat);
  CHECK(b.cols() == 56);
  CHECK((b.array() == 3.0).all());

  const Spectrum tone =
      welch_psd(make_window(sine(1000, 10.4, 1000.0)), default_welch(1000, 1000.0));
  const MatrixXd tb = band_aggregate(tone);
  Index top;
  tb.row(0).maxCoeff(&top);
  CHECK(top == 9);  // band [10, 11)

  Spectrum coarse;
  coarse.freqs_hz = VectorXd::LinSpaced(65, 0.0, 500.0);
  coarse.values = MatrixXd::Ones(1, 65);
  CHECK_THROWS_AS(band_aggregate(coarse), Error);
}

TEST_CASE("saturation filter") {
  std::vector<TimeSeriesWindow> windows;
  for (int i = 0; i < 3; ++i)
    windows.push_back(make_window(sine(1000, 7.0 + i, 1000.0), 1000.0, 10 + i));
  MatrixXd clipped(2, 1000);
  clipped.row(0) = sine(1000, 5.0, 1000.0);
  clipped.row(1) = sine(1000, 3.0, 1000.0);
  for (Index i = 300; i < 400; ++i) clipped(1, i) = 1.5;  // 10% at the rail
  windows.push_back(make_window(clipped, 1000.0, 99));

  // Single-channel windows and the two-channel window are filtered together.
  const FilterResult r = saturation_filter(windows, 0.05);
  CHECK(r.retained.size() == 3);
  REQUIRE(r.rejected.size() == 1);
  CHECK(r.rejected[0].window_id == 99);
  CHECK(r.rejected[0].channel == 1);
  CHECK(r.rejected[0].run_fraction == doctest::Approx(0.1));

  CHECK(saturation_filter(windows, 1.0).rejected.empty());
  CHECK_THROWS_AS(saturation_filter(windows, 0.0), Error);
}

TEST_CASE("feature layout, names and round trip") {
  CHECK(feature_length(11, 56) == 3696);
  CHECK(feature_length(2, 3) == 9);
  for (Index C = 1; C <= 12; ++C)
    for (Index F = 1; F <= 5; ++F) CHECK(feature_length(C, F) == C * F + F * C * (C - 1) / 2);

  const MatrixXd power = MatrixXd::Random(4, 3).cwiseAbs();
  const MatrixXd coh = MatrixXd::Random(6, 3).cwiseAbs();
  const VectorXd v = assemble_features(power, coh);
  CHECK(v(1) == power(0, 1));
  CHECK(v(12) == coh(0, 0));
  BandLayout bl;
  bl.count = 3;
  const SpectralFeatureVector u = unflatten(v, 4, 3, bl);
  CHECK(u.power == power);
  CHECK(u.coherence == coh);
  CHECK(u.band_edges_hz(3) == 4.0);
  CHECK_THROWS_AS(assemble_features(power, MatrixXd::Zero(5, 3)), Error);

  const auto names = feature_names(11);
  CHECK(names.size() == 3696);
  CHECK(std::find(names.begin(), names.end(), "pow_ch3_12Hz") != names.end());
  CHECK(std::find(names.begin(), names.end(), "coh_ch2_ch7_31Hz") != names.end());
  CHECK(names[0] == "pow_ch0_1Hz");
  CHECK(names[56] == "pow_ch1_1Hz");
  CHECK(names[616] == "coh_ch0_ch1_1Hz");
}

TEST_CASE("full window pipeline and file formats") {
  Rng rng(6);
  std::vector<TimeSeriesWindow> windows;
  for (int i = 0; i < 3; ++i)
    windows.push_back(make_window(standard_normal(11, 1000, rng), 1000.0, 5 * i));
  const auto dir = std::filesystem::temp_directory_path() / "supfactor_spectral_test";
  std::filesystem::create_directories(dir);
  const std::string bin = (dir / "w.bin").string(), side = (dir / "w.txt").string();
  write_windows(bin, side, windows);
  const auto back = read_windows(bin, side);
  REQUIRE(back.size() == 3);
  CHECK(back[2].samples == windows[2].samples);
  CHECK(back[1].window_id == 5);
  CHECK(back[0].sample_rate_hz == 1000.0);

  const VectorXd f = window_features(back[0], default_welch(1000, 1000.0));
  CHECK(f.size() == 3696);
  CHECK(f.minCoeff() >= 0.0);

  const std::string out = (dir / "features.csv").string();
  write_feature_file(out, feature_names(11), {0}, {f});
  std::ifstream in(out);
  std::string header;
  std::getline(in, header);
  CHECK(std::count(header.begin(), header.end(), ',') == 3696);

  try {
    read_windows((dir / "nope.bin").string(), side);
    FAIL("expected MissingInput");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingInput);
  }
}
