#include "supfactor/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "supfactor/linalg.hpp"
#include "supfactor/linear_supfm.hpp"

namespace supfactor::harness {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

[[noreturn]] void config_error(const std::string& what) {
  throw Error(ErrorKind::InvalidConfig, what);
}

// Strict view of one JSON object: every key must be consumed by a getter
// before finish(), otherwise it is reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_ + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) config_error(name(key) + " must be a number");
      out = v->get<double>();
      if (!std::isfinite(out)) config_error(name(key) + " must be finite");
    }
  }
  void get(const char* key, Index& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer()) config_error(name(key) + " must be an integer");
      out = v->get<Index>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0)
        config_error(name(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) config_error(name(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) config_error(name(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = raw(key)) {
      if (!v->is_array()) config_error(name(key) + " must be an array of numbers");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number()) config_error(name(key) + " must be an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  Section child(const char* key) {
    const json* v = raw(key);
    static const json empty = json::object();
    return Section(v ? *v : empty, name(key));
  }

  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) config_error("unknown key " + name(it.key().c_str()));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::vector<std::pair<synth::NMFTask, std::string>>& task_names() {
  static const std::vector<std::pair<synth::NMFTask, std::string>> t{
      {synth::NMFTask::PulloverShirt, synth::task_name(synth::NMFTask::PulloverShirt)},
      {synth::NMFTask::TshirtShirt, synth::task_name(synth::NMFTask::TshirtShirt)},
      {synth::NMFTask::TshirtCoat, synth::task_name(synth::NMFTask::TshirtCoat)}};
  return t;
}

void read_optimizer(Section s, OptimizerConfig& o) {
  s.get("step_size", o.step_size);
  s.get("first_moment_decay", o.first_moment_decay);
  s.get("second_moment_decay", o.second_moment_decay);
  s.get("nesterov", o.nesterov);
  s.get("iterations", o.iterations);
  s.get("batch_size", o.batch_size);
  s.get("epsilon", o.epsilon);
  s.finish();
}

json optimizer_json(const OptimizerConfig& o) {
  return {{"step_size", o.step_size},
          {"first_moment_decay", o.first_moment_decay},
          {"second_moment_decay", o.second_moment_decay},
          {"nesterov", o.nesterov},
          {"iterations", o.iterations},
          {"batch_size", o.batch_size},
          {"epsilon", o.epsilon}};
}

void read_bands(Section& s, spectral::BandLayout& b) {
  s.get("first_hz", b.first_hz);
  s.get("width_hz", b.width_hz);
  s.get("bands", b.count);
}

void read_linear(Section s, LinearExperiment& c) {
  synth::LinearSynthConfig& d = c.data;
  s.get("p", d.p);
  s.get("q", d.q);
  s.get("L_true", d.L_true);
  s.get("n_train", d.n_train);
  s.get("n_test", d.n_test);
  s.get("noise_x", d.noise_x);
  s.get("noise_y", d.noise_y);
  s.get("top_factor_unpredictive", d.top_factor_unpredictive);
  s.get("loading_norms", d.loading_norms);
  s.get("L", c.L);
  Section g = s.child("grid");
  g.get("min", c.grid.min);
  g.get("max", c.grid.max);
  g.get("points", c.grid.points);
  g.finish();
  s.finish();
}

void read_nmf(Section s, NMFExperiment& c) {
  s.get("images", c.images);
  s.get("labels", c.labels);
  if (const json* t = s.raw("tasks")) {
    if (!t->is_array() || t->empty()) config_error("nmf.tasks must be a non-empty array");
    c.tasks.clear();
    for (const json& e : *t) {
      const auto& names = task_names();
      auto it = std::find_if(names.begin(), names.end(), [&](const auto& p) {
        return e.is_string() && p.second == e.get<std::string>();
      });
      if (it == names.end())
        config_error("nmf.tasks entries must be pullover_shirt, tshirt_shirt or tshirt_coat");
      c.tasks.push_back(it->first);
    }
  }
  s.get("base_components", c.data.base_components);
  s.get("model_components", c.data.model_components);
  if (const json* v = s.raw("noise_std")) {
    if (!v->is_number()) config_error("nmf.noise_std must be a number");
    c.data.noise_std = v->get<double>();
  }
  s.get("base_iterations", c.data.base_iterations);
  s.get("test_fraction", c.data.test_fraction);
  s.get("mu", c.fit.mu);
  s.get("l1_weight", c.fit.l1_weight);
  s.get("warm_start_iterations", c.fit.warm_start_iterations);
  s.get("head_iterations", c.fit.head_iterations);
  s.get("reference_l1", c.reference_l1);
  s.get("reference_iterations", c.reference_iterations);
  Section enc = s.child("encoder");
  std::string layout = c.fit.encoder.layout == nmf::EncoderLayout::Affine ? "affine" : "one_hidden";
  enc.get("layout", layout);
  if (layout == "affine")
    c.fit.encoder.layout = nmf::EncoderLayout::Affine;
  else if (layout == "one_hidden")
    c.fit.encoder.layout = nmf::EncoderLayout::OneHidden;
  else
    config_error("nmf.encoder.layout must be affine or one_hidden");
  enc.get("hidden_units", c.fit.encoder.hidden_units);
  enc.finish();
  read_optimizer(s.child("optimizer"), c.fit.optimizer);
  s.finish();
  c.fit.K = c.data.model_components;
}

void read_csfa(Section s, CSFAExperiment& c) {
  synth::CSFAToyConfig& d = c.data;
  s.get("channels", d.channels);
  s.get("window_length", d.window_length);
  s.get("sample_rate_hz", d.sample_rate_hz);
  s.get("train_windows", d.train_windows);
  s.get("test_windows", d.test_windows);
  s.get("centers_hz", d.centers_hz);
  s.get("bandwidth_hz", d.bandwidth_hz);
  s.get("noise_precision", d.noise_precision);
  csm::CSFAToyOptions& o = c.fit;
  o.factors = static_cast<Index>(d.centers_hz.size());
  s.get("factors", o.factors);
  s.get("components", o.components);
  s.get("rank", o.rank);
  s.get("mu", o.mu);
  s.get("lo_hz", o.lo_hz);
  s.get("hi_hz", o.hi_hz);
  s.get("init_bandwidth_hz", o.init_bandwidth_hz);
  s.get("init_eta", o.init_eta);
  read_optimizer(s.child("optimizer"), o.optimizer);
  Section f = s.child("features");
  f.get("segment_length", c.features.segment_length);
  read_bands(f, c.features.bands);
  f.finish();
  s.finish();
}

void read_features(Section s, FeatureExperiment& c) {
  s.get("windows", c.windows);
  s.get("sidecar", c.sidecar);
  s.get("saturation_threshold", c.saturation_threshold);
  read_bands(s, c.bands);
  s.finish();
}

// Cross-field checks, run after parsing and before any computation.
void check(const ExperimentConfig& c) {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::InvalidConfig) throw;
      config_error(e.what());
    }
  };
  if (c.mu && !(*c.mu > 0.0 && std::isfinite(*c.mu))) config_error("mu must be positive");
  switch (c.experiment) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: {
      wrap([&] { synth::validate(c.linear.data); });
      const MuGrid& g = c.linear.grid;
      if (!(g.min > 0.0 && g.max >= g.min && g.points >= 1))
        config_error("grid needs 0 < min <= max and points >= 1");
      if (c.linear.L < 1 || c.linear.L > c.linear.data.p)
        config_error("linear.L must be in [1, p]");
      break;
    }
    case Experiment::NMFTable1:
      wrap([&] {
        synth::validate(c.nmf.data);
        nmf::validate(c.nmf.fit);
      });
      if (c.nmf.reference_l1 < 0.0) config_error("nmf.reference_l1 must be non-negative");
      break;
    case Experiment::CSFAToy: {
      wrap([&] { validate(c.csfa.fit.optimizer); });
      const auto& d = c.csfa.data;
      if (d.centers_hz.empty()) config_error("csfa.centers_hz must not be empty");
      for (double f : d.centers_hz)
        if (!(f > 0.0 && f < d.sample_rate_hz / 2.0))
          config_error("csfa.centers_hz must lie in (0, sample_rate_hz / 2)");
      if (c.csfa.features.segment_length < 2 ||
          c.csfa.features.segment_length > d.window_length)
        config_error("csfa.features.segment_length must be in [2, window_length]");
      break;
    }
    case Experiment::ExtractFeatures:
      if (!(c.features.saturation_threshold > 0.0 && c.features.saturation_threshold <= 1.0))
        config_error("features.saturation_threshold must be in (0, 1]");
      if (c.features.windows.empty() || c.features.sidecar.empty())
        config_error("features.windows and features.sidecar are required");
      if (c.mu || c.mu_auto) config_error("extract-features takes no mu");
      break;
  }
}

double mse(const MatrixXd& m) { return m.squaredNorm() / static_cast<double>(m.size()); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Index next_pow2(Index n) {
  Index p = 1;
  while (p < n) p *= 2;
  return p;
}

spectral::WelchConfig csfa_welch(const CSFAExperiment& c) {
  spectral::WelchConfig wc;
  wc.segment_length = c.features.segment_length;
  wc.overlap_fraction = 0.5;
  wc.taper = spectral::Taper::Hamming;
  wc.fft_length = next_pow2(std::max<Index>(
      wc.segment_length, static_cast<Index>(std::ceil(c.data.sample_rate_hz))));
  return wc;
}

void require_file(const std::string& path, const std::string& hint) {
  if (path.empty() || !fs::exists(path))
    throw Error(ErrorKind::MissingInput,
                (path.empty() ? std::string("no path configured") : "cannot find " + path) +
                    ". " + hint);
}

const char* kFashionHint =
    "Download train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from "
    "https://github.com/zalandoresearch/fashion-mnist (data/fashion), gunzip them, and set "
    "nmf.images and nmf.labels to the extracted files.";

struct NMFTaskData {
  MatrixXd X_train, X_test, H_train, H_test;
  VectorXd y_train, y_test;
};

NMFTaskData nmf_task_data(const MatrixXd& images, const std::vector<int>& labels,
                          const NMFExperiment& c, synth::NMFTask task) {
  synth::NMFSynthConfig dc = c.data;
  dc.task = task;
  const synth::NMFSynthData d = synth::gen_nmf_pseudo(images, labels, dc);
  auto cols = [](const MatrixXd& m, const std::vector<Index>& idx) {
    MatrixXd out(m.rows(), static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Index>(i)) = m.col(idx[i]);
    return out;
  };
  auto elems = [](const VectorXd& v, const std::vector<Index>& idx) {
    VectorXd out(static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = v(idx[i]);
    return out;
  };
  NMFTaskData t;
  t.X_train = cols(d.X, d.train_index);
  t.X_test = cols(d.X, d.test_index);
  t.H_train = cols(d.H_base, d.train_index);
  t.H_test = cols(d.H_base, d.test_index);
  t.y_train = elems(d.labels, d.train_index);
  t.y_test = elems(d.labels, d.test_index);
  return t;
}

struct LossPair {
  double recon = 0.0;
  double supervision = 0.0;  // already multiplied by mu
};

double bisect_mu(const std::function<LossPair(double)>& losses) {
  auto gap = [&](double mu) {
    const LossPair l = losses(mu);
    const double r = std::abs(l.recon), s = std::abs(l.supervision);
    if (!(r > 0.0) || !(s > 0.0) || !std::isfinite(r) || !std::isfinite(s))
      throw Error(ErrorKind::NumericalError, "auto mu: loss terms must be finite and non-zero");
    return std::log(s / r);
  };
  double lo = std::log(1e-4), hi = std::log(1e4);
  double g_lo = gap(std::exp(lo)), g_hi = gap(std::exp(hi));
  if (g_lo >= 0.0) return std::exp(lo);
  if (g_hi <= 0.0) return std::exp(hi);
  double mid = 0.5 * (lo + hi);
  for (int it = 0; it < 40; ++it) {
    mid = 0.5 * (lo + hi);
    const double g = gap(std::exp(mid));
    if (std::abs(std::exp(g) - 1.0) <= 0.1) break;
    (g < 0.0 ? lo : hi) = mid;
  }
  return std::exp(mid);
}

}  // namespace

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::SweepMu: return "sweep-mu";
    case Experiment::SensitivityMu: return "sensitivity-mu";
    case Experiment::NMFTable1: return "nmf-table1";
    case Experiment::CSFAToy: return "csfa-toy";
    case Experiment::ExtractFeatures: return "extract-features";
  }
  return "unknown";
}

std::optional<Experiment> parse_experiment(const std::string& name) {
  for (Experiment e : {Experiment::SweepMu, Experiment::SensitivityMu, Experiment::NMFTable1,
                       Experiment::CSFAToy, Experiment::ExtractFeatures})
    if (name == experiment_name(e)) return e;
  return std::nullopt;
}

std::vector<double> mu_values(const MuGrid& g) {
  std::vector<double> out;
  if (g.points == 1) return {g.min};
  const double a = std::log10(g.min), b = std::log10(g.max);
  for (Index i = 0; i < g.points; ++i)
    out.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) /
                                         static_cast<double>(g.points - 1)));
  return out;
}

ExperimentConfig default_config(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  if (e == Experiment::SensitivityMu) {
    c.linear.L = 3;
    c.linear.data.n_train = 200;
  }
  c.nmf.fit.K = c.nmf.data.model_components;
  c.csfa.fit.components = 1;
  c.csfa.fit.rank = 1;
  c.csfa.fit.factors = static_cast<Index>(c.csfa.data.centers_hz.size());
  c.csfa.fit.optimizer.iterations = 500;
  c.csfa.fit.optimizer.batch_size = 32;
  c.csfa.fit.optimizer.step_size = 0.01;
  set_seed(c, 0);
  return c;
}

void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.linear.data.seed = seed;
  c.nmf.data.seed = seed;
  c.nmf.fit.optimizer.seed = seed;
  c.csfa.data.seed = seed;
  c.csfa.fit.optimizer.seed = seed;
}

ExperimentConfig parse_config(const json& j, Experiment e) {
  ExperimentConfig c = default_config(e);
  Section top(j, "");
  std::string name = experiment_name(e);
  top.get("experiment", name);
  if (name != experiment_name(e))
    config_error("config is for experiment " + name + ", not " + experiment_name(e));
  if (const json* v = top.raw("seed")) {
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
      config_error("seed must be a non-negative integer");
    c.seed = v->get<std::uint64_t>();
  }
  top.get("output_dir", c.output_dir);
  if (const json* v = top.raw("mu")) {
    if (v->is_string() && v->get<std::string>() == "auto")
      c.mu_auto = true;
    else if (v->is_number())
      c.mu = v->get<double>();
    else
      config_error("mu must be a number or \"auto\"");
  }
  const char* section = nullptr;
  switch (e) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: section = "linear"; break;
    case Experiment::NMFTable1: section = "nmf"; break;
    case Experiment::CSFAToy: section = "csfa"; break;
    case Experiment::ExtractFeatures: section = "features"; break;
  }
  for (const char* other : {"linear", "nmf", "csfa", "features"})
    if (std::string(other) != section && top.has(other))
      config_error(std::string("section ") + other + " does not apply to " + experiment_name(e));
  switch (e) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: read_linear(top.child("linear"), c.linear); break;
    case Experiment::NMFTable1: read_nmf(top.child("nmf"), c.nmf); break;
    case Experiment::CSFAToy: read_csfa(top.child("csfa"), c.csfa); break;
    case Experiment::ExtractFeatures: read_features(top.child("features"), c.features); break;
  }
  top.finish();
  set_seed(c, c.seed);
  check(c);
  return c;
}

ExperimentConfig load_config(const std::string& path, Experiment e) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& err) {
    config_error("config " + path + " is not valid JSON: " + err.what());
  }
  return parse_config(j, e);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = experiment_name(c.experiment);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  if (c.mu_auto)
    j["mu"] = "auto";
  else if (c.mu)
    j["mu"] = *c.mu;
  switch (c.experiment) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: {
      const auto& d = c.linear.data;
      j["linear"] = {{"p", d.p},
                     {"q", d.q},
                     {"L_true", d.L_true},
                     {"n_train", d.n_train},
                     {"n_test", d.n_test},
                     {"noise_x", d.noise_x},
                     {"noise_y", d.noise_y},
                     {"top_factor_unpredictive", d.top_factor_unpredictive},
                     {"loading_norms", d.loading_norms},
                     {"L", c.linear.L},
                     {"grid",
                      {{"min", c.linear.grid.min},
                       {"max", c.linear.grid.max},
                       {"points", c.linear.grid.points}}}};
      break;
    }
    case Experiment::NMFTable1: {
      const auto& n = c.nmf;
      json tasks = json::array();
      for (synth::NMFTask t : n.tasks) tasks.push_back(synth::task_name(t));
      j["nmf"] = {{"images", n.images},
                  {"labels", n.labels},
                  {"tasks", tasks},
                  {"base_components", n.data.base_components},
                  {"model_components", n.data.model_components},
                  {"base_iterations", n.data.base_iterations},
                  {"test_fraction", n.data.test_fraction},
                  {"mu", n.fit.mu},
                  {"l1_weight", n.fit.l1_weight},
                  {"warm_start_iterations", n.fit.warm_start_iterations},
                  {"head_iterations", n.fit.head_iterations},
                  {"reference_l1", n.reference_l1},
                  {"reference_iterations", n.reference_iterations},
                  {"encoder",
                   {{"layout", n.fit.encoder.layout == nmf::EncoderLayout::Affine ? "affine"
                                                                                  : "one_hidden"},
                    {"hidden_units", n.fit.encoder.hidden_units}}},
                  {"optimizer", optimizer_json(n.fit.optimizer)}};
      if (n.data.noise_std) j["nmf"]["noise_std"] = *n.data.noise_std;
      break;
    }
    case Experiment::CSFAToy: {
      const auto& d = c.csfa.data;
      const auto& o = c.csfa.fit;
      const auto& f = c.csfa.features;
      j["csfa"] = {{"channels", d.channels},
                   {"window_length", d.window_length},
                   {"sample_rate_hz", d.sample_rate_hz},
                   {"train_windows", d.train_windows},
                   {"test_windows", d.test_windows},
                   {"centers_hz", d.centers_hz},
                   {"bandwidth_hz", d.bandwidth_hz},
                   {"noise_precision", d.noise_precision},
                   {"factors", o.factors},
                   {"components", o.components},
                   {"rank", o.rank},
                   {"mu", o.mu},
                   {"lo_hz", o.lo_hz},
                   {"hi_hz", o.hi_hz},
                   {"init_bandwidth_hz", o.init_bandwidth_hz},
                   {"init_eta", o.init_eta},
                   {"optimizer", optimizer_json(o.optimizer)},
                   {"features",
                    {{"segment_length", f.segment_length},
                     {"first_hz", f.bands.first_hz},
                     {"width_hz", f.bands.width_hz},
                     {"bands", f.bands.count}}}};
      break;
    }
    case Experiment::ExtractFeatures: {
      const auto& f = c.features;
      j["features"] = {{"windows", f.windows},
                       {"sidecar", f.sidecar},
                       {"saturation_threshold", f.saturation_threshold},
                       {"first_hz", f.bands.first_hz},
                       {"width_hz", f.bands.width_hz},
                       {"bands", f.bands.count}};
      break;
    }
  }
  return j;
}

std::vector<MetricRow> linear_sweep(const LinearExperiment& c, bool dragging) {
  const synth::LinearSynthData d = synth::gen_linear(c.data);
  const linear::CenteredMatrix X = linear::center(d.X_train), Y = linear::center(d.Y_train);
  const MatrixXd Xt = linear::center_with(d.X_test, X.mean).values;
  const MatrixXd Yt = linear::center_with(d.Y_test, Y.mean).values;
  std::vector<MetricRow> rows;
  for (double mu : mu_values(c.grid))
    for (linear::Mode mode : {linear::Mode::Local, linear::Mode::Encoded}) {
      const std::string name = mode == linear::Mode::Local ? "local" : "encoded";
      const linear::LinearFactorModel m = linear::fit(X, Y, c.L, mu, mode);
      const MatrixXd Sk = linear::scores_with_outcome(m, Xt, Yt);
      const MatrixXd Su = linear::encode_scores(m, Xt);
      rows.push_back({name, kReconKnown, mu, mse(Xt - m.W * Sk)});
      rows.push_back({name, kReconUnknown, mu, mse(Xt - m.W * Su)});
      rows.push_back({name, kPredKnown, mu, mse(Yt - m.D * Sk)});
      rows.push_back({name, kPredUnknown, mu, mse(Yt - m.D * Su)});
      if (dragging)
        rows.push_back({name, kDragging, mu, (Sk - Su).norm() / static_cast<double>(Sk.cols())});
    }
  return rows;
}

ExperimentOutput nmf_table1(const NMFExperiment& c) {
  require_file(c.images, kFashionHint);
  require_file(c.labels, kFashionHint);
  const MatrixXd images = synth::read_idx_images(c.images);
  const std::vector<int> labels = synth::read_idx_labels(c.labels);
  require(images.cols() == static_cast<Index>(labels.size()), ErrorKind::InvalidData,
          "image and label files hold different counts");

  ExperimentOutput out;
  const std::vector<std::string> methods{"ground_truth", "sequential", "local", "encoded"};
  std::map<std::string, std::vector<double>> table;
  for (synth::NMFTask task : c.tasks) {
    const std::string tname = synth::task_name(task);
    auto t0 = std::chrono::steady_clock::now();
    const NMFTaskData t = nmf_task_data(images, labels, c, task);
    out.timings.push_back({"data_" + tname, seconds_since(t0)});

    t0 = std::chrono::steady_clock::now();
    const nmf::LogisticFit ref =
        nmf::fit_l1_logistic(t.H_train, t.y_train, c.reference_l1, c.reference_iterations);
    const double ref_auc =
        nmf::auc(nmf::predict_proba_from_scores(ref.beta, ref.intercept, t.H_test), t.y_test);
    out.timings.push_back({"ground_truth_" + tname, seconds_since(t0)});
    out.metrics.push_back({"ground_truth", "auc_" + tname, kNaN, ref_auc});
    table["ground_truth"].push_back(ref_auc);

    for (nmf::Mode mode : {nmf::Mode::Sequential, nmf::Mode::Local, nmf::Mode::Encoded}) {
      nmf::FitConfig fc = c.fit;
      fc.mode = mode;
      t0 = std::chrono::steady_clock::now();
      const nmf::SupervisedNMFModel m = nmf::fit(t.X_train, t.y_train, fc);
      const double a = nmf::auc(nmf::predict_proba(m, t.X_test), t.y_test);
      const std::string mname = nmf::mode_name(mode);
      out.timings.push_back({mname + "_" + tname, seconds_since(t0)});
      out.metrics.push_back({mname, "auc_" + tname, fc.mu, a});
      table[mname].push_back(a);
      std::ostringstream model_bytes;
      nmf::save(m, model_bytes);
      out.artifacts.push_back({"model_" + tname + "_" + mname + ".snmf", model_bytes.str()});
    }
  }
  std::ostringstream csv;
  csv << "method";
  for (synth::NMFTask task : c.tasks) csv << ',' << synth::task_name(task);
  csv << ",seed\n";
  for (const std::string& m : methods) {
    csv << m;
    for (double v : table[m]) csv << ',' << fmt(v);
    csv << ',' << c.data.seed << '\n';
  }
  out.artifacts.push_back({"table1.csv", csv.str()});
  return out;
}

ExperimentOutput csfa_toy(const CSFAExperiment& c) {
  ExperimentOutput out;
  auto t0 = std::chrono::steady_clock::now();
  const synth::CSFAToyData d = synth::gen_csfa_toy(c.data);
  const spectral::WelchConfig wc = csfa_welch(c);
  const double fs = c.data.sample_rate_hz;
  const MatrixXd Ftr = spectral::log_power_features(d.train, fs, wc, c.features.bands);
  const MatrixXd Fte = spectral::log_power_features(d.test, fs, wc, c.features.bands);
  out.timings.push_back({"data", seconds_since(t0)});

  t0 = std::chrono::steady_clock::now();
  const csm::EncodedCSFA fit = csm::fit_encoded_csfa(d.train, Ftr, d.train_labels, fs, c.fit);
  out.timings.push_back({"fit", seconds_since(t0)});
  const double mu = c.fit.mu;
  out.metrics.push_back(
      {"encoded", "auc", mu, nmf::auc(csm::predict_proba(fit, Fte), d.test_labels)});
  for (std::size_t l = 0; l < fit.model.factors.size(); ++l)
    for (std::size_t q = 0; q < fit.model.factors[l].components.size(); ++q) {
      const auto& sg = fit.model.factors[l].components[q].sg;
      const std::string tag = "_f" + std::to_string(l) + "_c" + std::to_string(q);
      out.metrics.push_back({"encoded", "center_hz" + tag, mu, sg.center_hz});
      out.metrics.push_back({"encoded", "bandwidth_hz" + tag, mu, sg.bandwidth_hz});
    }
  out.metrics.push_back({"encoded", "eta", mu, fit.model.eta});
  out.metrics.push_back({"encoded", "final_loss", mu, fit.loss_trace.back()});
  for (std::size_t l = 0; l < d.factors.size(); ++l) {
    const auto& sg = d.factors[l].components[0].sg;
    out.metrics.push_back({"truth", "center_hz_f" + std::to_string(l), kNaN, sg.center_hz});
    out.metrics.push_back({"truth", "bandwidth_hz_f" + std::to_string(l), kNaN, sg.bandwidth_hz});
  }
  std::ostringstream trace;
  trace << "iteration,loss\n";
  for (std::size_t i = 0; i < fit.loss_trace.size(); ++i)
    trace << i << ',' << fmt(fit.loss_trace[i]) << '\n';
  out.artifacts.push_back({"loss_trace.csv", trace.str()});
  return out;
}

ExperimentOutput extract_features(const FeatureExperiment& c) {
  require_file(c.windows, "Set features.windows to a raw float64 window file.");
  require_file(c.sidecar, "Set features.sidecar to the matching key=value metadata file.");
  ExperimentOutput out;
  auto t0 = std::chrono::steady_clock::now();
  const std::vector<spectral::TimeSeriesWindow> windows =
      spectral::read_windows(c.windows, c.sidecar);
  require(!windows.empty(), ErrorKind::InvalidData, "window file holds no windows");
  const spectral::FilterResult filtered =
      spectral::saturation_filter(windows, c.saturation_threshold);
  const Index C = windows[0].samples.rows();
  const Index N = windows[0].samples.cols();
  const spectral::WelchConfig wc = spectral::default_welch(N, windows[0].sample_rate_hz);
  std::vector<std::int64_t> ids;
  std::vector<VectorXd> rows;
  for (const auto& w : filtered.retained) {
    ids.push_back(w.window_id);
    rows.push_back(spectral::window_features(w, wc, c.bands));
  }
  const std::vector<std::string> names = spectral::feature_names(C, c.bands);
  out.timings.push_back({"features", seconds_since(t0)});

  std::ostringstream features;
  spectral::write_feature_file(features, names, ids, rows);
  out.artifacts.push_back({"features.csv", features.str()});
  std::ostringstream rej;
  rej << "window_id,channel,run_fraction\n";
  for (const auto& r : filtered.rejected)
    rej << r.window_id << ',' << r.channel << ',' << fmt(r.run_fraction) << '\n';
  out.artifacts.push_back({"rejections.csv", rej.str()});

  std::set<std::int64_t> rejected_windows;
  for (const auto& r : filtered.rejected) rejected_windows.insert(r.window_id);
  out.metrics.push_back({"features", "windows_in", kNaN, static_cast<double>(windows.size())});
  out.metrics.push_back(
      {"features", "windows_retained", kNaN, static_cast<double>(filtered.retained.size())});
  out.metrics.push_back(
      {"features", "windows_rejected", kNaN, static_cast<double>(rejected_windows.size())});
  out.metrics.push_back({"features", "feature_columns", kNaN, static_cast<double>(names.size())});
  out.metrics.push_back({"features", "saturation_threshold", kNaN, c.saturation_threshold});
  return out;
}

double auto_mu(const ExperimentConfig& c) {
  switch (c.experiment) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: {
      const synth::LinearSynthData d = synth::gen_linear(c.linear.data);
      const linear::CenteredMatrix X = linear::center(d.X_train), Y = linear::center(d.Y_train);
      return bisect_mu([&](double mu) {
        const auto m = linear::fit(X, Y, c.linear.L, mu, linear::Mode::Encoded);
        const linear::ObjectiveTerms t = linear::fitted_objective(X.values, Y.values, m);
        return LossPair{t.recon_loss, mu * t.supervision_loss};
      });
    }
    case Experiment::NMFTable1: {
      require_file(c.nmf.images, kFashionHint);
      require_file(c.nmf.labels, kFashionHint);
      const MatrixXd images = synth::read_idx_images(c.nmf.images);
      const std::vector<int> labels = synth::read_idx_labels(c.nmf.labels);
      const NMFTaskData t = nmf_task_data(images, labels, c.nmf, c.nmf.tasks.front());
      return bisect_mu([&](double mu) {
        nmf::FitConfig fc = c.nmf.fit;
        fc.mode = nmf::Mode::Encoded;
        fc.mu = mu;
        const nmf::SupervisedNMFModel m = nmf::fit(t.X_train, t.y_train, fc);
        const nmf::EncodedGradients g = nmf::encoded_loss_gradients(
            m.W_u, m.encoder, m.beta, m.intercept, t.X_train, t.y_train, mu, fc.l1_weight);
        return LossPair{g.recon, mu * g.supervision};
      });
    }
    case Experiment::CSFAToy: {
      const synth::CSFAToyData d = synth::gen_csfa_toy(c.csfa.data);
      const double fs = c.csfa.data.sample_rate_hz;
      const MatrixXd F =
          spectral::log_power_features(d.train, fs, csfa_welch(c.csfa), c.csfa.features.bands);
      const VectorXd t = csm::sample_times(c.csfa.data.window_length, fs);
      return bisect_mu([&](double mu) {
        csm::CSFAToyOptions o = c.csfa.fit;
        o.mu = mu;
        const csm::EncodedCSFA fit = csm::fit_encoded_csfa(d.train, F, d.train_labels, fs, o);
        const double nll = csm::encoded_csfa_gradients(fit.model, fit.encoder, fit.beta,
                                                       fit.intercept, d.train, F, d.train_labels,
                                                       t, 0.0)
                               .loss;
        const VectorXd z =
            (csm::encode_scores(fit.encoder, F).transpose() * fit.beta).array() + fit.intercept;
        double ce = 0.0;
        for (Index i = 0; i < z.size(); ++i) ce += logistic_loss(z(i), d.train_labels(i));
        return LossPair{nll, mu * ce / static_cast<double>(z.size())};
      });
    }
    case Experiment::ExtractFeatures: break;
  }
  config_error("auto mu does not apply to extract-features");
}

ExperimentOutput run(const ExperimentConfig& config) {
  check(config);
  ExperimentConfig c = config;
  ExperimentOutput out;
  std::optional<double> mu = c.mu;
  if (c.mu_auto) {
    const auto t0 = std::chrono::steady_clock::now();
    mu = auto_mu(c);
    out.timings.push_back({"auto_mu", seconds_since(t0)});
  }
  ExperimentOutput part;
  switch (c.experiment) {
    case Experiment::SweepMu:
    case Experiment::SensitivityMu: {
      if (mu) c.linear.grid = {*mu, *mu, 1};
      const auto t0 = std::chrono::steady_clock::now();
      part.metrics = linear_sweep(c.linear, c.experiment == Experiment::SensitivityMu);
      part.timings.push_back({"sweep", seconds_since(t0)});
      break;
    }
    case Experiment::NMFTable1:
      if (mu) c.nmf.fit.mu = *mu;
      part = nmf_table1(c.nmf);
      break;
    case Experiment::CSFAToy:
      if (mu) c.csfa.fit.mu = *mu;
      part = csfa_toy(c.csfa);
      break;
    case Experiment::ExtractFeatures: part = extract_features(c.features); break;
  }
  if (c.mu_auto) out.metrics.push_back({"auto", "mu_selected", kNaN, *mu});
  out.metrics.insert(out.metrics.end(), part.metrics.begin(), part.metrics.end());
  out.artifacts = std::move(part.artifacts);
  out.timings.insert(out.timings.end(), part.timings.begin(), part.timings.end());
  return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string s = "mode,metric,mu,value\n";
  for (const MetricRow& r : rows) s += r.mode + ',' + r.metric + ',' + fmt(r.mu) + ',' + fmt(r.value) + '\n';
  return s;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::Io, "SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << content;
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_manifest(const fs::path& dir, const std::string& status, const std::string& error) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::string m = "status " + status + "\n";
  if (!error.empty()) {
    std::string line = error;
    std::replace(line.begin(), line.end(), '\n', ' ');
    m += "error " + line + "\n";
  }
  for (const std::string& n : names) m += "sha256 " + sha256_hex(read_file(dir / n)) + "  " + n + "\n";
  write_file(dir / "manifest", m);
}

}  // namespace

void run_to_directory(const ExperimentConfig& config, const fs::path& dir) {
  check(config);
  if (fs::exists(dir) && !fs::is_empty(dir))
    config_error("run directory " + dir.string() + " is not empty; finished runs are immutable");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create " + dir.string());
  write_file(dir / "config.snapshot", to_json(config).dump(2) + "\n");
  try {
    const ExperimentOutput out = run(config);
    write_file(dir / "metrics.csv", metrics_csv(out.metrics));
    for (const Artifact& a : out.artifacts) write_file(dir / a.name, a.content);
    std::string timings = "step,seconds\n";
    for (const Timing& t : out.timings) timings += t.step + ',' + fmt(t.seconds) + '\n';
    write_file(dir / "timings.csv", timings);
    write_manifest(dir, "FINALIZED", "");
  } catch (const std::exception& e) {
    write_manifest(dir, "FAILED", e.what());
    throw;
  }
}

Verification verify(const fs::path& dir) {
  Verification v;
  const fs::path manifest = dir / "manifest";
  if (!fs::exists(manifest)) {
    v.problems.push_back("manifest missing");
    return v;
  }
  std::istringstream in(read_file(manifest));
  std::string line;
  std::set<std::string> listed;
  while (std::getline(in, line)) {
    if (line.rfind("status ", 0) == 0) {
      v.status = line.substr(7);
    } else if (line.rfind("sha256 ", 0) == 0) {
      const std::string hash = line.substr(7, 64);
      const std::string name = line.size() > 73 ? line.substr(73) : "";
      listed.insert(name);
      if (!fs::exists(dir / name))
        v.problems.push_back("missing " + name);
      else if (sha256_hex(read_file(dir / name)) != hash)
        v.problems.push_back("hash mismatch " + name);
    }
  }
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n != "manifest" && !listed.count(n)) v.problems.push_back("unlisted " + n);
  }
  if (v.status != "FINALIZED") v.problems.push_back("status " + (v.status.empty() ? "missing" : v.status));
  v.ok = v.problems.empty();
  return v;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::ShapeError:
    case ErrorKind::SizeLimit: return 2;
    case ErrorKind::MissingInput:
    case ErrorKind::InvalidData:
    case ErrorKind::Io: return 3;
    case ErrorKind::SingularSystem:
    case ErrorKind::OracleDiverged:
    case ErrorKind::NumericalError:
    case ErrorKind::Undefined: return 4;
  }
  return 4;
}

}  // namespace supfactor::harness
