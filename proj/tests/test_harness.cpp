#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "harness_fixtures.hpp"
#include "supfactor/error.hpp"
#include "supfactor/harness.hpp"
#include "supfactor/linear_supfm.hpp"

using namespace supfactor;
using namespace supfactor::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Undefined;
}

ExperimentConfig small_sweep(Experiment e) {
  ExperimentConfig c = default_config(e);
  c.linear.grid.points = 5;
  return c;
}

}  // namespace

TEST_CASE("config: defaults and overrides") {
  const ExperimentConfig d = parse_config(json::object(), Experiment::SweepMu);
  CHECK(d.linear.L == 2);
  CHECK(d.linear.grid.points == 40);
  CHECK(d.linear.grid.min == 1e-2);
  CHECK(d.linear.grid.max == 1e3);
  const ExperimentConfig s = parse_config(json::object(), Experiment::SensitivityMu);
  CHECK(s.linear.L == 3);
  CHECK(s.linear.data.n_train == 200);

  const json j = {{"seed", 7}, {"mu", "auto"}, {"linear", {{"p", 12}, {"grid", {{"points", 3}}}}}};
  const ExperimentConfig c = parse_config(j, Experiment::SweepMu);
  CHECK(c.seed == 7);
  CHECK(c.linear.data.seed == 7);
  CHECK(c.mu_auto);
  CHECK(c.linear.data.p == 12);
  CHECK(c.linear.grid.points == 3);

  const ExperimentConfig n = parse_config({{"seed", 3}, {"nmf", {{"tasks", {"tshirt_coat"}}}}},
                                          Experiment::NMFTable1);
  CHECK(n.nmf.fit.optimizer.seed == 3);
  CHECK(n.nmf.data.seed == 3);
  REQUIRE(n.nmf.tasks.size() == 1);
  CHECK(n.nmf.tasks[0] == synth::NMFTask::TshirtCoat);

  // The snapshot parses back to the same snapshot.
  CHECK(to_json(parse_config(to_json(c), Experiment::SweepMu)) == to_json(c));
  CHECK(to_json(parse_config(to_json(n), Experiment::NMFTable1)) == to_json(n));
  const ExperimentConfig t = default_config(Experiment::CSFAToy);
  CHECK(to_json(parse_config(to_json(t), Experiment::CSFAToy)) == to_json(t));
}

TEST_CASE("config: strict rejection") {
  auto bad = [](const json& j, Experiment e) {
    return kind_of([&] { parse_config(j, e); }) == ErrorKind::InvalidConfig;
  };
  CHECK(bad({{"sed", 1}}, Experiment::SweepMu));
  CHECK(bad({{"linear", {{"grid", {{"pts", 4}}}}}}, Experiment::SweepMu));
  CHECK(bad({{"nmf", {{"optimizer", {{"lr", 0.1}}}}}}, Experiment::NMFTable1));
  CHECK(bad({{"nmf", json::object()}}, Experiment::SweepMu));
  CHECK(bad({{"experiment", "csfa-toy"}}, Experiment::SweepMu));
  CHECK(bad({{"linear", {{"p", "20"}}}}, Experiment::SweepMu));
  CHECK(bad({{"linear", {{"p", 2.5}}}}, Experiment::SweepMu));
  CHECK(bad({{"seed", -1}}, Experiment::SweepMu));
  CHECK(bad({{"mu", "sometimes"}}, Experiment::SweepMu));
  CHECK(bad({{"mu", -1.0}}, Experiment::SweepMu));
  CHECK(bad({{"linear", {{"grid", {{"min", 0.0}}}}}}, Experiment::SweepMu));
  CHECK(bad({{"linear", {{"L_true", 0}}}}, Experiment::SweepMu));
  CHECK(bad({{"nmf", {{"tasks", {"boots"}}}}}, Experiment::NMFTable1));
  CHECK(bad({{"nmf", {{"model_components", 50}}}}, Experiment::NMFTable1));
  CHECK(bad({{"csfa", {{"centers_hz", {40.0}}}}}, Experiment::CSFAToy));
  CHECK(bad({{"features", {{"windows", "a"}, {"sidecar", "b"}, {"saturation_threshold", 0.0}}}},
            Experiment::ExtractFeatures));
  CHECK(bad({{"features", {{"windows", "a"}, {"sidecar", "b"}}}, {"mu", 1.0}},
            Experiment::ExtractFeatures));
  CHECK(bad(json::array(), Experiment::SweepMu));

  const fs::path dir = testing::scratch_dir("badjson");
  std::ofstream(dir / "c.json") << "{\"seed\": ";
  CHECK(kind_of([&] { load_config((dir / "c.json").string(), Experiment::SweepMu); }) ==
        ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { load_config((dir / "none.json").string(), Experiment::SweepMu); }) ==
        ErrorKind::MissingInput);
}

TEST_CASE("mu grid is log-spaced") {
  const std::vector<double> g = mu_values({});
  REQUIRE(g.size() == 40);
  CHECK(g.front() == doctest::Approx(1e-2));
  CHECK(g.back() == doctest::Approx(1e3));
  for (std::size_t i = 1; i < g.size(); ++i)
    CHECK(std::log10(g[i] / g[i - 1]) == doctest::Approx(5.0 / 39.0));
  CHECK(mu_values({2.0, 5.0, 1}) == std::vector<double>{2.0});
}

TEST_CASE("sweeps: metric shape") {
  const ExperimentConfig c = default_config(Experiment::SweepMu);
  const auto rows = linear_sweep(c.linear, false);
  CHECK(rows.size() == 2 * 4 * 40);
  const auto s = linear_sweep(small_sweep(Experiment::SensitivityMu).linear, true);
  CHECK(s.size() == 2 * 5 * 5);
  for (const MetricRow& r : s)
    if (r.mode == "encoded" && r.metric == kDragging) CHECK(r.value == 0.0);
  const std::string csv = metrics_csv(rows);
  const auto ls = lines(csv);
  CHECK(ls.front() == "mode,metric,mu,value");
  CHECK(ls.size() == rows.size() + 1);
}

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("run directory: manifest, verification and immutability") {
  const fs::path root = testing::scratch_dir("rundir");
  const ExperimentConfig c = small_sweep(Experiment::SweepMu);
  run_to_directory(c, root / "a");
  for (const char* f : {"config.snapshot", "metrics.csv", "manifest", "timings.csv"})
    CHECK(fs::exists(root / "a" / f));
  CHECK(lines(slurp(root / "a" / "manifest")).front() == "status FINALIZED");
  CHECK(verify(root / "a").ok);
  CHECK(json::parse(slurp(root / "a" / "config.snapshot")) == to_json(c));

  CHECK(kind_of([&] { run_to_directory(c, root / "a"); }) == ErrorKind::InvalidConfig);

  run_to_directory(c, root / "b");
  CHECK(slurp(root / "a" / "metrics.csv") == slurp(root / "b" / "metrics.csv"));

  std::ofstream(root / "b" / "metrics.csv", std::ios::app) << "local,x,1,1\n";
  Verification v = verify(root / "b");
  CHECK_FALSE(v.ok);
  REQUIRE(v.problems.size() == 1);
  CHECK(v.problems[0] == "hash mismatch metrics.csv");

  std::ofstream(root / "a" / "extra.txt") << "x";
  CHECK_FALSE(verify(root / "a").ok);
  fs::remove(root / "a" / "timings.csv");
  fs::remove(root / "a" / "extra.txt");
  v = verify(root / "a");
  CHECK_FALSE(v.ok);
  CHECK(v.problems[0] == "missing timings.csv");
  CHECK_FALSE(verify(root / "nothing").ok);
}

TEST_CASE("run directory: failures are marked FAILED") {
  const fs::path root = testing::scratch_dir("failed");
  ExperimentConfig c = default_config(Experiment::NMFTable1);
  c.nmf.images = (root / "missing-images").string();
  c.nmf.labels = (root / "missing-labels").string();
  CHECK(kind_of([&] { run_to_directory(c, root / "run"); }) == ErrorKind::MissingInput);
  const Verification v = verify(root / "run");
  CHECK(v.status == "FAILED");
  CHECK_FALSE(v.ok);
  CHECK(slurp(root / "run" / "manifest").find("fashion-mnist") != std::string::npos);
}

TEST_CASE("nmf-table1 on a small IDX fixture") {
  const fs::path root = testing::scratch_dir("nmf");
  testing::write_idx_fixture(root);
  const ExperimentConfig c = testing::nmf_fixture_config(root);
  run_to_directory(c, root / "run");
  const auto table = lines(slurp(root / "run" / "table1.csv"));
  REQUIRE(table.size() == 5);
  CHECK(table[0] == "method,pullover_shirt,tshirt_shirt,tshirt_coat,seed");
  const std::vector<std::string> methods{"ground_truth", "sequential", "local", "encoded"};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(table[i + 1].rfind(methods[i] + ",", 0) == 0);
    CHECK(std::count(table[i + 1].begin(), table[i + 1].end(), ',') == 4);
  }
  CHECK(fs::exists(root / "run" / "model_tshirt_coat_encoded.snmf"));
  CHECK(verify(root / "run").ok);
}

TEST_CASE("extract-features: columns and planted rejections") {
  const fs::path root = testing::scratch_dir("features");
  testing::write_window_fixture(root, 5, {1, 3});
  const ExperimentConfig c = testing::feature_fixture_config(root);
  run_to_directory(c, root / "run");
  const auto feat = lines(slurp(root / "run" / "features.csv"));
  REQUIRE(feat.size() == 4);
  CHECK(std::count(feat[0].begin(), feat[0].end(), ',') == 3696);
  CHECK(feat[1].rfind("100,", 0) == 0);
  CHECK(feat[2].rfind("102,", 0) == 0);
  CHECK(feat[3].rfind("104,", 0) == 0);
  const auto rej = lines(slurp(root / "run" / "rejections.csv"));
  REQUIRE(rej.size() == 3);
  CHECK(rej[1] == "101,3,0.20000000000000001");
  CHECK(rej[2] == "103,3,0.20000000000000001");
}

TEST_CASE("exit codes by error kind") {
  CHECK(exit_code(ErrorKind::InvalidConfig) == 2);
  CHECK(exit_code(ErrorKind::MissingInput) == 3);
  CHECK(exit_code(ErrorKind::NumericalError) == 4);
  CHECK(exit_code(ErrorKind::OracleDiverged) == 4);
}

TEST_CASE("auto mu balances the linear loss terms") {
  ExperimentConfig c = small_sweep(Experiment::SweepMu);
  c.mu_auto = true;
  const ExperimentOutput out = run(c);
  REQUIRE(out.metrics.front().metric == "mu_selected");
  const double mu = out.metrics.front().value;
  CHECK(out.metrics.size() == 1 + 2 * 4);
  const synth::LinearSynthData d = synth::gen_linear(c.linear.data);
  const auto X = linear::center(d.X_train), Y = linear::center(d.Y_train);
  const auto m = linear::fit(X, Y, c.linear.L, mu, linear::Mode::Encoded);
  const auto t = linear::fitted_objective(X.values, Y.values, m);
  CHECK(std::abs(mu * t.supervision_loss / t.recon_loss - 1.0) <= 0.1);
}
