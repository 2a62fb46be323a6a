// supfactor: run supervised factor-model experiments into run directories.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "supfactor/error.hpp"
#include "supfactor/harness.hpp"

namespace h = supfactor::harness;

namespace {

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mu;
};

int run_command(h::Experiment e, const RunOptions& o) {
  h::ExperimentConfig c = o.config.empty() ? h::default_config(e) : h::load_config(o.config, e);
  if (o.seed) h::set_seed(c, *o.seed);
  if (o.mu == "auto") {
    c.mu_auto = true;
    c.mu.reset();
  } else if (!o.mu.empty()) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(o.mu, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != o.mu.size())
      throw supfactor::Error(supfactor::ErrorKind::InvalidConfig,
                             "--mu takes \"auto\" or a number, got " + o.mu);
    c.mu = v;
    c.mu_auto = false;
  }
  const std::string dir = o.out.empty() ? c.output_dir + "/" + h::experiment_name(e) + "-seed" +
                                              std::to_string(c.seed)
                                        : o.out;
  h::run_to_directory(c, dir);
  std::cout << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised factor-model experiments"};
  app.require_subcommand(1);

  RunOptions opts;
  h::Experiment selected = h::Experiment::SweepMu;
  bool is_run = false;
  for (h::Experiment e : {h::Experiment::SweepMu, h::Experiment::SensitivityMu,
                          h::Experiment::NMFTable1, h::Experiment::CSFAToy,
                          h::Experiment::ExtractFeatures}) {
    CLI::App* sub = app.add_subcommand(h::experiment_name(e));
    sub->add_option("--config", opts.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "seed for every generator and optimizer");
    sub->add_option("--out", opts.out, "run directory (must not exist or be empty)");
    sub->add_option("--mu", opts.mu, "auto, or a fixed supervision strength");
    sub->callback([&, e] {
      selected = e;
      is_run = true;
    });
  }
  std::string verify_dir;
  CLI::App* verify = app.add_subcommand("verify", "check a run directory against its manifest");
  verify->add_option("run-dir", verify_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (is_run) return run_command(selected, opts);
    const h::Verification v = h::verify(verify_dir);
    for (const std::string& p : v.problems) std::cerr << p << "\n";
    std::cout << (v.ok ? "OK" : "INVALID") << " " << verify_dir << "\n";
    return v.ok ? 0 : 1;
  } catch (const supfactor::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return h::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
