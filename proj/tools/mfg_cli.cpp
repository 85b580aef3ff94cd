// Command-line front end: one experiment per invocation.
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>

#include "fsmfg/core.hpp"
#include "fsmfg/experiment.hpp"

namespace {

using nlohmann::json;

struct Sub {
  CLI::App* app = nullptr;
  std::string model;
  std::string out = "out";
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  // Deferred writers: each copies a parsed option into the params object.
  std::vector<std::function<void(json&)>> setters;

  template <typename T>
  void opt(const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* o = app->add_option(flag, *value, help);
    if constexpr (requires { value->push_back({}); } && !std::is_same_v<T, std::string>) o->delimiter(',');
    setters.push_back([o, value, key](json& p) {
      if (o->count() > 0) p[key] = *value;
    });
  }
  void flag(const std::string& name, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* o = app->add_flag(name, *value, help);
    setters.push_back([o, value, key](json& p) {
      if (o->count() > 0) p[key] = *value;
    });
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-state mean field games: solvers, simulation and asymptotics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fsmfg::kLibraryVersion));

  std::map<std::string, Sub> subs;
  auto make = [&](const std::string& name, const std::string& help) -> Sub& {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--model", s.model, "model JSON file")->required();
    s.app->add_option("--out", s.out, "output directory");
    s.seed_opt = s.app->add_option("--seed", s.seed, "master seed");
    return s;
  };

  {
    auto& s = make("solve-mfg", "forward-backward MFG system");
    s.opt<double>("--t0", "t0", "initial time");
    s.opt<double>("--dt", "dt", "time step");
    s.opt<double>("--tol", "tol", "Picard tolerance");
    s.opt<double>("--damping", "damping", "Picard damping in (0, 1]");
    s.opt<std::string>("--method", "method", "picard or shooting");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("solve-master", "master field on a simplex grid");
    s.opt<int>("--n", "n", "simplex grid resolution");
    s.opt<double>("--dt", "dt", "time step");
    s.opt<int>("--time-stride", "time_stride", "time nodes between CSV slices");
  }
  {
    auto& s = make("solve-nplayer", "N-player Nash system");
    s.opt<int>("--N", "N", "players");
    s.opt<double>("--dt", "dt", "time step");
    s.opt<double>("--dt-fraction", "dt_fraction", "time step as a fraction of T");
    s.opt<bool>("--full", "full", "also solve the full tensor system (true/false)");
    s.flag("--reduced", "reduced", "counts system only");
    s.opt<int>("--nash-paths", "nash_paths", "Monte Carlo paths for the Nash gap probe");
    s.opt<int>("--nash-deviations", "nash_deviations", "random deviations in the probe");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("simulate", "coupled Y / X / limit systems");
    s.opt<int>("--N", "N", "players");
    s.opt<std::vector<int>>("--Ns", "Ns", "sweep of player counts");
    s.opt<int>("--paths", "paths", "Monte Carlo paths");
    s.opt<double>("--master-dt", "master_dt", "time step of the tabulated master field");
    s.opt<double>("--dt", "dt", "MFG time step");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("convergence", "N-player versus master field rates");
    s.opt<std::vector<int>>("--Ns", "Ns", "player counts");
    s.opt<double>("--dt", "dt", "time step");
    s.opt<double>("--t0", "t0", "comparison time");
    s.opt<std::vector<double>>("--sample-fractions", "sample_fractions", "residual sample times as fractions of T");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("clt", "fluctuation covariance: ODE against Monte Carlo");
    s.opt<int>("--N", "N", "players");
    s.opt<int>("--paths", "paths", "Monte Carlo paths");
    s.opt<double>("--t", "t", "evaluation time");
    s.opt<double>("--dt", "dt", "MFG time step");
    s.opt<double>("--cov-dt", "cov_dt", "covariance ODE step");
    s.opt<bool>("--deterministic-initial", "deterministic_initial", "true for deterministic initial states");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("ldp", "rate function along a flow, or random duality probes");
    s.opt<int>("--probe", "probe", "number of random duality probes");
    s.opt<std::string>("--gamma", "gamma", "CSV flow (t, m_0, ..., m_{d-1})");
    s.opt<double>("--dt", "dt", "time step");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }
  {
    auto& s = make("check", "invariant suite");
    s.opt<double>("--dt", "dt", "MFG time step");
    s.opt<std::vector<double>>("--m0", "m0", "initial distribution");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    fsmfg::ExperimentConfig cfg;
    cfg.name = name;
    cfg.model_path = s.model;
    cfg.out_dir = s.out;
    if (s.seed_opt->count() > 0) cfg.seed = s.seed;
    for (auto& set : s.setters) set(cfg.params);
    // --reduced is shorthand for --full false.
    if (cfg.params.contains("reduced")) {
      if (cfg.params["reduced"].get<bool>()) cfg.params["full"] = false;
      cfg.params.erase("reduced");
    }
    try {
      const auto manifest = fsmfg::run_experiment(cfg);
      std::cout << manifest.result.dump(2) << std::endl;
      return 0;
    } catch (const std::exception& e) {
      const json err = fsmfg::error_json(e);
      std::cout << err.dump(2) << std::endl;
      return 1;
    }
  }
  return 2;
}
