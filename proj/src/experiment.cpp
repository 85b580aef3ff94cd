#include "fsmfg/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/crc.hpp>

#include "fsmfg/asymptotics.hpp"
#include "fsmfg/master.hpp"
#include "fsmfg/mfg.hpp"
#include "fsmfg/model.hpp"
#include "fsmfg/nplayer.hpp"
#include "fsmfg/rng.hpp"
#include "fsmfg/sim.hpp"

namespace fsmfg {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint32_t crc32(const std::string& bytes) {
  boost::crc_32_type c;
  c.process_bytes(bytes.data(), bytes.size());
  return c.checksum();
}

void write_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cli", "write", "cannot open output file", "path=" + tmp);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw Error("cli", "write", "write failed", "path=" + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cli", "write", "rename failed: " + ec.message(), "path=" + path);
}

json error_json(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    return {{"module", err->module()}, {"op", err->op()}, {"message", err->what()}, {"context", err->context()}};
  }
  return {{"module", "cli"}, {"op", "run_experiment"}, {"message", e.what()}, {"context", ""}};
}

json RunManifest::to_json() const {
  json outs = json::array();
  for (const auto& [file, crc] : outputs) {
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08x", crc);
    outs.push_back({{"file", file}, {"crc32", hex}});
  }
  return {{"config", config}, {"version", version}, {"wall_clock_seconds", wall_clock}, {"outputs", outs},
          {"result", result}};
}

SlopeFit fit_loglog_slope(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error("cli", "fit_loglog_slope", "xs and ys differ in length");
  if (xs.size() < 3) throw Error("cli", "fit_loglog_slope", "need at least three points");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0;
  Vec lx(xs.size()), ly(ys.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) {
      throw Error("cli", "fit_loglog_slope", "entries must be positive", "index=" + std::to_string(i));
    }
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
    sx += lx[i];
    sy += ly[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw Error("cli", "fit_loglog_slope", "xs must not all coincide");
  SlopeFit f;
  f.slope = sxy / sxx;
  // A flat series is fitted exactly by the zero slope.
  f.r2 = syy <= 1e-30 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Column-oriented CSV builder with %.17g numbers.
class Csv {
public:
  explicit Csv(std::vector<std::string> header) : cols_(header.size()) {
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << '\n';
  }
  void row(const Vec& v) {
    if (v.size() != cols_) throw Error("cli", "csv", "row width mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) os_ << (i ? "," : "") << fmt(v[i]);
    os_ << '\n';
  }
  std::string str() const { return os_.str(); }

private:
  std::size_t cols_;
  std::ostringstream os_;
};

std::string plot_script(const std::string& csv, const std::string& title) {
  std::ostringstream os;
  os << "# Plots every column of " << csv << " against the first one.\n"
     << "import csv, sys\n"
     << "import matplotlib\n"
     << "matplotlib.use('Agg')\n"
     << "import matplotlib.pyplot as plt\n\n"
     << "path = sys.argv[1] if len(sys.argv) > 1 else '" << csv << "'\n"
     << "with open(path) as f:\n"
     << "    rows = list(csv.reader(f))\n"
     << "head, data = rows[0], [[float(v) for v in r] for r in rows[1:]]\n"
     << "fig, ax = plt.subplots()\n"
     << "for j in range(1, len(head)):\n"
     << "    ax.plot([r[0] for r in data], [r[j] for r in data], label=head[j])\n"
     << "ax.set_xlabel(head[0])\n"
     << "ax.set_title('" << title << "')\n"
     << "ax.legend(fontsize='small')\n"
     << "fig.savefig(path.rsplit('.', 1)[0] + '.png', dpi=120)\n";
  return os.str();
}

struct Context {
  const ExperimentConfig& cfg;
  std::shared_ptr<const GameSpec> spec;
  json model;
  RunManifest& manifest;

  void write(const std::string& name, const std::string& content) {
    write_atomic((fs::path(cfg.out_dir) / name).string(), content);
    manifest.outputs.emplace_back(name, crc32(content));
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
  void write_csv(const std::string& name, const Csv& csv, const std::string& title) {
    write(name, csv.str());
    write(fs::path(name).stem().string() + ".plot.py", plot_script(name, title));
  }

  template <typename T>
  T param(const std::string& key, T fallback) const {
    if (!cfg.params.contains(key)) return fallback;
    try {
      return cfg.params.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error("cli", cfg.name, "parameter has the wrong type", "param=" + key);
    }
  }

  std::uint64_t seed() const {
    if (!cfg.seed) throw Error("cli", cfg.name, "a seed is mandatory for stochastic experiments", "param=seed");
    return *cfg.seed;
  }

  SimplexPoint m0() const {
    const int d = spec->d();
    if (cfg.params.contains("m0")) {
      try {
        return SimplexPoint(cfg.params.at("m0").get<Vec>());
      } catch (const json::exception&) {
        throw Error("cli", cfg.name, "m0 must be an array of numbers", "param=m0");
      }
    }
    if (d == 2) return SimplexPoint({0.7, 0.3});
    return SimplexPoint::uniform(d);
  }
};

void allow_params(const ExperimentConfig& cfg, std::initializer_list<const char*> keys) {
  std::set<std::string> ok(keys.begin(), keys.end());
  for (const auto& [k, v] : cfg.params.items()) {
    if (!ok.count(k)) throw Error("cli", cfg.name, "unknown parameter", "param=" + k);
  }
}

MfgOptions mfg_options(const Context& c) {
  MfgOptions o;
  o.dt = c.param("dt", 1e-3);
  o.tol = c.param("tol", o.tol);
  o.damping = c.param("damping", o.damping);
  const auto method = c.param<std::string>("method", "picard");
  if (method == "picard") {
    o.method = MfgMethod::picard;
  } else if (method == "shooting") {
    o.method = MfgMethod::shooting;
  } else {
    throw Error("cli", c.cfg.name, "method must be picard or shooting", "param=method");
  }
  return o;
}

json vec_json(std::span<const double> v) { return json(Vec(v.begin(), v.end())); }

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    Vec r(static_cast<std::size_t>(M.cols()));
    for (Eigen::Index j = 0; j < M.cols(); ++j) r[static_cast<std::size_t>(j)] = M(i, j);
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::string> indexed(const std::string& prefix, int d) {
  std::vector<std::string> v;
  for (int x = 0; x < d; ++x) v.push_back(prefix + std::to_string(x));
  return v;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---------------------------------------------------------------------------

json run_solve_mfg(Context& c) {
  allow_params(c.cfg, {"dt", "method", "m0", "t0", "tol", "damping"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  const auto sol = solve_mfg(spec, c.param("t0", 0.0), c.m0(), mfg_options(c));
  Csv csv(concat(concat({"t"}, indexed("u", d)), indexed("m", d)));
  for (int k = 0; k < sol.u.grid.n_nodes(); ++k) {
    Vec row{sol.u.grid.node(k)};
    for (double v : sol.u.at(k)) row.push_back(v);
    for (double v : sol.m.at(k)) row.push_back(v);
    csv.row(row);
  }
  c.write_csv("mfg.csv", csv, "MFG solution");
  const int n = sol.u.grid.n_steps();
  json r = {{"iterations", sol.iterations},
            {"residual", {{"hjb", sol.residual.hjb}, {"kfp", sol.residual.kfp}}},
            {"u0", vec_json(sol.u.at(0))},
            {"mT", vec_json(sol.m.at(n))},
            {"uniqueness_guaranteed", sol.uniqueness_guaranteed}};
  c.write_json("summary.json", r);
  return r;
}

json run_solve_master(Context& c) {
  allow_params(c.cfg, {"n", "dt", "time_stride"});
  const int d = c.spec->d();
  const int n = c.param("n", 20);
  const double dt = c.param("dt", 1e-3);
  const int stride = std::max(1, c.param("time_stride", 10));
  const MasterField f = build_master_field(c.spec, SimplexGrid(d, n), TimeGrid::with_step(0.0, c.spec->T(), dt));
  // Long format, one row per (t, x, node). DmU columns hold [D^m U(t, x, m, 1)]_z.
  const auto key = concat({"t", "x", "node"}, indexed("m", d));
  Csv ucsv(concat(key, {"U"}));
  Csv dcsv(concat(key, indexed("DmU", d)));
  for (int k = 0; k < f.times.n_nodes(); k += stride) {
    for (int x = 0; x < d; ++x) {
      for (int node = 0; node < f.grid.size(); ++node) {
        Vec row{f.times.node(k), static_cast<double>(x), static_cast<double>(node)};
        for (double v : f.grid.point(node)) row.push_back(v);
        Vec drow = row;
        row.push_back(f.value(k, x, node));
        ucsv.row(row);
        for (int z = 0; z < d; ++z) drow.push_back(f.derivative(k, x, node, 0, z));
        dcsv.row(drow);
      }
    }
  }
  c.write_csv("U.csv", ucsv, "Master field U");
  c.write_csv("DmU.csv", dcsv, "Measure derivative of U");
  const auto id = derivative_identity_check(f);
  const auto reg = regularity_probe(f);
  json r = {{"n", n},
            {"dt", dt},
            {"residual", master_residual(*c.spec, f)},
            {"fd_gap", finite_difference_gap(f)},
            {"identity", id.identity},
            {"direction", id.direction},
            {"lip_U", reg.lip_U},
            {"lip_DmU", reg.lip_DmU},
            {"uniqueness_guaranteed", f.uniqueness_guaranteed}};
  c.write_json("summary.json", r);
  return r;
}

json run_solve_nplayer(Context& c) {
  allow_params(c.cfg, {"N", "dt", "dt_fraction", "full", "nash_paths", "nash_deviations", "m0"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  const int N = c.param("N", 4);
  NPlayerOptions opt;
  if (c.cfg.params.contains("dt") && c.cfg.params.contains("dt_fraction")) {
    throw Error("cli", c.cfg.name, "give dt or dt_fraction, not both", "param=dt");
  }
  opt.dt_fraction = c.cfg.params.contains("dt") ? c.param("dt", 1e-3) / spec.T() : c.param("dt_fraction", 1e-3);
  auto counts = std::make_shared<CountsValue>(solve_counts_reduced(spec, N, opt));
  Csv csv(concat(concat({"rank"}, indexed("n", d)), indexed("w", d)));
  for (int r = 0; r < counts->others.size(); ++r) {
    Vec row{static_cast<double>(r)};
    for (int v : counts->others.composition(r)) row.push_back(v);
    for (int x = 0; x < d; ++x) row.push_back(counts->value(0, x, r));
    csv.row(row);
  }
  c.write_csv("counts_t0.csv", csv, "N-player value at t = 0");
  json r = {{"N", N}, {"states", counts->others.size()}};
  const bool full = c.param("full", N <= 5);
  if (full) {
    const auto ft = solve_full_tensor(spec, N, opt);
    r["representation_gap"] = representation_gap(ft, *counts);
    r["permutation_defect"] = permutation_defect(ft);
  }
  const int paths = c.param("nash_paths", 0);
  if (paths > 0) {
    NashFeedback nash(c.spec, counts);
    const auto rep = nash_gap_probe(nash, c.m0(), c.param("nash_deviations", 10), paths, c.seed());
    r["nash_gap"] = {{"max_gap", rep.max_gap}, {"std_error", rep.std_error}, {"nash_cost", rep.nash_cost},
                     {"gaps", rep.gaps}, {"std_errors", rep.std_errors}};
  }
  c.write_json("summary.json", r);
  return r;
}

json run_simulate(Context& c) {
  allow_params(c.cfg, {"N", "Ns", "paths", "master_dt", "dt", "m0"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  std::vector<int> Ns = c.cfg.params.contains("Ns") ? c.param<std::vector<int>>("Ns", {}) : std::vector<int>{c.param("N", 8)};
  const int paths = c.param("paths", 1000);
  const double master_dt = c.param("master_dt", 1e-2);
  const std::uint64_t seed = c.seed();
  const SimplexPoint m0 = c.m0();
  MfgOptions mo;
  mo.dt = c.param("dt", 1e-3);
  const MfgSolution limit = solve_mfg(spec, 0.0, m0, mo);
  Csv csv({"N", "e_yx", "se_yx", "e_emp_yx", "se_emp_yx", "e_chaos", "se_chaos", "e_lln", "se_lln"});
  json estimates = json::object(), errors = json::object();
  json rows = json::array();
  for (int N : Ns) {
    auto counts = std::make_shared<CountsValue>(solve_counts_reduced(spec, N));
    NashFeedback nash(c.spec, counts);
    const MasterField field =
        build_master_field(c.spec, SimplexGrid(d, N - 1), TimeGrid::with_step(0.0, spec.T(), master_dt));
    BatchConfig bc;
    bc.N = N;
    bc.paths = paths;
    bc.seed = seed;
    const auto batch = run_coupled_batch({c.spec, &nash, &field, &limit}, m0, bc);
    const auto e = chaos_estimates(batch);
    csv.row({static_cast<double>(N), e.e_yx.mean, e.e_yx.se, e.e_emp_yx.mean, e.e_emp_yx.se, e.e_chaos.mean,
             e.e_chaos.se, e.e_lln.mean, e.e_lln.se});
    const std::string key = std::to_string(N);
    estimates[key] = {{"e_yx", e.e_yx.mean}, {"e_emp_yx", e.e_emp_yx.mean}, {"e_chaos", e.e_chaos.mean}, {"e_lln", e.e_lln.mean}};
    errors[key] = {{"e_yx", e.e_yx.se}, {"e_emp_yx", e.e_emp_yx.se}, {"e_chaos", e.e_chaos.se}, {"e_lln", e.e_lln.se}};
  }
  c.write_csv("simulate.csv", csv, "Coupling and chaos estimates");
  json r = {{"paths", paths}, {"seed", seed}, {"estimates", estimates}, {"std_errors", errors}};
  c.write_json("simulate.json", r);
  return r;
}

json run_convergence(Context& c) {
  allow_params(c.cfg, {"Ns", "dt", "t0", "sample_fractions", "m0"});
  const auto& spec = *c.spec;
  const auto Ns = c.param<std::vector<int>>("Ns", {4, 8, 16, 32});
  const double dt = c.param("dt", 1e-3);
  const double t0 = c.param("t0", 0.0);
  Vec times;
  for (double f : c.param<Vec>("sample_fractions", {0.1, 0.3, 0.5, 0.7, 0.9})) times.push_back(f * spec.T());
  const SimplexPoint m0 = c.m0();
  const CharacteristicEvaluator U(c.spec, dt);
  NPlayerOptions opt;
  opt.dt_fraction = dt / spec.T();
  Csv csv({"N", "avg_gap", "l1_gap", "r_sup", "tau_sup"});
  Vec xs, avg, l1, res, tau;
  for (int N : Ns) {
    const auto counts = solve_counts_reduced(spec, N, opt);
    const auto g = theorem1_gap(spec, counts, U, t0, m0);
    const auto pr = projection_residual(spec, U, N, times);
    csv.row({static_cast<double>(N), g.avg_gap, g.l1_gap, pr.r_sup, pr.tau_sup});
    xs.push_back(N);
    avg.push_back(g.avg_gap);
    l1.push_back(g.l1_gap);
    res.push_back(pr.r_sup);
    tau.push_back(pr.tau_sup);
  }
  c.write_csv("convergence.csv", csv, "Convergence in N");
  auto fit = [&](const Vec& ys) -> json {
    if (xs.size() < 3) return nullptr;
    const auto f = fit_loglog_slope(xs, ys);
    return {{"slope", f.slope}, {"r2", f.r2}};
  };
  json r = {{"Ns", Ns},
            {"slopes", {{"avg_gap", fit(avg)}, {"l1_gap", fit(l1)}, {"r_sup", fit(res)}, {"tau_sup", fit(tau)}}}};
  c.write_json("slopes.json", r);
  return r;
}

json run_clt(Context& c) {
  allow_params(c.cfg, {"N", "paths", "t", "dt", "cov_dt", "deterministic_initial", "m0"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  const int N = c.param("N", 200);
  const int paths = c.param("paths", 10000);
  const double t = c.param("t", spec.T());
  const bool det = c.param("deterministic_initial", true);
  const SimplexPoint m0 = c.m0();
  MfgOptions mo;
  mo.dt = c.param("dt", 1e-3);
  const MfgSolution limit = solve_mfg(spec, 0.0, m0, mo);
  const CharacteristicEvaluator U(c.spec, mo.dt);
  FluctuationOptions fo;
  fo.dt = c.param("cov_dt", 1e-2);
  fo.mfg_dt = mo.dt;
  const Matrix cov0 = det ? Matrix::Zero(d, d) : multinomial_covariance(m0);
  const auto law = evolve_fluctuation_law(spec, U, m0, cov0, fo);
  const int k = law.times.n_steps() == 0 ? 0 : static_cast<int>(std::llround(t / law.times.dt()));
  if (k < 0 || k > law.times.n_steps() || std::abs(law.times.node(k) - t) > 1e-9) {
    throw Error("cli", "clt", "t must be a node of the covariance grid", "param=t");
  }
  auto counts = std::make_shared<CountsValue>(solve_counts_reduced(spec, N));
  NashFeedback nash(c.spec, counts);
  BatchConfig bc;
  bc.N = N;
  bc.paths = paths;
  bc.seed = c.seed();
  bc.systems = kSystemY;
  bc.deterministic_initial = det;
  bc.snapshot_times = {t};
  const auto batch = run_coupled_batch({c.spec, &nash, nullptr, &limit}, m0, bc);
  Vec mt(static_cast<std::size_t>(d));
  limit.m.interpolate(t, mt);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  Matrix mc = Matrix::Zero(d, d);
  for (const auto& snaps : batch.snapshots_Y) {
    Eigen::VectorXd r(d);
    for (int x = 0; x < d; ++x) r(x) = std::sqrt(static_cast<double>(N)) * (snaps[0][static_cast<std::size_t>(x)] - mt[static_cast<std::size_t>(x)]);
    mean += r;
    mc += r * r.transpose();
  }
  const double P = paths;
  mean /= P;
  mc = (mc - P * mean * mean.transpose()) / (P - 1.0);
  const Matrix& ode = law.cov[static_cast<std::size_t>(k)];
  const double rel = (mc - ode).norm() / ode.norm();

  Csv csv(concat({"t"}, [&] {
    std::vector<std::string> h;
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) h.push_back("cov" + std::to_string(x) + std::to_string(y));
    }
    return h;
  }()));
  for (int j = 0; j < law.times.n_nodes(); ++j) {
    Vec row{law.times.node(j)};
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) row.push_back(law.cov[static_cast<std::size_t>(j)](x, y));
    }
    csv.row(row);
  }
  c.write_csv("covariance.csv", csv, "Fluctuation covariance (ODE)");
  SimplexPoint mpt(mt);
  const auto coeff = clt_coefficients(spec, U, t, mpt, TangentVector::zero(d));
  json r = {{"N", N},
            {"paths", paths},
            {"t", t},
            {"ode_covariance", matrix_json(ode)},
            {"mc_covariance", matrix_json(mc)},
            {"mc_mean", vec_json(std::span<const double>(mean.data(), static_cast<std::size_t>(d)))},
            {"frobenius_relative_gap", rel},
            {"sigma2", matrix_json(coeff.sigma2)},
            {"near_kink", coeff.near_kink}};
  c.write_json("clt.json", r);
  return r;
}

MeasureFlow read_flow_csv(const std::string& path, int d) {
  std::ifstream in(path);
  if (!in) throw Error("cli", "ldp", "cannot open flow file", "path=" + path);
  std::string line;
  std::getline(in, line);  // header
  Vec ts, ms;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vec row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error("cli", "ldp", "flow file has a non-numeric cell", "path=" + path);
      }
    }
    if (static_cast<int>(row.size()) != d + 1) throw Error("cli", "ldp", "flow rows need t and d masses", "path=" + path);
    ts.push_back(row[0]);
    ms.insert(ms.end(), row.begin() + 1, row.end());
  }
  if (ts.size() < 3) throw Error("cli", "ldp", "flow needs at least three rows", "path=" + path);
  const TimeGrid g(ts.front(), ts.back(), static_cast<int>(ts.size()) - 1);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (std::abs(ts[k] - g.node(static_cast<int>(k))) > 1e-9) throw Error("cli", "ldp", "flow times must be uniform", "path=" + path);
  }
  MeasureFlow f(g, d);
  f.m = ms;
  return f;
}

json run_ldp(Context& c) {
  allow_params(c.cfg, {"probe", "gamma", "dt", "m0"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  const double dt = c.param("dt", 1e-3);
  const CharacteristicEvaluator U(c.spec, dt);
  const int probes = c.param("probe", 0);
  if (probes > 0) {
    CounterRng rng{c.seed(), 0x6c6470ULL};
    double gap = 0.0, infeas = 0.0, min_lambda = kInfinity;
    Csv csv(concat(concat(concat({"t"}, indexed("m", d)), indexed("mu", d)), {"Lambda", "Lambda0"}));
    for (int i = 0; i < probes; ++i) {
      const double t = rng.uniform(0.0, spec.T());
      Vec m = rng.simplex(d);
      for (double& v : m) v = 0.05 / d + (1.0 - 0.05) * v;  // keep clear of the faces
      Vec mu(static_cast<std::size_t>(d));
      double s = 0.0;
      for (double& v : mu) {
        v = rng.uniform(-1.0, 1.0);
        s += v;
      }
      for (double& v : mu) v -= s / d;
      const auto r = big_lambda(spec, U, t, SimplexPoint(m), TangentVector(mu));
      gap = std::max(gap, std::abs(r.big_lambda - r.big_lambda_dual));
      Vec flow(static_cast<std::size_t>(d), 0.0);
      for (int x = 0; x < d; ++x) {
        for (int y = 0; y < d; ++y) {
          if (x == y) continue;
          if (r.q_opt(x, y) < 0.0) infeas = std::max(infeas, -r.q_opt(x, y));
          flow[static_cast<std::size_t>(y)] += r.q_opt(x, y);
          flow[static_cast<std::size_t>(x)] -= r.q_opt(x, y);
        }
      }
      infeas = std::max(infeas, sup_diff(flow, mu));
      min_lambda = std::min(min_lambda, r.big_lambda);
      Vec row{t};
      row.insert(row.end(), m.begin(), m.end());
      row.insert(row.end(), mu.begin(), mu.end());
      row.push_back(r.big_lambda);
      row.push_back(r.big_lambda_dual);
      csv.row(row);
    }
    c.write(std::string("ldp_probe.csv"), csv.str());
    json r = {{"probes", probes}, {"max_duality_gap", gap}, {"max_primal_infeasibility", infeas}, {"min_lambda", min_lambda}};
    c.write_json("ldp_probe.json", r);
    return r;
  }
  const SimplexPoint m0 = c.m0();
  MeasureFlow gamma(TimeGrid(0.0, 1.0, 1), d);
  std::string source = "mfg";
  if (c.cfg.params.contains("gamma")) {
    source = c.param<std::string>("gamma", "");
    gamma = read_flow_csv(source, d);
  } else {
    MfgOptions mo;
    mo.dt = dt;
    gamma = solve_mfg(spec, 0.0, m0, mo).m;
  }
  const auto I = rate_functional(spec, U, gamma, m0);
  json r = {{"gamma", source}, {"I", std::isfinite(I.value) ? json(I.value) : json("inf")}};
  if (std::isfinite(I.value)) {
    Csv csv({"t", "Lambda"});
    for (int k = 0; k < gamma.grid.n_nodes(); ++k) csv.row({gamma.grid.node(k), I.integrand[static_cast<std::size_t>(k)]});
    c.write_csv("ldp_lambda.csv", csv, "Local rate along the flow");
  }
  c.write_json("ldp.json", r);
  return r;
}

json run_check(Context& c) {
  allow_params(c.cfg, {"dt", "m0"});
  const auto& spec = *c.spec;
  const int d = spec.d();
  const SimplexPoint m0 = c.m0();
  const std::uint64_t seed = c.cfg.seed.value_or(1);
  json checks = json::array();
  bool passed = true;
  auto add = [&](const std::string& name, double value, double tol, bool ok) {
    checks.push_back({{"name", name}, {"value", value}, {"tolerance", tol}, {"passed", ok}});
    passed = passed && ok;
  };

  CounterRng rng{seed, 0x636bULL};
  double legendre = 0.0, grad = 0.0;
  const double band = 2.0 * spec.gradient_bound();
  Vec p(static_cast<std::size_t>(d)), a(static_cast<std::size_t>(d)), pp(static_cast<std::size_t>(d));
  for (int i = 0; i < 100; ++i) {
    const int x = rng.below(d);
    for (int z = 0; z < d; ++z) p[static_cast<std::size_t>(z)] = z == x ? 0.0 : rng.uniform(-band, band);
    legendre = std::max(legendre, legendre_consistency_check(spec, x, p, 2001).deviation);
    spec.alpha_star(x, p, a);
    for (int z = 0; z < d; ++z) {
      if (z == x) continue;
      const double h = 1e-6;
      pp = p;
      pp[static_cast<std::size_t>(z)] += h;
      const double up = spec.hamiltonian(x, pp);
      pp[static_cast<std::size_t>(z)] -= 2 * h;
      const double dn = spec.hamiltonian(x, pp);
      grad = std::max(grad, std::abs(a[static_cast<std::size_t>(z)] + (up - dn) / (2 * h)));
    }
  }
  add("legendre_consistency", legendre, 1e-6, legendre <= 1e-6);
  add("alpha_star_gradient", grad, 1e-5, grad <= 1e-5);
  if (spec.monotone()) {
    const double mono = monotonicity_probe(spec, 200, seed);
    add("monotonicity", mono, 0.0, mono >= -1e-12);
  }

  MfgOptions mo;
  mo.dt = c.param("dt", 1e-3);
  const auto sol = solve_mfg(spec, 0.0, m0, mo);
  add("mfg_hjb_residual", sol.residual.hjb, 1e-6, sol.residual.hjb <= 1e-6);
  add("mfg_kfp_residual", sol.residual.kfp, 1e-6, sol.residual.kfp <= 1e-6);
  const auto two = two_start_check(spec, sol.u.grid, m0, mo);
  add("mfg_two_start", two.distance, 1e-6, two.distance <= 1e-6);

  const MasterField f = build_master_field(c.spec, SimplexGrid(d, 6), TimeGrid::with_step(0.0, spec.T(), 1e-2));
  const auto id = derivative_identity_check(f);
  add("master_identity", id.identity, 1e-8, id.identity <= 1e-8);
  add("master_direction", id.direction, 1e-8, id.direction <= 1e-8);

  double rep = 0.0, perm = 0.0;
  NPlayerOptions no;
  no.dt_fraction = 1e-2;
  for (int N = 2; N <= 3; ++N) {
    const auto ft = solve_full_tensor(spec, N, no);
    rep = std::max(rep, representation_gap(ft, solve_counts_reduced(spec, N, no)));
    perm = std::max(perm, permutation_defect(ft));
  }
  add("nplayer_representation", rep, 1e-9, rep <= 1e-9);
  add("nplayer_permutation", perm, 1e-12, perm <= 1e-12);

  if (m0.interior()) {
    const CharacteristicEvaluator U(c.spec, 1e-2);
    const auto cc = clt_coefficients(spec, U, 0.0, m0, TangentVector::zero(d));
    const Matrix& S = cc.sigma2;
    double sym = (S - S.transpose()).cwiseAbs().maxCoeff();
    double rows = S.rowwise().sum().cwiseAbs().maxCoeff();
    double offdiag = -kInfinity;
    for (int x = 0; x < d; ++x) {
      for (int y = 0; y < d; ++y) {
        if (x != y) offdiag = std::max(offdiag, S(x, y));
      }
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
    add("sigma2_symmetric", sym, 0.0, sym == 0.0);
    add("sigma2_row_sums", rows, 1e-14, rows <= 1e-14);
    add("sigma2_offdiagonal_nonpositive", offdiag, 0.0, offdiag <= 0.0);
    add("sigma2_psd", es.eigenvalues().minCoeff(), -1e-12, es.eigenvalues().minCoeff() >= -1e-12);
  }
  add("local_rate_at_one", local_rate(1.0), 0.0, local_rate(1.0) == 0.0);
  add("local_rate_at_zero", local_rate(0.0), 0.0, local_rate(0.0) == 1.0);

  json r = {{"passed", passed}, {"checks", checks}};
  c.write_json("check.json", r);
  return r;
}

using Runner = std::function<json(Context&)>;

const std::map<std::string, Runner>& runners() {
  static const std::map<std::string, Runner> table = {
      {"solve-mfg", run_solve_mfg}, {"solve-master", run_solve_master}, {"solve-nplayer", run_solve_nplayer},
      {"simulate", run_simulate},   {"convergence", run_convergence},   {"clt", run_clt},
      {"ldp", run_ldp},             {"check", run_check}};
  return table;
}

}  // namespace

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [k, _] : runners()) v.push_back(k);
    return v;
  }();
  return names;
}

RunManifest run_experiment(const ExperimentConfig& config) {
  const auto it = runners().find(config.name);
  if (it == runners().end()) throw Error("cli", "run_experiment", "unknown experiment", "name=" + config.name);
  const auto start = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.version = kLibraryVersion;
  json model;
  {
    std::ifstream in(config.model_path);
    if (!in) throw Error("cli", "run_experiment", "cannot open model file", "path=" + config.model_path);
    try {
      model = json::parse(in);
    } catch (const json::exception& e) {
      throw Error("model", "load_model", std::string("malformed JSON: ") + e.what(), "path=" + config.model_path);
    }
  }
  auto spec = load_model(model);
  manifest.config = {{"model", model}, {"model_path", config.model_path}, {"experiment", config.name},
                     {"params", config.params}, {"out_dir", config.out_dir}};
  manifest.config["seed"] = config.seed ? json(*config.seed) : json(nullptr);
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw Error("cli", "run_experiment", "cannot create output directory", "path=" + config.out_dir);
  Context ctx{config, spec, model, manifest};
  manifest.result = it->second(ctx);
  manifest.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_atomic((fs::path(config.out_dir) / "manifest.json").string(), manifest.to_json().dump(2) + "\n");
  return manifest;
}

}  // namespace fsmfg
