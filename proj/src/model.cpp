#include "fsmfg/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "fsmfg/rng.hpp"

namespace fsmfg {

namespace {

constexpr double kFdStep = 1e-6;

void require(bool ok, const std::string& op, const std::string& message, const std::string& ctx = {}) {
  if (!ok) throw Error("model", op, message, ctx);
}

// Lattice of the simplex with resolution n, used to bound generic costs.
template <typename Fn>
void for_each_lattice_point(int d, int n, Fn&& fn) {
  std::vector<int> k(static_cast<std::size_t>(d), 0);
  Vec m(static_cast<std::size_t>(d));
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == d - 1) {
      k[static_cast<std::size_t>(pos)] = left;
      for (int i = 0; i < d; ++i) m[static_cast<std::size_t>(i)] = static_cast<double>(k[static_cast<std::size_t>(i)]) / n;
      fn(std::span<const double>(m));
      return;
    }
    for (int v = 0; v <= left; ++v) {
      k[static_cast<std::size_t>(pos)] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, n);
}

}  // namespace

GameSpec::GameSpec(int d, double T, double kappa, double M) : d_(d), T_(T), kappa_(kappa), M_(M) {
  require(d >= 2, "GameSpec", "need at least 2 states", "d=" + std::to_string(d));
  require(T > 0.0 && std::isfinite(T), "GameSpec", "horizon T must be positive");
  require(kappa > 0.0 && M > kappa && std::isfinite(M), "GameSpec", "need 0 < kappa < M");
}

double GameSpec::running_cost_derivative(int x, std::span<const double> m,
                                         std::span<const double> mu) const {
  Vec plus(m.begin(), m.end()), minus(m.begin(), m.end());
  for (std::size_t i = 0; i < plus.size(); ++i) {
    plus[i] += kFdStep * mu[i];
    minus[i] -= kFdStep * mu[i];
  }
  return (running_cost(x, plus) - running_cost(x, minus)) / (2.0 * kFdStep);
}

double GameSpec::terminal_cost_derivative(int x, std::span<const double> m,
                                          std::span<const double> mu) const {
  Vec plus(m.begin(), m.end()), minus(m.begin(), m.end());
  for (std::size_t i = 0; i < plus.size(); ++i) {
    plus[i] += kFdStep * mu[i];
    minus[i] -= kFdStep * mu[i];
  }
  return (terminal_cost(x, plus) - terminal_cost(x, minus)) / (2.0 * kFdStep);
}

void GameSpec::alpha_star_jacobian(int x, std::span<const double> p, std::span<double> out) const {
  const auto d = static_cast<std::size_t>(d_);
  Vec q(p.begin(), p.end()), hi(d), lo(d);
  for (std::size_t z = 0; z < d; ++z) {
    q[z] = p[z] + kFdStep;
    alpha_star(x, q, hi);
    q[z] = p[z] - kFdStep;
    alpha_star(x, q, lo);
    q[z] = p[z];
    for (std::size_t y = 0; y < d; ++y) out[y * d + z] = (hi[y] - lo[y]) / (2.0 * kFdStep);
  }
}

double GameSpec::lagrangian_coordinate(int, int, double) const {
  throw Error("model", "lagrangian_coordinate", "model is not separable");
}

double GameSpec::sup_lagrangian() const {
  // Convex in the control, so the max over the box sits on a corner.
  const int d = d_;
  double best = 0.0;
  Vec a(static_cast<std::size_t>(d));
  for (int x = 0; x < d; ++x) {
    for (unsigned long mask = 0; mask < (1UL << d); ++mask) {
      for (int y = 0; y < d; ++y) a[static_cast<std::size_t>(y)] = (mask >> y) & 1UL ? M_ : kappa_;
      best = std::max(best, std::abs(lagrangian(x, a)));
    }
  }
  return best;
}

double GameSpec::sup_running_cost() const {
  double best = 0.0;
  for (int x = 0; x < d_; ++x) {
    for_each_lattice_point(d_, 10, [&](std::span<const double> m) {
      best = std::max(best, std::abs(running_cost(x, m)));
    });
  }
  return best;
}

double GameSpec::sup_terminal_cost() const {
  double best = 0.0;
  for (int x = 0; x < d_; ++x) {
    for_each_lattice_point(d_, 10, [&](std::span<const double> m) {
      best = std::max(best, std::abs(terminal_cost(x, m)));
    });
  }
  return best;
}

double GameSpec::value_bound() const {
  return T_ * (sup_running_cost() + sup_lagrangian()) + sup_terminal_cost();
}

double GameSpec::gradient_bound() const {
  if (K_) return *K_;
  return 2.0 * std::max(sup_terminal_cost(), T_ * (sup_running_cost() + sup_lagrangian()));
}

// ---------------------------------------------------------------------------

LinearCost LinearCost::zero(int d) {
  return {Matrix::Zero(d, d), Vec(static_cast<std::size_t>(d), 0.0)};
}

LinearCost LinearCost::own_mass(int d, double scale) {
  return {scale * Matrix::Identity(d, d), Vec(static_cast<std::size_t>(d), 0.0)};
}

LinearCost LinearCost::state_index(int d) {
  LinearCost c = zero(d);
  for (int x = 0; x < d; ++x) c.offset[static_cast<std::size_t>(x)] = static_cast<double>(x) / d;
  return c;
}

LinearCost LinearCost::from_json(const nlohmann::json& j, int d) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "own_mass") return own_mass(d);
    if (name == "zero") return zero(d);
    if (name == "neg_own_mass") return own_mass(d, -1.0);
    if (name == "state_index") return state_index(d);
    throw Error("model", "load_model", "unknown cost name", "value=" + name);
  }
  require(j.is_object(), "load_model", "cost must be a name or an object");
  for (const auto& [key, _] : j.items()) {
    require(key == "A" || key == "offset", "load_model", "unknown cost field", "field=" + key);
  }
  LinearCost c = zero(d);
  if (j.contains("A")) {
    const auto& rows = j.at("A");
    require(rows.is_array() && static_cast<int>(rows.size()) == d, "load_model", "A must be d x d", "field=A");
    for (int r = 0; r < d; ++r) {
      const auto& row = rows[static_cast<std::size_t>(r)];
      require(row.is_array() && static_cast<int>(row.size()) == d, "load_model", "A must be d x d", "field=A");
      for (int s = 0; s < d; ++s) c.A(r, s) = row[static_cast<std::size_t>(s)].get<double>();
    }
  }
  if (j.contains("offset")) {
    const auto& off = j.at("offset");
    require(off.is_array() && static_cast<int>(off.size()) == d, "load_model", "offset must have d entries",
            "field=offset");
    for (int r = 0; r < d; ++r) c.offset[static_cast<std::size_t>(r)] = off[static_cast<std::size_t>(r)].get<double>();
  }
  return c;
}

double LinearCost::operator()(int x, std::span<const double> m) const {
  double v = offset[static_cast<std::size_t>(x)];
  for (Eigen::Index z = 0; z < A.cols(); ++z) v += A(x, z) * m[static_cast<std::size_t>(z)];
  return v;
}

double LinearCost::derivative(int x, std::span<const double> mu) const {
  double v = 0.0;
  for (Eigen::Index z = 0; z < A.cols(); ++z) v += A(x, z) * mu[static_cast<std::size_t>(z)];
  return v;
}

double LinearCost::sup_norm_on_simplex() const {
  // Affine in m: extremes sit at the vertices.
  double best = 0.0;
  for (Eigen::Index x = 0; x < A.rows(); ++x) {
    for (Eigen::Index v = 0; v < A.cols(); ++v) {
      best = std::max(best, std::abs(A(x, v) + offset[static_cast<std::size_t>(x)]));
    }
  }
  return best;
}

bool LinearCost::monotone() const {
  const Eigen::Index d = A.rows();
  const Matrix P = Matrix::Identity(d, d) - Matrix::Constant(d, d, 1.0 / static_cast<double>(d));
  const Matrix S = P * (0.5 * (A + A.transpose())) * P;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  return eig.eigenvalues().minCoeff() >= -1e-12;
}

nlohmann::json LinearCost::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index s = 0; s < A.cols(); ++s) row.push_back(A(r, s));
    rows.push_back(row);
  }
  return {{"A", rows}, {"offset", offset}};
}

// ---------------------------------------------------------------------------

QuadraticModel::QuadraticModel(int d, double T, double kappa, double M, double b, LinearCost F,
                               LinearCost G)
    : GameSpec(d, T, kappa, M), b_(b), center_(0.5 * (kappa + M)), band_(b * (M - kappa)),
      F_(std::move(F)), G_(std::move(G)) {
  require(b > 0.0 && std::isfinite(b), "QuadraticModel", "convexity coefficient b must be positive");
  require(F_.A.rows() == d && F_.A.cols() == d && static_cast<int>(F_.offset.size()) == d, "QuadraticModel",
          "F has wrong dimension");
  require(G_.A.rows() == d && G_.A.cols() == d && static_cast<int>(G_.offset.size()) == d, "QuadraticModel",
          "G has wrong dimension");
}

double QuadraticModel::h(double p) const {
  if (p > band_) return -kappa() * p - 0.25 * b_ * (M_bound() - kappa()) * (M_bound() - kappa());
  if (p < -band_) return -M_bound() * p - 0.25 * b_ * (M_bound() - kappa()) * (M_bound() - kappa());
  return p * p / (4.0 * b_) - center_ * p;
}

double QuadraticModel::alpha(double p) const {
  return std::clamp(center_ - p / (2.0 * b_), kappa(), M_bound());
}

double QuadraticModel::lagrangian(int, std::span<const double> alpha) const {
  double s = 0.0;
  for (double a : alpha) s += (a - center_) * (a - center_);
  return b_ * s;
}

double QuadraticModel::hamiltonian(int, std::span<const double> p) const {
  double s = 0.0;
  for (double v : p) s += h(v);
  return s;
}

void QuadraticModel::alpha_star(int, std::span<const double> p, std::span<double> out) const {
  for (std::size_t y = 0; y < p.size(); ++y) out[y] = alpha(p[y]);
}

double QuadraticModel::running_cost_derivative(int x, std::span<const double>,
                                               std::span<const double> mu) const {
  return F_.derivative(x, mu);
}

double QuadraticModel::terminal_cost_derivative(int x, std::span<const double>,
                                                std::span<const double> mu) const {
  return G_.derivative(x, mu);
}

void QuadraticModel::alpha_star_jacobian(int, std::span<const double> p, std::span<double> out) const {
  const std::size_t d = p.size();
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t y = 0; y < d; ++y) {
    if (std::abs(p[y]) < band_) out[y * d + y] = -1.0 / (2.0 * b_);
  }
}

double QuadraticModel::lagrangian_coordinate(int, int, double a) const {
  return b_ * (a - center_) * (a - center_);
}

double QuadraticModel::sup_lagrangian() const {
  const double half = 0.5 * (M_bound() - kappa());
  return b_ * d() * half * half;
}

std::string QuadraticModel::describe() const {
  std::ostringstream os;
  os << "quadratic(d=" << d() << ", T=" << T() << ", kappa=" << kappa() << ", M=" << M_bound()
     << ", b=" << b_ << ")";
  return os.str();
}

// ---------------------------------------------------------------------------

std::shared_ptr<const GameSpec> load_model(const nlohmann::json& config) {
  require(config.is_object(), "load_model", "model config must be a JSON object");
  static const std::set<std::string> known{"d", "T", "kappa", "M", "model", "b", "F", "G", "K"};
  for (const auto& [key, _] : config.items()) {
    require(known.count(key) > 0, "load_model", "unknown field", "field=" + key);
  }
  for (const char* key : {"d", "T", "kappa", "M", "model", "b", "F", "G"}) {
    require(config.contains(key), "load_model", "missing field", std::string("field=") + key);
  }
  auto number = [&](const char* key) {
    const auto& v = config.at(key);
    require(v.is_number(), "load_model", "field must be a number", std::string("field=") + key);
    return v.get<double>();
  };
  const auto& dj = config.at("d");
  require(dj.is_number_integer(), "load_model", "field must be an integer", "field=d");
  const int d = dj.get<int>();
  require(d >= 2, "load_model", "need at least 2 states", "field=d");
  const auto& kind = config.at("model");
  require(kind.is_string() && kind.get<std::string>() == "quadratic", "load_model", "unsupported model",
          "field=model");

  LinearCost F, G;
  try {
    F = LinearCost::from_json(config.at("F"), d);
  } catch (const Error& e) {
    throw Error("model", "load_model", e.what(), "field=F " + e.context());
  }
  try {
    G = LinearCost::from_json(config.at("G"), d);
  } catch (const Error& e) {
    throw Error("model", "load_model", e.what(), "field=G " + e.context());
  }
  const double T = number("T"), kappa = number("kappa"), M = number("M"), b = number("b");
  require(T > 0.0, "load_model", "horizon must be positive", "field=T");
  require(kappa > 0.0, "load_model", "kappa must be positive", "field=kappa");
  require(M > kappa, "load_model", "need M > kappa", "field=M");
  require(b > 0.0, "load_model", "b must be positive", "field=b");
  auto model = std::make_shared<QuadraticModel>(d, T, kappa, M, b, std::move(F), std::move(G));
  if (config.contains("K")) {
    const double K = number("K");
    require(K > 0.0, "load_model", "K must be positive", "field=K");
    model->set_gradient_bound(K);
  }
  return model;
}

std::shared_ptr<const GameSpec> load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("model", "load_model", "cannot open model file", "path=" + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("model", "load_model", std::string("malformed JSON: ") + e.what(), "path=" + path);
  }
  return load_model(j);
}

// ---------------------------------------------------------------------------

LegendreCheck legendre_consistency_check(const GameSpec& spec, int x, std::span<const double> p,
                                         int grid_n) {
  require(grid_n >= 2, "legendre_consistency_check", "grid_n must be >= 2");
  require(static_cast<int>(p.size()) == spec.d(), "legendre_consistency_check", "p has wrong dimension");
  for (double v : p) require(std::isfinite(v), "legendre_consistency_check", "p must be finite");
  const double lo = spec.kappa(), hi = spec.M_bound();
  const double step = (hi - lo) / (grid_n - 1);
  auto level = [&](int i) { return i == grid_n - 1 ? hi : lo + i * step; };
  const int d = spec.d();

  double best = -std::numeric_limits<double>::infinity();
  if (spec.separable()) {
    best = 0.0;
    for (int y = 0; y < d; ++y) {
      double coord = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < grid_n; ++i) {
        const double a = level(i);
        coord = std::max(coord, -a * p[static_cast<std::size_t>(y)] - spec.lagrangian_coordinate(x, y, a));
      }
      best += coord;
    }
  } else {
    const double total = std::pow(static_cast<double>(grid_n), d);
    require(total <= 1e7, "legendre_consistency_check", "lattice too large for a non-separable model");
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    Vec a(static_cast<std::size_t>(d), lo);
    for (;;) {
      double dot = 0.0;
      for (int y = 0; y < d; ++y) dot += a[static_cast<std::size_t>(y)] * p[static_cast<std::size_t>(y)];
      best = std::max(best, -dot - spec.lagrangian(x, a));
      int pos = 0;
      while (pos < d && ++idx[static_cast<std::size_t>(pos)] == grid_n) {
        idx[static_cast<std::size_t>(pos)] = 0;
        a[static_cast<std::size_t>(pos)] = lo;
        ++pos;
      }
      if (pos == d) break;
      a[static_cast<std::size_t>(pos)] = level(idx[static_cast<std::size_t>(pos)]);
    }
  }
  const double H = spec.hamiltonian(x, p);
  return {std::abs(H - best), best, H};
}

Vec alpha_star_eval(const GameSpec& spec, int x, std::span<const double> p) {
  require(static_cast<int>(p.size()) == spec.d(), "alpha_star_eval", "p has wrong dimension");
  for (double v : p) require(std::isfinite(v), "alpha_star_eval", "p must be finite");
  Vec out(p.size());
  spec.alpha_star(x, p, out);
  return out;
}

double monotonicity_pair(const GameSpec& spec, std::span<const double> m, std::span<const double> m_prime,
                         bool terminal) {
  double s = 0.0;
  for (int x = 0; x < spec.d(); ++x) {
    const double c = terminal ? spec.terminal_cost(x, m) - spec.terminal_cost(x, m_prime)
                              : spec.running_cost(x, m) - spec.running_cost(x, m_prime);
    s += c * (m[static_cast<std::size_t>(x)] - m_prime[static_cast<std::size_t>(x)]);
  }
  return s;
}

double monotonicity_probe(const GameSpec& spec, int trials, std::uint64_t rng_seed) {
  require(trials >= 1, "monotonicity_probe", "need at least one trial");
  CounterRng rng{rng_seed, 0x6d6f6eULL};
  double worst = std::numeric_limits<double>::infinity();
  for (int t = 0; t < trials; ++t) {
    const Vec m = rng.simplex(spec.d());
    const Vec mp = rng.simplex(spec.d());
    worst = std::min(worst, monotonicity_pair(spec, m, mp, false));
    worst = std::min(worst, monotonicity_pair(spec, m, mp, true));
  }
  return worst;
}

}  // namespace fsmfg
