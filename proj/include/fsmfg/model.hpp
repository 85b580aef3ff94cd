#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>

#include "json.hpp"

#include "fsmfg/core.hpp"

namespace fsmfg {

/// Game data for a finite-state mean field game with control box [kappa, M]^d.
///
/// Subclasses supply the Lagrangian, the costs F and G, and the Hamiltonian
/// together with its maximizer. The library never optimizes inside H; a
/// user-supplied pair is validated with legendre_consistency_check instead.
/// Instances are immutable and may be shared across threads.
class GameSpec {
public:
  GameSpec(int d, double T, double kappa, double M);
  virtual ~GameSpec() = default;

  int d() const { return d_; }
  double T() const { return T_; }
  double kappa() const { return kappa_; }
  double M_bound() const { return M_; }

  virtual double lagrangian(int x, std::span<const double> alpha) const = 0;
  virtual double running_cost(int x, std::span<const double> m) const = 0;
  virtual double terminal_cost(int x, std::span<const double> m) const = 0;
  virtual double hamiltonian(int x, std::span<const double> p) const = 0;
  /// Writes the maximizer of -a.p - L(x,a) over the box into out (size d).
  virtual void alpha_star(int x, std::span<const double> p, std::span<double> out) const = 0;

  /// Directional derivative D^m F(x, m, 1) . mu. Defaults to a central
  /// difference along mu.
  virtual double running_cost_derivative(int x, std::span<const double> m,
                                         std::span<const double> mu) const;
  virtual double terminal_cost_derivative(int x, std::span<const double> m,
                                          std::span<const double> mu) const;

  /// Row-major d x d Jacobian, out[y*d + z] = d alpha*_y / d p_z.
  /// Defaults to central differences.
  virtual void alpha_star_jacobian(int x, std::span<const double> p, std::span<double> out) const;

  /// Separable Lagrangians L(x,a) = sum_y l(x, y, a_y) enable per-coordinate checks.
  virtual bool separable() const { return false; }
  virtual double lagrangian_coordinate(int x, int y, double a) const;

  /// True when the costs are known to satisfy the Lasry-Lions monotonicity.
  virtual bool monotone() const { return false; }

  virtual double sup_lagrangian() const;
  virtual double sup_running_cost() const;
  virtual double sup_terminal_cost() const;

  /// Value-function bound T(|F| + |L|) + |G| (uniform in the player count).
  double value_bound() const;
  /// Bound on |p| used by the (H1)-style checks; defaults to
  /// 2 max(|G|, T(|F| + |L|)).
  double gradient_bound() const;
  void set_gradient_bound(double K) { K_ = K; }

  virtual std::string describe() const { return "game"; }

private:
  int d_;
  double T_;
  double kappa_;
  double M_;
  std::optional<double> K_;
};

/// Cost of the form C(x, m) = (A m)_x + e_x. Covers the zero cost, the
/// own-mass cost m_x and m-independent state costs.
struct LinearCost {
  Matrix A;
  Vec offset;

  static LinearCost zero(int d);
  static LinearCost own_mass(int d, double scale = 1.0);
  static LinearCost state_index(int d);
  static LinearCost from_json(const nlohmann::json& j, int d);

  double operator()(int x, std::span<const double> m) const;
  double derivative(int x, std::span<const double> mu) const;
  double sup_norm_on_simplex() const;
  /// Lasry-Lions monotone iff the symmetric part of A is PSD on the tangent space.
  bool monotone() const;
  bool depends_on_measure() const { return A.cwiseAbs().maxCoeff() > 0.0; }
  nlohmann::json to_json() const;
};

/// L(a) = b |a - a_center|^2 with a_center = (kappa+M)/2. The Hamiltonian is
/// p^2/(4b) - a p per coordinate inside |p| <= b(M-kappa) and linear outside.
class QuadraticModel final : public GameSpec {
public:
  QuadraticModel(int d, double T, double kappa, double M, double b, LinearCost F, LinearCost G);

  double b() const { return b_; }
  double center() const { return center_; }
  const LinearCost& F() const { return F_; }
  const LinearCost& G() const { return G_; }

  double lagrangian(int x, std::span<const double> alpha) const override;
  double running_cost(int x, std::span<const double> m) const override { return F_(x, m); }
  double terminal_cost(int x, std::span<const double> m) const override { return G_(x, m); }
  double hamiltonian(int x, std::span<const double> p) const override;
  void alpha_star(int x, std::span<const double> p, std::span<double> out) const override;

  double running_cost_derivative(int x, std::span<const double> m,
                                 std::span<const double> mu) const override;
  double terminal_cost_derivative(int x, std::span<const double> m,
                                  std::span<const double> mu) const override;
  void alpha_star_jacobian(int x, std::span<const double> p, std::span<double> out) const override;

  bool separable() const override { return true; }
  double lagrangian_coordinate(int x, int y, double a) const override;
  bool monotone() const override { return F_.monotone() && G_.monotone(); }

  double sup_lagrangian() const override;
  double sup_running_cost() const override { return F_.sup_norm_on_simplex(); }
  double sup_terminal_cost() const override { return G_.sup_norm_on_simplex(); }

  std::string describe() const override;

  /// Scalar pieces, exposed for tests.
  double h(double p) const;
  double alpha(double p) const;

private:
  double b_;
  double center_;
  double band_;
  LinearCost F_;
  LinearCost G_;
};

/// Parses {"d","T","kappa","M","model":"quadratic","b","F","G"[,"K"]};
/// unknown fields are rejected with an Error naming the field.
std::shared_ptr<const GameSpec> load_model(const nlohmann::json& config);
std::shared_ptr<const GameSpec> load_model_file(const std::string& path);

struct LegendreCheck {
  double deviation;
  double gridded_max;
  double hamiltonian;
};

/// Compares H(x,p) to a brute-force maximum of -a.p - L(x,a) over a grid_n^d
/// lattice of the box (per coordinate for separable models).
LegendreCheck legendre_consistency_check(const GameSpec& spec, int x, std::span<const double> p,
                                         int grid_n);

Vec alpha_star_eval(const GameSpec& spec, int x, std::span<const double> p);

/// sum_x (C(x,m) - C(x,m'))(m_x - m'_x) for C = F (terminal=false) or G.
double monotonicity_pair(const GameSpec& spec, std::span<const double> m,
                         std::span<const double> m_prime, bool terminal);

/// Minimum of monotonicity_pair over random uniform pairs, for both F and G.
double monotonicity_probe(const GameSpec& spec, int trials, std::uint64_t rng_seed);

}  // namespace fsmfg
