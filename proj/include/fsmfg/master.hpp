#pragma once

#include <memory>
#include <span>
#include <vector>

#include "fsmfg/core.hpp"
#include "fsmfg/mfg.hpp"
#include "fsmfg/model.hpp"

namespace fsmfg {

/// Lattice points of the simplex with spacing 1/n, ranked lexicographically
/// by their integer compositions k (sum k = n).
class SimplexGrid {
public:
  SimplexGrid(int d, int n);

  int d() const { return d_; }
  int resolution() const { return n_; }
  double h() const { return 1.0 / n_; }
  int size() const { return static_cast<int>(count_); }

  std::span<const int> composition(int node) const {
    return {comps_.data() + static_cast<std::size_t>(node * d_), static_cast<std::size_t>(d_)};
  }
  Vec point(int node) const;
  /// All coordinates >= h.
  bool interior(int node) const;
  int rank(std::span<const int> k) const;
  /// Rank of the node k - e_y + e_z, or -1 when it leaves the simplex.
  int neighbour(int node, int y, int z) const;

  /// Freudenthal simplex containing m: up to d (node, weight) pairs with
  /// positive weights summing to 1.
  struct Stencil {
    int nodes[16];
    double weights[16];
    int size = 0;
  };
  Stencil locate(std::span<const double> m) const;

  static std::size_t node_count(int d, int n);

private:
  int d_;
  int n_;
  std::size_t count_;
  std::vector<int> comps_;
  std::vector<std::vector<std::size_t>> binom_;  // binom_[s][p] = compositions of s into p parts
};

/// Value and measure derivative of U at one (t, m).
struct MasterPoint {
  Vec U;     // U(t, x, m)
  Matrix D;  // D(x, z) = [D^m U(t, x, m, 1)]_z, column 0 identically zero
};

/// Anything that can evaluate U and D^m U at arbitrary (t, m).
class MasterEvaluator {
public:
  virtual ~MasterEvaluator() = default;
  virtual int d() const = 0;
  virtual MasterPoint evaluate(double t, std::span<const double> m) const = 0;
};

/// [D^m U(m, y)]_z recovered from the stored y = 1 column.
inline double derivative_entry(const Matrix& D, int x, int y, int z) { return D(x, z) - D(x, y); }

/// U and D^m U tabulated on a simplex grid times a time grid.
struct MasterField : MasterEvaluator {
  SimplexGrid grid;
  TimeGrid times;
  Vec U;     // [(k*d + x)*nodes + node]
  Vec D1;    // [((k*d + x)*nodes + node)*d + z] = [D^m U(t_k, x, m, 1)]_z
  bool uniqueness_guaranteed = true;

  MasterField(SimplexGrid g, TimeGrid t);

  int d() const override { return grid.d(); }
  std::size_t index(int k, int x, int node) const {
    return (static_cast<std::size_t>(k) * static_cast<std::size_t>(grid.d()) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(grid.size()) +
           static_cast<std::size_t>(node);
  }
  double value(int k, int x, int node) const { return U[index(k, x, node)]; }
  /// [D^m U(t_k, x, m_node, y)]_z.
  double derivative(int k, int x, int node, int y, int z) const {
    const std::size_t base = index(k, x, node) * static_cast<std::size_t>(grid.d());
    return D1[base + static_cast<std::size_t>(z)] - D1[base + static_cast<std::size_t>(y)];
  }
  /// Values of U(t_k, ., m_node) into out.
  void values_at(int k, int node, std::span<double> out) const;

  /// Linear in time, Freudenthal in the measure.
  MasterPoint evaluate(double t, std::span<const double> m) const override;
};

struct MasterOptions {
  double tol = 1e-12;
  int max_iter = 50;
};

/// Method of characteristics: one MFG solve per (t0 node, simplex node) on
/// the tail of `times`, warm-started from the neighbouring t0.
MasterField build_master_field(std::shared_ptr<const GameSpec> spec, const SimplexGrid& grid,
                               const TimeGrid& times, const MasterOptions& opt = {});

/// Sup of -dU/dt + H(x, D^x U) - sum_y m_y D^m U(y).a*(y, D^y U) - F(x, m) over
/// interior time nodes, states and interior simplex nodes.
double master_residual(const GameSpec& spec, const MasterField& field);

/// Largest deviation from the reconstruction identity and from
/// direction-independence of mu . D^m U(m, y), over all stored nodes.
struct IdentityReport {
  double identity = 0.0;
  double direction = 0.0;
};
IdentityReport derivative_identity_check(const MasterField& field);

/// Sup over interior nodes, times and edge directions of the gap between the
/// stored derivative and the central difference of U across adjacent nodes.
double finite_difference_gap(const MasterField& field);

struct RegularityReport {
  double lip_U = 0.0;
  double lip_DmU = 0.0;
};
/// Empirical Lipschitz constants of D^x U and D^m U over adjacent nodes.
RegularityReport regularity_probe(const MasterField& field);

/// (v, mu) solving the linearized system around a base MFG solution.
struct LinearizedSolution {
  TimeGrid grid;
  int d = 0;
  Vec v;   // [k*d + x]
  Vec mu;  // [k*d + x]
  int iterations = 0;

  LinearizedSolution(TimeGrid g, int dim);
  std::span<const double> v_at(int k) const { return {v.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
  std::span<const double> mu_at(int k) const { return {mu.data() + static_cast<std::size_t>(k * d), static_cast<std::size_t>(d)}; }
};

struct LinearizedOptions {
  double damping = 0.5;
  double tol = 1e-12;
  int max_iter = 5000;
};

/// Picard iteration on mu for the backward/forward linearized pair. The
/// solution is linear in mu0; v(t0) approximates D^m U(t0, ., m0, 1) . mu0.
LinearizedSolution solve_linearized(const GameSpec& spec, const MfgSolution& base, const TangentVector& mu0,
                                    const LinearizedOptions& opt = {});

/// Evaluates U and D^m U by a fresh characteristic solve at every query.
class CharacteristicEvaluator : public MasterEvaluator {
public:
  CharacteristicEvaluator(std::shared_ptr<const GameSpec> spec, double dt, double tol = 1e-12);

  int d() const override { return spec_->d(); }
  MasterPoint evaluate(double t, std::span<const double> m) const override;

private:
  std::shared_ptr<const GameSpec> spec_;
  double dt_;
  CharacteristicSolver solver_;
};

}  // namespace fsmfg
