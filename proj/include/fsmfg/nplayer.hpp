#pragma once

#include <memory>
#include <span>
#include <vector>

#include "fsmfg/core.hpp"
#include "fsmfg/master.hpp"
#include "fsmfg/model.hpp"

namespace fsmfg {

/// v^{N,i}(t, x) for every player i and joint state x in {0..d-1}^N, the
/// joint state being encoded in base d with player j as digit j.
struct FullTensorValue {
  TimeGrid times;
  int N = 0;
  int d = 0;
  std::size_t states = 0;
  Vec v;  // [(k*N + i)*states + code]

  FullTensorValue(TimeGrid t, int players, int dim);

  double operator()(int k, int i, std::size_t code) const {
    return v[(static_cast<std::size_t>(k) * static_cast<std::size_t>(N) + static_cast<std::size_t>(i)) * states + code];
  }
  int digit(std::size_t code, int j) const;
  std::size_t encode(std::span<const int> x) const;
};

/// w(t, x, n): value of a player in state x facing others with occupation
/// counts n (sum n = N - 1). Counts are ranked by SimplexGrid(d, N - 1).
struct CountsValue {
  TimeGrid times;
  int N = 0;
  SimplexGrid others;
  Vec w;  // [(k*d + x)*nodes + rank]
  /// Only t = 0 and T were kept (storage guard); not usable as a feedback.
  bool thinned = false;

  CountsValue(TimeGrid t, int players, int dim);

  int d() const { return others.d(); }
  std::size_t index(int k, int x, int rank) const {
    return (static_cast<std::size_t>(k) * static_cast<std::size_t>(d()) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(others.size()) +
           static_cast<std::size_t>(rank);
  }
  double value(int k, int x, int rank) const { return w[index(k, x, rank)]; }
  /// w(t, ., rank), linear in time between nodes.
  void values_at(double t, int rank, std::span<double> out) const;
};

struct NPlayerOptions {
  /// Time step as a fraction of T.
  double dt_fraction = 1e-3;
};

/// Backward RK4 on the N d^N coupled equations. Guarded at N d^N <= 1e6.
FullTensorValue solve_full_tensor(const GameSpec& spec, int N, const NPlayerOptions& opt = {});

/// The same system on (own state, counts of others), exact by exchangeability.
/// Guarded at d C(N+d-2, d-1) <= 1e6.
CountsValue solve_counts_reduced(const GameSpec& spec, int N, const NPlayerOptions& opt = {});

/// sup over time, players and joint states of |v^{N,i} - w(x_i, counts of others)|.
double representation_gap(const FullTensorValue& full, const CountsValue& counts);

/// sup of |v^{N,i}(x) - v^{N,i}(x')| with x' swapping two coordinates other than i,
/// and of |v^{N,i}(x) - v^{N,j}(x'')| with x'' swapping coordinates i and j.
double permutation_defect(const FullTensorValue& full);

/// Nash feedback a*(x, D^x w(t, ., n)) of a counts solution.
class NashFeedback {
public:
  NashFeedback(std::shared_ptr<const GameSpec> spec, std::shared_ptr<const CountsValue> value);

  const GameSpec& spec() const { return *spec_; }
  const CountsValue& value() const { return *value_; }
  /// Rates of a player in state x whose others have counts of rank `rank`.
  void rates(double t, int x, int rank, std::span<double> out) const;

private:
  std::shared_ptr<const GameSpec> spec_;
  std::shared_ptr<const CountsValue> value_;
};

struct NashGapReport {
  double max_gap = 0.0;    // max over deviations of J(Nash) - J(deviation)
  double std_error = 0.0;  // standard error of the maximizing deviation's gap
  double nash_cost = 0.0;  // Monte Carlo estimate of J(Nash) for player 1
  std::vector<double> gaps;
  std::vector<double> std_errors;
};

/// Player 1 switches to random constant per-state rates while everyone else
/// keeps the Nash feedback. Both games share noise and initial states.
NashGapReport nash_gap_probe(const NashFeedback& nash, const SimplexPoint& m0, int deviations, int paths,
                             std::uint64_t seed);

/// Cost of player 1 under a fixed constant deviation (rates[x*d + y]), paired
/// with the Nash cost on the same noise; returns (J_nash - J_dev) mean and se.
struct PairedCost {
  double nash = 0.0;
  double deviated = 0.0;
  double gap = 0.0;
  double gap_se = 0.0;
};
PairedCost paired_deviation_cost(const NashFeedback& nash, const SimplexPoint& m0, std::span<const double> rates,
                                 int paths, std::uint64_t seed);

struct ProjectionResidual {
  double r_sup = 0.0;
  double tau_sup = 0.0;
};

/// Plugs u^{N,i}(t, x) = U(t, x_i, m^{N,i}) into the N-player system at the
/// given times. dU/dt uses central differences with step dt_fd.
ProjectionResidual projection_residual(const GameSpec& spec, const MasterEvaluator& U, int N,
                                       std::span<const double> times, double dt_fd = 1e-3);

struct Theorem1Gap {
  double avg_gap = 0.0;
  double l1_gap = 0.0;
};

/// avg_gap: max over total counts c of (1/N) sum_y c_y |w(t0, y, c - e_y) - U(t0, y, c/N)|.
/// l1_gap: sum_x m0_x |E[w(t0, x, n)] - U(t0, x, m0)| with n ~ Multinomial(N-1, m0).
Theorem1Gap theorem1_gap(const GameSpec& spec, const CountsValue& counts, const MasterEvaluator& U, double t0,
                         const SimplexPoint& m0);

}  // namespace fsmfg
