#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fsmfg/core.hpp"
#include "fsmfg/master.hpp"
#include "fsmfg/mfg.hpp"
#include "fsmfg/nplayer.hpp"

namespace fsmfg {

/// One candidate jump: at `time`, move to `coord` if `level` lies below the
/// current rate toward `coord`.
struct NoiseEvent {
  double time;
  int coord;
  double level;
};

/// Per-player Poisson stream of total rate d*M with uniform marks. Regenerated
/// deterministically from (seed, path, player).
struct NoiseStream {
  std::vector<NoiseEvent> events;

  static NoiseStream generate(std::uint64_t seed, std::uint64_t path, std::uint64_t player, int d, double M,
                              double T);
};

/// Noise of all N players merged in time order (ties by player index).
struct PlayerEvent {
  double time;
  int player;
  int coord;
  double level;
};
std::vector<PlayerEvent> merged_noise(std::uint64_t seed, std::uint64_t path, int N, int d, double M, double T);

/// Initial state of a player drawn from m0 with its own counter stream.
int draw_initial_state(std::uint64_t seed, std::uint64_t path, std::uint64_t player, const SimplexPoint& m0);

/// N states with counts closest to N*m0 (largest remainders), players in state order.
std::vector<int> deterministic_initial_states(int N, const SimplexPoint& m0);

struct Jump {
  double time;
  int state;
};

/// Piecewise-constant path: initial state plus jump list.
struct Path {
  int z0 = 0;
  std::vector<Jump> jumps;

  int state_at(double t) const;
  bool operator==(const Path&) const = default;
};

inline bool operator==(const Jump& a, const Jump& b) { return a.time == b.time && a.state == b.state; }

/// Rates of a single player in state x at time t (size d, own entry ignored).
using Feedback = std::function<void(double t, int x, std::span<double> rates)>;

/// Exact thinning: at each event, jump to y if y differs from the current
/// state and the level lies below the rate toward y.
Path simulate_system(const Feedback& feedback, const NoiseStream& noise, int z0, double T, double kappa, double M);

/// The three coupled systems: N-player optimum, projected control, and the
/// i.i.d. limit.
enum SystemMask : unsigned { kSystemY = 1u, kSystemX = 2u, kSystemXtilde = 4u, kSystemAll = 7u };

struct BatchConfig {
  int N = 8;
  int paths = 1000;
  std::uint64_t seed = 1;
  unsigned systems = kSystemAll;
  bool deterministic_initial = false;
  bool keep_paths = false;
  /// Times at which m^N_Y is recorded (sorted, within [0, T]).
  std::vector<double> snapshot_times;
};

/// Per-path sup statistics; player quantities are averaged over players.
struct PathStatistics {
  double sup_yx = 0.0;      // (1/N) sum_i sup_t |Y_i - X_i|
  double sup_emp_yx = 0.0;  // sup_t |m_Y - m_X|
  double sup_ytilde = 0.0;  // (1/N) sum_i sup_t |Y_i - X~_i|
  double sup_lln = 0.0;     // sup_t |m_Y - m(t)|
};

struct TrajectoryBatch {
  int N = 0;
  int paths = 0;
  std::uint64_t seed = 0;
  unsigned systems = 0;
  std::vector<PathStatistics> stats;
  std::vector<Vec> final_Y;  // m^N_Y(T) per path
  std::vector<std::vector<Vec>> snapshots_Y;  // [path][snapshot]
  /// Full paths per [path][player], filled only when keep_paths is set.
  std::vector<std::vector<Path>> Y, X, Xtilde;
};

/// Inputs of a coupled batch. Any of the pointers may be null when the
/// corresponding system is not requested.
struct CoupledInputs {
  std::shared_ptr<const GameSpec> spec;
  const NashFeedback* nash = nullptr;   // Y
  const MasterField* field = nullptr;   // X, tabulated on SimplexGrid(d, N - 1)
  const MfgSolution* limit = nullptr;   // X~ and the law of large numbers
};

TrajectoryBatch run_coupled_batch(const CoupledInputs& in, const SimplexPoint& m0, const BatchConfig& cfg);

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
};

struct ChaosEstimates {
  Estimate e_yx;
  Estimate e_emp_yx;
  Estimate e_chaos;
  Estimate e_lln;
};

ChaosEstimates chaos_estimates(const TrajectoryBatch& batch);

Estimate mean_and_se(std::span<const double> samples);

/// 1-Wasserstein distance on {1..d} with metric |x - y|.
double wasserstein_gap(const SimplexPoint& x, const SimplexPoint& y);
double euclidean_gap(const SimplexPoint& x, const SimplexPoint& y);

}  // namespace fsmfg
