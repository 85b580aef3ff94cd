#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fsmfg {

using Vec = std::vector<double>;
using Matrix = Eigen::MatrixXd;

/// Error raised by every module. Carries the module and operation that failed
/// plus a free-form context string, mirroring the CLI's JSON error schema.
class Error : public std::runtime_error {
public:
  Error(std::string module, std::string op, const std::string& message, std::string context = {})
      : std::runtime_error(message), module_(std::move(module)), op_(std::move(op)),
        context_(std::move(context)) {}

  const std::string& module() const { return module_; }
  const std::string& op() const { return op_; }
  const std::string& context() const { return context_; }

private:
  std::string module_;
  std::string op_;
  std::string context_;
};

/// A probability vector over the finite state space.
class SimplexPoint {
public:
  static constexpr double kTolerance = 1e-12;

  SimplexPoint() = default;
  explicit SimplexPoint(Vec weights);

  static SimplexPoint uniform(int d);
  static SimplexPoint vertex(int d, int x);

  int dim() const { return static_cast<int>(w_.size()); }
  double operator[](std::size_t i) const { return w_[i]; }
  std::span<const double> span() const { return w_; }
  const Vec& weights() const { return w_; }
  bool interior(double margin = 0.0) const;

private:
  Vec w_;
};

/// A direction in the tangent space of the simplex (components sum to zero).
class TangentVector {
public:
  static constexpr double kTolerance = 1e-12;

  TangentVector() = default;
  explicit TangentVector(Vec components);

  /// delta_z - delta_y in dimension d.
  static TangentVector edge(int d, int y, int z);
  static TangentVector zero(int d) { return TangentVector(Vec(static_cast<std::size_t>(d), 0.0)); }

  int dim() const { return static_cast<int>(c_.size()); }
  double operator[](std::size_t i) const { return c_[i]; }
  std::span<const double> span() const { return c_; }
  const Vec& components() const { return c_; }

private:
  Vec c_;
};

/// Uniform grid t0 < t1 < ... < tn = T.
class TimeGrid {
public:
  TimeGrid(double t0, double T, int n_steps);

  /// Grid with the given spacing, rounded to the nearest whole step count.
  static TimeGrid with_step(double t0, double T, double dt);

  double t0() const { return t0_; }
  double T() const { return T_; }
  int n_steps() const { return n_; }
  int n_nodes() const { return n_ + 1; }
  double dt() const { return dt_; }
  double node(int k) const { return k == n_ ? T_ : t0_ + k * dt_; }

  /// The tail of this grid starting at node k (same spacing).
  TimeGrid tail(int k) const { return TimeGrid(node(k), T_, n_ - k); }

  /// Index of the last node <= t, clamped to [0, n-1].
  int locate(double t) const;

private:
  double t0_;
  double T_;
  int n_;
  double dt_;
};

double sup_norm(std::span<const double> a);
double sup_diff(std::span<const double> a, std::span<const double> b);
double euclidean(std::span<const double> a);
double euclidean_diff(std::span<const double> a, std::span<const double> b);

/// Worker count: MFG_THREADS if set, else hardware concurrency.
int thread_count();

/// Runs body(i) for i in [0, n) on up to thread_count() threads. Exceptions
/// from workers are rethrown on the calling thread (first one wins).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace fsmfg
