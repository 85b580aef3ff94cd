#include "fsmfg/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace fsmfg {

SimplexPoint::SimplexPoint(Vec weights) : w_(std::move(weights)) {
  if (w_.size() < 2) {
    throw Error("model", "SimplexPoint", "simplex point needs at least 2 states");
  }
  double sum = 0.0;
  for (double v : w_) {
    if (!std::isfinite(v) || v < -kTolerance) {
      throw Error("model", "SimplexPoint", "weights must be finite and nonnegative");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > kTolerance * static_cast<double>(w_.size()) * 10.0) {
    std::ostringstream os;
    os << "weights sum to " << sum;
    throw Error("model", "SimplexPoint", "weights must sum to 1", os.str());
  }
  for (double& v : w_) v = std::max(v, 0.0);
}

SimplexPoint SimplexPoint::uniform(int d) {
  return SimplexPoint(Vec(static_cast<std::size_t>(d), 1.0 / d));
}

SimplexPoint SimplexPoint::vertex(int d, int x) {
  Vec w(static_cast<std::size_t>(d), 0.0);
  w[static_cast<std::size_t>(x)] = 1.0;
  return SimplexPoint(std::move(w));
}

bool SimplexPoint::interior(double margin) const {
  return std::all_of(w_.begin(), w_.end(), [margin](double v) { return v > margin; });
}

TangentVector::TangentVector(Vec components) : c_(std::move(components)) {
  double sum = 0.0;
  double scale = 1.0;
  for (double v : c_) {
    if (!std::isfinite(v)) throw Error("model", "TangentVector", "components must be finite");
    sum += v;
    scale = std::max(scale, std::abs(v));
  }
  if (std::abs(sum) > kTolerance * scale * 10.0) {
    std::ostringstream os;
    os << "components sum to " << sum;
    throw Error("model", "TangentVector", "components must sum to 0", os.str());
  }
}

TangentVector TangentVector::edge(int d, int y, int z) {
  Vec c(static_cast<std::size_t>(d), 0.0);
  c[static_cast<std::size_t>(z)] += 1.0;
  c[static_cast<std::size_t>(y)] -= 1.0;
  return TangentVector(std::move(c));
}

TimeGrid::TimeGrid(double t0, double T, int n_steps) : t0_(t0), T_(T), n_(n_steps) {
  if (!(T >= t0) || !std::isfinite(t0) || !std::isfinite(T)) {
    throw Error("mfg", "TimeGrid", "time grid needs t0 <= T");
  }
  if (n_steps < 1 && T > t0) throw Error("mfg", "TimeGrid", "time grid needs n_steps >= 1");
  if (n_steps < 0) throw Error("mfg", "TimeGrid", "negative step count");
  dt_ = n_ > 0 ? (T_ - t0_) / n_ : 0.0;
}

TimeGrid TimeGrid::with_step(double t0, double T, double dt) {
  if (!(dt > 0.0)) throw Error("mfg", "TimeGrid", "time step must be positive");
  const int n = static_cast<int>(std::llround((T - t0) / dt));
  return TimeGrid(t0, T, n);
}

int TimeGrid::locate(double t) const {
  if (n_ == 0) return 0;
  const int k = static_cast<int>(std::floor((t - t0_) / dt_));
  return std::clamp(k, 0, n_ - 1);
}

double sup_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s = std::max(s, std::abs(v));
  return s;
}

double sup_diff(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a[i] - b[i]));
  return s;
}

double euclidean(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

double euclidean_diff(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

int thread_count() {
  if (const char* env = std::getenv("MFG_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace fsmfg
