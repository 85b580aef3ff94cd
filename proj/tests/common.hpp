#pragma once

#include <memory>

#include "fsmfg/model.hpp"

namespace fsmfg::testing {

/// The desk-scale reference game: d=2, own-mass costs, kappa=0.5, M=1.5, b=1, T=1.
inline std::shared_ptr<QuadraticModel> own_mass(int d = 2, double T = 1.0) {
  return std::make_shared<QuadraticModel>(d, T, 0.5, 1.5, 1.0, LinearCost::own_mass(d), LinearCost::own_mass(d));
}

inline std::shared_ptr<QuadraticModel> with_costs(LinearCost F, LinearCost G, int d = 2, double T = 1.0) {
  return std::make_shared<QuadraticModel>(d, T, 0.5, 1.5, 1.0, std::move(F), std::move(G));
}

/// Costs that do not see the measure: every feedback decouples from m.
inline std::shared_ptr<QuadraticModel> measure_free(int d = 2) {
  return with_costs(LinearCost::state_index(d), LinearCost::state_index(d), d);
}

}  // namespace fsmfg::testing
