// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mssmpc/ad.hpp"

namespace mssmpc {

using ad::Mat;
using ad::Vec;

/// Objective and constraint nodes evaluated on one shared tape, so common
/// subexpressions (a rollout, a mixture head) are recorded once.
struct BuiltProblem {
  ad::Var objective;
  std::vector<ad::Var> eq;    // scalar nodes, target 0
  std::vector<ad::Var> ineq;  // scalar nodes, target <= 0
};

/// Smooth constrained problem over a dim-dimensional decision vector.
/// x enters the builder as an (dim x 1) variable node.
struct NLPProblem {
  int dim = 0;
  std::function<BuiltProblem(ad::Tape&, ad::Var)> build;
  std::optional<Vec> lower;
  std::optional<Vec> upper;

  /// Assembles a problem from separate differentiable callables.
  static NLPProblem from_parts(
      int dim, std::function<ad::Var(ad::Tape&, ad::Var)> objective,
      std::vector<std::function<ad::Var(ad::Tape&, ad::Var)>> eq_cons = {},
      std::vector<std::function<ad::Var(ad::Tape&, ad::Var)>> ineq_cons = {});
};

enum class SolveStatus { kOptimal, kMaxIter, kInfeasibleEstimate };

const char* to_string(SolveStatus s);

struct NLPSolution {
  Vec x;
  double objective = 0.0;
  double max_eq_residual = 0.0;    // re-evaluated at x, not from the inner loop
  double max_ineq_violation = 0.0;
  double kkt_norm = 0.0;           // projected Lagrangian gradient, inf-norm
  SolveStatus status = SolveStatus::kMaxIter;
  int iterations = 0;
  int outer_iterations = 0;
  Vec eq_multipliers;
  Vec ineq_multipliers;

  struct OuterRecord {
    double augmented_objective;
    double objective;
    double violation;
    double rho;
  };
  std::vector<OuterRecord> outer_trace;
};

struct SolveConfig {
  double tol = 1e-7;       // projected KKT norm target
  double feas_tol = 1e-8;  // constraint violation target
  int max_outer = 30;
  int max_inner = 250;
  double rho0 = 10.0;
  double rho_growth = 10.0;
  double rho_max = 1e10;
  int lbfgs_memory = 10;
  std::string trace_path;  // per-iteration CSV dump when non-empty
};

/// Augmented-Lagrangian outer loop with an L-BFGS inner minimiser,
/// backtracking line search, and box handling by projection.
NLPSolution solve(const NLPProblem& p, const Vec& x0, const SolveConfig& cfg = {});

/// Receding-horizon warm start: shifts the first `horizon` stages of an OCP
/// decision vector (stage width n_u) one step forward. The last stage is
/// filled with `terminal_fill` when provided, otherwise repeats the previous
/// final stage. Trailing coordinates beyond the input block (e.g. an
/// artificial reference) are copied unchanged.
Vec warm_start_shift(const Vec& prev, int n_u, int horizon,
                     const std::optional<Vec>& terminal_fill = std::nullopt);

}  // namespace mssmpc
