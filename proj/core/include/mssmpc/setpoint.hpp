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

#include <optional>
#include <string>
#include <vector>

#include "mssmpc/mss_model.hpp"
#include "mssmpc/nlp.hpp"
#include "mssmpc/reference.hpp"

namespace mssmpc {

/// Input constraint polytope U = {u : H u - h <= 0}.
struct InputPolytope {
  Mat H;
  Vec h;

  static InputPolytope box(const Vec& lo, const Vec& hi);

  int rows() const { return static_cast<int>(h.size()); }
  int dim() const { return static_cast<int>(H.cols()); }
  bool contains(const Vec& u, double tol = 1e-9) const;
  Vec clip(const Vec& u) const;  // exact for boxes, iterative otherwise
  double max_residual(const Vec& u) const;

  /// Component-wise bounds implied by the polytope (used for solver boxes
  /// and multi-start sampling); exact when the polytope is axis-aligned.
  std::pair<Vec, Vec> bounding_box() const;
  bool is_box() const;

  std::string to_json() const;
  static InputPolytope from_json(const std::string& text);
};

/// Equilibrium set-point with its output-matching cost and the local
/// controllability verdict.
struct Setpoint {
  Vec z_bar;
  Vec u_bar;
  double residual = 0.0;   // ||f(z,u) - z||
  double objective = 0.0;  // achieved KL or moment cost
  bool controllable = false;
  int rank = 0;

  std::string to_json() const;
  static Setpoint from_json(const std::string& text);
  void save(const std::string& path) const;
  static Setpoint load(const std::string& path);
};

/// Ball carved out of the search region after a failed candidate:
/// ||(z,u) - center||^2 >= radius^2 in the next solve.
struct ExclusionBall {
  Vec center;  // stacked (z, u)
  double radius = 0.0;
};

ExclusionBall exclude_and_retry(const Setpoint& prev, double radius);

struct SetpointSearchConfig {
  int starts = 16;
  double z_spread = 1.0;  // std of the z multi-start draw
  std::uint64_t seed = 0;
  double residual_tol = 1e-6;
  double margin_tol = 1e-8;
  SolveConfig nlp{.max_outer = 15, .max_inner = 120};
};

/// Search outcome; when no feasible start exists, `setpoint` is empty and
/// the report carries the best margin vector seen.
struct SetpointResult {
  std::optional<Setpoint> setpoint;
  double best_violation = 0.0;
  Vec best_margins;  // constraint values at the least-infeasible candidate
  int feasible_starts = 0;
};

/// Minimises the Monte-Carlo KL between the frozen reference sample set and
/// the model output pdf over equilibria. The reference must be frozen.
SetpointResult find_setpoint_pdf(const MSSModel& m, const ReferencePdf& ref,
                                 const ChanceSpec& spec, const InputPolytope& u_set,
                                 const SetpointSearchConfig& cfg,
                                 const std::vector<ExclusionBall>& exclusions = {});

/// Minimises ||y_ref - E{y}||^2 + beta ||Var{y}||_F^2 over equilibria.
SetpointResult find_setpoint_mean(const MSSModel& m, const Vec& y_ref, double beta,
                                  const ChanceSpec& spec, const InputPolytope& u_set,
                                  const SetpointSearchConfig& cfg,
                                  const std::vector<ExclusionBall>& exclusions = {});

/// Rank of [B, AB, ..., A^{n_z-1}B] by singular values > tol * sigma_max;
/// the flag is rank == n_z.
std::pair<bool, int> check_controllability(const MSSModel& m, const Setpoint& s,
                                           double tol = 1e-8);

/// Same rank test on explicit matrices (exposed for tests and terminal design).
std::pair<bool, int> controllability_rank(const Mat& a, const Mat& b, double tol = 1e-8);

}  // namespace mssmpc
