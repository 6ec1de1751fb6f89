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

#include "mssmpc/setpoint.hpp"

namespace mssmpc {

/// LQR-based terminal ingredients around a set-point: terminal cost
/// V_f(z) = (z - z_bar)' P (z - z_bar), controller
/// kappa_f(z) = u_bar + K (z - z_bar), and level set {V_f <= gamma}.
struct TerminalDesign {
  Mat a_z, b_z;  // transition Jacobians at the set-point
  Mat k_gain;    // (n_u x n_z)
  Mat p_cost;    // symmetric positive definite
  double epsilon = 1e-3;
  double gamma = 0.0;

  /// Indicative analytic level from Lipschitz-style constants; reported for
  /// reference, never binding.
  double gamma_analytic = 0.0;

  struct AuditEntry {
    std::string source;  // "input_lp", "chance_min", "chance_max", "decrease", ...
    double value = 0.0;
    bool binding = false;
    std::string note;
  };
  std::vector<AuditEntry> checks;

  double terminal_cost(const Vec& z, const Vec& z_bar) const;
  Vec terminal_controller(const Vec& z, const Vec& z_bar, const Vec& u_bar) const;

  std::string to_json() const;
  static TerminalDesign from_json(const std::string& text);
  void save(const std::string& path) const;
  static TerminalDesign load(const std::string& path);
};

/// Fixed point of the Riccati recursion with closed-loop residual
/// ||P - [(A+BK)'P(A+BK) + Q + K'RK]||_F <= 1e-9. Returns (P, K).
std::pair<Mat, Mat> solve_dare(const Mat& a, const Mat& b, const Mat& q, const Mat& r);

/// Largest level gamma_u such that kappa_f stays inside U; closed form per
/// halfspace row. Absent when no input row binds (e.g. K = 0). A set-point on
/// the boundary yields 0.
std::optional<double> gamma_from_inputs(const Mat& p, const Mat& k, const Vec& u_bar,
                                        const InputPolytope& u_set);

struct GammaChance {
  double gamma = 0.0;
  bool unbounded = false;  // no constraint boundary inside the search region
};

struct TerminalConfig {
  double epsilon = 1e-3;
  int n_samples = 10000;
  std::uint64_t seed = 0;
  double gamma_cap = 100.0;  // search region level when nothing else binds
  int max_refinements = 20;
  double shrink = 0.5;
  int chance_directions = 64;
  double decrease_tol = 1e-9;
  SolveConfig nlp;
};

/// Smallest terminal-cost level at which a chance-constraint boundary is
/// reached under kappa_f: radial bisection to the g = 0 crossing in many
/// directions plus an NLP polish from the best crossing.
GammaChance gamma_from_chance(const MSSModel& m, const Mat& p, const Mat& k,
                              const Setpoint& sp, const ChanceSpec& spec,
                              bool lower_side, double gamma_region,
                              const TerminalConfig& cfg);

struct DecreaseCheck {
  bool pass = false;
  double worst_violation = 0.0;
  Vec worst_point;
  std::string worst_kind;  // "decrease", "input", "chance"
};

/// Samples the ellipsoid {V_f <= gamma} uniformly and checks the terminal
/// decrease inequality plus the input and chance constraints under kappa_f.
DecreaseCheck verify_decrease(const MSSModel& m, const TerminalDesign& design,
                              const Setpoint& sp, const Mat& q, const Mat& r,
                              const ChanceSpec& spec, const InputPolytope& u_set,
                              double gamma, int n_samples, std::uint64_t seed,
                              double tol = 1e-9);

/// Full design pipeline: linearise, solve the DARE with Q + eps*I, bound
/// gamma by inputs and chance boundaries, then shrink until the sampled
/// decrease check passes. Throws when no positive gamma passes.
TerminalDesign design_terminal(const MSSModel& m, const Setpoint& sp, const Mat& q,
                               const Mat& r, const ChanceSpec& spec,
                               const InputPolytope& u_set, const TerminalConfig& cfg);

}  // namespace mssmpc
