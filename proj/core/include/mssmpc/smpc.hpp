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

#include "mssmpc/nlp.hpp"
#include "mssmpc/reference.hpp"
#include "mssmpc/setpoint.hpp"
#include "mssmpc/terminal.hpp"

namespace mssmpc {

/// One receding-horizon decision with its diagnostics.
struct MPCStep {
  Vec u_applied;
  std::vector<Vec> z_pred;        // N+1 predicted meta-states
  std::vector<DiagGMM> pdf_pred;  // N predicted output distributions
  double j_star = 0.0;            // optimal stage-cost sum (+ terminal cost in
                                  // set-point mode); offset cost excluded
  SolveStatus status = SolveStatus::kMaxIter;
  bool fallback = false;  // infeasibility fallback applied
  double solve_seconds = 0.0;
  double worst_margin = 0.0;  // max predicted chance margin along the horizon
  Vec decision;               // raw decision vector (warm-start seed)

  // Tracking mode only.
  std::optional<Vec> r_star;           // stacked (z_r, u_r)
  std::optional<double> offset_value;  // V_r at r_star
};

/// Set-point stabilising SMPC: single-shooting OCP with quadratic stage cost
/// around (z_bar, u_bar), stagewise chance constraints, input polytope, and
/// the LQR terminal set {V_f <= gamma}.
class SetpointMPC {
 public:
  SetpointMPC(MSSModel model, Setpoint sp, TerminalDesign terminal, int horizon,
              Mat q, Mat r, ChanceSpec spec, InputPolytope u_set,
              SolveConfig nlp = {});

  /// Solves the OCP from a known meta-state, warm-started by the shifted
  /// previous solution. Infeasibility falls back to the clamped terminal
  /// controller action, flagged in the step record.
  MPCStep ocp(const Vec& z0);

  /// Encoder + ocp: histories are (lag x n_u) and (lag x n_y), most recent
  /// last, covering samples k-lag .. k-1.
  MPCStep control(const Mat& u_hist, const Mat& y_hist);

  void reset_warm() { warm_.reset(); }

  const MSSModel& model() const { return model_; }
  const Setpoint& setpoint() const { return setpoint_; }
  const TerminalDesign& terminal() const { return terminal_; }
  const InputPolytope& input_set() const { return u_set_; }
  const ChanceSpec& chance_spec() const { return spec_; }
  int horizon() const { return horizon_; }
  const Mat& q() const { return q_; }
  const Mat& r() const { return r_; }

  /// Stable hash of everything that determines the control law.
  std::uint64_t fingerprint() const;

 private:
  NLPProblem make_problem(const Vec& z0) const;
  struct DecisionEval {
    double cost = 0.0;
    bool feasible = false;
  };
  DecisionEval evaluate_decision(const Vec& z0, const Vec& u_flat) const;

  MSSModel model_;
  Setpoint setpoint_;
  TerminalDesign terminal_;
  int horizon_;
  Mat q_, r_;
  ChanceSpec spec_;
  InputPolytope u_set_;
  SolveConfig nlp_;
  std::optional<Vec> warm_;
};

/// Tracking SMPC with an artificial reference (z_r, u_r): zone-tracking
/// stage cost plus an offset cost pulling the artificial reference towards
/// the true one, an explicit stage-cost cap, and no terminal ingredients.
class TrackingMPC {
 public:
  enum class OffsetMode { kKl, kMean };

  TrackingMPC(MSSModel model, int horizon, Mat q, Mat r, double lambda,
              double j_cap, ChanceSpec spec, InputPolytope u_set,
              SolveConfig nlp = {});

  /// Swaps the reference pdf (KL mode). Samples are frozen once per
  /// reference, with the seed derived from the reference content hash.
  void set_reference(const ReferencePdf& ref, int kl_samples = 100);
  /// Swaps to a mean reference (moment mode) with variance weight beta.
  void set_reference_mean(const Vec& y_ref, double beta = 0.0);

  MPCStep ocp(const Vec& z0);
  MPCStep control(const Mat& u_hist, const Mat& y_hist);

  void reset_warm();

  const MSSModel& model() const { return model_; }
  OffsetMode offset_mode() const { return mode_; }
  double j_cap() const { return j_cap_; }
  int horizon() const { return horizon_; }

 private:
  NLPProblem make_problem(const Vec& z0) const;
  ad::Var offset_cost(ad::Tape& tape, const ad_ops::ModelVars& mv, ad::Var z_r,
                      ad::Var u_r, ad::Var r_stacked) const;

  MSSModel model_;
  int horizon_;
  Mat q_, r_;
  double lambda_;
  double j_cap_;
  ChanceSpec spec_;
  InputPolytope u_set_;
  SolveConfig nlp_;

  OffsetMode mode_ = OffsetMode::kMean;
  std::optional<ReferencePdf> ref_;
  Vec y_ref_;
  double beta_ = 0.0;

  std::optional<Vec> warm_;
  std::optional<Vec> u_prev_;  // hold value for the infeasibility fallback
};

}  // namespace mssmpc
