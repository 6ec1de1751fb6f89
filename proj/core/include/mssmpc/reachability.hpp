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

#include <string>
#include <vector>

#include "mssmpc/smpc.hpp"

namespace mssmpc {

/// Axis-aligned box around a sample point of the meta-state space.
struct HyperRect {
  enum class Status { kPass, kFail, kRefined };

  Vec center;
  Vec half_widths;  // strictly positive
  Status status = Status::kRefined;

  // Verification audit.
  double f_center = 0.0;
  double lipschitz_a = 0.0;
  double remainder_b = 0.0;
  double eta = 0.0;

  bool contains(const Vec& z, double tol = 0.0) const;
};

/// Certified (empirically, via sampled Lipschitz/remainder estimates) inner
/// approximation of the N-step backward reachable set of one controller's
/// terminal region.
struct ReachCertificate {
  Vec roi_lo, roi_hi;
  std::vector<HyperRect> passed;
  std::vector<HyperRect> failed;
  Vec delta_min;
  double rho_c = 0.99;
  double f_inf = 10.0;
  std::uint64_t controller_fingerprint = 0;
  bool complete = true;  // false when the rectangle budget was exhausted
  int evaluations = 0;   // property-function evaluations spent

  bool covers(const Vec& z) const;

  std::string to_json() const;
  static ReachCertificate from_json(const std::string& text);
  void save(const std::string& path) const;
  static ReachCertificate load(const std::string& path);
  /// One row per rectangle: center, half widths, status, F, eta.
  void save_boxes_csv(const std::string& path) const;
};

struct ReachConfig {
  double rho_c = 0.99;
  double f_inf = 0.0;  // <= 0: auto-scaled to 10x a typical optimal cost
  double delta_min_frac = 1.0 / 64.0;
  int max_rects = 4096;
  double lipschitz_safety = 1.5;
};

/// Property function: J*(f(z, kappa_MPC(z))) - rho_c J*(z) when the OCP is
/// feasible at z, F_inf otherwise. Evaluations are pure: the controller's
/// warm store is reset per call and the successor solve is warm-started from
/// the shifted first solution only.
double property_f(SetpointMPC& ctrl, const Vec& z, double rho_c, double f_inf);

/// Verifies F(z_s) <= -eta(z_s, delta) over one rectangle; eta combines a
/// finite-difference Lipschitz estimate, a curvature remainder, and a jump
/// allowance triggered by infeasible corners.
bool verify_rect(SetpointMPC& ctrl, HyperRect& rect, double rho_c, double f_inf,
                 double lipschitz_safety);

/// Covers the ROI with rectangles, bisecting failures along their longest
/// axis until they pass or fall below delta_min.
ReachCertificate certify_roi(const SetpointMPC& ctrl, const Vec& roi_lo,
                             const Vec& roi_hi, const ReachConfig& cfg);

/// First certificate whose passed union contains z0 (lowest index wins).
/// Throws when z0 is uncovered.
int select_setpoint(const std::vector<ReachCertificate>& certs, const Vec& z0);

/// Dense-grid soundness audit of the passed rectangles: per_axis^n direct
/// feasibility + decrease evaluations per rectangle; returns the number of
/// violations found (0 for a sound certificate).
struct GridCheckResult {
  int violations = 0;
  int evaluated = 0;
};
GridCheckResult dense_grid_check(const SetpointMPC& ctrl, const ReachCertificate& cert,
                                 int per_axis, int max_rects = -1);

}  // namespace mssmpc
