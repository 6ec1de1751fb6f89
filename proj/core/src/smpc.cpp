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

#include "mssmpc/smpc.hpp"

#include <chrono>
#include <cmath>

namespace mssmpc {

namespace {

std::uint64_t fnv1a_str(std::uint64_t h, const std::string& s) {
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ||m * W||^2-style quadratic form for a (1 x n) row node: sum(d (d W')).
ad::Var quad_form(ad::Tape& tape, ad::Var row, const Mat& w) {
  return tape.sum(tape.mul(row, tape.matmul(row, tape.constant(Mat(w.transpose())))));
}

Vec clamp_to(const InputPolytope& u_set, const Vec& u) { return u_set.clip(u); }

}  // namespace

SetpointMPC::SetpointMPC(MSSModel model, Setpoint sp, TerminalDesign terminal,
                         int horizon, Mat q, Mat r, ChanceSpec spec,
                         InputPolytope u_set, SolveConfig nlp)
    : model_(std::move(model)),
      setpoint_(std::move(sp)),
      terminal_(std::move(terminal)),
      horizon_(horizon),
      q_(std::move(q)),
      r_(std::move(r)),
      spec_(std::move(spec)),
      u_set_(std::move(u_set)),
      nlp_(std::move(nlp)) {
  if (horizon_ < 1) throw std::invalid_argument("SetpointMPC: horizon must be >= 1");
  if (q_.rows() != model_.n_z || r_.rows() != model_.n_u)
    throw std::invalid_argument("SetpointMPC: weight dimensions mismatch");
  model_.validate();
}

NLPProblem SetpointMPC::make_problem(const Vec& z0) const {
  NLPProblem p;
  p.dim = horizon_ * model_.n_u;
  if (u_set_.is_box()) {
    const auto [lo, hi] = u_set_.bounding_box();
    Vec full_lo(p.dim), full_hi(p.dim);
    for (int i = 0; i < horizon_; ++i) {
      full_lo.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u) = lo;
      full_hi.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u) = hi;
    }
    p.lower = full_lo;
    p.upper = full_hi;
  }
  p.build = [this, z0](ad::Tape& tape, ad::Var x) {
    const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, model_);
    const Mat z_bar_row = setpoint_.z_bar.transpose();
    const Mat u_bar_row = setpoint_.u_bar.transpose();
    ad::Var z = tape.constant(Mat(z0.transpose()));
    BuiltProblem bp;
    ad::Var cost{};
    for (int i = 0; i < horizon_; ++i) {
      const ad::Var u = tape.transpose(
          tape.block(x, static_cast<int>(i) * model_.n_u, 0, model_.n_u, 1));
      const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z, u);
      for (const ad::Var margin : ad_ops::gmm_chance_margins(tape, g, spec_))
        bp.ineq.push_back(margin);
      if (!u_set_.is_box()) {
        for (int row = 0; row < u_set_.rows(); ++row)
          bp.ineq.push_back(tape.add_scalar(
              tape.matmul(tape.constant(Mat(u_set_.H.row(row))), tape.transpose(u)),
              -u_set_.h(row)));
      }
      const ad::Var dz = z - tape.constant(z_bar_row);
      const ad::Var du = u - tape.constant(u_bar_row);
      const ad::Var stage = quad_form(tape, dz, q_) + quad_form(tape, du, r_);
      cost = (i == 0) ? stage : cost + stage;
      z = ad_ops::model_step(tape, mv, z, u);
    }
    const ad::Var dz_n = z - tape.constant(z_bar_row);
    const ad::Var v_f = quad_form(tape, dz_n, terminal_.p_cost);
    bp.objective = cost + v_f;
    bp.ineq.push_back(v_f - terminal_.gamma);
    return bp;
  };
  return p;
}

SetpointMPC::DecisionEval SetpointMPC::evaluate_decision(const Vec& z0,
                                                         const Vec& u_flat) const {
  DecisionEval ev;
  Mat u_seq(horizon_, model_.n_u);
  for (int i = 0; i < horizon_; ++i)
    u_seq.row(i) = u_flat.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u)
                       .transpose();
  const MSSModel::Rollout roll = model_.rollout(z0, u_seq);
  double cost = 0.0;
  bool feasible = true;
  for (int i = 0; i < horizon_; ++i) {
    const Vec u = u_seq.row(i).transpose();
    if (!u_set_.contains(u, 1e-9)) feasible = false;
    if (!spec_.empty() &&
        !chance_margins(roll.pdfs[static_cast<std::size_t>(i)], spec_).feasible(1e-9))
      feasible = false;
    const Vec dz = roll.states[static_cast<std::size_t>(i)] - setpoint_.z_bar;
    const Vec du = u - setpoint_.u_bar;
    cost += dz.dot(q_ * dz) + du.dot(r_ * du);
  }
  const Vec dz_n = roll.states.back() - setpoint_.z_bar;
  const double v_f = dz_n.dot(terminal_.p_cost * dz_n);
  cost += v_f;
  if (v_f > terminal_.gamma + 1e-9) feasible = false;
  ev.cost = cost;
  ev.feasible = feasible;
  return ev;
}

MPCStep SetpointMPC::ocp(const Vec& z0) {
  const auto t0 = std::chrono::steady_clock::now();
  if (z0.size() != model_.n_z || !z0.allFinite())
    throw std::invalid_argument("SetpointMPC::ocp: bad initial meta-state");

  const NLPProblem problem = make_problem(z0);

  // Warm start: shifted previous solution with a terminal-controller fill;
  // cold start repeats u_bar. A one-stage scalar problem scans a coarse grid
  // first since the cost in u can be multi-modal.
  Vec x0;
  if (warm_) {
    Vec z_pred_end = z0;
    {
      Mat u_seq(horizon_, model_.n_u);
      for (int i = 0; i < horizon_; ++i)
        u_seq.row(i) =
            warm_->segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u)
                .transpose();
      // State the shifted sequence ends at (stage N of the previous solve).
      for (int i = 1; i < horizon_; ++i)
        z_pred_end = model_.step(z_pred_end, u_seq.row(i).transpose());
    }
    const Vec fill = clamp_to(
        u_set_, terminal_.terminal_controller(z_pred_end, setpoint_.z_bar, setpoint_.u_bar));
    x0 = warm_start_shift(*warm_, model_.n_u, horizon_, fill);
  } else {
    x0.resize(problem.dim);
    for (int i = 0; i < horizon_; ++i)
      x0.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u) = setpoint_.u_bar;
    if (horizon_ == 1 && model_.n_u == 1 && u_set_.is_box()) {
      const auto [lo, hi] = u_set_.bounding_box();
      double best_cost = std::numeric_limits<double>::infinity();
      for (int gpt = 0; gpt <= 32; ++gpt) {
        const Vec cand = Vec::Constant(1, lo(0) + (hi(0) - lo(0)) * gpt / 32.0);
        const DecisionEval ev = evaluate_decision(z0, cand);
        const double score = ev.cost + (ev.feasible ? 0.0 : 1e6);
        if (score < best_cost) {
          best_cost = score;
          x0 = cand;
        }
      }
    }
  }

  MPCStep step;
  NLPSolution sol = solve(problem, x0, nlp_);

  // Never return worse than a feasible warm-start candidate: the shifted
  // sequence is the recursive-feasibility certificate.
  const DecisionEval cand = evaluate_decision(z0, x0);
  const DecisionEval got = evaluate_decision(z0, sol.x);
  Vec chosen = sol.x;
  bool usable = (sol.status == SolveStatus::kOptimal) && got.feasible;
  if (cand.feasible && (!usable || cand.cost < got.cost)) {
    chosen = x0;
    usable = true;
    if (!(sol.status == SolveStatus::kOptimal && got.feasible) ||
        cand.cost < got.cost)
      sol.objective = cand.cost;
    sol.status = SolveStatus::kOptimal;
  }

  step.status = sol.status;
  if (!usable) {
    // Infeasibility fallback: terminal controller action clamped into U.
    step.fallback = true;
    const Vec u_fb =
        clamp_to(u_set_, terminal_.terminal_controller(z0, setpoint_.z_bar, setpoint_.u_bar));
    chosen = Vec(problem.dim);
    for (int i = 0; i < horizon_; ++i)
      chosen.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u) = u_fb;
  }

  Mat u_seq(horizon_, model_.n_u);
  for (int i = 0; i < horizon_; ++i)
    u_seq.row(i) =
        chosen.segment(static_cast<Eigen::Index>(i) * model_.n_u, model_.n_u).transpose();
  const MSSModel::Rollout roll = model_.rollout(z0, u_seq);

  step.u_applied = u_set_.clip(u_seq.row(0).transpose());
  step.z_pred = roll.states;
  step.pdf_pred = roll.pdfs;
  step.decision = chosen;
  step.j_star = evaluate_decision(z0, chosen).cost;
  step.worst_margin = -std::numeric_limits<double>::infinity();
  for (const auto& pdf : roll.pdfs) {
    if (spec_.empty()) break;
    step.worst_margin = std::max(step.worst_margin, chance_margins(pdf, spec_).worst());
  }
  warm_ = chosen;
  step.solve_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return step;
}

MPCStep SetpointMPC::control(const Mat& u_hist, const Mat& y_hist) {
  return ocp(model_.encode(u_hist, y_hist));
}

std::uint64_t SetpointMPC::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  h = fnv1a_str(h, model_.to_json());
  h = fnv1a_str(h, setpoint_.to_json());
  h = fnv1a_str(h, terminal_.to_json());
  h = fnv1a_str(h, std::to_string(horizon_));
  h = fnv1a_str(h, spec_.to_json());
  h = fnv1a_str(h, u_set_.to_json());
  std::string weights;
  for (int i = 0; i < q_.size(); ++i) weights += std::to_string(q_.data()[i]) + ",";
  for (int i = 0; i < r_.size(); ++i) weights += std::to_string(r_.data()[i]) + ",";
  h = fnv1a_str(h, weights);
  return h;
}

TrackingMPC::TrackingMPC(MSSModel model, int horizon, Mat q, Mat r, double lambda,
                         double j_cap, ChanceSpec spec, InputPolytope u_set,
                         SolveConfig nlp)
    : model_(std::move(model)),
      horizon_(horizon),
      q_(std::move(q)),
      r_(std::move(r)),
      lambda_(lambda),
      j_cap_(j_cap),
      spec_(std::move(spec)),
      u_set_(std::move(u_set)),
      nlp_(std::move(nlp)) {
  if (horizon_ < 1) throw std::invalid_argument("TrackingMPC: horizon must be >= 1");
  if (lambda_ <= 0.0) throw std::invalid_argument("TrackingMPC: lambda must be > 0");
  if (j_cap_ <= 0.0) throw std::invalid_argument("TrackingMPC: stage-cost cap must be > 0");
  model_.validate();
}

void TrackingMPC::set_reference(const ReferencePdf& ref, int kl_samples) {
  ReferencePdf copy = ref;
  if (!copy.frozen()) copy.freeze_samples(kl_samples, copy.content_hash());
  ref_ = std::move(copy);
  mode_ = OffsetMode::kKl;
}

void TrackingMPC::set_reference_mean(const Vec& y_ref, double beta) {
  if (y_ref.size() != model_.n_y)
    throw std::invalid_argument("TrackingMPC: y_ref dimension mismatch");
  if (beta < 0.0) throw std::invalid_argument("TrackingMPC: beta must be >= 0");
  y_ref_ = y_ref;
  beta_ = beta;
  mode_ = OffsetMode::kMean;
}

void TrackingMPC::reset_warm() {
  warm_.reset();
  u_prev_.reset();
}

ad::Var TrackingMPC::offset_cost(ad::Tape& tape, const ad_ops::ModelVars& mv,
                                 ad::Var z_r, ad::Var u_r, ad::Var r_stacked) const {
  const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z_r, u_r);
  ad::Var v{};
  if (mode_ == OffsetMode::kKl) {
    if (!ref_ || !ref_->frozen())
      throw std::logic_error("TrackingMPC: KL mode without a frozen reference");
    v = ad_ops::gmm_kl_mc(tape, g, ref_->samples(), ref_->log_pdf_at_samples());
  } else {
    if (y_ref_.size() == 0) throw std::logic_error("TrackingMPC: no mean reference set");
    const ad::Var mean = ad_ops::gmm_mean(tape, g);
    v = tape.sum(tape.square(tape.constant(Mat(y_ref_.transpose())) - mean));
    if (beta_ > 0.0) v = v + beta_ * ad_ops::gmm_covariance_sqnorm(tape, g);
  }
  return v + lambda_ * tape.sum(tape.square(r_stacked));
}

NLPProblem TrackingMPC::make_problem(const Vec& z0) const {
  NLPProblem p;
  const int n_u = model_.n_u;
  const int n_z = model_.n_z;
  p.dim = horizon_ * n_u + n_z + n_u;
  if (u_set_.is_box()) {
    const auto [lo, hi] = u_set_.bounding_box();
    Vec full_lo = Vec::Constant(p.dim, -std::numeric_limits<double>::infinity());
    Vec full_hi = Vec::Constant(p.dim, std::numeric_limits<double>::infinity());
    for (int i = 0; i < horizon_; ++i) {
      full_lo.segment(static_cast<Eigen::Index>(i) * n_u, n_u) = lo;
      full_hi.segment(static_cast<Eigen::Index>(i) * n_u, n_u) = hi;
    }
    full_lo.tail(n_u) = lo;  // u_r
    full_hi.tail(n_u) = hi;
    p.lower = full_lo;
    p.upper = full_hi;
  }
  p.build = [this, z0, n_u, n_z](ad::Tape& tape, ad::Var x) {
    const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, model_);
    const ad::Var z_r = tape.transpose(tape.block(x, horizon_ * n_u, 0, n_z, 1));
    const ad::Var u_r = tape.transpose(tape.block(x, horizon_ * n_u + n_z, 0, n_u, 1));
    const ad::Var r_stacked = tape.block(x, horizon_ * n_u, 0, n_z + n_u, 1);

    BuiltProblem bp;
    ad::Var z = tape.constant(Mat(z0.transpose()));
    ad::Var stage_sum{};
    for (int i = 0; i < horizon_; ++i) {
      const ad::Var u =
          tape.transpose(tape.block(x, static_cast<int>(i) * n_u, 0, n_u, 1));
      if (!spec_.empty()) {
        const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z, u);
        for (const ad::Var margin : ad_ops::gmm_chance_margins(tape, g, spec_))
          bp.ineq.push_back(margin);
      }
      if (!u_set_.is_box()) {
        for (int row = 0; row < u_set_.rows(); ++row)
          bp.ineq.push_back(tape.add_scalar(
              tape.matmul(tape.constant(Mat(u_set_.H.row(row))), tape.transpose(u)),
              -u_set_.h(row)));
      }
      const ad::Var dz = z - z_r;
      const ad::Var du = u - u_r;
      const ad::Var stage = quad_form(tape, dz, q_) + quad_form(tape, du, r_);
      stage_sum = (i == 0) ? stage : stage_sum + stage;
      z = ad_ops::model_step(tape, mv, z, u);
    }

    // Artificial reference must be a feasible equilibrium (membership in S).
    const ad::Var zr_next = ad_ops::model_step(tape, mv, z_r, u_r);
    const ad::Var defect = zr_next - z_r;
    for (int i = 0; i < n_z; ++i) bp.eq.push_back(tape.block(defect, 0, i, 1, 1));
    if (!spec_.empty()) {
      const ad_ops::GmmVars g_r = ad_ops::model_output(tape, mv, z_r, u_r);
      for (const ad::Var margin : ad_ops::gmm_chance_margins(tape, g_r, spec_))
        bp.ineq.push_back(margin);
    }
    if (!u_set_.is_box()) {
      for (int row = 0; row < u_set_.rows(); ++row)
        bp.ineq.push_back(tape.add_scalar(
            tape.matmul(tape.constant(Mat(u_set_.H.row(row))), tape.transpose(u_r)),
            -u_set_.h(row)));
    }

    // Explicit stage-cost cap (offset cost excluded).
    bp.ineq.push_back(stage_sum - j_cap_);

    bp.objective = stage_sum + offset_cost(tape, mv, z_r, u_r, r_stacked);
    return bp;
  };
  return p;
}

MPCStep TrackingMPC::ocp(const Vec& z0) {
  const auto t0 = std::chrono::steady_clock::now();
  if (z0.size() != model_.n_z || !z0.allFinite())
    throw std::invalid_argument("TrackingMPC::ocp: bad initial meta-state");
  if (mode_ == OffsetMode::kKl && (!ref_ || !ref_->frozen()))
    throw std::logic_error("TrackingMPC::ocp: reference not set");

  const NLPProblem problem = make_problem(z0);
  const int n_u = model_.n_u;
  const int n_z = model_.n_z;

  Vec x0;
  if (warm_ && warm_->size() == problem.dim) {
    x0 = warm_start_shift(*warm_, n_u, horizon_);  // repeat the final stage
  } else {
    x0 = Vec::Zero(problem.dim);
    const auto [lo, hi] = u_set_.bounding_box();
    Vec u_mid(n_u);
    for (int i = 0; i < n_u; ++i)
      u_mid(i) = (std::isfinite(lo(i)) && std::isfinite(hi(i))) ? 0.5 * (lo(i) + hi(i)) : 0.0;
    for (int i = 0; i < horizon_; ++i)
      x0.segment(static_cast<Eigen::Index>(i) * n_u, n_u) = u_mid;
    x0.segment(static_cast<Eigen::Index>(horizon_) * n_u, n_z) = z0;
    x0.tail(n_u) = u_mid;
  }

  MPCStep step;
  NLPSolution sol = solve(problem, x0, nlp_);
  step.status = sol.status;

  const bool usable = sol.status == SolveStatus::kOptimal;
  Vec chosen;
  if (usable) {
    chosen = sol.x;
    warm_ = chosen;
  } else if (u_prev_) {
    // Hold the previous input, flagged.
    step.fallback = true;
    chosen = warm_ ? *warm_ : Vec(Vec::Zero(problem.dim));
    for (int i = 0; i < horizon_; ++i)
      chosen.segment(static_cast<Eigen::Index>(i) * n_u, n_u) = *u_prev_;
  } else {
    step.fallback = true;
    chosen = x0;
  }

  Mat u_seq(horizon_, n_u);
  for (int i = 0; i < horizon_; ++i)
    u_seq.row(i) =
        chosen.segment(static_cast<Eigen::Index>(i) * n_u, n_u).transpose();
  const MSSModel::Rollout roll = model_.rollout(z0, u_seq);

  const Vec z_r = chosen.segment(static_cast<Eigen::Index>(horizon_) * n_u, n_z);
  const Vec u_r = chosen.tail(n_u);

  step.u_applied = u_set_.clip(u_seq.row(0).transpose());
  step.z_pred = roll.states;
  step.pdf_pred = roll.pdfs;
  step.decision = chosen;
  Vec r_star(n_z + n_u);
  r_star << z_r, u_r;
  step.r_star = r_star;

  double stage_sum = 0.0;
  for (int i = 0; i < horizon_; ++i) {
    const Vec dz = roll.states[static_cast<std::size_t>(i)] - z_r;
    const Vec du = u_seq.row(i).transpose() - u_r;
    stage_sum += dz.dot(q_ * dz) + du.dot(r_ * du);
  }
  step.j_star = stage_sum;

  // Offset cost at r*, numerically.
  {
    const DiagGMM g = model_.output_pdf(z_r, u_r);
    double v = lambda_ * r_star.squaredNorm();
    if (mode_ == OffsetMode::kKl) {
      const Mat& samples = ref_->samples();
      const Vec& log_pref = ref_->log_pdf_at_samples();
      double acc = 0.0;
      for (Eigen::Index i = 0; i < samples.rows(); ++i)
        acc += log_pref(i) - g.log_pdf(samples.row(i).transpose());
      v += acc / static_cast<double>(samples.rows());
    } else {
      const auto [mean, var] = g.moments();
      v += (y_ref_ - mean).squaredNorm() + beta_ * var.squaredNorm();
    }
    step.offset_value = v;
  }

  step.worst_margin = -std::numeric_limits<double>::infinity();
  if (!spec_.empty())
    for (const auto& pdf : roll.pdfs)
      step.worst_margin = std::max(step.worst_margin, chance_margins(pdf, spec_).worst());

  u_prev_ = step.u_applied;
  step.solve_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return step;
}

MPCStep TrackingMPC::control(const Mat& u_hist, const Mat& y_hist) {
  return ocp(model_.encode(u_hist, y_hist));
}

}  // namespace mssmpc
