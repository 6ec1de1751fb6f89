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

#include "mssmpc/nlp.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

namespace mssmpc {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::kOptimal: return "optimal";
    case SolveStatus::kMaxIter: return "max_iter";
    case SolveStatus::kInfeasibleEstimate: return "infeasible_estimate";
  }
  return "unknown";
}

NLPProblem NLPProblem::from_parts(
    int dim, std::function<ad::Var(ad::Tape&, ad::Var)> objective,
    std::vector<std::function<ad::Var(ad::Tape&, ad::Var)>> eq_cons,
    std::vector<std::function<ad::Var(ad::Tape&, ad::Var)>> ineq_cons) {
  NLPProblem p;
  p.dim = dim;
  p.build = [objective = std::move(objective), eq_cons = std::move(eq_cons),
             ineq_cons = std::move(ineq_cons)](ad::Tape& tape, ad::Var x) {
    BuiltProblem bp;
    bp.objective = objective(tape, x);
    for (const auto& c : eq_cons) bp.eq.push_back(c(tape, x));
    for (const auto& c : ineq_cons) bp.ineq.push_back(c(tape, x));
    return bp;
  };
  return p;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Evaluation {
  double al = 0.0;     // augmented Lagrangian value
  double f = 0.0;      // raw objective
  Vec grad;            // d al / d x
  Vec eq;              // equality residuals
  Vec ineq;            // inequality values
  bool usable = false; // false when evaluation hit a numeric error
};

struct Multipliers {
  Vec lambda;  // equalities
  Vec mu;      // inequalities (kept >= 0)
  double rho = 10.0;
  bool pure_lagrangian = false;  // drop penalty terms: f + l'c_e + mu'c_i
};

// One full tape evaluation of the augmented Lagrangian
//   f + sum_e [l_e c_e + rho/2 c_e^2] + rho/2 sum_i [max(0, mu_i/rho + c_i)^2 - (mu_i/rho)^2]
Evaluation evaluate(const NLPProblem& p, const Vec& x, const Multipliers& m,
                    bool need_grad) {
  Evaluation ev;
  ad::Tape tape;
  tape.reserve(4096);
  const ad::Var xv = tape.var(Mat(x));
  const BuiltProblem bp = p.build(tape, xv);
  ad::Var al = bp.objective;
  const auto lambda_at = [&](std::size_t e) {
    return e < static_cast<std::size_t>(m.lambda.size()) ? m.lambda(static_cast<int>(e)) : 0.0;
  };
  const auto mu_at = [&](std::size_t i) {
    return i < static_cast<std::size_t>(m.mu.size()) ? m.mu(static_cast<int>(i)) : 0.0;
  };
  for (std::size_t e = 0; e < bp.eq.size(); ++e) {
    const ad::Var c = bp.eq[e];
    if (m.pure_lagrangian)
      al = al + lambda_at(e) * c;
    else
      al = al + lambda_at(e) * c + (m.rho / 2.0) * tape.square(c);
  }
  for (std::size_t i = 0; i < bp.ineq.size(); ++i) {
    const ad::Var c = bp.ineq[i];
    if (m.pure_lagrangian) {
      al = al + mu_at(i) * c;
    } else {
      const double shift = mu_at(i) / m.rho;
      const ad::Var hinge = tape.clamp(c + shift, 0.0, kInf);
      al = al + (m.rho / 2.0) * tape.square(hinge) - (m.rho / 2.0) * shift * shift;
    }
  }
  ev.al = tape.scalar(al);
  ev.f = tape.scalar(bp.objective);
  ev.eq.resize(static_cast<Eigen::Index>(bp.eq.size()));
  for (std::size_t e = 0; e < bp.eq.size(); ++e) ev.eq(static_cast<int>(e)) = tape.scalar(bp.eq[e]);
  ev.ineq.resize(static_cast<Eigen::Index>(bp.ineq.size()));
  for (std::size_t i = 0; i < bp.ineq.size(); ++i) ev.ineq(static_cast<int>(i)) = tape.scalar(bp.ineq[i]);
  if (need_grad) {
    tape.backward(al);
    ev.grad = tape.grad(xv).col(0);
  }
  ev.usable = true;
  return ev;
}

Evaluation try_evaluate(const NLPProblem& p, const Vec& x, const Multipliers& m,
                        bool need_grad) {
  try {
    return evaluate(p, x, m, need_grad);
  } catch (const ad::NumericError&) {
    return Evaluation{};
  }
}

Vec project(const NLPProblem& p, Vec x) {
  if (p.lower) x = x.cwiseMax(*p.lower);
  if (p.upper) x = x.cwiseMin(*p.upper);
  return x;
}

double projected_gradient_norm(const NLPProblem& p, const Vec& x, const Vec& g) {
  const Vec step = project(p, x - g) - x;
  return step.cwiseAbs().maxCoeff();
}

double violation(const Evaluation& ev) {
  double v = 0.0;
  if (ev.eq.size()) v = std::max(v, ev.eq.cwiseAbs().maxCoeff());
  if (ev.ineq.size()) v = std::max(v, ev.ineq.maxCoeff());
  return v;
}

// Two-loop L-BFGS recursion over projected-step curvature pairs.
class LbfgsMemory {
 public:
  explicit LbfgsMemory(int capacity) : capacity_(capacity) {}

  void clear() { pairs_.clear(); }

  void push(const Vec& s, const Vec& y) {
    const double sy = s.dot(y);
    if (sy <= 1e-12 * s.norm() * y.norm()) return;  // keep the inverse Hessian PD
    pairs_.push_back({s, y, sy});
    if (static_cast<int>(pairs_.size()) > capacity_) pairs_.pop_front();
  }

  Vec direction(const Vec& grad) const {
    Vec q = -grad;
    if (pairs_.empty()) return q;
    std::vector<double> alpha(pairs_.size());
    for (int i = static_cast<int>(pairs_.size()) - 1; i >= 0; --i) {
      const auto& pr = pairs_[static_cast<std::size_t>(i)];
      alpha[static_cast<std::size_t>(i)] = pr.s.dot(q) / pr.sy;
      q -= alpha[static_cast<std::size_t>(i)] * pr.y;
    }
    const auto& last = pairs_.back();
    q *= last.sy / last.y.squaredNorm();
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      const auto& pr = pairs_[i];
      const double beta = pr.y.dot(q) / pr.sy;
      q += (alpha[i] - beta) * pr.s;
    }
    return q;
  }

 private:
  struct Pair {
    Vec s, y;
    double sy;
  };
  int capacity_;
  std::deque<Pair> pairs_;
};

}  // namespace

NLPSolution solve(const NLPProblem& p, const Vec& x0, const SolveConfig& cfg) {
  if (x0.size() != p.dim) throw std::invalid_argument("nlp::solve: x0 dimension mismatch");
  if (!x0.allFinite()) throw std::invalid_argument("nlp::solve: x0 not finite");

  std::ofstream trace;
  if (!cfg.trace_path.empty()) {
    trace.open(cfg.trace_path);
    trace << "outer,inner,al,f,violation,pg,rho\n";
  }

  Vec x = project(p, x0);
  Multipliers m;
  m.rho = cfg.rho0;

  // Probe once to size the multiplier vectors; x0 must evaluate.
  Evaluation probe = evaluate(p, x, Multipliers{Vec::Zero(0), Vec::Zero(0), cfg.rho0}, false);
  m.lambda = Vec::Zero(probe.eq.size());
  m.mu = Vec::Zero(probe.ineq.size());

  NLPSolution sol;
  sol.x = x;
  double best_feas = kInf;
  Vec best_feas_x = x;

  double prev_violation = kInf;
  int total_inner = 0;
  bool converged = false;

  for (int outer = 0; outer < cfg.max_outer && !converged; ++outer) {
    Evaluation ev = evaluate(p, x, m, true);
    LbfgsMemory mem(cfg.lbfgs_memory);
    const double inner_tol =
        std::max(cfg.tol, std::pow(0.1, outer + 2));

    int inner = 0;
    for (; inner < cfg.max_inner; ++inner) {
      const double pg = projected_gradient_norm(p, x, ev.grad);
      if (trace.is_open())
        trace << outer << ',' << inner << ',' << ev.al << ',' << ev.f << ','
              << violation(ev) << ',' << pg << ',' << m.rho << '\n';
      if (pg <= inner_tol) break;

      Vec d = mem.direction(ev.grad);
      if (d.dot(ev.grad) > -1e-14 * d.norm() * ev.grad.norm()) {
        mem.clear();
        d = -ev.grad;
      }
      // Backtracking Armijo on the projected path.
      double alpha = 1.0;
      const double slope = d.dot(ev.grad);
      Evaluation next;
      Vec x_next;
      bool accepted = false;
      for (int bt = 0; bt < 50; ++bt) {
        x_next = project(p, x + alpha * d);
        next = try_evaluate(p, x_next, m, true);
        if (next.usable &&
            next.al <= ev.al + 1e-4 * alpha * slope + 1e-14 * std::abs(ev.al)) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) break;  // stagnated at numeric precision
      mem.push(x_next - x, next.grad - ev.grad);
      x = x_next;
      ev = std::move(next);
    }
    total_inner += inner;

    const double viol = violation(ev);
    sol.outer_trace.push_back({ev.al, ev.f, viol, m.rho});

    const double pg = projected_gradient_norm(p, x, ev.grad);
    if (viol <= cfg.feas_tol && pg <= cfg.tol) converged = true;

    if (viol < best_feas) {
      best_feas = viol;
      best_feas_x = x;
    }

    // First-order multiplier updates.
    for (int e = 0; e < ev.eq.size(); ++e) m.lambda(e) += m.rho * ev.eq(e);
    for (int i = 0; i < ev.ineq.size(); ++i)
      m.mu(i) = std::max(0.0, m.mu(i) + m.rho * ev.ineq(i));

    if (!converged) {
      if (viol > 0.25 * prev_violation && viol > cfg.feas_tol)
        m.rho = std::min(m.rho * cfg.rho_growth, cfg.rho_max);
      prev_violation = viol;
    }
    sol.outer_iterations = outer + 1;
  }

  // Post-hoc re-evaluation; residuals are never trusted from the inner loop.
  Evaluation final_ev = evaluate(p, x, m, true);
  Multipliers lagr = m;
  lagr.pure_lagrangian = true;
  Evaluation lag_ev = evaluate(p, x, lagr, true);

  sol.x = x;
  sol.objective = final_ev.f;
  sol.max_eq_residual = final_ev.eq.size() ? final_ev.eq.cwiseAbs().maxCoeff() : 0.0;
  sol.max_ineq_violation =
      final_ev.ineq.size() ? std::max(0.0, final_ev.ineq.maxCoeff()) : 0.0;
  sol.kkt_norm = projected_gradient_norm(p, x, lag_ev.grad);
  sol.iterations = total_inner;
  sol.eq_multipliers = m.lambda;
  sol.ineq_multipliers = m.mu;

  const double viol = std::max(sol.max_eq_residual, sol.max_ineq_violation);
  if (viol <= cfg.feas_tol && sol.kkt_norm <= 10.0 * cfg.tol) {
    sol.status = SolveStatus::kOptimal;
  } else if (viol > cfg.feas_tol && m.rho >= cfg.rho_max * 0.999) {
    sol.status = SolveStatus::kInfeasibleEstimate;
    sol.x = best_feas_x;
  } else if (viol > cfg.feas_tol && sol.outer_iterations >= cfg.max_outer) {
    sol.status = SolveStatus::kInfeasibleEstimate;
  } else {
    sol.status = SolveStatus::kMaxIter;
  }
  return sol;
}

Vec warm_start_shift(const Vec& prev, int n_u, int horizon,
                     const std::optional<Vec>& terminal_fill) {
  if (n_u < 1 || horizon < 1) throw std::invalid_argument("warm_start_shift: bad layout");
  if (prev.size() < static_cast<Eigen::Index>(n_u) * horizon)
    throw std::invalid_argument("warm_start_shift: decision vector shorter than layout");
  if (terminal_fill && terminal_fill->size() != n_u)
    throw std::invalid_argument("warm_start_shift: terminal fill width mismatch");
  Vec x = prev;
  for (int k = 0; k + 1 < horizon; ++k)
    x.segment(static_cast<Eigen::Index>(k) * n_u, n_u) =
        prev.segment(static_cast<Eigen::Index>(k + 1) * n_u, n_u);
  const Eigen::Index last = static_cast<Eigen::Index>(horizon - 1) * n_u;
  if (terminal_fill)
    x.segment(last, n_u) = *terminal_fill;
  else if (horizon >= 2)
    x.segment(last, n_u) = prev.segment(last, n_u);
  return x;
}

}  // namespace mssmpc
