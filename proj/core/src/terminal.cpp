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

#include "mssmpc/terminal.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mssmpc {

namespace {

Mat inverse_sqrt_spd(const Mat& p) {
  const Eigen::SelfAdjointEigenSolver<Mat> es(p);
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::invalid_argument("terminal: matrix not positive definite");
  return es.eigenvectors() *
         es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
         es.eigenvectors().transpose();
}

double spectral_radius(const Mat& a) {
  return Eigen::EigenSolver<Mat>(a, false).eigenvalues().cwiseAbs().maxCoeff();
}

std::vector<double> to_std(const Mat& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

Mat from_std(const std::vector<double>& v, int rows, int cols) {
  return Eigen::Map<const Mat>(v.data(), rows, cols);
}

}  // namespace

double TerminalDesign::terminal_cost(const Vec& z, const Vec& z_bar) const {
  const Vec d = z - z_bar;
  return d.dot(p_cost * d);
}

Vec TerminalDesign::terminal_controller(const Vec& z, const Vec& z_bar,
                                        const Vec& u_bar) const {
  return u_bar + k_gain * (z - z_bar);
}

std::pair<Mat, Mat> solve_dare(const Mat& a, const Mat& b, const Mat& q, const Mat& r) {
  const int n = static_cast<int>(a.rows());
  if (a.cols() != n || b.rows() != n)
    throw std::invalid_argument("solve_dare: dimension mismatch");
  if ((q - q.transpose()).cwiseAbs().maxCoeff() > 1e-12 ||
      (r - r.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw std::invalid_argument("solve_dare: Q and R must be symmetric");
  const Eigen::LLT<Mat> rllt(r);
  if (rllt.info() != Eigen::Success)
    throw std::invalid_argument("solve_dare: R must be positive definite");

  Mat p = q;
  constexpr int kMaxIter = 100000;
  for (int it = 0; it < kMaxIter; ++it) {
    const Mat btp = b.transpose() * p;
    const Mat gain_denom = r + btp * b;
    const Mat next =
        q + a.transpose() * p * a -
        a.transpose() * p * b * gain_denom.ldlt().solve(btp * a);
    const double delta = (next - p).cwiseAbs().maxCoeff();
    p = 0.5 * (next + next.transpose());  // keep symmetric against drift
    if (delta <= 1e-13 * std::max(1.0, p.cwiseAbs().maxCoeff())) {
      const Mat k = -(r + b.transpose() * p * b).ldlt().solve(b.transpose() * p * a);
      const Mat acl = a + b * k;
      const Mat residual = acl.transpose() * p * acl + q + k.transpose() * r * k - p;
      if (residual.norm() > 1e-9)
        throw std::runtime_error("solve_dare: converged iterate fails the closed-loop identity");
      return {p, k};
    }
  }
  throw std::runtime_error(
      "solve_dare: no convergence in 100000 iterations (open-loop spectral radius " +
      std::to_string(spectral_radius(a)) + ")");
}

std::optional<double> gamma_from_inputs(const Mat& p, const Mat& k, const Vec& u_bar,
                                        const InputPolytope& u_set) {
  const Mat p_inv_sqrt = inverse_sqrt_spd(p);
  std::optional<double> gamma;
  for (int i = 0; i < u_set.rows(); ++i) {
    const Vec hi = u_set.H.row(i).transpose();
    const double denom = (p_inv_sqrt * (k.transpose() * hi)).squaredNorm();
    if (denom <= 1e-300) continue;  // this row can never bind under kappa_f
    const double slack = u_set.h(i) - u_set.H.row(i).dot(u_bar);
    const double bound = (slack <= 0.0) ? 0.0 : slack * slack / denom;
    gamma = gamma ? std::min(*gamma, bound) : bound;
  }
  return gamma;
}

namespace {

double chance_margin_under_kf(const MSSModel& m, const Mat& k, const Setpoint& sp,
                              const ChanceSpec& spec, bool lower_side, const Vec& z) {
  const Vec u = sp.u_bar + k * (z - sp.z_bar);
  const ChanceMargins margins = chance_margins(m.output_pdf(z, u), spec);
  if (lower_side) return margins.g_min.value_or(-1.0);
  return margins.g_max.value_or(-1.0);
}

}  // namespace

GammaChance gamma_from_chance(const MSSModel& m, const Mat& p, const Mat& k,
                              const Setpoint& sp, const ChanceSpec& spec,
                              bool lower_side, double gamma_region,
                              const TerminalConfig& cfg) {
  const auto margin = [&](const Vec& z) {
    return chance_margin_under_kf(m, k, sp, spec, lower_side, z);
  };
  if (margin(sp.z_bar) >= 0.0)
    throw std::invalid_argument(
        "gamma_from_chance: chance margin not strictly negative at the set-point");

  const Mat p_inv_sqrt = inverse_sqrt_spd(p);
  const int n = static_cast<int>(p.rows());
  Rng rng(cfg.seed, 0xC0FFEE);

  double best_level = std::numeric_limits<double>::infinity();
  Vec best_z;
  for (int d = 0; d < cfg.chance_directions; ++d) {
    Vec dir(n);
    for (int i = 0; i < n; ++i) dir(i) = rng.normal();
    dir.normalize();
    // z(t) = z_bar + sqrt(t_region) * t * P^{-1/2} dir has V_f = t_region t^2.
    const Vec step = std::sqrt(gamma_region) * (p_inv_sqrt * dir);
    double t_lo = 0.0, t_hi = 1.0;
    if (margin(sp.z_bar + step) < 0.0) continue;  // no crossing in this direction
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (t_lo + t_hi);
      (margin(sp.z_bar + mid * step) < 0.0 ? t_lo : t_hi) = mid;
    }
    const Vec z_cross = sp.z_bar + t_hi * step;
    const double level = (z_cross - sp.z_bar).dot(p * (z_cross - sp.z_bar));
    if (level < best_level) {
      best_level = level;
      best_z = z_cross;
    }
  }

  if (!std::isfinite(best_level)) {
    return {gamma_region, true};
  }

  // NLP polish: min V_f(z) s.t. margin(z, kappa_f(z)) = 0 from the best crossing.
  NLPProblem polish;
  polish.dim = n;
  polish.build = [&m, &p, &k, &sp, &spec, lower_side](ad::Tape& tape, ad::Var x) {
    const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, m);
    const ad::Var z_row = tape.transpose(x);  // (1 x n_z)
    const ad::Var dz = z_row - tape.constant(Mat(sp.z_bar.transpose()));
    const ad::Var u_row =
        tape.constant(Mat(sp.u_bar.transpose())) +
        tape.matmul(dz, tape.constant(Mat(k.transpose())));
    const ad::Var vf =
        tape.sum(tape.mul(dz, tape.matmul(dz, tape.constant(Mat(p.transpose())))));
    const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z_row, u_row);
    BuiltProblem bp;
    bp.objective = vf;
    ChanceSpec side;
    if (lower_side) {
      side.y_min = spec.y_min;
      side.p_min = spec.p_min;
    } else {
      side.y_max = spec.y_max;
      side.p_max = spec.p_max;
    }
    bp.eq.push_back(ad_ops::gmm_chance_margins(tape, g, side).at(0));
    return bp;
  };
  try {
    const NLPSolution sol = solve(polish, best_z, cfg.nlp);
    if (sol.status == SolveStatus::kOptimal && sol.objective >= 0.0 &&
        sol.objective < best_level)
      best_level = sol.objective;
  } catch (const ad::NumericError&) {
    // keep the bisection level
  }
  return {best_level, false};
}

DecreaseCheck verify_decrease(const MSSModel& m, const TerminalDesign& design,
                              const Setpoint& sp, const Mat& q, const Mat& r,
                              const ChanceSpec& spec, const InputPolytope& u_set,
                              double gamma, int n_samples, std::uint64_t seed,
                              double tol) {
  const int n = static_cast<int>(design.p_cost.rows());
  const Mat p_inv_sqrt = inverse_sqrt_spd(design.p_cost);
  Rng rng(seed, 0xDEC);

  DecreaseCheck check;
  check.pass = true;
  check.worst_violation = -std::numeric_limits<double>::infinity();

  const auto stage_cost = [&](const Vec& z, const Vec& u) {
    const Vec dz = z - sp.z_bar;
    const Vec du = u - sp.u_bar;
    return dz.dot(q * dz) + du.dot(r * du);
  };

  for (int s = 0; s < n_samples; ++s) {
    Vec dir(n);
    for (int i = 0; i < n; ++i) dir(i) = rng.normal();
    const double nrm = dir.norm();
    if (nrm < 1e-12) continue;
    dir /= nrm;
    const double radius = std::pow(rng.uniform(), 1.0 / n);
    const Vec z = sp.z_bar + std::sqrt(gamma) * radius * (p_inv_sqrt * dir);

    const Vec u = design.terminal_controller(z, sp.z_bar, sp.u_bar);
    double violation;
    std::string kind;

    violation = u_set.max_residual(u);
    kind = "input";

    const ChanceMargins margins = chance_margins(m.output_pdf(z, u), spec);
    const double worst_margin = margins.worst();
    if (std::isfinite(worst_margin) && worst_margin > violation) {
      violation = worst_margin;
      kind = "chance";
    }

    const Vec z_next = m.step(z, u);
    const double decrease = design.terminal_cost(z_next, sp.z_bar) +
                            stage_cost(z, u) - design.terminal_cost(z, sp.z_bar);
    if (decrease > violation) {
      violation = decrease;
      kind = "decrease";
    }

    if (violation > check.worst_violation) {
      check.worst_violation = violation;
      check.worst_point = z;
      check.worst_kind = kind;
    }
    if (violation > tol) check.pass = false;
  }
  return check;
}

TerminalDesign design_terminal(const MSSModel& m, const Setpoint& sp, const Mat& q,
                               const Mat& r, const ChanceSpec& spec,
                               const InputPolytope& u_set, const TerminalConfig& cfg) {
  TerminalDesign design;
  design.epsilon = cfg.epsilon;
  std::tie(design.a_z, design.b_z) = linearize(m, sp.z_bar, sp.u_bar);

  const Mat q_eps = q + cfg.epsilon * Mat::Identity(m.n_z, m.n_z);
  std::tie(design.p_cost, design.k_gain) = solve_dare(design.a_z, design.b_z, q_eps, r);

  double gamma = cfg.gamma_cap;
  design.checks.push_back({"region_cap", cfg.gamma_cap, false, ""});

  if (const auto gu = gamma_from_inputs(design.p_cost, design.k_gain, sp.u_bar, u_set)) {
    design.checks.push_back(
        {"input_lp", *gu, false, *gu == 0.0 ? "set-point on the input boundary" : ""});
    gamma = std::min(gamma, *gu);
  } else {
    design.checks.push_back({"input_lp", 0.0, false, "no input row binds under kappa_f"});
  }

  for (const bool lower : {true, false}) {
    if (lower && !spec.y_min) continue;
    if (!lower && !spec.y_max) continue;
    const GammaChance gc = gamma_from_chance(m, design.p_cost, design.k_gain, sp, spec,
                                             lower, gamma, cfg);
    design.checks.push_back({lower ? "chance_min" : "chance_max", gc.gamma, false,
                             gc.unbounded ? "chance-unbounded in region" : ""});
    if (!gc.unbounded) gamma = std::min(gamma, gc.gamma);
  }

  bool ok = false;
  for (int refine = 0; refine <= cfg.max_refinements && gamma > 0.0; ++refine) {
    const DecreaseCheck check = verify_decrease(m, design, sp, q, r, spec, u_set, gamma,
                                                cfg.n_samples, cfg.seed, cfg.decrease_tol);
    design.checks.push_back({"decrease", gamma, check.pass,
                             check.pass ? "sampled decrease verified"
                                        : "worst " + check.worst_kind + " violation " +
                                              std::to_string(check.worst_violation)});
    if (check.pass) {
      ok = true;
      break;
    }
    gamma *= cfg.shrink;
  }
  if (!ok)
    throw std::runtime_error("design_terminal: no positive gamma passed the decrease check");
  design.gamma = gamma;

  // Indicative analytic level (Lipschitz-constant construction); the binding
  // gamma above comes from the sampled verification.
  {
    const Mat acl = design.a_z + design.b_z * design.k_gain;
    const Eigen::SelfAdjointEigenSolver<Mat> pes(design.p_cost);
    const double lam_max_p = pes.eigenvalues().maxCoeff();
    const double lam_min_p = pes.eigenvalues().minCoeff();
    const double lam_max_ak =
        Eigen::SelfAdjointEigenSolver<Mat>(acl.transpose() * design.p_cost * acl)
            .eigenvalues()
            .maxCoeff();
    const double c_f = (std::sqrt(lam_max_ak + cfg.epsilon) - std::sqrt(lam_max_ak)) /
                       std::sqrt(lam_max_p);
    const double k_norm = design.k_gain.jacobiSvd().singularValues()(0);
    // Hessian-scale constant from sampled second differences of the transition.
    Rng rng(cfg.seed, 0x7E57);
    double t_est = 1e-12;
    for (int s = 0; s < 256; ++s) {
      Vec dz(m.n_z);
      for (int i = 0; i < m.n_z; ++i) dz(i) = 0.1 * rng.normal();
      const Vec z = sp.z_bar + dz;
      const Vec u = design.terminal_controller(z, sp.z_bar, sp.u_bar);
      const Vec lin = m.step(sp.z_bar, sp.u_bar) + design.a_z * dz +
                      design.b_z * (u - sp.u_bar);
      const double err = (m.step(z, u) - lin).norm();
      t_est = std::max(t_est, err / ((1.0 + k_norm * k_norm) * dz.squaredNorm()));
    }
    design.gamma_analytic =
        lam_min_p * c_f * c_f /
        (t_est * t_est * std::pow(1.0 + k_norm * k_norm, 2.0));
    design.checks.push_back({"analytic_indicative", design.gamma_analytic, false,
                             "Lipschitz-constant construction, reported only"});
  }
  return design;
}

std::string TerminalDesign::to_json() const {
  nlohmann::json j;
  j["a_z"] = to_std(a_z);
  j["b_z"] = to_std(b_z);
  j["k_gain"] = to_std(k_gain);
  j["p_cost"] = to_std(p_cost);
  j["n_z"] = static_cast<int>(a_z.rows());
  j["n_u"] = static_cast<int>(b_z.cols());
  j["epsilon"] = epsilon;
  j["gamma"] = gamma;
  j["gamma_analytic"] = gamma_analytic;
  j["checks"] = nlohmann::json::array();
  for (const auto& c : checks)
    j["checks"].push_back({{"source", c.source}, {"value", c.value},
                           {"binding", c.binding}, {"note", c.note}});
  return j.dump();
}

TerminalDesign TerminalDesign::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  TerminalDesign d;
  const int n_z = j.at("n_z").get<int>();
  const int n_u = j.at("n_u").get<int>();
  d.a_z = from_std(j.at("a_z").get<std::vector<double>>(), n_z, n_z);
  d.b_z = from_std(j.at("b_z").get<std::vector<double>>(), n_z, n_u);
  d.k_gain = from_std(j.at("k_gain").get<std::vector<double>>(), n_u, n_z);
  d.p_cost = from_std(j.at("p_cost").get<std::vector<double>>(), n_z, n_z);
  d.epsilon = j.at("epsilon").get<double>();
  d.gamma = j.at("gamma").get<double>();
  d.gamma_analytic = j.value("gamma_analytic", 0.0);
  for (const auto& c : j.value("checks", nlohmann::json::array()))
    d.checks.push_back({c.at("source").get<std::string>(), c.at("value").get<double>(),
                        c.at("binding").get<bool>(), c.at("note").get<std::string>()});
  return d;
}

void TerminalDesign::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("TerminalDesign::save: cannot open " + path);
  out << to_json();
}

TerminalDesign TerminalDesign::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("TerminalDesign::load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace mssmpc
