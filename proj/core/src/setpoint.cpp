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

#include "mssmpc/setpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mssmpc {

InputPolytope InputPolytope::box(const Vec& lo, const Vec& hi) {
  if (lo.size() != hi.size() || (lo.array() >= hi.array()).any())
    throw std::invalid_argument("InputPolytope::box: lo must be < hi");
  const int n = static_cast<int>(lo.size());
  InputPolytope p;
  p.H = Mat::Zero(2 * n, n);
  p.h = Vec::Zero(2 * n);
  for (int i = 0; i < n; ++i) {
    p.H(i, i) = 1.0;
    p.h(i) = hi(i);
    p.H(n + i, i) = -1.0;
    p.h(n + i) = -lo(i);
  }
  return p;
}

bool InputPolytope::contains(const Vec& u, double tol) const {
  return max_residual(u) <= tol;
}

double InputPolytope::max_residual(const Vec& u) const {
  return (H * u - h).maxCoeff();
}

bool InputPolytope::is_box() const {
  for (int r = 0; r < rows(); ++r) {
    int nonzero = 0;
    for (int c = 0; c < dim(); ++c)
      if (H(r, c) != 0.0) ++nonzero;
    if (nonzero != 1) return false;
  }
  return true;
}

std::pair<Vec, Vec> InputPolytope::bounding_box() const {
  Vec lo = Vec::Constant(dim(), -std::numeric_limits<double>::infinity());
  Vec hi = Vec::Constant(dim(), std::numeric_limits<double>::infinity());
  for (int r = 0; r < rows(); ++r)
    for (int c = 0; c < dim(); ++c) {
      if (H(r, c) > 0.0) hi(c) = std::min(hi(c), h(r) / H(r, c));
      if (H(r, c) < 0.0) lo(c) = std::max(lo(c), h(r) / H(r, c));
    }
  return {lo, hi};
}

Vec InputPolytope::clip(const Vec& u) const {
  const auto [lo, hi] = bounding_box();
  Vec v = u.cwiseMax(lo).cwiseMin(hi);
  if (is_box()) return v;
  // General polytope: project by backtracking towards the Chebyshev-ish
  // interior point implied by the bounding box midpoint.
  const Vec mid = ((lo.array().isFinite() && hi.array().isFinite())
                       .select((lo + hi) / 2.0, Vec::Zero(dim()))
                       .matrix());
  double t = 1.0;
  for (int it = 0; it < 60 && !contains(v, 1e-12); ++it) {
    t *= 0.5;
    v = mid + t * (u - mid);
  }
  return v;
}

std::string InputPolytope::to_json() const {
  nlohmann::json j;
  j["h"] = std::vector<double>(h.data(), h.data() + h.size());
  j["H"] = nlohmann::json::array();
  for (int r = 0; r < rows(); ++r)
    j["H"].push_back(std::vector<double>(H.row(r).data(), H.row(r).data() + dim()));
  return j.dump();
}

InputPolytope InputPolytope::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  InputPolytope p;
  const auto hv = j.at("h").get<std::vector<double>>();
  p.h = Eigen::Map<const Vec>(hv.data(), static_cast<Eigen::Index>(hv.size()));
  const auto& hj = j.at("H");
  const int rows = static_cast<int>(hj.size());
  const int cols = static_cast<int>(hj.at(0).size());
  p.H.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) p.H(r, c) = hj.at(r).at(c).get<double>();
  return p;
}

std::string Setpoint::to_json() const {
  nlohmann::json j;
  j["z_bar"] = std::vector<double>(z_bar.data(), z_bar.data() + z_bar.size());
  j["u_bar"] = std::vector<double>(u_bar.data(), u_bar.data() + u_bar.size());
  j["residual"] = residual;
  j["objective"] = objective;
  j["controllable"] = controllable;
  j["rank"] = rank;
  return j.dump();
}

Setpoint Setpoint::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  Setpoint s;
  const auto zv = j.at("z_bar").get<std::vector<double>>();
  const auto uv = j.at("u_bar").get<std::vector<double>>();
  s.z_bar = Eigen::Map<const Vec>(zv.data(), static_cast<Eigen::Index>(zv.size()));
  s.u_bar = Eigen::Map<const Vec>(uv.data(), static_cast<Eigen::Index>(uv.size()));
  s.residual = j.at("residual").get<double>();
  s.objective = j.at("objective").get<double>();
  s.controllable = j.at("controllable").get<bool>();
  s.rank = j.at("rank").get<int>();
  return s;
}

void Setpoint::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("Setpoint::save: cannot open " + path);
  out << to_json();
}

Setpoint Setpoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("Setpoint::load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return Setpoint::from_json(ss.str());
}

ExclusionBall exclude_and_retry(const Setpoint& prev, double radius) {
  ExclusionBall ball;
  ball.center.resize(prev.z_bar.size() + prev.u_bar.size());
  ball.center << prev.z_bar, prev.u_bar;
  ball.radius = radius;
  return ball;
}

std::pair<bool, int> controllability_rank(const Mat& a, const Mat& b, double tol) {
  const int n = static_cast<int>(a.rows());
  Mat ctrb(n, n * b.cols());
  Mat power = b;
  for (int k = 0; k < n; ++k) {
    ctrb.block(0, k * static_cast<int>(b.cols()), n, static_cast<int>(b.cols())) = power;
    power = a * power;
  }
  const Eigen::JacobiSVD<Mat> svd(ctrb);
  const Vec sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return {false, 0};
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > tol * sv(0)) ++rank;
  return {rank == n, rank};
}

std::pair<bool, int> check_controllability(const MSSModel& m, const Setpoint& s,
                                           double tol) {
  if (s.residual > 1e-6)
    throw std::invalid_argument("check_controllability: set-point residual above 1e-6");
  const auto [a, b] = linearize(m, s.z_bar, s.u_bar);
  return controllability_rank(a, b, tol);
}

namespace {

using ObjectiveBuilder = std::function<ad::Var(
    ad::Tape&, const ad_ops::ModelVars&, const ad_ops::GmmVars&, ad::Var z, ad::Var u)>;

NLPProblem equilibrium_problem(const MSSModel& m, const ChanceSpec& spec,
                               const InputPolytope& u_set,
                               const std::vector<ExclusionBall>& exclusions,
                               ObjectiveBuilder objective) {
  NLPProblem p;
  p.dim = m.n_z + m.n_u;
  const bool box = u_set.is_box();
  if (box) {
    const auto [lo, hi] = u_set.bounding_box();
    Vec full_lo = Vec::Constant(p.dim, -std::numeric_limits<double>::infinity());
    Vec full_hi = Vec::Constant(p.dim, std::numeric_limits<double>::infinity());
    full_lo.tail(m.n_u) = lo;
    full_hi.tail(m.n_u) = hi;
    p.lower = full_lo;
    p.upper = full_hi;
  }
  p.build = [&m, spec, u_set, exclusions, objective = std::move(objective),
             box](ad::Tape& tape, ad::Var x) {
    const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, m);
    const ad::Var z = tape.transpose(tape.block(x, 0, 0, m.n_z, 1));
    const ad::Var u = tape.transpose(tape.block(x, m.n_z, 0, m.n_u, 1));
    const ad::Var z_next = ad_ops::model_step(tape, mv, z, u);
    const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z, u);

    BuiltProblem bp;
    bp.objective = objective(tape, mv, g, z, u);
    const ad::Var defect = z_next - z;
    for (int i = 0; i < m.n_z; ++i) bp.eq.push_back(tape.block(defect, 0, i, 1, 1));
    for (const ad::Var margin : ad_ops::gmm_chance_margins(tape, g, spec))
      bp.ineq.push_back(margin);
    if (!box) {
      for (int r = 0; r < u_set.rows(); ++r) {
        const ad::Var gu =
            tape.add_scalar(tape.matmul(tape.constant(Mat(u_set.H.row(r))),
                                        tape.transpose(u)),
                            -u_set.h(r));
        bp.ineq.push_back(gu);
      }
    }
    for (const auto& ball : exclusions) {
      if (ball.radius <= 0.0) continue;
      const ad::Var dist2 = tape.sum(tape.square(x - tape.constant(Mat(ball.center))));
      bp.ineq.push_back(ball.radius * ball.radius - dist2);
    }
    return bp;
  };
  return p;
}

struct Candidate {
  NLPSolution sol;
  double residual = std::numeric_limits<double>::infinity();
  ChanceMargins margins;
  double polytope_residual = std::numeric_limits<double>::infinity();
  bool feasible = false;
};

SetpointResult multistart_search(const MSSModel& m, const ChanceSpec& spec,
                                 const InputPolytope& u_set,
                                 const SetpointSearchConfig& cfg,
                                 const std::vector<ExclusionBall>& exclusions,
                                 const ObjectiveBuilder& objective) {
  const NLPProblem problem = equilibrium_problem(m, spec, u_set, exclusions, objective);
  const auto [u_lo, u_hi] = u_set.bounding_box();

  std::vector<Vec> starts;
  starts.reserve(static_cast<std::size_t>(cfg.starts));
  for (int s = 0; s < cfg.starts; ++s) {
    Rng rng(cfg.seed, static_cast<std::uint64_t>(s) + 1);
    Vec x0 = Vec::Zero(problem.dim);
    if (s == 0) {
      // Deterministic center start.
      for (int i = 0; i < m.n_u; ++i)
        x0(m.n_z + i) = std::isfinite(u_lo(i)) && std::isfinite(u_hi(i))
                            ? 0.5 * (u_lo(i) + u_hi(i))
                            : 0.0;
    } else {
      for (int i = 0; i < m.n_z; ++i) x0(i) = cfg.z_spread * rng.normal();
      for (int i = 0; i < m.n_u; ++i)
        x0(m.n_z + i) = std::isfinite(u_lo(i)) && std::isfinite(u_hi(i))
                            ? rng.uniform(u_lo(i), u_hi(i))
                            : rng.normal();
    }
    starts.push_back(std::move(x0));
  }

  const auto assess = [&](Candidate& c) {
    const Vec z = c.sol.x.head(m.n_z);
    const Vec u = c.sol.x.tail(m.n_u);
    c.residual = (m.step(z, u) - z).norm();
    c.margins = chance_margins(m.output_pdf(z, u), spec);
    c.polytope_residual = std::max(0.0, u_set.max_residual(u));
    c.feasible = c.residual <= cfg.residual_tol && c.margins.feasible(cfg.margin_tol) &&
                 c.polytope_residual <= cfg.margin_tol;
    for (const auto& ball : exclusions) {
      if (ball.radius <= 0.0) continue;
      if ((c.sol.x - ball.center).squaredNorm() < ball.radius * ball.radius - cfg.margin_tol)
        c.feasible = false;
    }
  };

  // Two phases: a cheap screening pass over every start, then a full-budget
  // polish of the most promising few, so one stubborn start cannot stall the
  // whole search.
  SolveConfig screen = cfg.nlp;
  screen.max_outer = std::min(screen.max_outer, 8);
  screen.max_inner = std::min(screen.max_inner, 60);

  std::vector<Candidate> candidates(starts.size());
  const auto run_phase = [&](const std::vector<std::size_t>& idx, const SolveConfig& scfg,
                             bool from_candidate) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned workers = std::min<unsigned>(hw, static_cast<unsigned>(idx.size()));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t i = w; i < idx.size(); i += workers) {
          const std::size_t s = idx[i];
          Candidate c;
          const bool have_prev =
              from_candidate && candidates[s].sol.x.size() == starts[s].size();
          const Vec x0 = have_prev ? candidates[s].sol.x : starts[s];
          try {
            c.sol = solve(problem, x0, scfg);
          } catch (const ad::NumericError&) {
            candidates[s] = std::move(c);
            continue;
          }
          assess(c);
          candidates[s] = std::move(c);
        }
      });
    }
    for (auto& t : pool) t.join();
  };

  std::vector<std::size_t> all(starts.size());
  for (std::size_t s = 0; s < starts.size(); ++s) all[s] = s;
  run_phase(all, screen, false);

  // Rank: feasible first by objective, then least-infeasible.
  std::vector<std::size_t> order = all;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Candidate& ca = candidates[a];
    const Candidate& cb = candidates[b];
    if (ca.feasible != cb.feasible) return ca.feasible;
    if (ca.feasible) return ca.sol.objective < cb.sol.objective;
    const double va = std::max({ca.residual, ca.margins.worst(), ca.polytope_residual});
    const double vb = std::max({cb.residual, cb.margins.worst(), cb.polytope_residual});
    return va < vb;
  });
  std::vector<std::size_t> polish(order.begin(),
                                  order.begin() + std::min<std::size_t>(3, order.size()));
  run_phase(polish, cfg.nlp, true);

  SetpointResult result;
  int best = -1;
  double best_violation = std::numeric_limits<double>::infinity();
  int best_infeasible = -1;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const Candidate& c = candidates[s];
    if (c.feasible) {
      ++result.feasible_starts;
      if (best < 0 || c.sol.objective < candidates[static_cast<std::size_t>(best)].sol.objective)
        best = static_cast<int>(s);
    }
    const double violation =
        std::max({c.residual, c.margins.g_min.value_or(0.0), c.margins.g_max.value_or(0.0),
                  c.polytope_residual});
    if (violation < best_violation) {
      best_violation = violation;
      best_infeasible = static_cast<int>(s);
    }
  }

  if (best >= 0) {
    const Candidate& c = candidates[static_cast<std::size_t>(best)];
    Setpoint sp;
    sp.z_bar = c.sol.x.head(m.n_z);
    sp.u_bar = c.sol.x.tail(m.n_u);
    sp.residual = c.residual;
    sp.objective = c.sol.objective;
    const auto [flag, rank] = check_controllability(m, sp);
    sp.controllable = flag;
    sp.rank = rank;
    result.setpoint = std::move(sp);
  }
  result.best_violation = best_violation;
  if (best_infeasible >= 0) {
    const Candidate& c = candidates[static_cast<std::size_t>(best_infeasible)];
    Vec margins(2);
    margins << c.margins.g_min.value_or(-1.0), c.margins.g_max.value_or(-1.0);
    result.best_margins = margins;
  }
  return result;
}

}  // namespace

SetpointResult find_setpoint_pdf(const MSSModel& m, const ReferencePdf& ref,
                                 const ChanceSpec& spec, const InputPolytope& u_set,
                                 const SetpointSearchConfig& cfg,
                                 const std::vector<ExclusionBall>& exclusions) {
  if (!ref.frozen() || ref.samples().rows() < 100)
    throw std::invalid_argument("find_setpoint_pdf: reference needs >= 100 frozen samples");
  const Mat samples = ref.samples();
  const Vec log_pref = ref.log_pdf_at_samples();
  return multistart_search(
      m, spec, u_set, cfg, exclusions,
      [samples, log_pref](ad::Tape& tape, const ad_ops::ModelVars&,
                          const ad_ops::GmmVars& g, ad::Var, ad::Var) {
        return ad_ops::gmm_kl_mc(tape, g, samples, log_pref);
      });
}

SetpointResult find_setpoint_mean(const MSSModel& m, const Vec& y_ref, double beta,
                                  const ChanceSpec& spec, const InputPolytope& u_set,
                                  const SetpointSearchConfig& cfg,
                                  const std::vector<ExclusionBall>& exclusions) {
  if (beta < 0.0) throw std::invalid_argument("find_setpoint_mean: beta must be >= 0");
  if (y_ref.size() != m.n_y)
    throw std::invalid_argument("find_setpoint_mean: y_ref dimension mismatch");
  return multistart_search(
      m, spec, u_set, cfg, exclusions,
      [y_ref, beta](ad::Tape& tape, const ad_ops::ModelVars&, const ad_ops::GmmVars& g,
                    ad::Var, ad::Var) {
        const ad::Var mean = ad_ops::gmm_mean(tape, g);  // (1 x n_y)
        ad::Var obj = tape.sum(tape.square(tape.constant(Mat(y_ref.transpose())) - mean));
        if (beta > 0.0)
          obj = obj + beta * ad_ops::gmm_covariance_sqnorm(tape, g);
        return obj;
      });
}

}  // namespace mssmpc
