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

#include "mssmpc/reachability.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mssmpc {

bool HyperRect::contains(const Vec& z, double tol) const {
  return ((z - center).cwiseAbs().array() <= half_widths.array() + tol).all();
}

bool ReachCertificate::covers(const Vec& z) const {
  for (const auto& r : passed)
    if (r.contains(z, 1e-12)) return true;
  return false;
}

double property_f(SetpointMPC& ctrl, const Vec& z, double rho_c, double f_inf) {
  ctrl.reset_warm();
  MPCStep first;
  try {
    first = ctrl.ocp(z);
  } catch (const ad::NumericError&) {
    return f_inf;  // solver blow-up treated as infeasible, conservatively
  }
  if (first.fallback || first.status != SolveStatus::kOptimal) return f_inf;
  const Vec z_next = first.z_pred.at(1);
  MPCStep second;
  try {
    second = ctrl.ocp(z_next);  // warm-started by the shifted first solution
  } catch (const ad::NumericError&) {
    return f_inf;
  }
  if (second.fallback || second.status != SolveStatus::kOptimal) return f_inf;
  return second.j_star - rho_c * first.j_star;
}

bool verify_rect(SetpointMPC& ctrl, HyperRect& rect, double rho_c, double f_inf,
                 double lipschitz_safety) {
  const int n = static_cast<int>(rect.center.size());
  const auto f_at = [&](const Vec& z) { return property_f(ctrl, z, rho_c, f_inf); };

  rect.f_center = f_at(rect.center);
  if (rect.f_center >= 0.0 || rect.f_center >= f_inf) {
    rect.status = HyperRect::Status::kFail;
    rect.eta = 0.0;
    return false;
  }

  // Face-centred stencil: gradient and curvature estimates at the rect scale.
  double grad_sq = 0.0;
  double curvature = 0.0;
  bool stencil_infeasible = false;
  for (int i = 0; i < n && !stencil_infeasible; ++i) {
    const double h = rect.half_widths(i);
    Vec zp = rect.center, zm = rect.center;
    zp(i) += h;
    zm(i) -= h;
    const double fp = f_at(zp), fm = f_at(zm);
    if (fp >= f_inf || fm >= f_inf) {
      stencil_infeasible = true;
      break;
    }
    const double gi = (fp - fm) / (2.0 * h);
    grad_sq += gi * gi;
    curvature = std::max(curvature, std::abs(fp - 2.0 * rect.f_center + fm) / (h * h));
  }

  const double max_delta = rect.half_widths.maxCoeff();
  double eps_jump = 0.0;
  if (stencil_infeasible) {
    eps_jump = f_inf;
  } else {
    // Corner feasibility probes for jump discontinuities of F.
    for (unsigned mask = 0; mask < (1u << n) && eps_jump == 0.0; ++mask) {
      Vec corner = rect.center;
      for (int i = 0; i < n; ++i)
        corner(i) += ((mask >> i) & 1u) ? rect.half_widths(i) : -rect.half_widths(i);
      if (f_at(corner) >= f_inf) eps_jump = f_inf;
    }
  }

  rect.lipschitz_a = lipschitz_safety * std::sqrt(grad_sq);
  rect.remainder_b = 0.5 * curvature * max_delta * max_delta;
  rect.eta = rect.lipschitz_a * max_delta + rect.remainder_b + eps_jump;
  const bool pass = rect.f_center <= -rect.eta;
  rect.status = pass ? HyperRect::Status::kPass : HyperRect::Status::kFail;
  return pass;
}

namespace {

bool rect_less(const HyperRect& a, const HyperRect& b) {
  for (int i = 0; i < a.center.size(); ++i) {
    if (a.center(i) != b.center(i)) return a.center(i) < b.center(i);
  }
  return a.half_widths.sum() < b.half_widths.sum();
}

}  // namespace

ReachCertificate certify_roi(const SetpointMPC& ctrl, const Vec& roi_lo,
                             const Vec& roi_hi, const ReachConfig& cfg) {
  const int n = static_cast<int>(roi_lo.size());
  if (roi_hi.size() != n || ((roi_hi - roi_lo).array() <= 0.0).any())
    throw std::invalid_argument("certify_roi: roi must have positive extent");

  ReachCertificate cert;
  cert.roi_lo = roi_lo;
  cert.roi_hi = roi_hi;
  cert.rho_c = cfg.rho_c;
  cert.delta_min = cfg.delta_min_frac * (roi_hi - roi_lo);
  cert.controller_fingerprint = ctrl.fingerprint();

  // Auto-scale F_inf from typical optimal costs at the set-point and the
  // ROI center.
  double f_inf = cfg.f_inf;
  if (f_inf <= 0.0) {
    SetpointMPC probe = ctrl;
    double scale = 1e-3;
    for (const Vec& z : {Vec(0.5 * (roi_lo + roi_hi)), ctrl.setpoint().z_bar}) {
      probe.reset_warm();
      try {
        const MPCStep s = probe.ocp(z);
        if (!s.fallback && s.status == SolveStatus::kOptimal)
          scale = std::max(scale, s.j_star);
      } catch (const ad::NumericError&) {
      }
    }
    f_inf = 10.0 * scale;
  }
  cert.f_inf = f_inf;

  std::deque<HyperRect> queue;
  {
    HyperRect root;
    root.center = 0.5 * (roi_lo + roi_hi);
    root.half_widths = 0.5 * (roi_hi - roi_lo);
    queue.push_back(std::move(root));
  }

  std::mutex mtx;
  std::atomic<int> processed{0};
  std::atomic<bool> budget_hit{false};
  std::vector<HyperRect> passed, failed;

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  std::atomic<int> active{0};
  for (unsigned w = 0; w < hw; ++w) {
    pool.emplace_back([&]() {
      SetpointMPC local = ctrl;  // controller evaluations are pure per copy
      for (;;) {
        HyperRect rect;
        {
          std::lock_guard<std::mutex> lock(mtx);
          if (queue.empty()) {
            if (active.load() == 0) return;
          } else {
            rect = std::move(queue.front());
            queue.pop_front();
            active.fetch_add(1);
          }
        }
        if (rect.center.size() == 0) {
          std::this_thread::yield();
          continue;
        }
        if (processed.fetch_add(1) >= cfg.max_rects) {
          budget_hit.store(true);
          std::lock_guard<std::mutex> lock(mtx);
          rect.status = HyperRect::Status::kFail;
          failed.push_back(std::move(rect));
          active.fetch_sub(1);
          continue;
        }

        const bool pass = verify_rect(local, rect, cfg.rho_c, f_inf, cfg.lipschitz_safety);
        std::lock_guard<std::mutex> lock(mtx);
        if (pass) {
          passed.push_back(std::move(rect));
        } else if (rect.half_widths.maxCoeff() < cert.delta_min.maxCoeff()) {
          failed.push_back(std::move(rect));
        } else {
          int axis = 0;
          rect.half_widths.maxCoeff(&axis);
          for (const double sign : {-1.0, 1.0}) {
            HyperRect child;
            child.center = rect.center;
            child.half_widths = rect.half_widths;
            child.half_widths(axis) *= 0.5;
            child.center(axis) += sign * child.half_widths(axis);
            queue.push_back(std::move(child));
          }
        }
        active.fetch_sub(1);
      }
    });
  }
  for (auto& t : pool) t.join();

  std::sort(passed.begin(), passed.end(), rect_less);
  std::sort(failed.begin(), failed.end(), rect_less);
  cert.passed = std::move(passed);
  cert.failed = std::move(failed);
  cert.complete = !budget_hit.load();
  cert.evaluations = processed.load();
  return cert;
}

int select_setpoint(const std::vector<ReachCertificate>& certs, const Vec& z0) {
  if (certs.empty()) throw std::invalid_argument("select_setpoint: no certificates");
  for (std::size_t i = 0; i < certs.size(); ++i)
    if (certs[i].covers(z0)) return static_cast<int>(i);
  throw std::runtime_error("select_setpoint: no certified set-point covers the initial state");
}

GridCheckResult dense_grid_check(const SetpointMPC& ctrl, const ReachCertificate& cert,
                                 int per_axis, int max_rects) {
  GridCheckResult result;
  const int n_rects = (max_rects < 0)
                          ? static_cast<int>(cert.passed.size())
                          : std::min<int>(max_rects, static_cast<int>(cert.passed.size()));
  std::mutex mtx;
  std::atomic<int> next{0};
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < hw; ++w) {
    pool.emplace_back([&]() {
      SetpointMPC local = ctrl;
      for (;;) {
        const int idx = next.fetch_add(1);
        if (idx >= n_rects) return;
        const HyperRect& rect = cert.passed[static_cast<std::size_t>(idx)];
        const int n = static_cast<int>(rect.center.size());
        int total = 1;
        for (int i = 0; i < n; ++i) total *= per_axis;
        int local_viol = 0;
        for (int g = 0; g < total; ++g) {
          Vec z = rect.center;
          int rem = g;
          for (int i = 0; i < n; ++i) {
            const int gi = rem % per_axis;
            rem /= per_axis;
            const double t = (per_axis == 1) ? 0.0
                                             : -1.0 + 2.0 * gi / (per_axis - 1.0);
            z(i) += t * rect.half_widths(i);
          }
          const double f = property_f(local, z, cert.rho_c, cert.f_inf);
          if (f > 0.0) ++local_viol;
        }
        std::lock_guard<std::mutex> lock(mtx);
        result.violations += local_viol;
        result.evaluated += total;
      }
    });
  }
  for (auto& t : pool) t.join();
  return result;
}

namespace {

nlohmann::json rect_to_json(const HyperRect& r) {
  nlohmann::json j;
  j["center"] = std::vector<double>(r.center.data(), r.center.data() + r.center.size());
  j["half_widths"] = std::vector<double>(r.half_widths.data(),
                                         r.half_widths.data() + r.half_widths.size());
  j["status"] = r.status == HyperRect::Status::kPass
                    ? "pass"
                    : (r.status == HyperRect::Status::kFail ? "fail" : "refined");
  j["f_center"] = r.f_center;
  j["a"] = r.lipschitz_a;
  j["b"] = r.remainder_b;
  j["eta"] = r.eta;
  return j;
}

HyperRect rect_from_json(const nlohmann::json& j) {
  HyperRect r;
  const auto c = j.at("center").get<std::vector<double>>();
  const auto h = j.at("half_widths").get<std::vector<double>>();
  r.center = Eigen::Map<const Vec>(c.data(), static_cast<Eigen::Index>(c.size()));
  r.half_widths = Eigen::Map<const Vec>(h.data(), static_cast<Eigen::Index>(h.size()));
  const std::string s = j.at("status").get<std::string>();
  r.status = s == "pass" ? HyperRect::Status::kPass
                         : (s == "fail" ? HyperRect::Status::kFail
                                        : HyperRect::Status::kRefined);
  r.f_center = j.value("f_center", 0.0);
  r.lipschitz_a = j.value("a", 0.0);
  r.remainder_b = j.value("b", 0.0);
  r.eta = j.value("eta", 0.0);
  return r;
}

}  // namespace

std::string ReachCertificate::to_json() const {
  nlohmann::json j;
  j["roi_lo"] = std::vector<double>(roi_lo.data(), roi_lo.data() + roi_lo.size());
  j["roi_hi"] = std::vector<double>(roi_hi.data(), roi_hi.data() + roi_hi.size());
  j["delta_min"] = std::vector<double>(delta_min.data(), delta_min.data() + delta_min.size());
  j["rho_c"] = rho_c;
  j["f_inf"] = f_inf;
  j["controller_fingerprint"] = controller_fingerprint;
  j["complete"] = complete;
  j["evaluations"] = evaluations;
  j["certification"] = "empirical";  // a and b are sampled estimates
  j["passed"] = nlohmann::json::array();
  for (const auto& r : passed) j["passed"].push_back(rect_to_json(r));
  j["failed"] = nlohmann::json::array();
  for (const auto& r : failed) j["failed"].push_back(rect_to_json(r));
  return j.dump();
}

ReachCertificate ReachCertificate::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ReachCertificate c;
  const auto lo = j.at("roi_lo").get<std::vector<double>>();
  const auto hi = j.at("roi_hi").get<std::vector<double>>();
  const auto dm = j.at("delta_min").get<std::vector<double>>();
  c.roi_lo = Eigen::Map<const Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  c.roi_hi = Eigen::Map<const Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  c.delta_min = Eigen::Map<const Vec>(dm.data(), static_cast<Eigen::Index>(dm.size()));
  c.rho_c = j.at("rho_c").get<double>();
  c.f_inf = j.at("f_inf").get<double>();
  c.controller_fingerprint = j.at("controller_fingerprint").get<std::uint64_t>();
  c.complete = j.at("complete").get<bool>();
  c.evaluations = j.value("evaluations", 0);
  for (const auto& r : j.at("passed")) c.passed.push_back(rect_from_json(r));
  for (const auto& r : j.at("failed")) c.failed.push_back(rect_from_json(r));
  return c;
}

void ReachCertificate::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("ReachCertificate::save: cannot open " + path);
  out << to_json();
}

ReachCertificate ReachCertificate::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ReachCertificate::load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void ReachCertificate::save_boxes_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("ReachCertificate::save_boxes_csv: cannot open " + path);
  const int n = static_cast<int>(roi_lo.size());
  out << "status";
  for (int i = 0; i < n; ++i) out << ",c" << i;
  for (int i = 0; i < n; ++i) out << ",d" << i;
  out << ",f_center,eta\n";
  out.precision(17);
  const auto dump = [&](const std::vector<HyperRect>& rects, const char* status) {
    for (const auto& r : rects) {
      out << status;
      for (int i = 0; i < n; ++i) out << ',' << r.center(i);
      for (int i = 0; i < n; ++i) out << ',' << r.half_widths(i);
      out << ',' << r.f_center << ',' << r.eta << '\n';
    }
  };
  dump(passed, "pass");
  dump(failed, "fail");
}

}  // namespace mssmpc
