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

#include "mssmpc/gmm.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace mssmpc {

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kInvSqrtTwo = 0.7071067811865475244;
}  // namespace

void DiagGMM::validate() const {
  const int ng = components();
  if (ng == 0) throw std::invalid_argument("DiagGMM: empty mixture");
  if (mu.rows() != ng || sigma.rows() != ng || sigma.cols() != mu.cols())
    throw std::invalid_argument("DiagGMM: inconsistent shapes");
  if (!w.allFinite() || !mu.allFinite() || !sigma.allFinite())
    throw std::invalid_argument("DiagGMM: non-finite entries");
  if (std::abs(w.sum() - 1.0) > 1e-10)
    throw std::invalid_argument("DiagGMM: weights sum to " + std::to_string(w.sum()));
  if ((w.array() <= 0.0).any())
    throw std::invalid_argument("DiagGMM: weights must be strictly positive");
  if ((sigma.array() < kSigmaFloor).any())
    throw std::invalid_argument("DiagGMM: sigma below floor");
}

double DiagGMM::pdf(const Vec& y) const {
  if (y.size() != dim()) throw std::invalid_argument("DiagGMM::pdf: dimension mismatch");
  double acc = 0.0;
  for (int i = 0; i < components(); ++i) {
    double log_comp = 0.0;
    for (int j = 0; j < dim(); ++j) {
      const double zeta = (y(j) - mu(i, j)) / sigma(i, j);
      log_comp += -0.5 * zeta * zeta - std::log(sigma(i, j)) - 0.5 * kLogTwoPi;
    }
    acc += w(i) * std::exp(log_comp);
  }
  return acc;
}

double DiagGMM::log_pdf(const Vec& y) const {
  if (y.size() != dim()) throw std::invalid_argument("DiagGMM::log_pdf: dimension mismatch");
  // logsumexp over components for stability.
  double max_term = -std::numeric_limits<double>::infinity();
  Vec terms(components());
  for (int i = 0; i < components(); ++i) {
    double t = std::log(w(i));
    for (int j = 0; j < dim(); ++j) {
      const double zeta = (y(j) - mu(i, j)) / sigma(i, j);
      t += -0.5 * zeta * zeta - std::log(sigma(i, j)) - 0.5 * kLogTwoPi;
    }
    terms(i) = t;
    max_term = std::max(max_term, t);
  }
  if (!std::isfinite(max_term)) return std::log(kDensityFloor);
  const double lp = max_term + std::log((terms.array() - max_term).exp().sum());
  return std::max(lp, std::log(kDensityFloor));
}

double DiagGMM::prob_leq(const Vec& y_max) const {
  if (y_max.size() != dim()) throw std::invalid_argument("DiagGMM::prob_leq: dimension mismatch");
  double acc = 0.0;
  for (int i = 0; i < components(); ++i) {
    double prod = w(i);
    for (int j = 0; j < dim(); ++j)
      prod *= ad::normal_cdf((y_max(j) - mu(i, j)) / sigma(i, j));
    acc += prod;
  }
  return std::min(1.0, std::max(0.0, acc));
}

double DiagGMM::prob_geq(const Vec& y_min) const { return 1.0 - prob_leq(y_min); }

std::pair<Vec, Mat> DiagGMM::moments() const {
  const int ny = dim();
  Vec mean = Vec::Zero(ny);
  for (int i = 0; i < components(); ++i) mean += w(i) * mu.row(i).transpose();
  Mat var = Mat::Zero(ny, ny);
  for (int i = 0; i < components(); ++i) {
    const Vec d = mu.row(i).transpose() - mean;
    var += w(i) * (Mat(sigma.row(i).array().square().matrix().asDiagonal()) +
                   d * d.transpose());
  }
  return {mean, var};
}

Mat DiagGMM::sample(int m, Rng& rng) const {
  if (m < 1) throw std::invalid_argument("DiagGMM::sample: m must be >= 1");
  const std::vector<double> weights(w.data(), w.data() + w.size());
  Mat out(m, dim());
  for (int s = 0; s < m; ++s) {
    const std::size_t i = rng.categorical(weights);
    for (int j = 0; j < dim(); ++j)
      out(s, j) = rng.normal(mu(static_cast<int>(i), j), sigma(static_cast<int>(i), j));
  }
  return out;
}

std::string DiagGMM::to_json() const {
  nlohmann::json j;
  j["w"] = std::vector<double>(w.data(), w.data() + w.size());
  j["mu"] = nlohmann::json::array();
  j["sigma"] = nlohmann::json::array();
  for (int i = 0; i < components(); ++i) {
    j["mu"].push_back(std::vector<double>(mu.row(i).data(), mu.row(i).data() + mu.cols()));
    j["sigma"].push_back(std::vector<double>(sigma.row(i).data(), sigma.row(i).data() + sigma.cols()));
  }
  return j.dump();
}

DiagGMM DiagGMM::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  DiagGMM g;
  const auto wv = j.at("w").get<std::vector<double>>();
  g.w = Eigen::Map<const Vec>(wv.data(), static_cast<Eigen::Index>(wv.size()));
  const auto& muj = j.at("mu");
  const auto& sj = j.at("sigma");
  const int ng = static_cast<int>(muj.size());
  const int ny = static_cast<int>(muj.at(0).size());
  g.mu.resize(ng, ny);
  g.sigma.resize(ng, ny);
  for (int i = 0; i < ng; ++i)
    for (int jj = 0; jj < ny; ++jj) {
      g.mu(i, jj) = muj.at(i).at(jj).get<double>();
      g.sigma(i, jj) = sj.at(i).at(jj).get<double>();
    }
  g.validate();
  return g;
}

DiagGMM DiagGMM::scalar(const Vec& w, const Vec& mu, const Vec& sigma) {
  DiagGMM g;
  g.w = w;
  g.mu = mu;
  g.sigma = sigma;
  g.validate();
  return g;
}

void ChanceSpec::validate(int n_y) const {
  for (const auto& [bound, p, name] :
       {std::tuple{&y_min, p_min, "min"}, std::tuple{&y_max, p_max, "max"}}) {
    if (bound->has_value() && (*bound)->size() != n_y)
      throw std::invalid_argument(std::string("ChanceSpec: y_") + name + " dimension mismatch");
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument(std::string("ChanceSpec: p_") + name + " outside [0,1]");
  }
  if (y_min && y_max && (y_min->array() >= y_max->array()).any())
    throw std::invalid_argument("ChanceSpec: y_min must be < y_max element-wise");
}

std::string ChanceSpec::to_json() const {
  nlohmann::json j;
  if (y_min) j["y_min"] = std::vector<double>(y_min->data(), y_min->data() + y_min->size());
  if (y_max) j["y_max"] = std::vector<double>(y_max->data(), y_max->data() + y_max->size());
  j["p_min"] = p_min;
  j["p_max"] = p_max;
  return j.dump();
}

ChanceSpec ChanceSpec::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ChanceSpec s;
  if (j.contains("y_min")) {
    const auto v = j.at("y_min").get<std::vector<double>>();
    s.y_min = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (j.contains("y_max")) {
    const auto v = j.at("y_max").get<std::vector<double>>();
    s.y_max = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  s.p_min = j.value("p_min", 0.0);
  s.p_max = j.value("p_max", 0.0);
  return s;
}

double ChanceMargins::worst() const {
  double m = -std::numeric_limits<double>::infinity();
  if (g_min) m = std::max(m, *g_min);
  if (g_max) m = std::max(m, *g_max);
  return m;
}

ChanceMargins chance_margins(const DiagGMM& g, const ChanceSpec& spec) {
  spec.validate(g.dim());
  ChanceMargins m;
  if (spec.y_min) m.g_min = spec.p_min - g.prob_geq(*spec.y_min);
  if (spec.y_max) m.g_max = spec.p_max - g.prob_leq(*spec.y_max);
  return m;
}

double kl_mc(const Mat& samples, const std::function<double(const Vec&)>& log_pref,
             const DiagGMM& q, KlDiagnostics* diag) {
  if (samples.rows() < 1) throw std::invalid_argument("kl_mc: empty sample set");
  q.validate();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const Vec y = samples.row(i).transpose();
    const double lq = q.log_pdf(y);
    if (diag && lq <= std::log(kDensityFloor)) ++diag->clamped;
    acc += log_pref(y) - lq;
  }
  return acc / static_cast<double>(samples.rows());
}

namespace ad_ops {

using ad::Tape;
using ad::Var;

DiagGMM gmm_value(const Tape& tape, const GmmVars& g, int row) {
  DiagGMM out;
  const Mat& lw = tape.val(g.log_w);
  const Mat& mu = tape.val(g.mu);
  const Mat& sg = tape.val(g.sigma);
  out.w = lw.row(row).array().exp().transpose();
  out.w /= out.w.sum();  // remove residual rounding from the softmax
  out.mu.resize(g.n_g, g.n_y);
  out.sigma.resize(g.n_g, g.n_y);
  for (int j = 0; j < g.n_y; ++j)
    for (int i = 0; i < g.n_g; ++i) {
      out.mu(i, j) = mu(row, j * g.n_g + i);
      out.sigma(i, j) = sg(row, j * g.n_g + i);
    }
  out.validate();
  return out;
}

namespace {

// Broadcast a (1 x n) row node over m rows via ones * row.
Var broadcast_rows(Tape& tape, Var row, int m) {
  return tape.matmul(tape.constant(Mat::Ones(m, 1)), row);
}

}  // namespace

Var gmm_log_pdf(Tape& tape, const GmmVars& g, const Mat& samples) {
  if (tape.val(g.log_w).rows() != 1)
    throw std::invalid_argument("gmm_log_pdf: expects a single-row mixture");
  if (samples.cols() != g.n_y)
    throw std::invalid_argument("gmm_log_pdf: sample dimension mismatch");
  const int m = static_cast<int>(samples.rows());
  // (M x n_G) accumulator of per-component log densities.
  Var acc = broadcast_rows(tape, g.log_w, m);
  for (int j = 0; j < g.n_y; ++j) {
    const Var mu_j = broadcast_rows(tape, tape.block(g.mu, 0, j * g.n_g, 1, g.n_g), m);
    const Var sg_j = broadcast_rows(tape, tape.block(g.sigma, 0, j * g.n_g, 1, g.n_g), m);
    const Var y_j = tape.matmul(tape.constant(Mat(samples.col(j))),
                                tape.constant(Mat::Ones(1, g.n_g)));
    const Var zeta = (y_j - mu_j) / sg_j;
    acc = acc + (-0.5) * tape.square(zeta) - tape.log(sg_j) +
          tape.constant(Mat::Constant(m, g.n_g, -0.5 * kLogTwoPi));
  }
  return tape.clamp(tape.row_logsumexp(acc), std::log(kDensityFloor),
                    std::numeric_limits<double>::infinity());
}

Var gmm_log_pdf_rowwise(Tape& tape, const GmmVars& g, const Mat& targets) {
  const int b = static_cast<int>(tape.val(g.log_w).rows());
  if (targets.rows() != b || targets.cols() != g.n_y)
    throw std::invalid_argument("gmm_log_pdf_rowwise: target shape mismatch");
  Var acc = g.log_w;
  for (int j = 0; j < g.n_y; ++j) {
    const Var mu_j = tape.block(g.mu, 0, j * g.n_g, b, g.n_g);
    const Var sg_j = tape.block(g.sigma, 0, j * g.n_g, b, g.n_g);
    const Mat y_bcast = targets.col(j) * Mat::Ones(1, g.n_g);
    const Var zeta = (tape.constant(y_bcast) - mu_j) / sg_j;
    acc = acc + (-0.5) * tape.square(zeta) - tape.log(sg_j) +
          tape.constant(Mat::Constant(b, g.n_g, -0.5 * kLogTwoPi));
  }
  return tape.clamp(tape.row_logsumexp(acc), std::log(kDensityFloor),
                    std::numeric_limits<double>::infinity());
}

namespace {

Var phi(Tape& tape, Var zeta) {
  return 0.5 * (tape.erf(zeta * kInvSqrtTwo) + 1.0);
}

Var prob_leq_impl(Tape& tape, const GmmVars& g, const Vec& y_bound) {
  const int b = static_cast<int>(tape.val(g.log_w).rows());
  Var prod{};  // (B x n_G) running product of per-dimension Phi factors
  for (int j = 0; j < g.n_y; ++j) {
    const Var mu_j = tape.block(g.mu, 0, j * g.n_g, b, g.n_g);
    const Var sg_j = tape.block(g.sigma, 0, j * g.n_g, b, g.n_g);
    const Var num = tape.constant(Mat::Constant(b, g.n_g, y_bound(j))) - mu_j;
    const Var f = phi(tape, num / sg_j);
    prod = (j == 0) ? f : prod * f;
  }
  return tape.row_sum(tape.exp(g.log_w) * prod);
}

}  // namespace

Var gmm_prob_leq(Tape& tape, const GmmVars& g, const Vec& y_max) {
  if (y_max.size() != g.n_y) throw std::invalid_argument("gmm_prob_leq: dimension mismatch");
  return prob_leq_impl(tape, g, y_max);
}

Var gmm_prob_geq(Tape& tape, const GmmVars& g, const Vec& y_min) {
  if (y_min.size() != g.n_y) throw std::invalid_argument("gmm_prob_geq: dimension mismatch");
  return 1.0 - prob_leq_impl(tape, g, y_min);
}

Var gmm_mean(Tape& tape, const GmmVars& g) {
  const int b = static_cast<int>(tape.val(g.log_w).rows());
  const Var w = tape.exp(g.log_w);
  Var mean{};
  for (int j = 0; j < g.n_y; ++j) {
    const Var mu_j = tape.block(g.mu, 0, j * g.n_g, b, g.n_g);
    const Var mj = tape.row_sum(w * mu_j);  // (B x 1)
    mean = (j == 0) ? mj : tape.hcat(mean, mj);
  }
  return mean;
}

Var gmm_covariance_sqnorm(Tape& tape, const GmmVars& g) {
  if (tape.val(g.log_w).rows() != 1)
    throw std::invalid_argument("gmm_covariance_sqnorm: expects B=1");
  const Var w = tape.exp(g.log_w);  // (1 x n_G)
  const Var mean = gmm_mean(tape, g);  // (1 x n_y)
  Var acc{};
  for (int j = 0; j < g.n_y; ++j) {
    const Var mu_j = tape.block(g.mu, 0, j * g.n_g, 1, g.n_g);
    const Var dev_j = mu_j - tape.matmul(tape.block(mean, 0, j, 1, 1),
                                         tape.constant(Mat::Ones(1, g.n_g)));
    for (int k = 0; k < g.n_y; ++k) {
      const Var mu_k = tape.block(g.mu, 0, k * g.n_g, 1, g.n_g);
      const Var dev_k = mu_k - tape.matmul(tape.block(mean, 0, k, 1, 1),
                                           tape.constant(Mat::Ones(1, g.n_g)));
      Var v_jk = tape.row_sum(w * dev_j * dev_k);
      if (j == k) {
        const Var sg_j = tape.block(g.sigma, 0, j * g.n_g, 1, g.n_g);
        v_jk = v_jk + tape.row_sum(w * tape.square(sg_j));
      }
      const Var term = tape.square(v_jk);
      acc = (j == 0 && k == 0) ? term : acc + term;
    }
  }
  return acc;
}

Var gmm_kl_mc(Tape& tape, const GmmVars& g, const Mat& samples,
              const Vec& log_pref_at_samples) {
  if (log_pref_at_samples.size() != samples.rows())
    throw std::invalid_argument("gmm_kl_mc: log_pref length mismatch");
  const Var log_q = gmm_log_pdf(tape, g, samples);
  return tape.mean(tape.constant(Mat(log_pref_at_samples)) - log_q);
}

std::vector<Var> gmm_chance_margins(Tape& tape, const GmmVars& g, const ChanceSpec& spec) {
  spec.validate(g.n_y);
  std::vector<Var> margins;
  if (spec.y_min)
    margins.push_back(tape.add_scalar(tape.neg(gmm_prob_geq(tape, g, *spec.y_min)), spec.p_min));
  if (spec.y_max)
    margins.push_back(tape.add_scalar(tape.neg(gmm_prob_leq(tape, g, *spec.y_max)), spec.p_max));
  return margins;
}

}  // namespace ad_ops

}  // namespace mssmpc
