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

#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "mssmpc/ad.hpp"
#include "mssmpc/rng.hpp"

namespace mssmpc {

using ad::Mat;
using ad::Vec;

/// Lower bound on every mixture standard deviation. Enforced by the model
/// head transform; asserted wherever a DiagGMM is consumed.
inline constexpr double kSigmaFloor = 1e-4;

/// Density floor applied before taking logs, so degenerate evaluations give
/// a large-but-finite negative log-likelihood instead of -inf.
inline constexpr double kDensityFloor = 1e-300;

/// Diagonal-covariance Gaussian mixture over an n_y-dimensional output.
struct DiagGMM {
  Vec w;      // (n_G) weights on the probability simplex
  Mat mu;     // (n_G x n_y) component means
  Mat sigma;  // (n_G x n_y) per-dimension standard deviations

  int components() const { return static_cast<int>(w.size()); }
  int dim() const { return static_cast<int>(mu.cols()); }

  /// Checks the simplex (sum 1 within 1e-10, strictly positive weights),
  /// sigma >= kSigmaFloor, and finiteness.
  void validate() const;

  double pdf(const Vec& y) const;
  /// log pdf with the kDensityFloor clamp; never -inf.
  double log_pdf(const Vec& y) const;

  /// Joint CDF P{y <= y_max} = sum_i w_i prod_j Phi((y_max_j - mu_ij)/sigma_ij).
  double prob_leq(const Vec& y_max) const;
  /// P{y >= y_min} = 1 - P{y <= y_min} (complement at the same point).
  double prob_geq(const Vec& y_min) const;

  /// Mean and full covariance matrix of the mixture.
  std::pair<Vec, Mat> moments() const;

  /// m draws, one per row; component by categorical(w), then per-dimension
  /// Gaussian draws.
  Mat sample(int m, Rng& rng) const;

  std::string to_json() const;
  static DiagGMM from_json(const std::string& text);

  /// Convenience scalar-output constructor.
  static DiagGMM scalar(const Vec& w, const Vec& mu, const Vec& sigma);
};

/// Output chance-constraint specification; either bound may be absent.
struct ChanceSpec {
  std::optional<Vec> y_min;
  std::optional<Vec> y_max;
  double p_min = 0.0;
  double p_max = 0.0;

  bool empty() const { return !y_min.has_value() && !y_max.has_value(); }
  void validate(int n_y) const;

  std::string to_json() const;
  static ChanceSpec from_json(const std::string& text);
};

/// Chance-constraint margins; feasible iff every present margin is <= 0.
struct ChanceMargins {
  std::optional<double> g_min;  // p_min - P{y >= y_min}
  std::optional<double> g_max;  // p_max - P{y <= y_max}

  bool feasible(double tol = 0.0) const {
    return (!g_min || *g_min <= tol) && (!g_max || *g_max <= tol);
  }
  double worst() const;
};

ChanceMargins chance_margins(const DiagGMM& g, const ChanceSpec& spec);

struct KlDiagnostics {
  int clamped = 0;  // evaluations that hit the density floor
};

/// Monte-Carlo KL estimate (1/M) sum log(p_ref(y_i)/q(y_i)) on a caller-owned
/// sample set. Never resamples internally.
double kl_mc(const Mat& samples, const std::function<double(const Vec&)>& log_pref,
             const DiagGMM& q, KlDiagnostics* diag = nullptr);

namespace ad_ops {

/// Batched mixture head on a tape: B rows, n_G components, n_y dimensions.
/// Column layout of mu/sigma is dimension-major: column j*n_G + i holds
/// dimension j of component i.
struct GmmVars {
  ad::Var log_w;  // (B x n_G)
  ad::Var mu;     // (B x n_G*n_y)
  ad::Var sigma;  // (B x n_G*n_y)
  int n_g = 0;
  int n_y = 0;
};

/// Extracts the numeric DiagGMM for batch row b.
DiagGMM gmm_value(const ad::Tape& tape, const GmmVars& g, int row = 0);

/// log density of each sample row under a single-row (B=1) mixture ->
/// (M x 1). Log densities are clamped at log(kDensityFloor).
ad::Var gmm_log_pdf(ad::Tape& tape, const GmmVars& g, const Mat& samples);

/// log density of target row b under batch-row b of the mixture -> (B x 1);
/// the training-path likelihood. Clamped at log(kDensityFloor).
ad::Var gmm_log_pdf_rowwise(ad::Tape& tape, const GmmVars& g, const Mat& targets);

/// P{y <= y_max} per batch row -> (B x 1), via the erf primitive.
ad::Var gmm_prob_leq(ad::Tape& tape, const GmmVars& g, const Vec& y_max);
/// P{y >= y_min} per batch row -> (B x 1).
ad::Var gmm_prob_geq(ad::Tape& tape, const GmmVars& g, const Vec& y_min);

/// Mixture mean per batch row -> (B x n_y).
ad::Var gmm_mean(ad::Tape& tape, const GmmVars& g);
/// Squared Frobenius norm of the covariance matrix, B=1 -> (1 x 1).
ad::Var gmm_covariance_sqnorm(ad::Tape& tape, const GmmVars& g);

/// Monte-Carlo KL against precomputed reference log densities (M x 1).
ad::Var gmm_kl_mc(ad::Tape& tape, const GmmVars& g, const Mat& samples,
                  const Vec& log_pref_at_samples);

/// Sum over present margins of the stagewise chance constraints, returned as
/// individual scalar nodes (g_min first when present).
std::vector<ad::Var> gmm_chance_margins(ad::Tape& tape, const GmmVars& g,
                                        const ChanceSpec& spec);

}  // namespace ad_ops

}  // namespace mssmpc
