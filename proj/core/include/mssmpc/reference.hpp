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

#include <cstdint>
#include <string>

#include "mssmpc/gmm.hpp"

namespace mssmpc {

/// Reference output pdf for set-point search and tracking. Natively a GMM;
/// scalar gamma and (scaled) beta references carry their closed-form log
/// density for the KL numerator plus a moment-matched 3-component GMM
/// stand-in, computed once. The sample set is drawn once (freeze) and is
/// immutable afterwards.
class ReferencePdf {
 public:
  enum class Kind { kGmm, kGamma, kBeta };

  static ReferencePdf from_gmm(DiagGMM g);
  /// Gamma(shape, scale) on y > 0.
  static ReferencePdf gamma_dist(double shape, double scale);
  /// Beta(a, b) rescaled to the interval [lo, hi].
  static ReferencePdf beta_dist(double a, double b, double lo, double hi);

  Kind kind() const { return kind_; }
  int dim() const { return kind_ == Kind::kGmm ? gmm_.dim() : 1; }
  const DiagGMM& gmm() const { return gmm_; }

  /// Exact log density (closed form for gamma/beta, mixture otherwise).
  double log_pdf(const Vec& y) const;
  Vec draw(Rng& rng) const;

  /// Draws and stores M i.i.d. samples; subsequent calls with the same seed
  /// reproduce the identical set. Also caches log_pdf at the samples.
  void freeze_samples(int m, std::uint64_t seed);
  bool frozen() const { return samples_.rows() > 0; }
  const Mat& samples() const;
  const Vec& log_pdf_at_samples() const;
  std::uint64_t sample_seed() const { return seed_; }

  /// Stable content hash (parameters only, not samples).
  std::uint64_t content_hash() const;

  std::string to_json() const;
  static ReferencePdf from_json(const std::string& text);

 private:
  Kind kind_ = Kind::kGmm;
  DiagGMM gmm_;  // the reference itself, or the moment-matched stand-in
  double shape_ = 0.0, scale_ = 0.0;           // gamma
  double a_ = 0.0, b_ = 0.0, lo_ = 0.0, hi_ = 1.0;  // scaled beta
  Mat samples_;
  Vec log_pref_;
  std::uint64_t seed_ = 0;

  void fit_gmm_standin();
};

}  // namespace mssmpc
