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

#include "mssmpc/reference.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace mssmpc {

namespace {

double lgamma_fn(double x) { return std::lgamma(x); }

// FNV-1a over a byte view of doubles.
std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

ReferencePdf ReferencePdf::from_gmm(DiagGMM g) {
  g.validate();
  ReferencePdf r;
  r.kind_ = Kind::kGmm;
  r.gmm_ = std::move(g);
  return r;
}

ReferencePdf ReferencePdf::gamma_dist(double shape, double scale) {
  if (shape <= 0.0 || scale <= 0.0)
    throw std::invalid_argument("ReferencePdf: gamma shape/scale must be > 0");
  ReferencePdf r;
  r.kind_ = Kind::kGamma;
  r.shape_ = shape;
  r.scale_ = scale;
  r.fit_gmm_standin();
  return r;
}

ReferencePdf ReferencePdf::beta_dist(double a, double b, double lo, double hi) {
  if (a <= 0.0 || b <= 0.0 || !(hi > lo))
    throw std::invalid_argument("ReferencePdf: invalid beta parameters");
  ReferencePdf r;
  r.kind_ = Kind::kBeta;
  r.a_ = a;
  r.b_ = b;
  r.lo_ = lo;
  r.hi_ = hi;
  r.fit_gmm_standin();
  return r;
}

double ReferencePdf::log_pdf(const Vec& y) const {
  switch (kind_) {
    case Kind::kGmm:
      return gmm_.log_pdf(y);
    case Kind::kGamma: {
      const double x = y(0);
      if (x <= 0.0) return std::log(kDensityFloor);
      return (shape_ - 1.0) * std::log(x) - x / scale_ - lgamma_fn(shape_) -
             shape_ * std::log(scale_);
    }
    case Kind::kBeta: {
      const double t = (y(0) - lo_) / (hi_ - lo_);
      if (t <= 0.0 || t >= 1.0) return std::log(kDensityFloor);
      const double log_beta = lgamma_fn(a_) + lgamma_fn(b_) - lgamma_fn(a_ + b_);
      return (a_ - 1.0) * std::log(t) + (b_ - 1.0) * std::log(1.0 - t) - log_beta -
             std::log(hi_ - lo_);
    }
  }
  throw std::logic_error("ReferencePdf: unknown kind");
}

Vec ReferencePdf::draw(Rng& rng) const {
  switch (kind_) {
    case Kind::kGmm:
      return gmm_.sample(1, rng).row(0).transpose();
    case Kind::kGamma:
      return Vec::Constant(1, rng.gamma(shape_, scale_));
    case Kind::kBeta:
      return Vec::Constant(1, lo_ + (hi_ - lo_) * rng.beta(a_, b_));
  }
  throw std::logic_error("ReferencePdf: unknown kind");
}

void ReferencePdf::freeze_samples(int m, std::uint64_t seed) {
  if (m < 1) throw std::invalid_argument("ReferencePdf::freeze_samples: m must be >= 1");
  Rng rng(seed, content_hash());
  samples_.resize(m, dim());
  log_pref_.resize(m);
  for (int i = 0; i < m; ++i) {
    const Vec y = draw(rng);
    samples_.row(i) = y.transpose();
    log_pref_(i) = log_pdf(y);
  }
  seed_ = seed;
}

const Mat& ReferencePdf::samples() const {
  if (!frozen()) throw std::logic_error("ReferencePdf: sample set not frozen");
  return samples_;
}

const Vec& ReferencePdf::log_pdf_at_samples() const {
  if (!frozen()) throw std::logic_error("ReferencePdf: sample set not frozen");
  return log_pref_;
}

std::uint64_t ReferencePdf::content_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  const int k = static_cast<int>(kind_);
  h = fnv1a(h, &k, sizeof(k));
  switch (kind_) {
    case Kind::kGmm:
      h = fnv1a(h, gmm_.w.data(), sizeof(double) * gmm_.w.size());
      h = fnv1a(h, gmm_.mu.data(), sizeof(double) * gmm_.mu.size());
      h = fnv1a(h, gmm_.sigma.data(), sizeof(double) * gmm_.sigma.size());
      break;
    case Kind::kGamma:
      h = fnv1a(h, &shape_, sizeof(shape_));
      h = fnv1a(h, &scale_, sizeof(scale_));
      break;
    case Kind::kBeta:
      h = fnv1a(h, &a_, sizeof(a_));
      h = fnv1a(h, &b_, sizeof(b_));
      h = fnv1a(h, &lo_, sizeof(lo_));
      h = fnv1a(h, &hi_, sizeof(hi_));
      break;
  }
  return h;
}

void ReferencePdf::fit_gmm_standin() {
  // Three equal-probability regions of the closed-form density, each matched
  // by a Gaussian with the region's conditional mean and std (trapezoid
  // quadrature on a fine grid).
  double lo, hi;
  if (kind_ == Kind::kGamma) {
    lo = 1e-9;
    hi = shape_ * scale_ + 12.0 * std::sqrt(shape_) * scale_;
  } else {
    lo = lo_ + 1e-9 * (hi_ - lo_);
    hi = hi_ - 1e-9 * (hi_ - lo_);
  }
  const int n = 4000;
  Vec xs(n), ps(n);
  const double dx = (hi - lo) / (n - 1);
  for (int i = 0; i < n; ++i) {
    xs(i) = lo + i * dx;
    ps(i) = std::exp(log_pdf(Vec::Constant(1, xs(i))));
  }
  const double total = ps.sum() * dx;
  Vec cdf(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += ps(i) * dx;
    cdf(i) = acc / total;
  }
  Vec w(3), mu(3), sg(3);
  int start = 0;
  for (int r = 0; r < 3; ++r) {
    const double upper = (r + 1) / 3.0;
    int end = start;
    while (end < n - 1 && cdf(end) < upper) ++end;
    double mass = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = start; i <= end; ++i) {
      mass += ps(i) * dx;
      m1 += xs(i) * ps(i) * dx;
      m2 += xs(i) * xs(i) * ps(i) * dx;
    }
    w(r) = mass / total;
    mu(r) = m1 / mass;
    sg(r) = std::max(kSigmaFloor, std::sqrt(std::max(1e-12, m2 / mass - mu(r) * mu(r))));
    start = end + 1;
  }
  w /= w.sum();
  gmm_ = DiagGMM::scalar(w, mu, sg);
}

std::string ReferencePdf::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_ == Kind::kGmm ? "gmm" : (kind_ == Kind::kGamma ? "gamma" : "beta");
  j["gmm"] = nlohmann::json::parse(gmm_.components() ? gmm_.to_json() : "{}");
  if (kind_ == Kind::kGamma) j["gamma"] = {{"shape", shape_}, {"scale", scale_}};
  if (kind_ == Kind::kBeta) j["beta"] = {{"a", a_}, {"b", b_}, {"lo", lo_}, {"hi", hi_}};
  if (frozen()) {
    j["sample_seed"] = seed_;
    j["samples"] = std::vector<double>(samples_.data(), samples_.data() + samples_.size());
    j["samples_dim"] = dim();
  }
  return j.dump();
}

ReferencePdf ReferencePdf::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  const std::string kind = j.at("kind").get<std::string>();
  ReferencePdf r;
  if (kind == "gmm") {
    r = from_gmm(DiagGMM::from_json(j.at("gmm").dump()));
  } else if (kind == "gamma") {
    r = gamma_dist(j.at("gamma").at("shape").get<double>(),
                   j.at("gamma").at("scale").get<double>());
  } else if (kind == "beta") {
    r = beta_dist(j.at("beta").at("a").get<double>(), j.at("beta").at("b").get<double>(),
                  j.at("beta").at("lo").get<double>(), j.at("beta").at("hi").get<double>());
  } else {
    throw std::invalid_argument("ReferencePdf: unknown kind " + kind);
  }
  if (j.contains("sample_seed")) {
    const auto vals = j.at("samples").get<std::vector<double>>();
    const int dim = j.at("samples_dim").get<int>();
    const int m = static_cast<int>(vals.size()) / dim;
    r.freeze_samples(m, j.at("sample_seed").get<std::uint64_t>());
    // The frozen set regenerates from (seed, parameters); verify it matches.
    const Mat stored = Eigen::Map<const Mat>(vals.data(), m, dim);
    if ((stored - r.samples_).cwiseAbs().maxCoeff() > 1e-12)
      throw std::runtime_error("ReferencePdf: frozen samples do not match seed");
  }
  return r;
}

}  // namespace mssmpc
