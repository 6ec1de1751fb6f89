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

#include "mssmpc/ad.hpp"
#include "mssmpc/mss_model.hpp"

namespace mssmpc::testing {

// Independent central finite differences; the oracle side of every gradient
// check. Kept free of any tape machinery.

inline Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x,
                            double h = 1e-5) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                                double h = 1e-5) {
  const Vec f0 = f(x);
  Mat jac(f0.size(), x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    jac.col(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return jac;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline double max_rel_err(const Vec& got, const Vec& want) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < got.size(); ++i)
    m = std::max(m, std::abs(got(i) - want(i)) / std::max(1.0, std::abs(want(i))));
  return m;
}

// Hand-built linear meta-state-space toy: z+ = A z + B u (single linear
// layer), single-component output head with mu = C z + d and fixed sigma.
// Exactly representable, so LQR/terminal identities hold without
// linearization error.
inline MSSModel linear_toy_model(const Mat& a, const Mat& b, const Mat& c_out,
                                 double sigma, double mu_offset = 0.0) {
  const int n_z = static_cast<int>(a.rows());
  const int n_u = static_cast<int>(b.cols());
  const int n_y = static_cast<int>(c_out.rows());
  MSSModel m;
  m.n_z = n_z;
  m.n_u = n_u;
  m.n_y = n_y;
  m.n_g = 1;
  m.lag = 1;

  Mlp f;
  Mat w(n_z + n_u, n_z);
  w.topRows(n_z) = a.transpose();
  w.bottomRows(n_u) = b.transpose();
  f.layers.push_back({w, Mat::Zero(1, n_z)});
  m.f_net = f;

  Mlp enc;
  enc.layers.push_back({Mat::Zero(n_u + n_y, n_z), Mat::Zero(1, n_z)});
  m.enc_net = enc;

  Mlp wn;
  wn.layers.push_back({Mat::Zero(n_z + n_u, 1), Mat::Zero(1, 1)});
  m.w_net = wn;

  Mlp mu;
  Mat wmu = Mat::Zero(n_z + n_u, n_y);
  wmu.topRows(n_z) = c_out.transpose();
  Mat bmu = Mat::Constant(1, n_y, mu_offset);
  mu.layers.push_back({wmu, bmu});
  m.mu_net = mu;

  Mlp sg;
  sg.layers.push_back({Mat::Zero(n_z + n_u, n_y), Mat::Constant(1, n_y, std::log(sigma))});
  m.sigma_net = sg;

  m.u_mean = Vec::Zero(n_u);
  m.u_std = Vec::Ones(n_u);
  m.y_mean = Vec::Zero(n_y);
  m.y_std = Vec::Ones(n_y);
  m.validate();
  return m;
}

}  // namespace mssmpc::testing
