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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mssmpc/sysid.hpp"
#include "support/test_support.hpp"

using namespace mssmpc;
using mssmpc::testing::max_rel_err;

namespace {

// Model whose head always emits N(bias, 1) regardless of the state.
MSSModel constant_head_model(double mean_bias, int lag = 3) {
  MSSModel m = MSSModel::create(2, 1, 1, 2, lag, 123);
  m.w_net = Mlp::zeros({3, 4, 2});
  m.mu_net = Mlp::zeros({3, 4, 2});
  m.mu_net.layers.back().b.setConstant(mean_bias);
  m.sigma_net = Mlp::zeros({3, 4, 2});  // exp(0) = 1
  return m;
}

Dataset constant_dataset(double value, int len) {
  Dataset d;
  d.u = Mat::Zero(len, 1);
  d.y = Mat::Constant(1, len, value);
  return d;
}

WindowBatch all_windows(const Dataset& d, int lag, int t_sub) {
  WindowBatch b{&d, lag, t_sub, {}};
  for (int s = 0; s + lag + t_sub <= d.length(); ++s)
    for (int r = 0; r < d.realizations(); ++r) b.windows.emplace_back(r, s);
  return b;
}

}  // namespace

TEST_CASE("nll_loss: perfect-mean unit-variance head gives 0.5 ln(2 pi) per point") {
  const double c = 0.7;
  const MSSModel m = constant_head_model(c);
  const Dataset d = constant_dataset(c, 30);
  const WindowBatch batch = all_windows(d, m.lag, 5);
  const double l2 = 1e-6;
  const double loss = nll_loss(m, batch, l2);
  const double theta_sq = m.params().flat().squaredNorm();
  CHECK(loss == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi) + l2 * theta_sq)
                    .epsilon(1e-10));
}

TEST_CASE("nll_loss: doubling l2 changes the loss by exactly l2 |theta|^2") {
  const MSSModel m = constant_head_model(0.2);
  const Dataset d = constant_dataset(0.5, 25);
  const WindowBatch batch = all_windows(d, m.lag, 4);
  const double l2 = 1e-4;
  const double theta_sq = m.params().flat().squaredNorm();
  CHECK(nll_loss(m, batch, 2.0 * l2) - nll_loss(m, batch, l2) ==
        doctest::Approx(l2 * theta_sq).epsilon(1e-12));
}

TEST_CASE("nll_loss_grad matches finite differences on a tiny model") {
  MSSModel m = MSSModel::create(2, 1, 1, 2, 2, 321);
  const Dataset d = generate_training_data(5, 40, 2);
  WindowBatch batch{&d, m.lag, 3, {{0, 1}, {1, 4}, {0, 9}, {1, 12}}};
  const double l2 = 1e-5;

  const ad::GradResult got = nll_loss_grad(m, batch, l2);
  CHECK(got.value == doctest::Approx(nll_loss(m, batch, l2)).epsilon(1e-12));

  ParamVector pv = m.params();
  const Vec theta0 = pv.flat();
  const Vec fd = mssmpc::testing::finite_diff_grad(
      [&](const Vec& th) {
        MSSModel probe = m;
        ParamVector p2 = probe.params();
        p2.flat() = th;
        probe.set_params(p2);
        return nll_loss(probe, batch, l2);
      },
      theta0);
  CHECK(max_rel_err(got.grad, fd) <= 1e-5);
}

TEST_CASE("train: zero epochs returns the model unchanged") {
  const MSSModel m = MSSModel::create(2, 1, 1, 3, 4, 9);
  const Dataset d = generate_training_data(6, 60, 1);
  TrainConfig cfg;
  cfg.epochs_adam = 0;
  cfg.epochs_quasi_newton = 0;
  const auto [m2, report] = train(m, d, cfg);
  CHECK((m2.params().flat().array() == m.params().flat().array()).all());
  CHECK(report.loss_curve.empty());
}

TEST_CASE("train: fits an i.i.d. mixture to within 0.1 of its differential entropy") {
  // Data with no dynamics: y i.i.d. from a two-component mixture.
  const DiagGMM target = DiagGMM::scalar((Vec(2) << 0.5, 0.5).finished(),
                                         (Vec(2) << -1.2, 1.2).finished(),
                                         (Vec(2) << 0.35, 0.35).finished());
  Rng rng(42);
  const int len = 3000;
  Dataset d;
  d.u = Mat::Zero(len, 1);
  for (int k = 0; k < len; ++k) d.u(k, 0) = rng.uniform(0.0, 1.0);
  d.y = target.sample(len, rng).transpose();

  // Differential entropy by quadrature (independent oracle).
  double entropy = 0.0;
  {
    const double lo = -6.0, hi = 6.0;
    const int n = 20000;
    const double dx = (hi - lo) / n;
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      const double p = target.pdf(Vec::Constant(1, lo + i * dx));
      if (p > 1e-300) entropy -= w * p * std::log(p) * dx;
    }
  }

  MSSModel m0 = MSSModel::create(2, 1, 1, 4, 3, 2024);
  TrainConfig cfg;
  cfg.epochs_adam = 800;
  cfg.epochs_quasi_newton = 0;
  cfg.batch = 64;
  cfg.t_sub = 4;
  cfg.lr = 5e-3;
  cfg.seed = 11;
  cfg.val_every = 100;
  const auto [model, report] = train(m0, d, cfg);

  // NLL of the fitted model approaches the entropy of the generator.
  const WindowBatch probe = all_windows(d, model.lag, cfg.t_sub);
  WindowBatch sub{&d, model.lag, cfg.t_sub, {}};
  for (std::size_t i = 0; i < probe.windows.size(); i += 7)
    sub.windows.push_back(probe.windows[i]);
  const double nll = nll_loss(model, sub, 0.0);
  CHECK(std::abs(nll - entropy) <= 0.1);
}

TEST_CASE("train: deterministic under a fixed seed") {
  const MSSModel m = MSSModel::create(2, 1, 1, 2, 3, 77);
  const Dataset d = generate_training_data(8, 120, 1);
  TrainConfig cfg;
  cfg.epochs_adam = 12;
  cfg.epochs_quasi_newton = 0;
  cfg.batch = 16;
  cfg.t_sub = 4;
  cfg.seed = 5;
  cfg.val_every = 4;
  const auto [m1, r1] = train(m, d, cfg);
  const auto [m2, r2] = train(m, d, cfg);
  CHECK((m1.params().flat().array() == m2.params().flat().array()).all());
  REQUIRE(r1.loss_curve.size() == r2.loss_curve.size());
  for (std::size_t i = 0; i < r1.loss_curve.size(); ++i)
    CHECK(r1.loss_curve[i] == r2.loss_curve[i]);
  CHECK(r1.best_val_nll == r2.best_val_nll);
}

TEST_CASE("train: best validation NLL never exceeds the initial one") {
  const MSSModel m = MSSModel::create(2, 1, 1, 2, 3, 31);
  const Dataset d = generate_training_data(14, 200, 2);
  TrainConfig cfg;
  cfg.epochs_adam = 40;
  cfg.epochs_quasi_newton = 0;
  cfg.batch = 32;
  cfg.t_sub = 5;
  cfg.seed = 3;
  cfg.val_every = 10;
  const auto [model, report] = train(m, d, cfg);
  CHECK(report.best_val_nll <= report.initial_val_nll + 1e-12);
}

TEST_CASE("quasi-Newton phase reduces the full-batch loss on a tiny problem") {
  const MSSModel m = MSSModel::create(2, 1, 1, 2, 2, 15);
  const Dataset d = generate_training_data(16, 80, 1);
  TrainConfig cfg;
  cfg.epochs_adam = 10;
  cfg.epochs_quasi_newton = 15;
  cfg.batch = 16;
  cfg.t_sub = 3;
  cfg.seed = 8;
  cfg.val_every = 5;
  const auto [model, report] = train(m, d, cfg);
  REQUIRE(report.loss_curve.size() >= 12);
  // The L-BFGS iterates appended after the Adam phase must be decreasing.
  const std::size_t qn_start = 10;
  CHECK(report.loss_curve.back() <= report.loss_curve[qn_start] + 1e-12);
}

TEST_CASE("mean_log_likelihood: matches a hand loop on a degenerate ensemble") {
  const MSSModel m = constant_head_model(0.0, 2);
  Dataset ens;
  const int horizon = 8;
  ens.u = Mat::Zero(horizon, 1);
  ens.y = Mat::Zero(1, horizon);
  for (int k = 0; k < horizon; ++k) ens.y(0, k) = 0.1 * k;

  const double got = mean_log_likelihood(m, ens, 4);

  // Hand loop: z from encode, pdf per step, pure rollout.
  Mat u_hist(2, 1), y_hist(2, 1);
  u_hist << 0.0, 0.0;
  y_hist << ens.y(0, 0), ens.y(0, 1);
  Vec z = m.encode(u_hist, y_hist);
  double want = 0.0;
  for (int t = 0; t < 4; ++t) {
    const Vec u = Vec::Zero(1);
    want += m.output_pdf(z, u).log_pdf(Vec::Constant(1, ens.y(0, 2 + t)));
    z = m.step(z, u);
  }
  want /= 4.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("vasicek entropy: Gaussian and uniform closed forms within 0.05") {
  Rng rng(1001);
  Vec gauss(1000), unif(1000);
  for (int i = 0; i < 1000; ++i) {
    gauss(i) = rng.normal();
    unif(i) = rng.uniform();
  }
  const double h_gauss = vasicek_entropy(gauss);
  const double h_unif = vasicek_entropy(unif);
  CHECK(std::abs(h_gauss - 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e)) <=
        0.05);
  CHECK(std::abs(h_unif - 0.0) <= 0.05);
}

TEST_CASE("vasicek entropy: ties are tolerated via deterministic jitter") {
  Vec ties = Vec::Zero(256);
  for (int i = 0; i < 128; ++i) ties(i) = 1.0;
  CHECK(std::isfinite(vasicek_entropy(ties)));
}

TEST_CASE("entropy upper limit bounds the achievable log-likelihood") {
  // A short trained model cannot beat the Vasicek limit (statistical form).
  const Dataset ens = generate_test_ensemble(3, 20, 300);
  const MSSModel m = constant_head_model(0.5, 4);
  const double ll = mean_log_likelihood(m, ens, 10);
  const double limit = entropy_upper_limit(ens, 4, 10);
  CHECK(ll <= limit + 0.05);
}

TEST_CASE("entropy upper limit refuses tiny ensembles") {
  const Dataset ens = generate_test_ensemble(3, 20, 50);
  CHECK_THROWS_AS((void)entropy_upper_limit(ens, 4, 5), std::invalid_argument);
}
