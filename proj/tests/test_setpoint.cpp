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

#include "mssmpc/setpoint.hpp"
#include "support/test_support.hpp"

using namespace mssmpc;
using mssmpc::testing::linear_toy_model;

namespace {

// Stable, controllable 2-state toy with output mu = c' z and sigma 0.1.
MSSModel make_toy() {
  Mat a(2, 2);
  a << 0.8, 0.1, 0.0, 0.7;
  Mat b(2, 1);
  b << 1.0, 0.5;
  Mat c(1, 2);
  c << 1.0, 0.5;
  return linear_toy_model(a, b, c, 0.1);
}

Vec toy_equilibrium_z(const Mat& a, const Mat& b, double u) {
  return (Mat::Identity(2, 2) - a).inverse() * b * u;
}

}  // namespace

TEST_CASE("input polytope: boxes, membership, clipping") {
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 5.0));
  CHECK(u_set.is_box());
  CHECK(u_set.contains(Vec::Constant(1, 2.0)));
  CHECK(!u_set.contains(Vec::Constant(1, 5.5)));
  CHECK(u_set.clip(Vec::Constant(1, 7.0))(0) == 5.0);
  CHECK(u_set.clip(Vec::Constant(1, -1.0))(0) == 0.0);
  const auto [lo, hi] = u_set.bounding_box();
  CHECK(lo(0) == 0.0);
  CHECK(hi(0) == 5.0);
  const InputPolytope round = InputPolytope::from_json(u_set.to_json());
  CHECK((round.H - u_set.H).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pdf mode recovers a known equilibrium of the toy with tiny KL") {
  const MSSModel toy = make_toy();
  Mat a(2, 2), b(2, 1);
  a << 0.8, 0.1, 0.0, 0.7;
  b << 1.0, 0.5;
  const double u_star = 1.0;
  const Vec z_star = toy_equilibrium_z(a, b, u_star);

  // Reference equal to the model's own output pdf at that equilibrium.
  ReferencePdf ref = ReferencePdf::from_gmm(toy.output_pdf(z_star, Vec::Constant(1, u_star)));
  ref.freeze_samples(300, 99);

  SetpointSearchConfig cfg;
  cfg.starts = 8;
  cfg.seed = 3;
  cfg.z_spread = 2.0;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));
  const SetpointResult res = find_setpoint_pdf(toy, ref, ChanceSpec{}, u_set, cfg);

  REQUIRE(res.setpoint.has_value());
  CHECK(res.setpoint->residual <= 1e-6);
  CHECK(res.setpoint->objective <= 1e-3);  // KL at the optimum
  // The recovered output pdf matches the reference mean.
  const DiagGMM got = toy.output_pdf(res.setpoint->z_bar, res.setpoint->u_bar);
  CHECK(got.mu(0, 0) ==
        doctest::Approx(ref.gmm().mu(0, 0)).epsilon(0.02));
  CHECK(res.setpoint->controllable);
  CHECK(res.setpoint->rank == 2);
}

TEST_CASE("mean mode: zero objective at a known equilibrium mean") {
  const MSSModel toy = make_toy();
  Mat a(2, 2), b(2, 1), c(1, 2);
  a << 0.8, 0.1, 0.0, 0.7;
  b << 1.0, 0.5;
  c << 1.0, 0.5;
  const Vec z_star = toy_equilibrium_z(a, b, 1.0);
  const double y_star = (c * z_star)(0);

  SetpointSearchConfig cfg;
  cfg.starts = 8;
  cfg.seed = 4;
  cfg.z_spread = 2.0;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));
  const SetpointResult res =
      find_setpoint_mean(toy, Vec::Constant(1, y_star), 0.0, ChanceSpec{}, u_set, cfg);
  REQUIRE(res.setpoint.has_value());
  CHECK(res.setpoint->objective <= 1e-6);
  const auto [mean, var] = toy.output_pdf(res.setpoint->z_bar, res.setpoint->u_bar).moments();
  CHECK(std::abs(mean(0) - y_star) <= 1e-3);
}

TEST_CASE("beta weight steers the search towards lower-variance equilibria") {
  // sigma head depends on u: sigma = exp(0.4 u_norm + log 0.3), mean is
  // constant, so every equilibrium matches the mean and beta breaks the tie.
  MSSModel toy = make_toy();
  toy.mu_net.layers.back().W.setZero();
  toy.mu_net.layers.back().b.setConstant(1.0);  // mean = 1 everywhere
  toy.sigma_net.layers.back().W(2, 0) = 0.4;    // input column of (z, u)
  toy.sigma_net.layers.back().b.setConstant(std::log(0.3));

  SetpointSearchConfig cfg;
  cfg.starts = 8;
  cfg.seed = 5;
  cfg.z_spread = 2.0;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));

  const SetpointResult with_beta =
      find_setpoint_mean(toy, Vec::Constant(1, 1.0), 50.0, ChanceSpec{}, u_set, cfg);
  REQUIRE(with_beta.setpoint.has_value());
  // Large beta pushes u (and so sigma) down.
  const DiagGMM g = toy.output_pdf(with_beta.setpoint->z_bar, with_beta.setpoint->u_bar);
  const DiagGMM g_hi = toy.output_pdf(toy_equilibrium_z(
                                          (Mat(2, 2) << 0.8, 0.1, 0.0, 0.7).finished(),
                                          (Mat(2, 1) << 1.0, 0.5).finished(), 2.0),
                                      Vec::Constant(1, 2.0));
  CHECK(g.sigma(0, 0) < g_hi.sigma(0, 0) - 0.05);
}

TEST_CASE("infeasible chance spec produces an infeasibility report") {
  const MSSModel toy = make_toy();
  ChanceSpec spec;
  spec.y_max = Vec::Constant(1, 0.5);
  spec.p_max = 1.0;  // probability 1 on unbounded support: unattainable
  ReferencePdf ref = ReferencePdf::from_gmm(toy.output_pdf(
      toy_equilibrium_z((Mat(2, 2) << 0.8, 0.1, 0.0, 0.7).finished(),
                        (Mat(2, 1) << 1.0, 0.5).finished(), 1.0),
      Vec::Constant(1, 1.0)));
  ref.freeze_samples(200, 7);
  SetpointSearchConfig cfg;
  cfg.starts = 4;
  cfg.seed = 6;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));
  const SetpointResult res = find_setpoint_pdf(toy, ref, spec, u_set, cfg);
  CHECK(!res.setpoint.has_value());
  CHECK(res.best_violation > 0.0);
  CHECK(res.best_margins.size() == 2);
}

TEST_CASE("controllability rank: canonical, zero-input, and constructed-deficient pairs") {
  // Companion-form controllable pair.
  Mat a(3, 3);
  a << 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.1, -0.2, 0.3;
  Mat b(3, 1);
  b << 0.0, 0.0, 1.0;
  auto [flag, rank] = controllability_rank(a, b);
  CHECK(flag);
  CHECK(rank == 3);

  // B = 0: rank 0.
  auto [flag0, rank0] = controllability_rank(a, Mat::Zero(3, 1));
  CHECK(!flag0);
  CHECK(rank0 == 0);

  // One uncontrollable mode built by similarity transform.
  Mat d = Mat::Zero(3, 3);
  d.diagonal() << 0.5, 0.6, 0.7;
  Mat b_dec(3, 1);
  b_dec << 1.0, 1.0, 0.0;  // third mode unreachable
  Mat t(3, 3);
  t << 1.0, 0.3, -0.2, 0.0, 1.0, 0.4, 0.2, -0.1, 1.0;
  const Mat a_sim = t * d * t.inverse();
  const Mat b_sim = t * b_dec;
  auto [flag2, rank2] = controllability_rank(a_sim, b_sim);
  CHECK(!flag2);
  CHECK(rank2 == 2);

  // Rank is invariant under similarity transforms.
  auto [flag3, rank3] = controllability_rank(d, b_dec);
  CHECK(rank3 == rank2);
}

TEST_CASE("check_controllability enforces the residual precondition") {
  const MSSModel toy = make_toy();
  Setpoint sp;
  sp.z_bar = Vec::Zero(2);
  sp.u_bar = Vec::Zero(1);
  sp.residual = 1.0;  // not an equilibrium
  CHECK_THROWS_AS((void)check_controllability(toy, sp), std::invalid_argument);
}

TEST_CASE("exclusion balls force the search elsewhere, and radius 0 is a no-op") {
  const MSSModel toy = make_toy();
  SetpointSearchConfig cfg;
  cfg.starts = 8;
  cfg.seed = 8;
  cfg.z_spread = 2.0;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));
  const SetpointResult first =
      find_setpoint_mean(toy, Vec::Constant(1, 1.0), 0.0, ChanceSpec{}, u_set, cfg);
  REQUIRE(first.setpoint.has_value());

  SUBCASE("radius zero changes nothing") {
    const auto noop = exclude_and_retry(*first.setpoint, 0.0);
    const SetpointResult again = find_setpoint_mean(toy, Vec::Constant(1, 1.0), 0.0,
                                                    ChanceSpec{}, u_set, cfg, {noop});
    REQUIRE(again.setpoint.has_value());
    CHECK((again.setpoint->z_bar - first.setpoint->z_bar).norm() <= 1e-9);
  }

  SUBCASE("excluding the found set-point returns a different one") {
    const auto ball = exclude_and_retry(*first.setpoint, 0.5);
    const SetpointResult second = find_setpoint_mean(toy, Vec::Constant(1, 1.0), 0.0,
                                                     ChanceSpec{}, u_set, cfg, {ball});
    REQUIRE(second.setpoint.has_value());
    Vec first_point(3);
    first_point << first.setpoint->z_bar, first.setpoint->u_bar;
    Vec second_point(3);
    second_point << second.setpoint->z_bar, second.setpoint->u_bar;
    CHECK((second_point - first_point).norm() >= 0.5 - 1e-6);
  }

  SUBCASE("excluding the whole reachable set reports infeasibility") {
    Setpoint center;
    center.z_bar = Vec::Zero(2);
    center.u_bar = Vec::Constant(1, 1.0);
    const auto ball = exclude_and_retry(center, 50.0);  // covers all of U x Z
    const SetpointResult none = find_setpoint_mean(toy, Vec::Constant(1, 1.0), 0.0,
                                                   ChanceSpec{}, u_set, cfg, {ball});
    CHECK(!none.setpoint.has_value());
  }
}

TEST_CASE("setpoint serialization round trip") {
  Setpoint sp;
  sp.z_bar = (Vec(2) << 0.25, -0.75).finished();
  sp.u_bar = Vec::Constant(1, 1.5);
  sp.residual = 1e-9;
  sp.objective = 0.125;
  sp.controllable = true;
  sp.rank = 2;
  const Setpoint back = Setpoint::from_json(sp.to_json());
  CHECK((back.z_bar - sp.z_bar).norm() == 0.0);
  CHECK(back.rank == 2);
  CHECK(back.controllable);
}

TEST_CASE("frozen-sample KL objective is deterministic across repeated solves") {
  const MSSModel toy = make_toy();
  Mat a(2, 2), b(2, 1);
  a << 0.8, 0.1, 0.0, 0.7;
  b << 1.0, 0.5;
  ReferencePdf ref = ReferencePdf::from_gmm(
      toy.output_pdf(toy_equilibrium_z(a, b, 1.0), Vec::Constant(1, 1.0)));
  ref.freeze_samples(200, 42);
  SetpointSearchConfig cfg;
  cfg.starts = 4;
  cfg.seed = 9;
  const InputPolytope u_set = InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0));
  const SetpointResult r1 = find_setpoint_pdf(toy, ref, ChanceSpec{}, u_set, cfg);
  const SetpointResult r2 = find_setpoint_pdf(toy, ref, ChanceSpec{}, u_set, cfg);
  REQUIRE(r1.setpoint.has_value());
  REQUIRE(r2.setpoint.has_value());
  CHECK(r1.setpoint->objective == r2.setpoint->objective);
  CHECK((r1.setpoint->z_bar - r2.setpoint->z_bar).norm() == 0.0);
}
