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

#include <filesystem>

#include "mssmpc/mss_model.hpp"
#include "support/test_support.hpp"

using namespace mssmpc;
using mssmpc::testing::finite_diff_jacobian;
using mssmpc::testing::max_rel_err;

namespace {

MSSModel small_random_model(std::uint64_t seed) {
  MSSModel m = MSSModel::create(3, 1, 1, 4, 5, seed);
  m.u_mean = Vec::Constant(1, 2.5);
  m.u_std = Vec::Constant(1, 1.4);
  m.y_mean = Vec::Constant(1, 0.8);
  m.y_std = Vec::Constant(1, 0.6);
  return m;
}

}  // namespace

TEST_CASE("encode: zero-weight encoder returns its bias for any history") {
  MSSModel m = small_random_model(1);
  m.enc_net = Mlp::zeros({m.lag * 2, 8, m.n_z});
  m.enc_net.layers.back().b << 0.1, -0.2, 0.3;
  Mat u_hist = Mat::Random(m.lag, 1), y_hist = Mat::Random(m.lag, 1);
  const Vec z = m.encode(u_hist, y_hist);
  CHECK(z(0) == doctest::Approx(0.1));
  CHECK(z(1) == doctest::Approx(-0.2));
  CHECK(z(2) == doctest::Approx(0.3));
}

TEST_CASE("encode: history order matters on a random model") {
  const MSSModel m = small_random_model(7);
  Mat u_hist(m.lag, 1), y_hist(m.lag, 1);
  for (int t = 0; t < m.lag; ++t) {
    u_hist(t, 0) = 0.3 * t;
    y_hist(t, 0) = std::sin(0.7 * t);
  }
  const Vec z = m.encode(u_hist, y_hist);
  const Vec z_rev = m.encode(u_hist.colwise().reverse(), y_hist.colwise().reverse());
  CHECK((z - z_rev).norm() > 1e-6);
}

TEST_CASE("encode: wrong history length is a contract violation") {
  const MSSModel m = small_random_model(2);
  CHECK_THROWS_AS((void)m.encode(Mat::Zero(m.lag - 1, 1), Mat::Zero(m.lag, 1)),
                  std::invalid_argument);
}

TEST_CASE("step: zero-weight transition is the constant map to its bias") {
  MSSModel m = small_random_model(3);
  m.f_net = Mlp::zeros({m.n_z + 1, 4, m.n_z});
  m.f_net.layers.back().b << 1.0, 2.0, 3.0;
  const Vec z1 = m.step(Vec::Random(3), Vec::Random(1));
  const Vec z2 = m.step(Vec::Zero(3), Vec::Zero(1));
  CHECK((z1 - z2).norm() == 0.0);
  CHECK(z1(2) == doctest::Approx(3.0));
}

TEST_CASE("step and output_pdf are bit-deterministic") {
  const MSSModel m = small_random_model(4);
  const Vec z = (Vec(3) << 0.2, -0.4, 0.6).finished();
  const Vec u = Vec::Constant(1, 1.7);
  const Vec s1 = m.step(z, u), s2 = m.step(z, u);
  CHECK((s1.array() == s2.array()).all());
  const DiagGMM g1 = m.output_pdf(z, u), g2 = m.output_pdf(z, u);
  CHECK((g1.w.array() == g2.w.array()).all());
  CHECK((g1.mu.array() == g2.mu.array()).all());
  CHECK((g1.sigma.array() == g2.sigma.array()).all());
}

TEST_CASE("output head produces a valid mixture by construction") {
  const MSSModel m = small_random_model(5);
  Rng rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    Vec z(3);
    for (int i = 0; i < 3; ++i) z(i) = rng.uniform(-2.0, 2.0);
    const DiagGMM g = m.output_pdf(z, Vec::Constant(1, rng.uniform(0.0, 5.0)));
    CHECK(std::abs(g.w.sum() - 1.0) <= 1e-10);
    CHECK((g.sigma.array() >= kSigmaFloor).all());
    g.validate();
  }
}

TEST_CASE("rollout: composition property and loop oracle") {
  const MSSModel m = small_random_model(6);
  Rng rng(10);
  const Vec z0 = (Vec(3) << 0.1, 0.2, -0.3).finished();
  Mat u_seq(7, 1);
  for (int k = 0; k < 7; ++k) u_seq(k, 0) = rng.uniform(0.0, 5.0);

  const auto full = m.rollout(z0, u_seq);

  // Step-by-step loop oracle.
  Vec z = z0;
  for (int k = 0; k < 7; ++k) {
    const DiagGMM g = m.output_pdf(z, u_seq.row(k).transpose());
    CHECK((full.pdfs[static_cast<std::size_t>(k)].mu - g.mu).cwiseAbs().maxCoeff() == 0.0);
    z = m.step(z, u_seq.row(k).transpose());
    CHECK((full.states[static_cast<std::size_t>(k + 1)] - z).cwiseAbs().maxCoeff() == 0.0);
  }

  // Split composition at every point.
  for (int split = 1; split < 7; ++split) {
    const auto head = m.rollout(z0, u_seq.topRows(split));
    const auto tail = m.rollout(head.states.back(), u_seq.bottomRows(7 - split));
    CHECK((tail.states.back() - full.states.back()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("rollout: constant transition map produces constant states") {
  MSSModel m = small_random_model(8);
  m.f_net = Mlp::zeros({m.n_z + 1, 4, m.n_z});
  m.f_net.layers.back().b << 0.5, 0.5, 0.5;
  const auto roll = m.rollout(Vec::Zero(3), Mat::Zero(4, 1));
  for (std::size_t k = 1; k < roll.states.size(); ++k)
    CHECK((roll.states[k].array() == 0.5).all());
}

TEST_CASE("serialization: model file round trip reproduces pdf curves to 1e-9") {
  const MSSModel m = small_random_model(11);
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "mssmpc_model_test.json").string();
  m.save(path);
  const MSSModel back = MSSModel::load(path);
  fs::remove(path);

  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    Vec z(3);
    for (int i = 0; i < 3; ++i) z(i) = rng.uniform(-1.5, 1.5);
    const Vec u = Vec::Constant(1, rng.uniform(0.0, 5.0));
    const DiagGMM a = m.output_pdf(z, u);
    const DiagGMM b = back.output_pdf(z, u);
    for (double y = -2.0; y <= 4.0; y += 0.21)
      CHECK(std::abs(a.pdf(Vec::Constant(1, y)) - b.pdf(Vec::Constant(1, y))) <= 1e-9);
  }
  CHECK((m.params().flat() - back.params().flat()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tape path agrees with the numeric path exactly") {
  const MSSModel m = small_random_model(13);
  const Vec z = (Vec(3) << 0.3, -0.6, 0.9).finished();
  const Vec u = Vec::Constant(1, 2.2);

  ad::Tape tape;
  const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, m);
  const ad::Var zv = tape.constant(Mat(z.transpose()));
  const ad::Var uv = tape.constant(Mat(u.transpose()));
  const ad::Var next = ad_ops::model_step(tape, mv, zv, uv);
  CHECK((tape.val(next).transpose() - m.step(z, u)).cwiseAbs().maxCoeff() <= 1e-14);

  const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, zv, uv);
  const DiagGMM from_tape = ad_ops::gmm_value(tape, g);
  const DiagGMM numeric = m.output_pdf(z, u);
  CHECK((from_tape.w - numeric.w).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((from_tape.mu - numeric.mu).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((from_tape.sigma - numeric.sigma).cwiseAbs().maxCoeff() <= 1e-12);

  // Encoder path too.
  Mat u_hist = Mat::Random(m.lag, 1), y_hist = Mat::Random(m.lag, 1);
  Mat hist(1, m.lag * 2);
  hist << u_hist.transpose(), y_hist.transpose();
  const ad::Var zed = ad_ops::model_encode(tape, mv, tape.constant(hist));
  CHECK((tape.val(zed).transpose() - m.encode(u_hist, y_hist)).cwiseAbs().maxCoeff() <=
        1e-14);
}

TEST_CASE("output_pdf gradient w.r.t. z matches finite differences") {
  const MSSModel m = small_random_model(14);
  const Vec u = Vec::Constant(1, 1.1);
  const Vec z0 = (Vec(3) << 0.4, 0.1, -0.2).finished();

  const auto fn = [&](ad::Tape& t, ad::Var zflat) {
    const ad_ops::ModelVars mv = ad_ops::bind_constant(t, m);
    const ad::Var z_row = t.transpose(zflat);
    const ad_ops::GmmVars g = ad_ops::model_output(t, mv, z_row,
                                                   t.constant(Mat(u.transpose())));
    return ad_ops::gmm_prob_leq(t, g, Vec::Constant(1, 1.5)) +
           t.sum(ad_ops::gmm_mean(t, g));
  };
  const auto res = ad::grad_wrt_params(fn, z0);
  const Vec fd = mssmpc::testing::finite_diff_grad(
      [&](const Vec& z) {
        const DiagGMM g = m.output_pdf(z, u);
        return g.prob_leq(Vec::Constant(1, 1.5)) + g.moments().first(0);
      },
      z0);
  CHECK(max_rel_err(res.grad, fd) <= 1e-5);
}

TEST_CASE("linearize matches a finite-difference Jacobian of the step map") {
  const MSSModel m = small_random_model(15);
  const Vec z = (Vec(3) << 0.5, -0.1, 0.7).finished();
  const Vec u = Vec::Constant(1, 3.0);
  const auto [a, b] = linearize(m, z, u);
  const Mat fd = finite_diff_jacobian(
      [&](const Vec& x) { return Vec(m.step(x.head(3), x.tail(1))); },
      (Vec(4) << z, u).finished());
  CHECK((a - fd.leftCols(3)).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK((b - fd.rightCols(1)).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("linear toy model realizes its defining matrices exactly") {
  Mat a(2, 2);
  a << 0.8, 0.1, 0.0, 0.7;
  Mat b(2, 1);
  b << 1.0, 0.5;
  Mat c(1, 2);
  c << 1.0, 0.0;
  const MSSModel toy = mssmpc::testing::linear_toy_model(a, b, c, 0.1);
  const Vec z = (Vec(2) << 0.3, -0.4).finished();
  const Vec u = Vec::Constant(1, 0.9);
  CHECK((toy.step(z, u) - (a * z + b * u)).cwiseAbs().maxCoeff() <= 1e-14);
  const DiagGMM g = toy.output_pdf(z, u);
  CHECK(g.mu(0, 0) == doctest::Approx((c * z)(0)).epsilon(1e-12));
  CHECK(g.sigma(0, 0) == doctest::Approx(0.1).epsilon(1e-12));
  const auto [al, bl] = linearize(toy, z, u);
  CHECK((al - a).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((bl - b).cwiseAbs().maxCoeff() <= 1e-9);
}
