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

#include <benchmark/benchmark.h>

#include "mssmpc/smpc.hpp"
#include "mssmpc/terminal.hpp"

using namespace mssmpc;

namespace {

struct Fixture {
  MSSModel model;
  Setpoint sp;
  TerminalDesign design;

  Fixture() {
    Mat a(2, 2);
    a << 0.8, 0.1, 0.0, 0.7;
    Mat b(2, 1);
    b << 1.0, 0.5;
    Mat c(1, 2);
    c << 1.0, 0.5;
    Mlp f;
    Mat w(3, 2);
    w.topRows(2) = a.transpose();
    w.bottomRows(1) = b.transpose();
    f.layers.push_back({w, Mat::Zero(1, 2)});
    model.n_z = 2;
    model.n_u = 1;
    model.n_y = 1;
    model.n_g = 1;
    model.lag = 1;
    model.f_net = f;
    Mlp enc;
    enc.layers.push_back({Mat::Zero(2, 2), Mat::Zero(1, 2)});
    model.enc_net = enc;
    Mlp wn;
    wn.layers.push_back({Mat::Zero(3, 1), Mat::Zero(1, 1)});
    model.w_net = wn;
    Mlp mu;
    Mat wmu = Mat::Zero(3, 1);
    wmu.topRows(2) = c.transpose();
    mu.layers.push_back({wmu, Mat::Zero(1, 1)});
    model.mu_net = mu;
    Mlp sg;
    sg.layers.push_back({Mat::Zero(3, 1), Mat::Constant(1, 1, std::log(0.1))});
    model.sigma_net = sg;
    model.u_mean = Vec::Zero(1);
    model.u_std = Vec::Ones(1);
    model.y_mean = Vec::Zero(1);
    model.y_std = Vec::Ones(1);

    sp.u_bar = Vec::Constant(1, 0.3);
    sp.z_bar = (Mat::Identity(2, 2) - a).inverse() * b * sp.u_bar;
    sp.residual = 0.0;
    TerminalConfig tcfg;
    tcfg.n_samples = 500;
    ChanceSpec spec;
    spec.y_max = Vec::Constant(1, 3.0);
    spec.p_max = 0.9;
    design = design_terminal(model, sp, Mat::Identity(2, 2), Mat::Identity(1, 1), spec,
                             InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0)), tcfg);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

static void BM_OcpColdStart(benchmark::State& state) {
  const Fixture& f = fixture();
  ChanceSpec spec;
  spec.y_max = Vec::Constant(1, 3.0);
  spec.p_max = 0.9;
  SetpointMPC ctrl(f.model, f.sp, f.design, static_cast<int>(state.range(0)),
                   Mat::Identity(2, 2), Mat::Identity(1, 1), spec,
                   InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0)));
  const Vec z0 = f.sp.z_bar + (Vec(2) << 0.3, -0.2).finished();
  for (auto _ : state) {
    ctrl.reset_warm();
    benchmark::DoNotOptimize(ctrl.ocp(z0));
  }
}
BENCHMARK(BM_OcpColdStart)->Arg(5)->Arg(25);

static void BM_OcpWarmLoop(benchmark::State& state) {
  const Fixture& f = fixture();
  ChanceSpec spec;
  spec.y_max = Vec::Constant(1, 3.0);
  spec.p_max = 0.9;
  SetpointMPC ctrl(f.model, f.sp, f.design, static_cast<int>(state.range(0)),
                   Mat::Identity(2, 2), Mat::Identity(1, 1), spec,
                   InputPolytope::box(Vec::Zero(1), Vec::Constant(1, 2.0)));
  Vec z = f.sp.z_bar + (Vec(2) << 0.3, -0.2).finished();
  for (auto _ : state) {
    const MPCStep step = ctrl.ocp(z);
    z = step.z_pred.at(1);
    benchmark::DoNotOptimize(step.j_star);
  }
}
BENCHMARK(BM_OcpWarmLoop)->Arg(5)->Arg(25);

BENCHMARK_MAIN();
