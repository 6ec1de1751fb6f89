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

#include "mssmpc/mlp.hpp"

using namespace mssmpc;

static void BM_MlpForwardBatch(benchmark::State& state) {
  Rng rng(1);
  const Mlp net = Mlp::glorot({4, 32, 32, 12}, rng);
  const Mat x = Mat::NullaryExpr(state.range(0), 4, [&]() { return rng.uniform(-1, 1); });
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.forward(x));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MlpForwardBatch)->Arg(1)->Arg(32)->Arg(256);

static void BM_TapeGradBatch(benchmark::State& state) {
  Rng rng(2);
  const Mlp net = Mlp::glorot({4, 32, 32, 12}, rng);
  const ParamVector pv = ParamVector::pack({{"net", &net}});
  const Mat x = Mat::NullaryExpr(state.range(0), 4, [&]() { return rng.uniform(-1, 1); });
  for (auto _ : state) {
    ad::Tape tape;
    const ad::Var theta = tape.var(Mat(pv.flat()));
    const auto vars = ad_ops::bind_from_flat(tape, theta, pv, "net");
    const ad::Var out = tape.sum(tape.square(ad_ops::forward(tape, vars, tape.constant(x))));
    tape.backward(out);
    benchmark::DoNotOptimize(tape.grad(theta));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TapeGradBatch)->Arg(32)->Arg(256);

BENCHMARK_MAIN();
