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

#include "mssmpc/gmm.hpp"

using namespace mssmpc;

namespace {
DiagGMM mixture(int n_g) {
  Rng rng(7);
  Vec w(n_g), mu(n_g), sg(n_g);
  for (int i = 0; i < n_g; ++i) {
    w(i) = rng.uniform(0.2, 1.0);
    mu(i) = rng.uniform(-2.0, 2.0);
    sg(i) = rng.uniform(0.05, 0.5);
  }
  w /= w.sum();
  return DiagGMM::scalar(w, mu, sg);
}
}  // namespace

static void BM_ProbLeq(benchmark::State& state) {
  const DiagGMM g = mixture(static_cast<int>(state.range(0)));
  const Vec y = Vec::Constant(1, 0.7);
  for (auto _ : state) benchmark::DoNotOptimize(g.prob_leq(y));
}
BENCHMARK(BM_ProbLeq)->Arg(1)->Arg(12);

static void BM_LogPdf(benchmark::State& state) {
  const DiagGMM g = mixture(static_cast<int>(state.range(0)));
  const Vec y = Vec::Constant(1, 0.3);
  for (auto _ : state) benchmark::DoNotOptimize(g.log_pdf(y));
}
BENCHMARK(BM_LogPdf)->Arg(1)->Arg(12);

static void BM_Sample(benchmark::State& state) {
  const DiagGMM g = mixture(12);
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(g.sample(static_cast<int>(state.range(0)), rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sample)->Arg(100)->Arg(10000);

BENCHMARK_MAIN();
