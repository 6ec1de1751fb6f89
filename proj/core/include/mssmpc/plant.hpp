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

#include "mssmpc/ad.hpp"
#include "mssmpc/rng.hpp"

namespace mssmpc {

using ad::Mat;
using ad::Vec;

/// State of the stochastic benchmark system.
struct PlantState {
  double x1 = 0.0;
  double x2 = 0.0;
};

/// One transition of the benchmark system
///   x1+ = (0.2 + 0.8 exp[-(x2+v)^2]) x1 + 0.3 sin(x2) u
///   x2+ = -0.4 x1 + (0.3 + 0.3 sin(w)) x2 + 0.4 u
/// with v ~ U(-0.1, 0.1) and w ~ U(-pi, pi). The output is y = x1.
/// freeze_noise pins v = w = 0 for oracle tests.
///
/// The x2 balance at frozen noise gives x1 = 0.75 x2 + u, so the primary
/// equilibrium family is y ~= u with x2 ~= 0 (nearly noise-free output
/// there), plus a second family with x2 != 0 whose output pdf is widened
/// and shaped by the sin(w) noise.
PlantState plant_step(const PlantState& x, double u, Rng& rng,
                      bool freeze_noise = false);

/// Steps each excitation level is held for during data generation.
inline constexpr int kInputDwell = 25;

/// Input-output data generated from the benchmark system. All realizations
/// share the single input sequence; realization i consumes rng stream i+1 of
/// the dataset seed, so generation parallelises with a deterministic result.
struct Dataset {
  Mat u;  // (len x 1)
  Mat y;  // (reps x len)
  std::uint64_t seed = 0;
  double u_low = 0.0;
  double u_high = 5.0;

  int length() const { return static_cast<int>(u.rows()); }
  int realizations() const { return static_cast<int>(y.rows()); }

  /// Writes manifest.json plus one CSV per realization into dir.
  void save(const std::string& dir) const;
  static Dataset load(const std::string& dir);
};

/// Identification data: input u_k ~ U(u_low, u_high), initial states
/// x1, x2 ~ U(0, 1), `reps` realizations of the same input sequence.
Dataset generate_training_data(std::uint64_t seed, int len = 8000, int reps = 10,
                               double u_low = 0.0, double u_high = 5.0);

/// Test ensemble: a fresh input sequence applied S times from independent
/// initial states.
Dataset generate_test_ensemble(std::uint64_t seed, int horizon, int s = 1000,
                               double u_low = 0.0, double u_high = 5.0);

}  // namespace mssmpc
