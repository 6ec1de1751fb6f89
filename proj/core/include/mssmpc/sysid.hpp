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
#include <utility>
#include <vector>

#include "mssmpc/mss_model.hpp"
#include "mssmpc/plant.hpp"

namespace mssmpc {

struct TrainConfig {
  int epochs_adam = 2000;          // one optimizer step per epoch on a fresh batch
  int epochs_quasi_newton = 2000;  // L-BFGS iterations on the full-batch loss; may be 0
  double lr = 1e-3;
  double lr_final_frac = 0.05;  // cosine decay floor as a fraction of lr
  int batch = 256;  // subsequences per step
  int t_sub = 50;   // prediction length per subsequence
  double l2 = 1e-6;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;  // tail share of each realization held out
  int val_every = 25;
  bool normalize = true;  // estimate signal normalisation from the data

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct FitReport {
  std::vector<double> loss_curve;                  // per epoch
  std::vector<std::pair<int, double>> val_curve;   // (epoch, validation NLL)
  double initial_val_nll = 0.0;
  double best_val_nll = 0.0;
  double final_train_nll = 0.0;
  double wall_clock_seconds = 0.0;
  int aborted_at_epoch = -1;  // divergence abort point, -1 when none
  std::string config_echo;

  std::string to_json() const;
};

/// A batch of training subsequences: window (r, s) uses samples
/// [s, s+lag) as encoder history and predicts [s+lag, s+lag+t_sub).
struct WindowBatch {
  const Dataset* data = nullptr;
  int lag = 0;
  int t_sub = 0;
  std::vector<std::pair<int, int>> windows;
};

/// Mean negative log-likelihood over the batch and horizon plus l2*|theta|^2.
double nll_loss(const MSSModel& m, const WindowBatch& batch, double l2);

/// Same loss with its exact reverse-mode gradient w.r.t. the packed
/// parameters. Chunked with a fixed reduction shape, so the result does not
/// depend on thread availability.
ad::GradResult nll_loss_grad(const MSSModel& m, const WindowBatch& batch, double l2);

/// Encoder-initialised multi-step NLL training: Adam phase then an optional
/// L-BFGS phase, returning the parameters with the best validation NLL seen.
std::pair<MSSModel, FitReport> train(const MSSModel& m, const Dataset& data,
                                     const TrainConfig& cfg);

/// Average log-likelihood per predicted point over an ensemble: z0 from the
/// first `lag` samples of each realization, then a pure rollout (no
/// re-encoding) over n_test_bar steps.
double mean_log_likelihood(const MSSModel& m, const Dataset& ensemble, int n_test_bar);

/// Vasicek spacing estimator with window m = floor(sqrt(S)) and the standard
/// (Wieczorkowski-Grzegorzewski) bias correction. Ties are broken by an
/// infinitesimal deterministic jitter.
double vasicek_entropy(Vec samples);

/// Log-likelihood upper limit: minus the mean Vasicek entropy over the
/// prediction steps [first_step, first_step + num_steps).
double entropy_upper_limit(const Dataset& ensemble, int first_step, int num_steps);

}  // namespace mssmpc
