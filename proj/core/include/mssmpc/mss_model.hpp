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

#include <string>
#include <vector>

#include "mssmpc/gmm.hpp"
#include "mssmpc/mlp.hpp"

namespace mssmpc {

/// Meta-state-space model: deterministic transition over a learned state z,
/// an encoder that estimates z from the last `lag` input-output samples, and
/// a Gaussian-mixture output head.
///
/// All public interfaces are in raw signal units; input/output normalisation
/// statistics are stored with the model and applied internally. A loaded
/// model is immutable and safe to evaluate from many threads.
struct MSSModel {
  int n_z = 3;
  int n_u = 1;
  int n_y = 1;
  int n_g = 12;
  int lag = 15;

  Mlp enc_net;    // lag*(n_u+n_y) -> n_z
  Mlp f_net;      // n_z+n_u -> n_z
  Mlp w_net;      // n_z+n_u -> n_G
  Mlp mu_net;     // n_z+n_u -> n_G*n_y (dimension-major columns)
  Mlp sigma_net;  // n_z+n_u -> n_G*n_y

  double sigma_cap = 1e3;
  Vec u_mean, u_std, y_mean, y_std;

  void validate() const;

  /// Default architecture (encoder and heads 2x32, transition 2x8, tanh).
  static MSSModel create(int n_z, int n_u, int n_y, int n_g, int lag,
                         std::uint64_t seed);

  /// Histories are (lag x n_u) and (lag x n_y), most recent sample last.
  /// The encoder input is the time-ordered u block followed by the y block.
  Vec encode(const Mat& u_hist, const Mat& y_hist) const;

  Vec step(const Vec& z, const Vec& u) const;

  DiagGMM output_pdf(const Vec& z, const Vec& u) const;

  struct Rollout {
    std::vector<Vec> states;    // T+1 meta-states
    std::vector<DiagGMM> pdfs;  // T output distributions
  };
  /// u_seq is (T x n_u); pdf_k corresponds to (z_k, u_k).
  Rollout rollout(const Vec& z0, const Mat& u_seq) const;

  ParamVector params() const;
  void set_params(const ParamVector& pv);

  std::string to_json() const;
  static MSSModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static MSSModel load(const std::string& path);
};

/// Jacobians of the transition at (z, u): A = df/dz, B = df/du (raw input
/// units).
std::pair<Mat, Mat> linearize(const MSSModel& m, const Vec& z, const Vec& u);

namespace ad_ops {

/// Tape bindings of a model's networks plus the dimensions and normalisation
/// needed to evaluate them.
struct ModelVars {
  MlpVars enc, f, w, mu, sigma;
  const MSSModel* model = nullptr;
};

/// Parameters enter the tape as constants (differentiate w.r.t. inputs only).
ModelVars bind_constant(ad::Tape& tape, const MSSModel& m);

/// Parameters enter as slices of a flat theta variable (training path).
ModelVars bind_params(ad::Tape& tape, const MSSModel& m, ad::Var theta,
                      const ParamVector& layout);

/// hist is (B x lag*(n_u+n_y)) in raw units, u block then y block -> (B x n_z).
ad::Var model_encode(ad::Tape& tape, const ModelVars& mv, ad::Var hist);

/// (B x n_z), (B x n_u) raw -> next meta-state (B x n_z).
ad::Var model_step(ad::Tape& tape, const ModelVars& mv, ad::Var z, ad::Var u);

/// Output mixture head at (z, u); raw units.
GmmVars model_output(ad::Tape& tape, const ModelVars& mv, ad::Var z, ad::Var u);

}  // namespace ad_ops

}  // namespace mssmpc
