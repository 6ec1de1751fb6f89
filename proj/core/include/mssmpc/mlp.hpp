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
#include <utility>
#include <vector>

#include "mssmpc/ad.hpp"
#include "mssmpc/rng.hpp"

namespace mssmpc {

using ad::Mat;
using ad::Vec;

/// Fully connected feedforward network. Hidden layers use tanh, the output
/// layer is linear. Weights are stored (in x out) so a batch of inputs is a
/// row-major stack: y = x * W + b.
struct Mlp {
  struct Layer {
    Mat W;  // (in x out)
    Mat b;  // (1 x out)
  };
  std::vector<Layer> layers;

  int in_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().W.rows()); }
  int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.cols()); }
  int num_params() const;

  /// Throws if consecutive layer dimensions do not chain or if any entry is
  /// non-finite.
  void validate() const;

  /// Batch forward pass; x has one input per row.
  Mat forward(const Mat& x) const;

  /// Glorot-initialised network with the given layer widths, e.g.
  /// {4, 32, 32, 12}.
  static Mlp glorot(const std::vector<int>& dims, Rng& rng);

  /// All-zero weights and biases (used by tests and hand-built toys).
  static Mlp zeros(const std::vector<int>& dims);
};

/// Flat view over a set of named networks, with the layout needed to map the
/// vector back onto each parameter matrix. Matrices are flattened
/// column-major.
class ParamVector {
 public:
  struct Entry {
    std::string name;  // "<net>/L<k>/W" or ".../b"
    int rows = 0;
    int cols = 0;
    int offset = 0;
  };

  ParamVector() = default;

  static ParamVector pack(const std::vector<std::pair<std::string, const Mlp*>>& nets);

  /// Writes the flat values back into the networks. Exact inverse of pack.
  void scatter(const std::vector<std::pair<std::string, Mlp*>>& nets) const;

  const Vec& flat() const { return flat_; }
  Vec& flat() { return flat_; }
  const std::vector<Entry>& layout() const { return layout_; }
  int size() const { return static_cast<int>(flat_.size()); }

  const Entry& entry(const std::string& name) const;

  std::string to_json() const;
  static ParamVector from_json(const std::string& text);

 private:
  Vec flat_;
  std::vector<Entry> layout_;
};

namespace ad_ops {

/// Tape-side parameter binding of one network: either constants (when not
/// differentiating w.r.t. parameters) or slices of a flat variable node.
struct MlpVars {
  std::vector<std::pair<ad::Var, ad::Var>> layers;  // (W, b)
};

MlpVars bind_constant(ad::Tape& tape, const Mlp& net);

/// Binds a network's parameters as views into a flat (n x 1) theta node,
/// using the pack() layout. net_prefix selects entries "<net_prefix>/...".
MlpVars bind_from_flat(ad::Tape& tape, ad::Var theta, const ParamVector& layout,
                       const std::string& net_prefix);

/// Batch forward through the bound network; x rows are inputs.
ad::Var forward(ad::Tape& tape, const MlpVars& net, ad::Var x);

}  // namespace ad_ops

}  // namespace mssmpc
