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

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mssmpc::ad {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Raised when a primitive produces a non-finite value. Carries the name of
/// the offending primitive.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string primitive, const std::string& detail)
      : std::runtime_error("non-finite result in primitive '" + primitive +
                           "': " + detail),
        primitive_(std::move(primitive)) {}
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

/// erf via the Cody rational approximations (abs error well below 1e-12).
double erf_rational(double x);

/// Standard normal CDF, expressed through erf.
double normal_cdf(double zeta);

class Tape;

/// Lightweight handle to a node on a Tape. Values are dense matrices;
/// scalars are 1x1.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape over matrix-valued nodes.
///
/// The expression graph is recorded dynamically and rebuilt per evaluation.
/// A Tape must only be used from the thread that created it; read-only
/// structures evaluated through per-thread tapes are safe to share.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reserve(std::size_t n) { nodes_.reserve(n); }
  std::size_t size() const { return nodes_.size(); }
  void clear();

  // Leaves. var() participates in differentiation, constant() does not.
  Var var(const Mat& value);
  Var var(double value);
  Var constant(const Mat& value);
  Var constant(double value);

  // Elementwise arithmetic (shapes must match).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);

  // Elementwise analytic primitives.
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sqrt(Var a);
  Var erf(Var a);
  Var square(Var a);
  /// Elementwise clamp; gradient is 1 strictly inside (lo, hi), else 0.
  Var clamp(Var a, double lo, double hi);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  /// a (m x n) plus row vector r (1 x n) broadcast over rows.
  Var add_row_vector(Var a, Var r);

  // Reductions.
  Var sum(Var a);       // -> 1x1
  Var mean(Var a);      // -> 1x1
  Var row_sum(Var a);   // (m x n) -> (m x 1)
  Var col_sum(Var a);   // (m x n) -> (1 x n)
  /// Per-row log(sum_j exp(a_ij)), numerically stable. (m x n) -> (m x 1).
  Var row_logsumexp(Var a);

  // Structure.
  Var block(Var a, int i, int j, int rows, int cols);
  Var hcat(Var a, Var b);
  Var vcat(Var a, Var b);
  /// Column-major reshape.
  Var reshape(Var a, int rows, int cols);

  Var dot(Var a, Var b) { return sum(mul(a, b)); }

  const Mat& val(Var v) const;
  double scalar(Var v) const;

  /// Reverse pass seeded with 1 on a scalar node.
  void backward(Var scalar_out);
  /// Reverse pass seeded with an explicit cotangent of out's shape.
  void backward(Var out, const Mat& seed);

  /// Adjoint accumulated by the most recent backward() (zeros if untouched).
  Mat grad(Var v) const;

 private:
  enum class Op : std::uint8_t {
    kLeaf, kConst, kAdd, kSub, kMul, kDiv, kNeg, kScale, kAddScalar,
    kTanh, kExp, kLog, kSqrt, kErf, kSquare, kClamp,
    kMatMul, kTranspose, kAddRowVec,
    kSum, kMean, kRowSum, kColSum, kRowLogSumExp,
    kBlock, kHCat, kVCat, kReshape,
  };

  struct Node {
    Mat value;
    Mat adjoint;
    std::uint64_t adj_stamp = 0;
    Op op = Op::kConst;
    int p0 = -1;
    int p1 = -1;
    double a0 = 0.0;
    double a1 = 0.0;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    bool needs_grad = false;
  };

  Var push(Node&& node, const char* primitive);
  const Node& node(Var v) const;
  void check_same_tape(Var a, Var b) const;
  void accumulate(int id, const Mat& contribution);
  Mat& adjoint_ref(int id);
  void backprop(int idx);

  std::vector<Node> nodes_;
  std::uint64_t stamp_ = 0;
};

// Operator sugar for readable model code.
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator*(double c, Var a) { return a.tape->scale(a, c); }
inline Var operator*(Var a, double c) { return a.tape->scale(a, c); }
inline Var operator+(Var a, double c) { return a.tape->add_scalar(a, c); }
inline Var operator+(double c, Var a) { return a.tape->add_scalar(a, c); }
inline Var operator-(Var a, double c) { return a.tape->add_scalar(a, -c); }
inline Var operator-(double c, Var a) { return a.tape->add_scalar(a.tape->neg(a), c); }
inline Var operator/(Var a, double c) { return a.tape->scale(a, 1.0 / c); }
inline Var operator/(double c, Var a) {
  const Mat& v = a.tape->val(a);
  return a.tape->div(a.tape->constant(Mat::Constant(v.rows(), v.cols(), c)), a);
}

/// Jacobian of a vector-valued function of a vector input, by one reverse
/// pass per output component. f receives x as an (n x 1) var node and must
/// return a column-vector node.
Mat jacobian_wrt_input(const std::function<Var(Tape&, Var)>& f, const Vec& x);

/// Value and gradient of a scalar function of a flat parameter vector.
struct GradResult {
  double value = 0.0;
  Vec grad;
};
GradResult grad_wrt_params(const std::function<Var(Tape&, Var)>& f,
                           const Vec& theta);

}  // namespace mssmpc::ad
