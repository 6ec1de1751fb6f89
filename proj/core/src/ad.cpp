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

#include "mssmpc/ad.hpp"

#include <cmath>

namespace mssmpc::ad {

namespace {

// Rational Chebyshev approximations for erf/erfc after W. J. Cody,
// Math. Comp. 23 (1969), 631-638 (the SPECFUN coefficient set).
constexpr double kA[5] = {3.1611237438705656, 113.864154151050156,
                          377.485237685302021, 3209.37758913846947,
                          0.185777706184603153};
constexpr double kB[4] = {23.6012909523441209, 244.024637934444173,
                          1282.61652607737228, 2844.23683343917062};
constexpr double kC[9] = {0.564188496988670089, 8.88314979438837594,
                          66.1191906371416295,  298.635138197400131,
                          881.95222124176909,   1712.04761263407058,
                          2051.07837782607147,  1230.33935479799725,
                          2.15311535474403846e-8};
constexpr double kD[8] = {15.7449261107098347, 117.693950891312499,
                          537.181101862009858, 1621.38957456669019,
                          3290.79923573345963, 4362.61909014324716,
                          3439.36767414372164, 1230.33935480374942};
constexpr double kP[6] = {0.305326634961232344, 0.360344899949804439,
                          0.125781726111229246, 0.0160837851487422766,
                          6.58749161529837803e-4, 0.0163153871373020978};
constexpr double kQ[5] = {2.56852019228982242, 1.87295284992346047,
                          0.527905102951428412, 0.0605183413124413191,
                          0.00233520497626869185};
constexpr double kSqrtPiInv = 0.56418958354775628695;

double erfc_tail(double y) {
  // erfc(y) for y > 0.46875.
  double result;
  if (y <= 4.0) {
    double xnum = kC[8] * y;
    double xden = y;
    for (int i = 0; i < 7; ++i) {
      xnum = (xnum + kC[i]) * y;
      xden = (xden + kD[i]) * y;
    }
    result = (xnum + kC[7]) / (xden + kD[7]);
  } else {
    if (y >= 26.543) return 0.0;
    const double ysq = 1.0 / (y * y);
    double xnum = kP[5] * ysq;
    double xden = ysq;
    for (int i = 0; i < 4; ++i) {
      xnum = (xnum + kP[i]) * ysq;
      xden = (xden + kQ[i]) * ysq;
    }
    result = ysq * (xnum + kP[4]) / (xden + kQ[4]);
    result = (kSqrtPiInv - result) / y;
  }
  // Split y^2 to preserve accuracy of exp(-y^2) for large y.
  const double ysq = std::floor(y * 16.0) / 16.0;
  const double del = (y - ysq) * (y + ysq);
  return std::exp(-ysq * ysq) * std::exp(-del) * result;
}

}  // namespace

double erf_rational(double x) {
  const double y = std::fabs(x);
  if (y <= 0.46875) {
    const double ysq = (y > 1.11e-16) ? y * y : 0.0;
    double xnum = kA[4] * ysq;
    double xden = ysq;
    for (int i = 0; i < 3; ++i) {
      xnum = (xnum + kA[i]) * ysq;
      xden = (xden + kB[i]) * ysq;
    }
    return x * (xnum + kA[3]) / (xden + kB[3]);
  }
  const double tail = erfc_tail(y);
  const double r = (0.5 - tail) + 0.5;
  return x < 0.0 ? -r : r;
}

double normal_cdf(double zeta) {
  return 0.5 * (1.0 + erf_rational(zeta * 0.7071067811865475244));
}

void Tape::clear() {
  nodes_.clear();
  stamp_ = 0;
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("ad: Var does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::check_same_tape(Var a, Var b) const {
  if (a.tape != this || b.tape != this)
    throw std::invalid_argument("ad: operands recorded on different tapes");
}

Var Tape::push(Node&& n, const char* primitive) {
  if (!n.value.allFinite()) throw NumericError(primitive, "node value");
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::var(const Mat& value) {
  Node n;
  n.value = value;
  n.op = Op::kLeaf;
  n.needs_grad = true;
  return push(std::move(n), "var");
}

Var Tape::var(double value) { return var(Mat::Constant(1, 1, value)); }

Var Tape::constant(const Mat& value) {
  Node n;
  n.value = value;
  n.op = Op::kConst;
  return push(std::move(n), "constant");
}

Var Tape::constant(double value) { return constant(Mat::Constant(1, 1, value)); }

namespace {
void require_same_shape(const Mat& a, const Mat& b, const char* primitive) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string("ad: shape mismatch in ") + primitive);
}
}  // namespace

#define MSSMPC_BINARY_PROLOGUE(a, b, name)                  \
  check_same_tape(a, b);                                    \
  const Node& na = nodes_[static_cast<std::size_t>(a.id)];  \
  const Node& nb = nodes_[static_cast<std::size_t>(b.id)];  \
  require_same_shape(na.value, nb.value, name);             \
  Node n;                                                   \
  n.p0 = a.id;                                              \
  n.p1 = b.id;                                              \
  n.needs_grad = na.needs_grad || nb.needs_grad;

#define MSSMPC_UNARY_PROLOGUE(a)                            \
  const Node& na = node(a);                                 \
  Node n;                                                   \
  n.p0 = a.id;                                              \
  n.needs_grad = na.needs_grad;

Var Tape::add(Var a, Var b) {
  MSSMPC_BINARY_PROLOGUE(a, b, "add");
  n.op = Op::kAdd;
  n.value = na.value + nb.value;
  return push(std::move(n), "add");
}

Var Tape::sub(Var a, Var b) {
  MSSMPC_BINARY_PROLOGUE(a, b, "sub");
  n.op = Op::kSub;
  n.value = na.value - nb.value;
  return push(std::move(n), "sub");
}

Var Tape::mul(Var a, Var b) {
  MSSMPC_BINARY_PROLOGUE(a, b, "mul");
  n.op = Op::kMul;
  n.value = na.value.cwiseProduct(nb.value);
  return push(std::move(n), "mul");
}

Var Tape::div(Var a, Var b) {
  MSSMPC_BINARY_PROLOGUE(a, b, "div");
  n.op = Op::kDiv;
  n.value = na.value.cwiseQuotient(nb.value);
  return push(std::move(n), "div");
}

Var Tape::neg(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kNeg;
  n.value = -na.value;
  return push(std::move(n), "neg");
}

Var Tape::scale(Var a, double c) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kScale;
  n.a0 = c;
  n.value = c * na.value;
  return push(std::move(n), "scale");
}

Var Tape::add_scalar(Var a, double c) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kAddScalar;
  n.a0 = c;
  n.value = na.value.array() + c;
  return push(std::move(n), "add_scalar");
}

Var Tape::tanh(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kTanh;
  n.value = na.value.array().tanh();
  return push(std::move(n), "tanh");
}

Var Tape::exp(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kExp;
  n.value = na.value.array().exp();
  return push(std::move(n), "exp");
}

Var Tape::log(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kLog;
  n.value = na.value.array().log();
  return push(std::move(n), "log");
}

Var Tape::sqrt(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kSqrt;
  n.value = na.value.array().sqrt();
  return push(std::move(n), "sqrt");
}

Var Tape::erf(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kErf;
  n.value = na.value.unaryExpr([](double x) { return erf_rational(x); });
  return push(std::move(n), "erf");
}

Var Tape::square(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kSquare;
  n.value = na.value.array().square();
  return push(std::move(n), "square");
}

Var Tape::clamp(Var a, double lo, double hi) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kClamp;
  n.a0 = lo;
  n.a1 = hi;
  n.value = na.value.array().max(lo).min(hi);
  return push(std::move(n), "clamp");
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = nodes_[static_cast<std::size_t>(a.id)];
  const Node& nb = nodes_[static_cast<std::size_t>(b.id)];
  if (na.value.cols() != nb.value.rows())
    throw std::invalid_argument("ad: inner dimension mismatch in matmul");
  Node n;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.op = Op::kMatMul;
  n.value = na.value * nb.value;
  return push(std::move(n), "matmul");
}

Var Tape::transpose(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kTranspose;
  n.value = na.value.transpose();
  return push(std::move(n), "transpose");
}

Var Tape::add_row_vector(Var a, Var r) {
  check_same_tape(a, r);
  const Node& na = nodes_[static_cast<std::size_t>(a.id)];
  const Node& nr = nodes_[static_cast<std::size_t>(r.id)];
  if (nr.value.rows() != 1 || nr.value.cols() != na.value.cols())
    throw std::invalid_argument("ad: add_row_vector expects (1 x n) row operand");
  Node n;
  n.p0 = a.id;
  n.p1 = r.id;
  n.needs_grad = na.needs_grad || nr.needs_grad;
  n.op = Op::kAddRowVec;
  n.value = na.value.rowwise() + nr.value.row(0);
  return push(std::move(n), "add_row_vector");
}

Var Tape::sum(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kSum;
  n.value = Mat::Constant(1, 1, na.value.sum());
  return push(std::move(n), "sum");
}

Var Tape::mean(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kMean;
  n.value = Mat::Constant(1, 1, na.value.mean());
  return push(std::move(n), "mean");
}

Var Tape::row_sum(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kRowSum;
  n.value = na.value.rowwise().sum();
  return push(std::move(n), "row_sum");
}

Var Tape::col_sum(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kColSum;
  n.value = na.value.colwise().sum();
  return push(std::move(n), "col_sum");
}

Var Tape::row_logsumexp(Var a) {
  MSSMPC_UNARY_PROLOGUE(a);
  n.op = Op::kRowLogSumExp;
  Mat out(na.value.rows(), 1);
  for (Eigen::Index i = 0; i < na.value.rows(); ++i) {
    const double m = na.value.row(i).maxCoeff();
    out(i, 0) = m + std::log((na.value.row(i).array() - m).exp().sum());
  }
  n.value = std::move(out);
  return push(std::move(n), "row_logsumexp");
}

Var Tape::block(Var a, int i, int j, int rows, int cols) {
  MSSMPC_UNARY_PROLOGUE(a);
  if (i < 0 || j < 0 || i + rows > na.value.rows() || j + cols > na.value.cols())
    throw std::invalid_argument("ad: block out of range");
  n.op = Op::kBlock;
  n.i0 = i;
  n.i1 = j;
  n.i2 = rows;
  n.i3 = cols;
  n.value = na.value.block(i, j, rows, cols);
  return push(std::move(n), "block");
}

Var Tape::hcat(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = nodes_[static_cast<std::size_t>(a.id)];
  const Node& nb = nodes_[static_cast<std::size_t>(b.id)];
  if (na.value.rows() != nb.value.rows())
    throw std::invalid_argument("ad: hcat row mismatch");
  Node n;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.op = Op::kHCat;
  Mat out(na.value.rows(), na.value.cols() + nb.value.cols());
  out << na.value, nb.value;
  n.value = std::move(out);
  return push(std::move(n), "hcat");
}

Var Tape::vcat(Var a, Var b) {
  check_same_tape(a, b);
  const Node& na = nodes_[static_cast<std::size_t>(a.id)];
  const Node& nb = nodes_[static_cast<std::size_t>(b.id)];
  if (na.value.cols() != nb.value.cols())
    throw std::invalid_argument("ad: vcat column mismatch");
  Node n;
  n.p0 = a.id;
  n.p1 = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.op = Op::kVCat;
  Mat out(na.value.rows() + nb.value.rows(), na.value.cols());
  out << na.value, nb.value;
  n.value = std::move(out);
  return push(std::move(n), "vcat");
}

Var Tape::reshape(Var a, int rows, int cols) {
  MSSMPC_UNARY_PROLOGUE(a);
  if (rows * cols != na.value.size())
    throw std::invalid_argument("ad: reshape size mismatch");
  n.op = Op::kReshape;
  n.value = Eigen::Map<const Mat>(na.value.data(), rows, cols);
  return push(std::move(n), "reshape");
}

const Mat& Tape::val(Var v) const { return node(v).value; }

double Tape::scalar(Var v) const {
  const Node& n = node(v);
  if (n.value.size() != 1)
    throw std::invalid_argument("ad: scalar() on non-scalar node");
  return n.value(0, 0);
}

Mat& Tape::adjoint_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.adj_stamp != stamp_) {
    n.adjoint = Mat::Zero(n.value.rows(), n.value.cols());
    n.adj_stamp = stamp_;
  }
  return n.adjoint;
}

void Tape::accumulate(int id, const Mat& contribution) {
  if (id < 0) return;
  if (!nodes_[static_cast<std::size_t>(id)].needs_grad) return;
  adjoint_ref(id) += contribution;
}

void Tape::backward(Var scalar_out) {
  backward(scalar_out, Mat::Constant(1, 1, 1.0));
}

void Tape::backward(Var out, const Mat& seed) {
  const Node& n = node(out);
  require_same_shape(n.value, seed, "backward seed");
  ++stamp_;
  if (!n.needs_grad) return;
  adjoint_ref(out.id) = seed;
  for (int idx = out.id; idx >= 0; --idx) {
    const Node& cur = nodes_[static_cast<std::size_t>(idx)];
    if (cur.adj_stamp != stamp_ || !cur.needs_grad) continue;
    backprop(idx);
  }
}

void Tape::backprop(int idx) {
  Node& n = nodes_[static_cast<std::size_t>(idx)];
  const Mat& g = n.adjoint;
  const auto pv = [&](int p) -> const Mat& {
    return nodes_[static_cast<std::size_t>(p)].value;
  };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      break;
    case Op::kAdd:
      accumulate(n.p0, g);
      accumulate(n.p1, g);
      break;
    case Op::kSub:
      accumulate(n.p0, g);
      accumulate(n.p1, -g);
      break;
    case Op::kMul:
      accumulate(n.p0, g.cwiseProduct(pv(n.p1)));
      accumulate(n.p1, g.cwiseProduct(pv(n.p0)));
      break;
    case Op::kDiv:
      accumulate(n.p0, g.cwiseQuotient(pv(n.p1)));
      accumulate(n.p1, -g.cwiseProduct(n.value).cwiseQuotient(pv(n.p1)));
      break;
    case Op::kNeg:
      accumulate(n.p0, -g);
      break;
    case Op::kScale:
      accumulate(n.p0, n.a0 * g);
      break;
    case Op::kAddScalar:
      accumulate(n.p0, g);
      break;
    case Op::kTanh:
      accumulate(n.p0, g.cwiseProduct(Mat(1.0 - n.value.array().square())));
      break;
    case Op::kExp:
      accumulate(n.p0, g.cwiseProduct(n.value));
      break;
    case Op::kLog:
      accumulate(n.p0, g.cwiseQuotient(pv(n.p0)));
      break;
    case Op::kSqrt:
      accumulate(n.p0, Mat(g.array() * 0.5 / n.value.array()));
      break;
    case Op::kErf: {
      // d erf(x)/dx = 2/sqrt(pi) * exp(-x^2)
      const Mat d = (-pv(n.p0).array().square()).exp() * 1.1283791670955126;
      accumulate(n.p0, g.cwiseProduct(d));
      break;
    }
    case Op::kSquare:
      accumulate(n.p0, Mat(2.0 * g.array() * pv(n.p0).array()));
      break;
    case Op::kClamp: {
      const auto& x = pv(n.p0).array();
      const Mat mask = ((x > n.a0) && (x < n.a1)).cast<double>();
      accumulate(n.p0, g.cwiseProduct(mask));
      break;
    }
    case Op::kMatMul:
      accumulate(n.p0, g * pv(n.p1).transpose());
      accumulate(n.p1, pv(n.p0).transpose() * g);
      break;
    case Op::kTranspose:
      accumulate(n.p0, g.transpose());
      break;
    case Op::kAddRowVec:
      accumulate(n.p0, g);
      accumulate(n.p1, g.colwise().sum());
      break;
    case Op::kSum:
      accumulate(n.p0, Mat::Constant(pv(n.p0).rows(), pv(n.p0).cols(), g(0, 0)));
      break;
    case Op::kMean:
      accumulate(n.p0, Mat::Constant(pv(n.p0).rows(), pv(n.p0).cols(),
                                     g(0, 0) / static_cast<double>(pv(n.p0).size())));
      break;
    case Op::kRowSum:
      accumulate(n.p0, g * Mat::Ones(1, pv(n.p0).cols()));
      break;
    case Op::kColSum:
      accumulate(n.p0, Mat::Ones(pv(n.p0).rows(), 1) * g);
      break;
    case Op::kRowLogSumExp: {
      const Mat& x = pv(n.p0);
      Mat d(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        d.row(i) = (x.row(i).array() - n.value(i, 0)).exp() * g(i, 0);
      accumulate(n.p0, d);
      break;
    }
    case Op::kBlock: {
      Mat full = Mat::Zero(pv(n.p0).rows(), pv(n.p0).cols());
      full.block(n.i0, n.i1, n.i2, n.i3) = g;
      accumulate(n.p0, full);
      break;
    }
    case Op::kHCat:
      accumulate(n.p0, g.leftCols(pv(n.p0).cols()));
      accumulate(n.p1, g.rightCols(pv(n.p1).cols()));
      break;
    case Op::kVCat:
      accumulate(n.p0, g.topRows(pv(n.p0).rows()));
      accumulate(n.p1, g.bottomRows(pv(n.p1).rows()));
      break;
    case Op::kReshape:
      accumulate(n.p0, Eigen::Map<const Mat>(g.data(), pv(n.p0).rows(),
                                             pv(n.p0).cols()));
      break;
  }
}

Mat Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.adj_stamp != stamp_ || stamp_ == 0)
    return Mat::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

Mat jacobian_wrt_input(const std::function<Var(Tape&, Var)>& f, const Vec& x) {
  Tape tape;
  const Var xv = tape.var(Mat(x));
  const Var out = f(tape, xv);
  const Eigen::Index m = tape.val(out).rows();
  if (tape.val(out).cols() != 1)
    throw std::invalid_argument("jacobian_wrt_input: output must be a column vector");
  Mat jac(m, x.size());
  for (Eigen::Index i = 0; i < m; ++i) {
    Mat seed = Mat::Zero(m, 1);
    seed(i, 0) = 1.0;
    tape.backward(out, seed);
    jac.row(i) = tape.grad(xv).col(0).transpose();
  }
  return jac;
}

GradResult grad_wrt_params(const std::function<Var(Tape&, Var)>& f,
                           const Vec& theta) {
  Tape tape;
  const Var tv = tape.var(Mat(theta));
  const Var out = f(tape, tv);
  GradResult res;
  res.value = tape.scalar(out);
  tape.backward(out);
  res.grad = tape.grad(tv).col(0);
  if (!res.grad.allFinite())
    throw NumericError("grad_wrt_params", "gradient");
  return res;
}

}  // namespace mssmpc::ad
