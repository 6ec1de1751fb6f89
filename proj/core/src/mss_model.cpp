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

#include "mssmpc/mss_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mssmpc {

namespace {
constexpr const char* kFormatTag = "mssmpc-model-v1";

Vec normalize(const Vec& x, const Vec& mean, const Vec& std) {
  return (x - mean).cwiseQuotient(std);
}
}  // namespace

void MSSModel::validate() const {
  if (n_z < 1 || n_u < 1 || n_y < 1 || n_g < 1 || lag < 1)
    throw std::invalid_argument("MSSModel: dimensions must be positive");
  enc_net.validate();
  f_net.validate();
  w_net.validate();
  mu_net.validate();
  sigma_net.validate();
  if (enc_net.in_dim() != lag * (n_u + n_y) || enc_net.out_dim() != n_z)
    throw std::invalid_argument("MSSModel: encoder dimensions inconsistent");
  if (f_net.in_dim() != n_z + n_u || f_net.out_dim() != n_z)
    throw std::invalid_argument("MSSModel: transition dimensions inconsistent");
  if (w_net.in_dim() != n_z + n_u || w_net.out_dim() != n_g)
    throw std::invalid_argument("MSSModel: weight head dimensions inconsistent");
  if (mu_net.in_dim() != n_z + n_u || mu_net.out_dim() != n_g * n_y)
    throw std::invalid_argument("MSSModel: mean head dimensions inconsistent");
  if (sigma_net.in_dim() != n_z + n_u || sigma_net.out_dim() != n_g * n_y)
    throw std::invalid_argument("MSSModel: sigma head dimensions inconsistent");
  for (const auto& [v, n, name] :
       {std::tuple{&u_mean, n_u, "u_mean"}, std::tuple{&u_std, n_u, "u_std"},
        std::tuple{&y_mean, n_y, "y_mean"}, std::tuple{&y_std, n_y, "y_std"}}) {
    if (v->size() != n) throw std::invalid_argument(std::string("MSSModel: bad ") + name);
  }
  if ((u_std.array() <= 0.0).any() || (y_std.array() <= 0.0).any())
    throw std::invalid_argument("MSSModel: normalisation stds must be positive");
}

MSSModel MSSModel::create(int n_z, int n_u, int n_y, int n_g, int lag,
                          std::uint64_t seed) {
  MSSModel m;
  m.n_z = n_z;
  m.n_u = n_u;
  m.n_y = n_y;
  m.n_g = n_g;
  m.lag = lag;
  Rng rng(seed);
  m.enc_net = Mlp::glorot({lag * (n_u + n_y), 32, 32, n_z}, rng);
  m.f_net = Mlp::glorot({n_z + n_u, 8, 8, n_z}, rng);
  m.w_net = Mlp::glorot({n_z + n_u, 32, 32, n_g}, rng);
  m.mu_net = Mlp::glorot({n_z + n_u, 32, 32, n_g * n_y}, rng);
  m.sigma_net = Mlp::glorot({n_z + n_u, 32, 32, n_g * n_y}, rng);
  // Spread initial component means so the mixture starts multi-modal.
  for (int i = 0; i < n_g * n_y; ++i)
    m.mu_net.layers.back().b(0, i) = rng.uniform(-1.0, 1.0);
  m.u_mean = Vec::Zero(n_u);
  m.u_std = Vec::Ones(n_u);
  m.y_mean = Vec::Zero(n_y);
  m.y_std = Vec::Ones(n_y);
  return m;
}

Vec MSSModel::encode(const Mat& u_hist, const Mat& y_hist) const {
  if (u_hist.rows() != lag || u_hist.cols() != n_u)
    throw std::invalid_argument("MSSModel::encode: u history must be (lag x n_u)");
  if (y_hist.rows() != lag || y_hist.cols() != n_y)
    throw std::invalid_argument("MSSModel::encode: y history must be (lag x n_y)");
  Mat x(1, lag * (n_u + n_y));
  int c = 0;
  for (int t = 0; t < lag; ++t)
    for (int j = 0; j < n_u; ++j) x(0, c++) = (u_hist(t, j) - u_mean(j)) / u_std(j);
  for (int t = 0; t < lag; ++t)
    for (int j = 0; j < n_y; ++j) x(0, c++) = (y_hist(t, j) - y_mean(j)) / y_std(j);
  return enc_net.forward(x).row(0).transpose();
}

Vec MSSModel::step(const Vec& z, const Vec& u) const {
  if (z.size() != n_z || u.size() != n_u)
    throw std::invalid_argument("MSSModel::step: dimension mismatch");
  Mat x(1, n_z + n_u);
  x.leftCols(n_z) = z.transpose();
  x.rightCols(n_u) = normalize(u, u_mean, u_std).transpose();
  return f_net.forward(x).row(0).transpose();
}

DiagGMM MSSModel::output_pdf(const Vec& z, const Vec& u) const {
  if (z.size() != n_z || u.size() != n_u)
    throw std::invalid_argument("MSSModel::output_pdf: dimension mismatch");
  Mat x(1, n_z + n_u);
  x.leftCols(n_z) = z.transpose();
  x.rightCols(n_u) = normalize(u, u_mean, u_std).transpose();

  const Vec alpha = w_net.forward(x).row(0).transpose();
  const Vec mu_raw = mu_net.forward(x).row(0).transpose();
  const Vec s_raw = sigma_net.forward(x).row(0).transpose();

  DiagGMM g;
  const double amax = alpha.maxCoeff();
  g.w = (alpha.array() - amax).exp();
  g.w /= g.w.sum();
  g.mu.resize(n_g, n_y);
  g.sigma.resize(n_g, n_y);
  for (int j = 0; j < n_y; ++j)
    for (int i = 0; i < n_g; ++i) {
      g.mu(i, j) = y_mean(j) + y_std(j) * mu_raw(j * n_g + i);
      g.sigma(i, j) = std::clamp(y_std(j) * std::exp(s_raw(j * n_g + i)),
                                 kSigmaFloor, sigma_cap);
    }
  return g;
}

MSSModel::Rollout MSSModel::rollout(const Vec& z0, const Mat& u_seq) const {
  if (u_seq.rows() < 1) throw std::invalid_argument("MSSModel::rollout: T must be >= 1");
  if (u_seq.cols() != n_u) throw std::invalid_argument("MSSModel::rollout: input width mismatch");
  Rollout r;
  r.states.reserve(u_seq.rows() + 1);
  r.pdfs.reserve(u_seq.rows());
  r.states.push_back(z0);
  for (Eigen::Index k = 0; k < u_seq.rows(); ++k) {
    const Vec u = u_seq.row(k).transpose();
    const Vec& z = r.states.back();
    if (!z.allFinite())
      throw ad::NumericError("rollout", "meta-state at step " + std::to_string(k));
    r.pdfs.push_back(output_pdf(z, u));
    r.states.push_back(step(z, u));
  }
  return r;
}

ParamVector MSSModel::params() const {
  return ParamVector::pack({{"enc", &enc_net},
                            {"f", &f_net},
                            {"w", &w_net},
                            {"mu", &mu_net},
                            {"sigma", &sigma_net}});
}

void MSSModel::set_params(const ParamVector& pv) {
  pv.scatter({{"enc", &enc_net},
              {"f", &f_net},
              {"w", &w_net},
              {"mu", &mu_net},
              {"sigma", &sigma_net}});
}

std::string MSSModel::to_json() const {
  nlohmann::json j;
  j["format"] = kFormatTag;
  j["dims"] = {{"n_z", n_z}, {"n_u", n_u}, {"n_y", n_y}, {"n_g", n_g}};
  j["lag"] = lag;
  j["sigma_floor"] = kSigmaFloor;
  j["sigma_cap"] = sigma_cap;
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  j["norm"] = {{"u_mean", vec(u_mean)}, {"u_std", vec(u_std)},
               {"y_mean", vec(y_mean)}, {"y_std", vec(y_std)}};
  const nlohmann::json params_doc = nlohmann::json::parse(params().to_json());
  j["param_layouts"] = params_doc.at("layout");
  j["param_values"] = params_doc.at("values");
  return j.dump();
}

MSSModel MSSModel::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != kFormatTag)
    throw std::invalid_argument("MSSModel: unknown model format tag");
  MSSModel m;
  m.n_z = j.at("dims").at("n_z").get<int>();
  m.n_u = j.at("dims").at("n_u").get<int>();
  m.n_y = j.at("dims").at("n_y").get<int>();
  m.n_g = j.at("dims").at("n_g").get<int>();
  m.lag = j.at("lag").get<int>();
  m.sigma_cap = j.value("sigma_cap", 1e3);
  auto vec = [&](const char* k) {
    const auto v = j.at("norm").at(k).get<std::vector<double>>();
    return Vec(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  m.u_mean = vec("u_mean");
  m.u_std = vec("u_std");
  m.y_mean = vec("y_mean");
  m.y_std = vec("y_std");

  nlohmann::json params_doc;
  params_doc["layout"] = j.at("param_layouts");
  params_doc["values"] = j.at("param_values");
  const ParamVector pv = ParamVector::from_json(params_doc.dump());

  // Rebuild each network's layer shapes from the layout, then scatter.
  auto build = [&](const std::string& prefix) {
    Mlp net;
    for (const auto& e : pv.layout()) {
      if (e.name.rfind(prefix + "/", 0) != 0 || !e.name.ends_with("/W")) continue;
      net.layers.push_back({Mat::Zero(e.rows, e.cols), Mat::Zero(1, e.cols)});
    }
    return net;
  };
  m.enc_net = build("enc");
  m.f_net = build("f");
  m.w_net = build("w");
  m.mu_net = build("mu");
  m.sigma_net = build("sigma");
  m.set_params(pv);
  m.validate();
  return m;
}

void MSSModel::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("MSSModel::save: cannot open " + path);
  out << to_json();
}

MSSModel MSSModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("MSSModel::load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::pair<Mat, Mat> linearize(const MSSModel& m, const Vec& z, const Vec& u) {
  Vec x(m.n_z + m.n_u);
  x.head(m.n_z) = z;
  x.tail(m.n_u) = u;
  const Mat jac = ad::jacobian_wrt_input(
      [&](ad::Tape& tape, ad::Var xv) {
        const ad_ops::ModelVars mv = ad_ops::bind_constant(tape, m);
        const ad::Var zr = tape.transpose(tape.block(xv, 0, 0, m.n_z, 1));
        const ad::Var ur = tape.transpose(tape.block(xv, m.n_z, 0, m.n_u, 1));
        return tape.transpose(ad_ops::model_step(tape, mv, zr, ur));
      },
      x);
  return {jac.leftCols(m.n_z), jac.rightCols(m.n_u)};
}

namespace ad_ops {

using ad::Tape;
using ad::Var;

ModelVars bind_constant(Tape& tape, const MSSModel& m) {
  ModelVars mv;
  mv.enc = bind_constant(tape, m.enc_net);
  mv.f = bind_constant(tape, m.f_net);
  mv.w = bind_constant(tape, m.w_net);
  mv.mu = bind_constant(tape, m.mu_net);
  mv.sigma = bind_constant(tape, m.sigma_net);
  mv.model = &m;
  return mv;
}

ModelVars bind_params(Tape& tape, const MSSModel& m, Var theta,
                      const ParamVector& layout) {
  ModelVars mv;
  mv.enc = bind_from_flat(tape, theta, layout, "enc");
  mv.f = bind_from_flat(tape, theta, layout, "f");
  mv.w = bind_from_flat(tape, theta, layout, "w");
  mv.mu = bind_from_flat(tape, theta, layout, "mu");
  mv.sigma = bind_from_flat(tape, theta, layout, "sigma");
  mv.model = &m;
  return mv;
}

namespace {

// (x - mean) / std applied columnwise with constant rows.
Var normalize_cols(Tape& tape, Var x, const Vec& mean, const Vec& std) {
  const int b = static_cast<int>(tape.val(x).rows());
  const Mat inv = Mat::Ones(b, 1) * std.cwiseInverse().transpose();
  return tape.mul(tape.add_row_vector(x, tape.constant(Mat(-mean.transpose()))),
                  tape.constant(inv));
}

Var model_input(Tape& tape, const ModelVars& mv, Var z, Var u) {
  return tape.hcat(z, normalize_cols(tape, u, mv.model->u_mean, mv.model->u_std));
}

}  // namespace

Var model_encode(Tape& tape, const ModelVars& mv, Var hist) {
  const MSSModel& m = *mv.model;
  const int width = m.lag * (m.n_u + m.n_y);
  if (tape.val(hist).cols() != width)
    throw std::invalid_argument("model_encode: history width mismatch");
  Vec mean(width), std(width);
  int c = 0;
  for (int t = 0; t < m.lag; ++t)
    for (int j = 0; j < m.n_u; ++j) {
      mean(c) = m.u_mean(j);
      std(c++) = m.u_std(j);
    }
  for (int t = 0; t < m.lag; ++t)
    for (int j = 0; j < m.n_y; ++j) {
      mean(c) = m.y_mean(j);
      std(c++) = m.y_std(j);
    }
  return forward(tape, mv.enc, normalize_cols(tape, hist, mean, std));
}

Var model_step(Tape& tape, const ModelVars& mv, Var z, Var u) {
  return forward(tape, mv.f, model_input(tape, mv, z, u));
}

GmmVars model_output(Tape& tape, const ModelVars& mv, Var z, Var u) {
  const MSSModel& m = *mv.model;
  const Var xi = model_input(tape, mv, z, u);
  const int b = static_cast<int>(tape.val(z).rows());

  const Var alpha = forward(tape, mv.w, xi);
  const Var lse = tape.row_logsumexp(alpha);  // (B x 1)
  const Var log_w = alpha - tape.matmul(lse, tape.constant(Mat::Ones(1, m.n_g)));

  Vec ymean_row(m.n_g * m.n_y), ystd_row(m.n_g * m.n_y);
  for (int j = 0; j < m.n_y; ++j)
    for (int i = 0; i < m.n_g; ++i) {
      ymean_row(j * m.n_g + i) = m.y_mean(j);
      ystd_row(j * m.n_g + i) = m.y_std(j);
    }
  const Mat ystd_bcast = Mat::Ones(b, 1) * ystd_row.transpose();

  const Var mu_norm = forward(tape, mv.mu, xi);
  const Var mu = tape.add_row_vector(tape.mul(mu_norm, tape.constant(ystd_bcast)),
                                     tape.constant(Mat(ymean_row.transpose())));

  const Var s_norm = forward(tape, mv.sigma, xi);
  const Var sigma = tape.clamp(tape.mul(tape.exp(s_norm), tape.constant(ystd_bcast)),
                               kSigmaFloor, m.sigma_cap);

  GmmVars g;
  g.log_w = log_w;
  g.mu = mu;
  g.sigma = sigma;
  g.n_g = m.n_g;
  g.n_y = m.n_y;
  return g;
}

}  // namespace ad_ops

}  // namespace mssmpc
