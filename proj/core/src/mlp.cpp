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

#include "mssmpc/mlp.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace mssmpc {

int Mlp::num_params() const {
  int n = 0;
  for (const auto& l : layers) n += static_cast<int>(l.W.size() + l.b.size());
  return n;
}

void Mlp::validate() const {
  if (layers.empty()) throw std::invalid_argument("Mlp: no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (l.b.rows() != 1 || l.b.cols() != l.W.cols())
      throw std::invalid_argument("Mlp: bias shape mismatch at layer " + std::to_string(k));
    if (k > 0 && layers[k - 1].W.cols() != l.W.rows())
      throw std::invalid_argument("Mlp: layer dimensions do not chain at layer " + std::to_string(k));
    if (!l.W.allFinite() || !l.b.allFinite())
      throw std::invalid_argument("Mlp: non-finite parameters at layer " + std::to_string(k));
  }
}

Mat Mlp::forward(const Mat& x) const {
  if (x.cols() != in_dim())
    throw std::invalid_argument("Mlp::forward: input width " + std::to_string(x.cols()) +
                                " != " + std::to_string(in_dim()));
  Mat h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = (h * layers[k].W).rowwise() + layers[k].b.row(0);
    if (k + 1 < layers.size()) h = h.array().tanh();
  }
  return h;
}

Mlp Mlp::glorot(const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp::glorot: need at least 2 dims");
  Mlp net;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const int in = dims[k], out = dims[k + 1];
    const double bound = std::sqrt(6.0 / (in + out));
    Mlp::Layer layer;
    layer.W = Mat::NullaryExpr(in, out, [&]() { return rng.uniform(-bound, bound); });
    layer.b = Mat::Zero(1, out);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

Mlp Mlp::zeros(const std::vector<int>& dims) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp::zeros: need at least 2 dims");
  Mlp net;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    net.layers.push_back({Mat::Zero(dims[k], dims[k + 1]), Mat::Zero(1, dims[k + 1])});
  }
  return net;
}

ParamVector ParamVector::pack(const std::vector<std::pair<std::string, const Mlp*>>& nets) {
  ParamVector pv;
  int total = 0;
  for (const auto& [name, net] : nets) total += net->num_params();
  pv.flat_.resize(total);
  int off = 0;
  for (const auto& [name, net] : nets) {
    for (std::size_t k = 0; k < net->layers.size(); ++k) {
      const auto& l = net->layers[k];
      const std::string base = name + "/L" + std::to_string(k);
      pv.layout_.push_back({base + "/W", static_cast<int>(l.W.rows()),
                            static_cast<int>(l.W.cols()), off});
      pv.flat_.segment(off, l.W.size()) = Eigen::Map<const Vec>(l.W.data(), l.W.size());
      off += static_cast<int>(l.W.size());
      pv.layout_.push_back({base + "/b", 1, static_cast<int>(l.b.cols()), off});
      pv.flat_.segment(off, l.b.size()) = Eigen::Map<const Vec>(l.b.data(), l.b.size());
      off += static_cast<int>(l.b.size());
    }
  }
  return pv;
}

void ParamVector::scatter(const std::vector<std::pair<std::string, Mlp*>>& nets) const {
  std::size_t idx = 0;
  for (const auto& [name, net] : nets) {
    for (std::size_t k = 0; k < net->layers.size(); ++k) {
      auto& l = net->layers[k];
      const std::string base = name + "/L" + std::to_string(k);
      for (Mat* m : {&l.W, &l.b}) {
        if (idx >= layout_.size()) throw std::invalid_argument("ParamVector::scatter: layout exhausted");
        const Entry& e = layout_[idx++];
        const std::string expect =
            (m == &l.W) ? base + "/W" : base + "/b";
        if (e.name != expect || e.rows != m->rows() || e.cols != m->cols())
          throw std::invalid_argument("ParamVector::scatter: layout mismatch at " + e.name);
        *m = Eigen::Map<const Mat>(flat_.data() + e.offset, e.rows, e.cols);
      }
    }
  }
  if (idx != layout_.size())
    throw std::invalid_argument("ParamVector::scatter: networks do not cover layout");
}

const ParamVector::Entry& ParamVector::entry(const std::string& name) const {
  for (const auto& e : layout_)
    if (e.name == name) return e;
  throw std::invalid_argument("ParamVector: unknown entry " + name);
}

std::string ParamVector::to_json() const {
  nlohmann::json j;
  j["layout"] = nlohmann::json::array();
  for (const auto& e : layout_)
    j["layout"].push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}, {"offset", e.offset}});
  j["values"] = std::vector<double>(flat_.data(), flat_.data() + flat_.size());
  return j.dump();
}

ParamVector ParamVector::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ParamVector pv;
  for (const auto& e : j.at("layout"))
    pv.layout_.push_back({e.at("name").get<std::string>(), e.at("rows").get<int>(),
                          e.at("cols").get<int>(), e.at("offset").get<int>()});
  const auto values = j.at("values").get<std::vector<double>>();
  pv.flat_ = Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
  return pv;
}

namespace ad_ops {

MlpVars bind_constant(ad::Tape& tape, const Mlp& net) {
  MlpVars vars;
  for (const auto& l : net.layers)
    vars.layers.emplace_back(tape.constant(l.W), tape.constant(l.b));
  return vars;
}

MlpVars bind_from_flat(ad::Tape& tape, ad::Var theta, const ParamVector& layout,
                       const std::string& net_prefix) {
  MlpVars vars;
  for (std::size_t i = 0; i < layout.layout().size(); ++i) {
    const auto& e = layout.layout()[i];
    if (e.name.rfind(net_prefix + "/", 0) != 0) continue;
    if (e.name.ends_with("/W")) {
      const auto& eb = layout.layout().at(i + 1);
      ad::Var w = tape.reshape(tape.block(theta, e.offset, 0, e.rows * e.cols, 1), e.rows, e.cols);
      ad::Var b = tape.reshape(tape.block(theta, eb.offset, 0, eb.rows * eb.cols, 1), eb.rows, eb.cols);
      vars.layers.emplace_back(w, b);
    }
  }
  if (vars.layers.empty())
    throw std::invalid_argument("bind_from_flat: no entries with prefix " + net_prefix);
  return vars;
}

ad::Var forward(ad::Tape& tape, const MlpVars& net, ad::Var x) {
  ad::Var h = x;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    h = tape.add_row_vector(tape.matmul(h, net.layers[k].first), net.layers[k].second);
    if (k + 1 < net.layers.size()) h = tape.tanh(h);
  }
  return h;
}

}  // namespace ad_ops

}  // namespace mssmpc
