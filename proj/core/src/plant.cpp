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

#include "mssmpc/plant.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <thread>
#include <vector>

#include <json.hpp>

namespace mssmpc {

PlantState plant_step(const PlantState& x, double u, Rng& rng, bool freeze_noise) {
  if (!std::isfinite(x.x1) || !std::isfinite(x.x2) || !std::isfinite(u))
    throw std::invalid_argument("plant_step: non-finite input");
  // v is drawn before w.
  const double v = freeze_noise ? 0.0 : rng.uniform(-0.1, 0.1);
  const double w = freeze_noise ? 0.0 : rng.uniform(-std::numbers::pi, std::numbers::pi);
  PlantState next;
  const double a = x.x2 + v;
  next.x1 = (0.2 + 0.8 * std::exp(-a * a)) * x.x1 + 0.3 * std::sin(x.x2) * u;
  next.x2 = -0.4 * x.x1 + (0.3 + 0.3 * std::sin(w)) * x.x2 + 0.4 * u;
  return next;
}

namespace {

// Realization i of a shared input sequence; stream i+1 of the dataset seed.
void simulate_realization(const Mat& u, std::uint64_t seed, int i, Mat& y) {
  Rng rng(seed, static_cast<std::uint64_t>(i) + 1);
  PlantState x{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
  for (Eigen::Index k = 0; k < u.rows(); ++k) {
    y(i, k) = x.x1;
    x = plant_step(x, u(k, 0), rng);
  }
}

Dataset generate(std::uint64_t seed, int len, int reps, double u_low, double u_high) {
  if (len < 2) throw std::invalid_argument("generate: len too short");
  if (reps < 1) throw std::invalid_argument("generate: reps must be >= 1");
  Dataset d;
  d.seed = seed;
  d.u_low = u_low;
  d.u_high = u_high;
  // Uniform levels held for kInputDwell steps: the marginal stays U(lo, hi)
  // while trajectories settle close to the equilibria the controllers will
  // later operate at.
  Rng input_rng(seed, 0);
  d.u.resize(len, 1);
  for (int k = 0; k < len; k += kInputDwell) {
    const double level = input_rng.uniform(u_low, u_high);
    for (int j = k; j < std::min(len, k + kInputDwell); ++j) d.u(j, 0) = level;
  }
  d.y.resize(reps, len);

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int workers = static_cast<int>(std::min<unsigned>(hw, static_cast<unsigned>(reps)));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t]() {
      for (int i = t; i < reps; i += workers) simulate_realization(d.u, seed, i, d.y);
    });
  }
  for (auto& th : pool) th.join();
  return d;
}

}  // namespace

Dataset generate_training_data(std::uint64_t seed, int len, int reps,
                               double u_low, double u_high) {
  return generate(seed, len, reps, u_low, u_high);
}

Dataset generate_test_ensemble(std::uint64_t seed, int horizon, int s,
                               double u_low, double u_high) {
  return generate(seed, horizon, s, u_low, u_high);
}

void Dataset::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = seed;
  manifest["len"] = length();
  manifest["reps"] = realizations();
  manifest["u_low"] = u_low;
  manifest["u_high"] = u_high;
  std::vector<std::string> files;
  for (int i = 0; i < realizations(); ++i) {
    const std::string name = "realization_" + std::to_string(i) + ".csv";
    files.push_back(name);
    std::ofstream out(fs::path(dir) / name);
    if (!out) throw std::runtime_error("Dataset::save: cannot open " + name);
    out << "k,u,y\n";
    out.precision(17);
    for (int k = 0; k < length(); ++k)
      out << k << ',' << u(k, 0) << ',' << y(i, k) << '\n';
  }
  manifest["files"] = files;
  std::ofstream mout(fs::path(dir) / "manifest.json");
  if (!mout) throw std::runtime_error("Dataset::save: cannot open manifest.json");
  mout << manifest.dump(2);
}

Dataset Dataset::load(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream min(fs::path(dir) / "manifest.json");
  if (!min) throw std::runtime_error("Dataset::load: cannot open manifest.json in " + dir);
  nlohmann::json manifest;
  min >> manifest;
  Dataset d;
  d.seed = manifest.at("seed").get<std::uint64_t>();
  d.u_low = manifest.at("u_low").get<double>();
  d.u_high = manifest.at("u_high").get<double>();
  const int len = manifest.at("len").get<int>();
  const auto files = manifest.at("files").get<std::vector<std::string>>();
  d.u.resize(len, 1);
  d.y.resize(static_cast<int>(files.size()), len);
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::ifstream in(fs::path(dir) / files[i]);
    if (!in) throw std::runtime_error("Dataset::load: cannot open " + files[i]);
    std::string line;
    std::getline(in, line);  // header
    for (int k = 0; k < len; ++k) {
      if (!std::getline(in, line))
        throw std::runtime_error("Dataset::load: truncated " + files[i]);
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      d.u(k, 0) = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      d.y(static_cast<int>(i), k) = std::stod(line.substr(c2 + 1));
    }
  }
  return d;
}

}  // namespace mssmpc
