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

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mssmpc/plant.hpp"
#include "mssmpc/reachability.hpp"
#include "mssmpc/smpc.hpp"

namespace mssmpc {

/// Simulator interface consumed by the closed loop: observe the current
/// output, then advance with the applied input.
class PlantSim {
 public:
  virtual ~PlantSim() = default;
  virtual double output() const = 0;
  virtual void advance(double u, Rng& rng) = 0;
};

/// The stochastic benchmark system behind the PlantSim interface.
class BenchmarkPlantSim : public PlantSim {
 public:
  BenchmarkPlantSim(PlantState x0, bool freeze_noise = false)
      : x_(x0), freeze_(freeze_noise) {}
  double output() const override { return x_.x1; }
  void advance(double u, Rng& rng) override { x_ = plant_step(x_, u, rng, freeze_); }

 private:
  PlantState x_;
  bool freeze_;
};

/// Scheduled reference swap for the tracking controller, applied before the
/// control step at time index `step`.
struct ReferenceEvent {
  int step = 0;
  std::optional<ReferencePdf> pdf;  // KL mode
  std::optional<double> y_ref;      // mean mode
  double beta = 0.0;
};

struct RunRecord {
  std::vector<double> u, y, j_star, solve_seconds, worst_margin, offset_value;
  std::vector<int> status;
  std::vector<std::uint8_t> fallback;
  std::vector<std::uint8_t> controlled;  // 0 during history bootstrap
  int transient_cutoff = -1;
  bool cutoff_warning = false;
  std::uint64_t seed = 0;

  int steps() const { return static_cast<int>(y.size()); }
  std::vector<double> steady_samples() const;

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
  void save_csv(const std::string& path) const;
};

using Controller = std::variant<SetpointMPC, TrackingMPC>;

struct ClosedLoopOptions {
  int steps = 500;
  std::uint64_t seed = 0;
  bool freeze_noise = false;
  double bootstrap_u = 2.5;  // applied during the first `lag` steps
  std::vector<ReferenceEvent> schedule;
  double init_lo = 0.0, init_hi = 1.0;  // initial plant state range
};

/// Alternates plant and controller; histories carry the last `lag` samples.
/// Controller fallbacks are recorded, never fatal. Bit-reproducible per seed.
RunRecord closed_loop(PlantSim& plant, Controller& ctrl, const ClosedLoopOptions& opts,
                      Rng& rng);

/// Independent seeded runs of the benchmark plant under copies of the
/// controller; parallel execution, deterministic ordering by run index.
std::vector<RunRecord> monte_carlo(const Controller& ctrl, const ClosedLoopOptions& opts,
                                   int runs);

struct TransientOptions {
  int window = 50;
  int permutations = 200;
  double level = 0.05;
  std::uint64_t seed = 12345;
};

/// Earliest index whose MMD^2 against the final-quarter reference window
/// drops below a permutation threshold (Gaussian kernel, median-heuristic
/// bandwidth). Returns steps/2 with `warning` when no convergence is found.
struct TransientResult {
  int cutoff = 0;
  bool warning = false;
  double threshold = 0.0;
};
TransientResult detect_transient(const std::vector<double>& y,
                                 const TransientOptions& opts = {});

/// Unbiased quadratic-time MMD^2 with a Gaussian kernel.
double mmd2(const std::vector<double>& a, const std::vector<double>& b,
            double bandwidth);
double median_heuristic_bandwidth(const std::vector<double>& pooled);

struct DensityEstimate {
  std::vector<double> grid;
  std::vector<double> kde;        // Gaussian-kernel density on the grid
  std::vector<double> hist_x;     // bin centers
  std::vector<double> hist_p;     // normalised bin densities
  double bandwidth = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  std::vector<double> modes;      // KDE local maxima >= 10% of the peak
  int pooled_samples = 0;
  std::optional<double> p_leq_ymax;  // empirical chance-constraint satisfaction
  std::optional<double> p_geq_ymin;
};

struct DensityOptions {
  int bins = 60;
  double bandwidth = 0.0;  // <= 0: Silverman's rule
  int grid_points = 1024;
  std::optional<ChanceSpec> spec;
};

/// Pools post-cutoff samples across records; refuses (throws) below 100
/// pooled samples.
DensityEstimate steady_state_pdf(const std::vector<RunRecord>& records,
                                 const DensityOptions& opts = {});

/// Experiment description: which case, where the model lives, controller
/// settings, run counts, and the reference schedule.
struct ExperimentConfig {
  int case_id = 1;
  std::string model_path;
  std::uint64_t seed = 0;
  int steps = 500;
  int runs = 10;
  int horizon = 25;
  Vec q_diag;
  double r_weight = 1.0;
  ChanceSpec spec;
  double u_low = 0.0, u_high = 5.0;
  double lambda = 1e-6;  // tracking regularisation
  double j_cap = 0.15;   // tracking stage-cost cap
  int kl_samples = 100;
  double terminal_epsilon = 0.1;  // Q inflation absorbing linearization error
  std::string transient_mode = "mmd";  // or "fixed50"
  double init_lo = 0.0, init_hi = 1.0;
  std::string out_dir;

  static ExperimentConfig defaults(int case_id);
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
  std::uint64_t config_hash() const;
};

/// Result bundle of one case reproduction.
struct CaseResult {
  ExperimentConfig config;
  std::vector<RunRecord> records;
  DensityEstimate steady;
  std::vector<Setpoint> setpoints;
  std::vector<TerminalDesign> terminals;
  std::vector<ReachCertificate> certificates;
  bool headline_pass = false;
  std::string headline_note;
};

/// Emits run CSVs, summary JSON, and plot-data CSVs into cfg.out_dir.
/// Re-generation from the same records is byte-identical.
void report(const CaseResult& result, const std::string& out_dir);

/// The four case pipelines. The model comes from cfg.model_path unless
/// provided. Pipelines build set-points/terminals, run the Monte-Carlo
/// battery, analyse steady state, and fill the headline verdict.
CaseResult run_case(const ExperimentConfig& cfg,
                    const MSSModel* model_override = nullptr);

}  // namespace mssmpc
