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

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mssmpc/harness.hpp"
#include "mssmpc/sysid.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInfeasible = 2;
constexpr int kExitCheckFailed = 3;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  return json::parse(slurp(path));
}

mssmpc::InputPolytope input_box(const json& cfg) {
  const double lo = cfg.value("u_low", 0.0);
  const double hi = cfg.value("u_high", 5.0);
  return mssmpc::InputPolytope::box(mssmpc::Vec::Constant(1, lo),
                                    mssmpc::Vec::Constant(1, hi));
}

mssmpc::ChanceSpec spec_from(const json& cfg) {
  if (cfg.contains("spec")) return mssmpc::ChanceSpec::from_json(cfg.at("spec").dump());
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-state-space stochastic MPC toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_dir = "out";
  app.add_option("--seed", seed, "Master seed")->capture_default_str();
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();

  auto* cmd_generate = app.add_subcommand("generate-data", "Simulate the benchmark system");
  auto* cmd_train = app.add_subcommand("train", "Train an MSS model on a dataset");
  std::string data_dir, init_model;
  cmd_train->add_option("--data", data_dir, "Dataset directory")->required();
  cmd_train->add_option("--init", init_model, "Continue from an existing model JSON");
  auto* cmd_eval = app.add_subcommand("eval", "Log-likelihood table for a trained model");
  std::string model_path;
  cmd_eval->add_option("--model", model_path, "Model JSON path")->required();
  auto* cmd_setpoint = app.add_subcommand("find-setpoint", "Search an equilibrium set-point");
  cmd_setpoint->add_option("--model", model_path, "Model JSON path")->required();
  auto* cmd_terminal = app.add_subcommand("design-terminal", "LQR terminal ingredients");
  std::string setpoint_path, terminal_path;
  cmd_terminal->add_option("--model", model_path, "Model JSON path")->required();
  cmd_terminal->add_option("--setpoint", setpoint_path, "Setpoint JSON path")->required();
  auto* cmd_reach = app.add_subcommand("certify-reach", "Backward-reachable-set certificate");
  cmd_reach->add_option("--model", model_path, "Model JSON path")->required();
  cmd_reach->add_option("--setpoint", setpoint_path, "Setpoint JSON path")->required();
  cmd_reach->add_option("--terminal", terminal_path, "Terminal JSON path")->required();
  auto* cmd_case = app.add_subcommand("run-case", "Reproduce one of the four case studies");
  int case_id = 1;
  cmd_case->add_option("case", case_id, "Case number 1..4")->required();
  cmd_case->add_option("--model", model_path, "Model JSON path");
  auto* cmd_report = app.add_subcommand("report", "Regenerate a report bundle from run records");
  std::string records_dir;
  cmd_report->add_option("--records", records_dir, "Directory with run_<i>.json files")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const json cfg = load_config(config_path);
    fs::create_directories(out_dir);

    if (cmd_generate->parsed()) {
      const int len = cfg.value("len", 8000);
      const int reps = cfg.value("reps", 10);
      const double u_low = cfg.value("u_low", 0.0);
      const double u_high = cfg.value("u_high", 5.0);
      const auto data = mssmpc::generate_training_data(seed, len, reps, u_low, u_high);
      data.save(out_dir);
      std::cout << "wrote " << reps << " realizations of length " << len << " to "
                << out_dir << "\n";
      return kExitOk;
    }

    if (cmd_train->parsed()) {
      const auto data = mssmpc::Dataset::load(data_dir);
      mssmpc::TrainConfig tcfg;
      if (cfg.contains("train")) tcfg = mssmpc::TrainConfig::from_json(cfg.at("train").dump());
      if (tcfg.seed == 0) tcfg.seed = seed;
      mssmpc::MSSModel m0 =
          init_model.empty()
              ? mssmpc::MSSModel::create(cfg.value("n_z", 3), 1, 1, cfg.value("n_g", 12),
                                         cfg.value("lag", 15), tcfg.seed)
              : mssmpc::MSSModel::load(init_model);
      const auto [model, fit] = mssmpc::train(m0, data, tcfg);
      model.save((fs::path(out_dir) / "model.json").string());
      std::ofstream rep(fs::path(out_dir) / "fit_report.json");
      rep << fit.to_json();
      std::cout << "trained model -> " << (fs::path(out_dir) / "model.json").string()
                << " (best val NLL " << fit.best_val_nll << ")\n";
      return kExitOk;
    }

    if (cmd_eval->parsed()) {
      const auto model = mssmpc::MSSModel::load(model_path);
      const int s = cfg.value("ensemble_s", 1000);
      std::ofstream out(fs::path(out_dir) / "loglik_table.csv");
      out << "n_test_bar,log_likelihood,upper_limit\n";
      std::cout << "n_test_bar,log_likelihood,upper_limit\n";
      for (const int nbar : {5, 10, 25, 50, 75}) {
        const auto ensemble =
            mssmpc::generate_test_ensemble(seed + 100 + nbar, model.lag + nbar, s);
        const double ll = mssmpc::mean_log_likelihood(model, ensemble, nbar);
        const double ul = mssmpc::entropy_upper_limit(ensemble, model.lag, nbar);
        out << nbar << ',' << ll << ',' << ul << '\n';
        std::cout << nbar << ',' << ll << ',' << ul << '\n';
      }
      return kExitOk;
    }

    if (cmd_setpoint->parsed()) {
      const auto model = mssmpc::MSSModel::load(model_path);
      const auto u_set = input_box(cfg);
      const auto spec = spec_from(cfg);
      mssmpc::SetpointSearchConfig scfg;
      scfg.seed = seed;
      scfg.starts = cfg.value("starts", 16);
      scfg.z_spread = cfg.value("z_spread", 1.0);

      mssmpc::SetpointResult result;
      mssmpc::ReferencePdf ref = mssmpc::ReferencePdf::from_gmm(mssmpc::DiagGMM::scalar(
          mssmpc::Vec::Ones(1), mssmpc::Vec::Zero(1), mssmpc::Vec::Ones(1)));
      if (cfg.value("mode", "pdf") == "pdf") {
        if (cfg.contains("reference"))
          ref = mssmpc::ReferencePdf::from_json(cfg.at("reference").dump());
        ref.freeze_samples(cfg.value("kl_samples", 500), seed);
        result = mssmpc::find_setpoint_pdf(model, ref, spec, u_set, scfg);
      } else {
        const double y_ref = cfg.value("y_ref", 1.0);
        result = mssmpc::find_setpoint_mean(model, mssmpc::Vec::Constant(1, y_ref),
                                            cfg.value("beta", 0.0), spec, u_set, scfg);
      }
      if (!result.setpoint) {
        json rep;
        rep["feasible"] = false;
        rep["best_violation"] = result.best_violation;
        rep["best_margins"] = std::vector<double>(
            result.best_margins.data(),
            result.best_margins.data() + result.best_margins.size());
        std::ofstream out(fs::path(out_dir) / "setpoint_infeasible.json");
        out << rep.dump(2);
        std::cerr << "no feasible set-point (best violation " << result.best_violation
                  << ")\n";
        return kExitInfeasible;
      }
      result.setpoint->save((fs::path(out_dir) / "setpoint.json").string());
      if (cfg.value("mode", "pdf") == "pdf") {
        std::ofstream out(fs::path(out_dir) / "reference.json");
        out << ref.to_json();  // includes the frozen sample set and seed
      }
      std::cout << "setpoint: objective " << result.setpoint->objective << " rank "
                << result.setpoint->rank << "\n";
      return kExitOk;
    }

    if (cmd_terminal->parsed()) {
      const auto model = mssmpc::MSSModel::load(model_path);
      const auto sp = mssmpc::Setpoint::load(setpoint_path);
      const auto u_set = input_box(cfg);
      const auto spec = spec_from(cfg);
      mssmpc::Vec q_diag = mssmpc::Vec::Ones(model.n_z);
      if (cfg.contains("q_diag")) {
        const auto q = cfg.at("q_diag").get<std::vector<double>>();
        q_diag = Eigen::Map<const mssmpc::Vec>(q.data(), static_cast<Eigen::Index>(q.size()));
      }
      const mssmpc::Mat q = mssmpc::Mat(q_diag.asDiagonal());
      const mssmpc::Mat r = mssmpc::Mat::Constant(1, 1, cfg.value("r_weight", 1.0));
      mssmpc::TerminalConfig tcfg;
      tcfg.seed = seed;
      tcfg.epsilon = cfg.value("epsilon", 1e-3);
      tcfg.n_samples = cfg.value("n_samples", 10000);
      try {
        const auto design = mssmpc::design_terminal(model, sp, q, r, spec, u_set, tcfg);
        design.save((fs::path(out_dir) / "terminal.json").string());
        std::cout << "terminal design: gamma " << design.gamma << "\n";
      } catch (const std::runtime_error& e) {
        std::cerr << e.what() << "\n";
        return kExitInfeasible;
      }
      return kExitOk;
    }

    if (cmd_reach->parsed()) {
      const auto model = mssmpc::MSSModel::load(model_path);
      const auto sp = mssmpc::Setpoint::load(setpoint_path);
      const auto design = mssmpc::TerminalDesign::load(terminal_path);
      const auto u_set = input_box(cfg);
      const auto spec = spec_from(cfg);
      mssmpc::Vec q_diag = mssmpc::Vec::Ones(model.n_z);
      if (cfg.contains("q_diag")) {
        const auto q = cfg.at("q_diag").get<std::vector<double>>();
        q_diag = Eigen::Map<const mssmpc::Vec>(q.data(), static_cast<Eigen::Index>(q.size()));
      }
      mssmpc::SetpointMPC ctrl(model, sp, design, cfg.value("horizon", 10),
                               mssmpc::Mat(q_diag.asDiagonal()),
                               mssmpc::Mat::Constant(1, 1, cfg.value("r_weight", 1.0)),
                               spec, u_set);
      const double half = cfg.value("roi_half_width", 1.0);
      mssmpc::Vec roi_lo = sp.z_bar.array() - half;
      mssmpc::Vec roi_hi = sp.z_bar.array() + half;
      if (cfg.contains("roi_lo")) {
        const auto lo = cfg.at("roi_lo").get<std::vector<double>>();
        const auto hi = cfg.at("roi_hi").get<std::vector<double>>();
        roi_lo = Eigen::Map<const mssmpc::Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
        roi_hi = Eigen::Map<const mssmpc::Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
      }
      mssmpc::ReachConfig rcfg;
      rcfg.rho_c = cfg.value("rho_c", 0.99);
      rcfg.max_rects = cfg.value("max_rects", 4096);
      rcfg.delta_min_frac = cfg.value("delta_min_frac", 1.0 / 64.0);
      const auto cert = mssmpc::certify_roi(ctrl, roi_lo, roi_hi, rcfg);
      cert.save((fs::path(out_dir) / "certificate.json").string());
      cert.save_boxes_csv((fs::path(out_dir) / "reach_boxes.csv").string());
      std::cout << "certificate: " << cert.passed.size() << " passed / "
                << cert.failed.size() << " failed rects"
                << (cert.complete ? "" : " (incomplete: budget exhausted)") << "\n";
      return cert.passed.empty() ? kExitInfeasible : kExitOk;
    }

    if (cmd_case->parsed()) {
      mssmpc::ExperimentConfig ecfg = mssmpc::ExperimentConfig::defaults(case_id);
      if (cfg.contains("experiment"))
        ecfg = mssmpc::ExperimentConfig::from_json(cfg.at("experiment").dump());
      ecfg.case_id = case_id;
      if (!model_path.empty()) ecfg.model_path = model_path;
      if (ecfg.model_path.empty())
        throw std::runtime_error("run-case: --model or experiment.model_path required");
      if (seed != 0) ecfg.seed = seed;
      ecfg.out_dir = out_dir;
      const auto result = mssmpc::run_case(ecfg);
      mssmpc::report(result, out_dir);
      std::cout << "case " << case_id << ": " << (result.headline_pass ? "PASS" : "FAIL")
                << " (" << result.headline_note << ")\n";
      return result.headline_pass ? kExitOk : kExitCheckFailed;
    }

    if (cmd_report->parsed()) {
      mssmpc::CaseResult result;
      result.config = mssmpc::ExperimentConfig::defaults(cfg.value("case_id", 1));
      if (cfg.contains("experiment"))
        result.config = mssmpc::ExperimentConfig::from_json(cfg.at("experiment").dump());
      for (int i = 0;; ++i) {
        const fs::path p = fs::path(records_dir) / ("run_" + std::to_string(i) + ".json");
        if (!fs::exists(p)) break;
        result.records.push_back(mssmpc::RunRecord::from_json(slurp(p.string())));
      }
      if (!result.records.empty()) {
        mssmpc::DensityOptions dopts;
        if (!result.config.spec.empty()) dopts.spec = result.config.spec;
        result.steady = mssmpc::steady_state_pdf(result.records, dopts);
      }
      mssmpc::report(result, out_dir);
      std::cout << "report bundle with " << result.records.size() << " runs -> " << out_dir
                << "\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
