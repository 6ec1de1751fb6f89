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

#include "mssmpc/sysid.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace mssmpc {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

int chunk_size_for(std::size_t n) {
  // Fixed function of the batch size only, so the reduction shape (and hence
  // the result) is identical regardless of how many threads actually run.
  return static_cast<int>(std::clamp<std::size_t>((n + 7) / 8, 1, 512));
}

struct ChunkResult {
  double logp_sum = 0.0;
  Vec grad;  // d(logp_sum)/d(theta); empty when gradients not requested
};

Mat window_history(const Dataset& d, int lag, int n_u, int n_y,
                   const std::vector<std::pair<int, int>>& windows,
                   std::size_t begin, std::size_t end) {
  const int b = static_cast<int>(end - begin);
  Mat hist(b, lag * (n_u + n_y));
  for (int r = 0; r < b; ++r) {
    const auto [real, start] = windows[begin + static_cast<std::size_t>(r)];
    int c = 0;
    for (int t = 0; t < lag; ++t) hist(r, c++) = d.u(start + t, 0);
    for (int t = 0; t < lag; ++t) hist(r, c++) = d.y(real, start + t);
  }
  return hist;
}

// Tape evaluation of one chunk: sum over windows and horizon of log p(y).
ChunkResult chunk_logp_tape(const MSSModel& m, const ParamVector& pv,
                            const WindowBatch& batch, std::size_t begin,
                            std::size_t end, bool need_grad) {
  const int b = static_cast<int>(end - begin);
  ad::Tape tape;
  tape.reserve(static_cast<std::size_t>(batch.t_sub) * 80 + 128);
  ad::Var theta = tape.var(Mat(pv.flat()));
  const ad_ops::ModelVars mv = ad_ops::bind_params(tape, m, theta, pv);

  const Mat hist = window_history(*batch.data, batch.lag, m.n_u, m.n_y,
                                  batch.windows, begin, end);
  ad::Var z = ad_ops::model_encode(tape, mv, tape.constant(hist));

  ad::Var total{};
  for (int t = 0; t < batch.t_sub; ++t) {
    Mat u_t(b, m.n_u), y_t(b, m.n_y);
    for (int r = 0; r < b; ++r) {
      const auto [real, start] = batch.windows[begin + static_cast<std::size_t>(r)];
      u_t(r, 0) = batch.data->u(start + batch.lag + t, 0);
      y_t(r, 0) = batch.data->y(real, start + batch.lag + t);
    }
    const ad::Var uc = tape.constant(u_t);
    const ad_ops::GmmVars g = ad_ops::model_output(tape, mv, z, uc);
    const ad::Var logp = tape.sum(ad_ops::gmm_log_pdf_rowwise(tape, g, y_t));
    total = (t == 0) ? logp : total + logp;
    if (t + 1 < batch.t_sub) z = ad_ops::model_step(tape, mv, z, uc);
  }

  ChunkResult res;
  res.logp_sum = tape.scalar(total);
  if (need_grad) {
    tape.backward(total);
    res.grad = tape.grad(theta).col(0);
  }
  return res;
}

// Chunked, order-fixed reduction; chunks may evaluate on worker threads.
ChunkResult batched_logp(const MSSModel& m, const ParamVector& pv,
                         const WindowBatch& batch, bool need_grad) {
  const std::size_t n = batch.windows.size();
  if (n == 0) throw std::invalid_argument("sysid: empty window batch");
  const int chunk = chunk_size_for(n);
  const std::size_t n_chunks = (n + static_cast<std::size_t>(chunk) - 1) / chunk;
  std::vector<ChunkResult> parts(n_chunks);

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned workers = std::min<unsigned>(hw, static_cast<unsigned>(n_chunks));
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t c = w; c < n_chunks; c += workers) {
          const std::size_t lo = c * static_cast<std::size_t>(chunk);
          const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(chunk));
          parts[c] = chunk_logp_tape(m, pv, batch, lo, hi, need_grad);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  ChunkResult total;
  total.logp_sum = 0.0;
  if (need_grad) total.grad = Vec::Zero(pv.size());
  for (const auto& part : parts) {
    total.logp_sum += part.logp_sum;
    if (need_grad) total.grad += part.grad;
  }
  return total;
}

double batch_points(const WindowBatch& b) {
  return static_cast<double>(b.windows.size()) * b.t_sub;
}

std::vector<std::pair<int, int>> enumerate_windows(const Dataset& d, int lag,
                                                   int t_sub, int lo, int hi) {
  std::vector<std::pair<int, int>> out;
  const int last_start = hi - lag - t_sub;
  for (int r = 0; r < d.realizations(); ++r)
    for (int s = lo; s <= last_start; ++s) out.emplace_back(r, s);
  return out;
}

struct AdamState {
  Vec m, v;
  int t = 0;
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(int dim, double lr_in) : m(Vec::Zero(dim)), v(Vec::Zero(dim)), lr(lr_in) {}

  void update(Vec& theta, const Vec& grad) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    theta -= (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
  }
};

}  // namespace

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs_adam"] = epochs_adam;
  j["epochs_quasi_newton"] = epochs_quasi_newton;
  j["lr"] = lr;
  j["lr_final_frac"] = lr_final_frac;
  j["batch"] = batch;
  j["t_sub"] = t_sub;
  j["l2"] = l2;
  j["seed"] = seed;
  j["val_fraction"] = val_fraction;
  j["val_every"] = val_every;
  j["normalize"] = normalize;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  c.epochs_adam = j.value("epochs_adam", c.epochs_adam);
  c.epochs_quasi_newton = j.value("epochs_quasi_newton", c.epochs_quasi_newton);
  c.lr = j.value("lr", c.lr);
  c.lr_final_frac = j.value("lr_final_frac", c.lr_final_frac);
  c.batch = j.value("batch", c.batch);
  c.t_sub = j.value("t_sub", c.t_sub);
  c.l2 = j.value("l2", c.l2);
  c.seed = j.value("seed", c.seed);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.val_every = j.value("val_every", c.val_every);
  c.normalize = j.value("normalize", c.normalize);
  if (c.t_sub < 1 || c.lr <= 0.0) throw std::invalid_argument("TrainConfig: t_sub >= 1 and lr > 0 required");
  return c;
}

std::string FitReport::to_json() const {
  nlohmann::json j;
  j["loss_curve"] = loss_curve;
  j["val_curve"] = nlohmann::json::array();
  for (const auto& [e, v] : val_curve) j["val_curve"].push_back({{"epoch", e}, {"nll", v}});
  j["initial_val_nll"] = initial_val_nll;
  j["best_val_nll"] = best_val_nll;
  j["final_train_nll"] = final_train_nll;
  j["wall_clock_seconds"] = wall_clock_seconds;
  j["aborted_at_epoch"] = aborted_at_epoch;
  j["config"] = nlohmann::json::parse(config_echo.empty() ? "{}" : config_echo);
  return j.dump();
}

double nll_loss(const MSSModel& m, const WindowBatch& batch, double l2) {
  if (batch.t_sub < 1) throw std::invalid_argument("nll_loss: t_sub must be >= 1");
  const ParamVector pv = m.params();
  const ChunkResult r = batched_logp(m, pv, batch, false);
  return -r.logp_sum / batch_points(batch) + l2 * pv.flat().squaredNorm();
}

ad::GradResult nll_loss_grad(const MSSModel& m, const WindowBatch& batch, double l2) {
  const ParamVector pv = m.params();
  const ChunkResult r = batched_logp(m, pv, batch, true);
  const double scale = -1.0 / batch_points(batch);
  ad::GradResult g;
  g.value = scale * r.logp_sum + l2 * pv.flat().squaredNorm();
  g.grad = scale * r.grad + 2.0 * l2 * pv.flat();
  if (!g.grad.allFinite()) throw ad::NumericError("nll_loss_grad", "gradient");
  return g;
}

namespace {

double validation_nll(const MSSModel& m, const WindowBatch& val) {
  if (val.windows.empty()) return std::numeric_limits<double>::quiet_NaN();
  const ParamVector pv = m.params();
  const ChunkResult r = batched_logp(m, pv, val, false);
  return -r.logp_sum / batch_points(val);
}

}  // namespace

std::pair<MSSModel, FitReport> train(const MSSModel& m0, const Dataset& data,
                                     const TrainConfig& cfg) {
  const auto t_start = std::chrono::steady_clock::now();
  MSSModel m = m0;
  FitReport report;
  report.config_echo = cfg.to_json();

  const int total_epochs = cfg.epochs_adam + cfg.epochs_quasi_newton;
  if (total_epochs == 0) {
    report.wall_clock_seconds = 0.0;
    return {m, report};
  }

  const int window_len = m.lag + cfg.t_sub;
  if (data.length() < window_len + 1)
    throw std::invalid_argument("train: dataset shorter than lag + t_sub");

  if (cfg.normalize) {
    m.u_mean = Vec::Constant(1, data.u.mean());
    m.u_std = Vec::Constant(1, std::max(1e-8, std::sqrt((data.u.array() - data.u.mean()).square().mean())));
    m.y_mean = Vec::Constant(1, data.y.mean());
    m.y_std = Vec::Constant(1, std::max(1e-8, std::sqrt((data.y.array() - data.y.mean()).square().mean())));
  }

  const int train_len = std::max(window_len, static_cast<int>(std::floor(
                            data.length() * (1.0 - cfg.val_fraction))));
  WindowBatch train_batch{&data, m.lag, cfg.t_sub, {}};
  const auto train_windows = enumerate_windows(data, m.lag, cfg.t_sub, 0, train_len);
  WindowBatch val_batch{&data, m.lag, cfg.t_sub,
                        enumerate_windows(data, m.lag, cfg.t_sub, train_len, data.length())};
  if (train_windows.empty()) throw std::invalid_argument("train: no training windows");

  ParamVector pv = m.params();
  Vec theta = pv.flat();

  const auto set_theta = [&](const Vec& t) {
    pv.flat() = t;
    m.set_params(pv);
  };

  double best_val = validation_nll(m, val_batch);
  report.initial_val_nll = best_val;
  report.val_curve.emplace_back(0, best_val);
  Vec best_theta = theta;

  AdamState adam(static_cast<int>(theta.size()), cfg.lr);
  Rng sampler(cfg.seed, 0xADA0);

  const auto sample_batch = [&](int count) {
    train_batch.windows.clear();
    train_batch.windows.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const std::size_t idx =
          static_cast<std::size_t>(sampler.uniform() * static_cast<double>(train_windows.size()));
      train_batch.windows.push_back(train_windows[std::min(idx, train_windows.size() - 1)]);
    }
  };

  const auto validate_and_checkpoint = [&](int epoch) {
    if (val_batch.windows.empty()) {
      best_theta = theta;  // no held-out data: checkpoint the latest iterate
      return;
    }
    const double val = validation_nll(m, val_batch);
    report.val_curve.emplace_back(epoch, val);
    if (val < best_val) {
      best_val = val;
      best_theta = theta;
    }
  };

  for (int epoch = 1; epoch <= cfg.epochs_adam; ++epoch) {
    sample_batch(cfg.batch);
    // Cosine decay from lr to lr_final_frac * lr across the Adam phase.
    const double progress = (cfg.epochs_adam > 1)
                                ? static_cast<double>(epoch - 1) / (cfg.epochs_adam - 1)
                                : 0.0;
    const double floor_frac = std::clamp(cfg.lr_final_frac, 0.0, 1.0);
    adam.lr = cfg.lr * (floor_frac + (1.0 - floor_frac) *
                                         0.5 * (1.0 + std::cos(3.14159265358979 * progress)));
    try {
      const ad::GradResult g = nll_loss_grad(m, train_batch, cfg.l2);
      report.loss_curve.push_back(g.value);
      adam.update(theta, g.grad);
      set_theta(theta);
    } catch (const ad::NumericError&) {
      report.aborted_at_epoch = epoch;
      break;
    }
    if (epoch % cfg.val_every == 0 || epoch == cfg.epochs_adam)
      validate_and_checkpoint(epoch);
  }

  // Quasi-Newton refinement on the full-batch loss (L-BFGS, strong Wolfe).
  if (cfg.epochs_quasi_newton > 0 && report.aborted_at_epoch < 0) {
    WindowBatch full{&data, m.lag, cfg.t_sub, train_windows};
    const auto eval = [&](const Vec& t) -> ad::GradResult {
      set_theta(t);
      return nll_loss_grad(m, full, cfg.l2);
    };
    try {
      ad::GradResult cur = eval(theta);
      report.loss_curve.push_back(cur.value);
      struct Pair { Vec s, y; double sy; };
      std::vector<Pair> mem;
      for (int it = 0; it < cfg.epochs_quasi_newton; ++it) {
        // Two-loop recursion.
        Vec q = -cur.grad;
        std::vector<double> alpha_i(mem.size());
        for (int i = static_cast<int>(mem.size()) - 1; i >= 0; --i) {
          alpha_i[static_cast<std::size_t>(i)] =
              mem[static_cast<std::size_t>(i)].s.dot(q) / mem[static_cast<std::size_t>(i)].sy;
          q -= alpha_i[static_cast<std::size_t>(i)] * mem[static_cast<std::size_t>(i)].y;
        }
        if (!mem.empty()) q *= mem.back().sy / mem.back().y.squaredNorm();
        for (std::size_t i = 0; i < mem.size(); ++i) {
          const double beta = mem[i].y.dot(q) / mem[i].sy;
          q += (alpha_i[i] - beta) * mem[i].s;
        }
        Vec d = q;
        double slope = d.dot(cur.grad);
        if (slope > -1e-16) {
          d = -cur.grad;
          slope = d.dot(cur.grad);
        }
        // Strong Wolfe via bracketing with simple bisection zoom.
        const double c1 = 1e-4, c2 = 0.9;
        double alpha = 1.0, alpha_lo = 0.0, alpha_hi = -1.0;
        ad::GradResult trial;
        bool found = false;
        for (int ls = 0; ls < 30; ++ls) {
          bool usable = true;
          try {
            trial = eval(theta + alpha * d);
          } catch (const ad::NumericError&) {
            usable = false;
          }
          if (!usable || trial.value > cur.value + c1 * alpha * slope) {
            alpha_hi = alpha;
            alpha = (alpha_lo + alpha_hi) / 2.0;
            continue;
          }
          if (std::abs(trial.grad.dot(d)) <= -c2 * slope) {
            found = true;
            break;
          }
          if (trial.grad.dot(d) > 0.0) {
            alpha_hi = alpha;
            alpha = (alpha_lo + alpha_hi) / 2.0;
          } else {
            alpha_lo = alpha;
            alpha = (alpha_hi < 0.0) ? alpha * 2.0 : (alpha_lo + alpha_hi) / 2.0;
          }
        }
        if (!found && !(trial.grad.size() && trial.value < cur.value)) break;
        const Vec step = alpha * d;
        const Vec dgrad = trial.grad - cur.grad;
        if (step.dot(dgrad) > 1e-12) {
          mem.push_back({step, dgrad, step.dot(dgrad)});
          if (mem.size() > 10) mem.erase(mem.begin());
        }
        theta += step;
        set_theta(theta);
        cur = trial;
        report.loss_curve.push_back(cur.value);
        if (cur.grad.norm() < 1e-9) break;
        if ((it + 1) % cfg.val_every == 0) validate_and_checkpoint(cfg.epochs_adam + it + 1);
      }
      validate_and_checkpoint(total_epochs);
    } catch (const ad::NumericError&) {
      report.aborted_at_epoch = cfg.epochs_adam;
    }
  }

  // Return the best-validation parameters seen (falls back to the initial
  // checkpoint when training never improved).
  set_theta(best_theta);
  report.best_val_nll = best_val;
  report.final_train_nll = report.loss_curve.empty() ? 0.0 : report.loss_curve.back();
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {m, report};
}

double mean_log_likelihood(const MSSModel& m, const Dataset& ensemble, int n_test_bar) {
  const int s = ensemble.realizations();
  if (ensemble.length() < m.lag + n_test_bar)
    throw std::invalid_argument("mean_log_likelihood: ensemble shorter than lag + n_test_bar");

  // All realizations evaluated as one batch.
  Mat hist(s, m.lag * (m.n_u + m.n_y));
  for (int i = 0; i < s; ++i) {
    int c = 0;
    for (int t = 0; t < m.lag; ++t) hist(i, c++) = (ensemble.u(t, 0) - m.u_mean(0)) / m.u_std(0);
    for (int t = 0; t < m.lag; ++t) hist(i, c++) = (ensemble.y(i, t) - m.y_mean(0)) / m.y_std(0);
  }
  Mat z = m.enc_net.forward(hist);

  double total = 0.0;
  for (int t = 0; t < n_test_bar; ++t) {
    const int k = m.lag + t;
    const double u_norm = (ensemble.u(k, 0) - m.u_mean(0)) / m.u_std(0);
    Mat xi(s, m.n_z + 1);
    xi.leftCols(m.n_z) = z;
    xi.col(m.n_z).setConstant(u_norm);

    const Mat alpha = m.w_net.forward(xi);
    const Mat mu_n = m.mu_net.forward(xi);
    const Mat s_n = m.sigma_net.forward(xi);
    for (int i = 0; i < s; ++i) {
      const double amax = alpha.row(i).maxCoeff();
      const Vec logw = (alpha.row(i).array() - amax -
                        std::log((alpha.row(i).array() - amax).exp().sum()))
                           .transpose();
      double best = -std::numeric_limits<double>::infinity();
      Vec terms(m.n_g);
      for (int cidx = 0; cidx < m.n_g; ++cidx) {
        const double mu = m.y_mean(0) + m.y_std(0) * mu_n(i, cidx);
        const double sg =
            std::clamp(m.y_std(0) * std::exp(s_n(i, cidx)), kSigmaFloor, m.sigma_cap);
        const double zeta = (ensemble.y(i, k) - mu) / sg;
        terms(cidx) = logw(cidx) - 0.5 * zeta * zeta - std::log(sg) - 0.5 * kLogTwoPi;
        best = std::max(best, terms(cidx));
      }
      total += std::max(best + std::log((terms.array() - best).exp().sum()),
                        std::log(kDensityFloor));
    }
    if (t + 1 < n_test_bar) z = m.f_net.forward(xi);
  }
  return total / (static_cast<double>(n_test_bar) * s);
}

double vasicek_entropy(Vec samples) {
  const int n = static_cast<int>(samples.size());
  if (n < 16) throw std::invalid_argument("vasicek_entropy: need at least 16 samples");
  std::sort(samples.data(), samples.data() + n);
  // Deterministic tie-break: spacing estimators need distinct order statistics.
  for (int i = 0; i < n; ++i) samples(i) += 1e-12 * i;
  const int m = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const int up = std::min(n - 1, i + m);
    const int lo = std::max(0, i - m);
    acc += std::log(static_cast<double>(n) / (2.0 * m) * (samples(up) - samples(lo)));
  }
  const double h_plain = acc / n;
  // Standard bias correction (Wieczorkowski & Grzegorzewski).
  auto digamma = [](double x) {
    double r = 0.0;
    while (x < 6.0) {
      r -= 1.0 / x;
      x += 1.0;
    }
    const double inv = 1.0 / x, inv2 = inv * inv;
    return r + std::log(x) - 0.5 * inv -
           inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  };
  double psi_sum = 0.0;
  for (int i = 1; i <= m; ++i) psi_sum += digamma(static_cast<double>(i + m - 1));
  const double correction = -std::log(static_cast<double>(n)) + std::log(2.0 * m) -
                            (1.0 - 2.0 * m / n) * digamma(2.0 * m) +
                            digamma(static_cast<double>(n) + 1.0) - (2.0 / n) * psi_sum;
  return h_plain + correction;
}

double entropy_upper_limit(const Dataset& ensemble, int first_step, int num_steps) {
  if (ensemble.realizations() < 100)
    throw std::invalid_argument("entropy_upper_limit: need S >= 100 per time step");
  if (first_step + num_steps > ensemble.length())
    throw std::invalid_argument("entropy_upper_limit: step range out of bounds");
  double acc = 0.0;
  for (int k = first_step; k < first_step + num_steps; ++k)
    acc += vasicek_entropy(ensemble.y.col(k));
  return -acc / num_steps;
}

}  // namespace mssmpc
