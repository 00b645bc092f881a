#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <thread>

#include <Eigen/Core>

#include "ekinode/config.hpp"

namespace ekinode {

namespace fs = std::filesystem;

inline constexpr std::string_view kVersion = "0.1.0";

/// One row of the per-epoch log. Gradient runs leave gamma empty.
struct EpochRow {
  std::size_t epoch = 0;
  std::optional<double> gamma;
  std::size_t ensemble_size = 1;
  double min_loss = 0.0;
  double mean_loss = 0.0;
  double train_mse = 0.0;
  double test_mse = 0.0;

  bool operator==(const EpochRow&) const = default;
};

struct ControlSummary {
  double terminal = 0.0;
  double energy = 0.0;
  double mse_vs_optimal = 0.0;
  double optimal_energy = 0.0;
};

struct RunResult {
  ExperimentConfig config;
  bool ok = true;
  std::string error;
  std::vector<EpochRow> log;
  ParamVector theta;  // best member (EKI) or current iterate (gradient)
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double train_mse = std::numeric_limits<double>::quiet_NaN();
  double test_mse = std::numeric_limits<double>::quiet_NaN();
  std::optional<ControlSummary> control;
  double runtime_seconds = 0.0;

  std::size_t epochs_run() const { return log.empty() ? 0 : log.back().epoch; }
};

// ---------------------------------------------------------------------------
// Output helpers

inline void write_log_csv(std::ostream& os, const std::vector<EpochRow>& log) {
  os << "epoch,gamma,J,min_loss,mean_loss,train_mse,test_mse\n" << std::setprecision(17);
  for (const auto& r : log) {
    os << r.epoch << ",";
    if (r.gamma) os << *r.gamma;
    os << "," << r.ensemble_size << "," << r.min_loss << "," << r.mean_loss << "," << r.train_mse
       << "," << r.test_mse << "\n";
  }
}

inline std::vector<EpochRow> read_log_csv(std::istream& is) {
  std::vector<EpochRow> out;
  std::string line;
  std::getline(is, line);
  auto num = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::invalid_argument("log csv: expected 7 columns");
    EpochRow r;
    r.epoch = std::stoul(cells[0]);
    if (!cells[1].empty()) r.gamma = std::stod(cells[1]);
    r.ensemble_size = std::stoul(cells[2]);
    r.min_loss = num(cells[3]);
    r.mean_loss = num(cells[4]);
    r.train_mse = num(cells[5]);
    r.test_mse = num(cells[6]);
    out.push_back(r);
  }
  return out;
}

namespace detail {

// JSON has no NaN; non-finite values are written as null.
inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double number_from(const json& j) {
  return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN();
}

inline std::string compiler_version() {
#if defined(__clang__)
  return "clang " __clang_version__;
#elif defined(__GNUC__)
  return "gcc " __VERSION__;
#else
  return "unknown";
#endif
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

}  // namespace detail

inline json layout_json(const MlpSpec& spec) {
  json layers = json::array();
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes().size(); ++l) {
    const std::size_t in = spec.layer_sizes()[l], out = spec.layer_sizes()[l + 1];
    layers.push_back({{"in", in}, {"out", out}, {"weight_offset", offset},
                      {"bias_offset", offset + in * out}});
    offset += in * out + out;
  }
  return {{"layers", spec.layer_sizes()},
          {"activation", to_string(spec.activation())},
          {"order", "per layer: weight row-major (out x in), then bias"},
          {"blocks", layers}};
}

inline MlpSpec network_spec(const ExperimentConfig& c) {
  if (c.is_control()) return make_problem_control(c).controller;
  const std::size_t n = 2;  // both benchmarks are planar
  std::vector<std::size_t> layers{n};
  layers.insert(layers.end(), c.sysid.hidden.begin(), c.sysid.hidden.end());
  layers.push_back(n);
  return MlpSpec(layers, c.sysid.activation);
}

inline json report_json(const RunResult& r) {
  using detail::number_or_null;
  json j;
  j["status"] = r.ok ? "ok" : "failed";
  j["error"] = r.error;
  j["epochs_run"] = r.epochs_run();
  j["final"] = {{"loss", number_or_null(r.final_loss)},
                {"train_mse", number_or_null(r.train_mse)},
                {"test_mse", number_or_null(r.test_mse)}};
  if (r.control) {
    j["final"]["terminal_state"] = number_or_null(r.control->terminal);
    j["final"]["energy"] = number_or_null(r.control->energy);
    j["final"]["mse_vs_optimal"] = number_or_null(r.control->mse_vs_optimal);
    j["final"]["optimal_energy"] = number_or_null(r.control->optimal_energy);
  }
  j["theta"] = std::vector<double>(r.theta.begin(), r.theta.end());
  j["layout"] = layout_json(network_spec(r.config));
  j["config"] = to_json(r.config);
  j["versions"] = {{"eki-node", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                   {"compiler", detail::compiler_version()}};
  j["rng"] = {{"algorithm", Rng::kName}, {"seed", r.config.seed}};
  j["runtime_seconds"] = r.runtime_seconds;
  return j;
}

/// Inverse of report_json for the fields needed downstream.
inline RunResult result_from_report(const json& j) {
  RunResult r;
  r.config = config_from_json(j.at("config"));
  r.ok = j.at("status") == "ok";
  r.error = j.value("error", "");
  const auto theta = j.at("theta").get<std::vector<double>>();
  r.theta = Eigen::Map<const ParamVector>(theta.data(), static_cast<Eigen::Index>(theta.size()));
  const json& f = j.at("final");
  r.final_loss = detail::number_from(f.at("loss"));
  r.train_mse = detail::number_from(f.at("train_mse"));
  r.test_mse = detail::number_from(f.at("test_mse"));
  if (f.contains("mse_vs_optimal"))
    r.control = ControlSummary{detail::number_from(f.at("terminal_state")),
                               detail::number_from(f.at("energy")),
                               detail::number_from(f.at("mse_vs_optimal")),
                               detail::number_from(f.at("optimal_energy"))};
  r.runtime_seconds = j.value("runtime_seconds", 0.0);
  return r;
}

inline RunResult load_report(const fs::path& dir) {
  const fs::path p = fs::is_directory(dir) ? dir / "report.json" : dir;
  std::ifstream is(p);
  if (!is) throw std::runtime_error("no report at " + p.string());
  RunResult r = result_from_report(json::parse(is));
  const fs::path log = p.parent_path() / "log.csv";
  if (std::ifstream ls(log); ls) r.log = read_log_csv(ls);
  return r;
}

inline void write_outputs(const RunResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream log;
  write_log_csv(log, r.log);
  detail::write_text(dir / "log.csv", log.str());
  detail::write_text(dir / "report.json", report_json(r).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Running

namespace detail {

inline double nan() { return std::numeric_limits<double>::quiet_NaN(); }

template <class F>
double or_nan(F f) {
  try {
    return f();
  } catch (const std::exception&) {
    return nan();
  }
}

/// Evaluates `f(j)` for every member on `workers` threads. Each slot is
/// written by exactly one thread, so the result does not depend on timing.
template <class F>
std::vector<ForwardMapOutput> evaluate_members(std::size_t count, std::size_t workers, F f) {
  std::vector<ForwardMapOutput> out(count);
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t j = 0; j < count; ++j) out[j] = f(j);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t j = w; j < count; j += workers) out[j] = f(j);
    });
  for (auto& t : pool) t.join();
  return out;
}

class Budget {
 public:
  explicit Budget(const ExperimentConfig& c)
      : epochs_(c.epochs), seconds_(c.wall_clock_seconds), start_(std::chrono::steady_clock::now()) {}

  /// True while another update should be taken after logging epoch m.
  bool more(std::size_t m) const {
    if (epochs_) return m < *epochs_;
    return elapsed() < *seconds_;
  }
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::optional<std::size_t> epochs_;
  std::optional<double> seconds_;
  std::chrono::steady_clock::time_point start_;
};

inline EpochRow summarize_losses(std::size_t epoch, const std::vector<double>& losses,
                                 const std::vector<ForwardMapOutput>& outputs) {
  EpochRow row;
  row.epoch = epoch;
  row.ensemble_size = losses.size();
  row.min_loss = min_loss_member(losses).second;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < losses.size(); ++j)
    if (!outputs[j].failed) {
      sum += losses[j];
      ++count;
    }
  row.mean_loss = count > 0 ? sum / static_cast<double>(count) : nan();
  return row;
}

inline void finish_control(RunResult& r, const ControlProblem& prob) {
  ControlSummary s;
  s.optimal_energy = optimal_energy(prob);
  try {
    const ControlRollout roll = control_rollout(r.theta, prob);
    s.terminal = roll.terminal();
    s.energy = roll.energy;
    s.mse_vs_optimal = control_mse_vs_optimal(r.theta, prob);
  } catch (const std::exception&) {
    s.terminal = s.energy = s.mse_vs_optimal = nan();
  }
  r.control = s;
}

inline void run_eki(const ExperimentConfig& c, RunResult& r, const Budget& budget) {
  const Rng root(c.seed);
  const auto& e = c.eki;
  const bool control = c.is_control();
  std::optional<SysIdProblem> sys;
  std::optional<ControlProblem> ctl;
  if (control)
    ctl = make_problem_control(c);
  else
    sys = make_problem_sysid(c);
  const MlpSpec spec = control ? ctl->controller : sys->net;
  Vector y;
  if (control) {
    y = Vector::Constant(1, ctl->x_star);
  } else {
    y = sys->observations.stacked_values();
  }

  Ensemble ens = make_ensemble(spec, e.ensemble_size, root.split(streams::kInit));
  ens.rng = root.split(streams::kExpand);

  for (std::size_t m = 0;; ++m) {
    for (const auto& x : e.expansions)
      if (x.epoch == m) ens = ensemble_expand(std::move(ens), x.count, spec, e.expansion_mode, e.perturb_scale);

    const double gamma = e.gamma(m);
    const auto outputs = evaluate_members(ens.size(), e.workers, [&](std::size_t j) {
      return control ? control_forward_map(ens.members[j], *ctl) : sysid_forward_map(ens.members[j], *sys);
    });
    ControlProblem scored = control ? *ctl : ControlProblem{};
    scored.gamma = gamma;
    std::vector<double> losses(ens.size(), kFailedMemberLoss);
    for (std::size_t j = 0; j < ens.size(); ++j) {
      if (outputs[j].failed) continue;
      const double v = control ? control_loss_from(outputs[j].g[0], *outputs[j].h * *outputs[j].h, scored)
                               : mse_stacked(outputs[j].g, y, sys->state_dim());
      if (std::isfinite(v)) losses[j] = v;
    }
    EpochRow row = summarize_losses(m, losses, outputs);
    row.gamma = gamma;
    const std::size_t best = min_loss_member(losses).first;
    r.theta = ens.members[best];
    r.final_loss = row.min_loss;
    if (control) {
      row.train_mse = outputs[best].failed ? nan()
                                           : std::pow(outputs[best].g[0] - ctl->x_star, 2);
      row.test_mse = or_nan([&] { return control_mse_vs_optimal(r.theta, *ctl); });
    } else {
      row.train_mse = outputs[best].failed ? nan() : losses[best];
      row.test_mse = or_nan([&] { return test_mse(r.theta, *sys); });
    }
    r.train_mse = row.train_mse;
    r.test_mse = row.test_mse;
    r.log.push_back(row);

    if (!budget.more(m)) break;
    if (control)
      ens = eki_step_regularized(std::move(ens), outputs, y, {gamma, ctl->gamma_prime, ctl->mu}, e.step, e.form);
    else
      ens = eki_step(std::move(ens), outputs, y, gamma, e.step, e.form);
  }
  if (control) finish_control(r, *ctl);
}

inline void run_gradient(const ExperimentConfig& c, RunResult& r, const Budget& budget) {
  const bool control = c.is_control();
  std::optional<SysIdProblem> sys;
  std::optional<ControlProblem> ctl;
  if (control)
    ctl = make_problem_control(c);
  else
    sys = make_problem_sysid(c);
  const MlpSpec spec = control ? ctl->controller : sys->net;
  Rng init = Rng(c.seed).split(streams::kInit);
  r.theta = mlp_init(spec, init);
  AdamState adam = AdamState::fresh(r.theta.size(), c.gradient.eta);

  for (std::size_t m = 0;; ++m) {
    const LossAndGradient lg = control ? bptt_gradient(r.theta, *ctl, c.gradient.unfold)
                                       : bptt_gradient(r.theta, *sys, c.gradient.unfold);
    EpochRow row;
    row.epoch = m;
    row.min_loss = row.mean_loss = lg.loss;
    if (control) {
      row.train_mse = or_nan([&] {
        const double miss = control_rollout(r.theta, *ctl).terminal() - ctl->x_star;
        return miss * miss;
      });
      row.test_mse = or_nan([&] { return control_mse_vs_optimal(r.theta, *ctl); });
    } else {
      row.train_mse = or_nan([&] { return mse(r.theta, *sys); });
      row.test_mse = or_nan([&] { return test_mse(r.theta, *sys); });
    }
    r.final_loss = lg.loss;
    r.train_mse = row.train_mse;
    r.test_mse = row.test_mse;
    r.log.push_back(row);

    if (!budget.more(m)) break;
    if (c.optimizer == OptimizerKind::Adam)
      adam_step(adam, r.theta, lg.gradient);
    else
      sgd_step(r.theta, lg.gradient, c.gradient.eta);
  }
  if (control) finish_control(r, *ctl);
}

}  // namespace detail

/// Trains one configuration. Numerical breakdown is reported through
/// `ok`/`error` rather than thrown; config problems throw ConfigError.
/// With a nonempty `out_dir`, log.csv and report.json are written there.
inline RunResult run_experiment(const ExperimentConfig& config, const fs::path& out_dir = {}) {
  validate(config);
  RunResult r;
  r.config = config;
  const detail::Budget budget(config);
  try {
    if (config.is_eki())
      detail::run_eki(config, r, budget);
    else
      detail::run_gradient(config, r, budget);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& ex) {
    r.ok = false;
    r.error = ex.what();
  }
  r.runtime_seconds = budget.elapsed();
  if (!out_dir.empty()) write_outputs(r, out_dir);
  return r;
}

// ---------------------------------------------------------------------------
// Replicate tables

/// Median with the even-count convention (mean of the two middle values).
inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TableRow {
  std::string label;
  std::size_t replicates = 0;
  std::size_t failures = 0;  // runs that broke down or ended non-finite
  double train_median = 0.0;
  double train_min = 0.0;
  double test_median = 0.0;
  double test_min = 0.0;
};

inline TableRow summarize_runs(const std::string& label, const std::vector<RunResult>& runs) {
  TableRow row;
  row.label = label;
  row.replicates = runs.size();
  std::vector<double> train, test;
  for (const auto& r : runs) {
    if (!r.ok || !std::isfinite(r.train_mse)) {
      ++row.failures;
      continue;
    }
    train.push_back(r.train_mse);
    if (std::isfinite(r.test_mse)) test.push_back(r.test_mse);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row.train_median = median(train);
  row.test_median = median(test);
  row.train_min = train.empty() ? nan : *std::min_element(train.begin(), train.end());
  row.test_min = test.empty() ? nan : *std::min_element(test.begin(), test.end());
  return row;
}

/// Entries are preset names or config objects, as a bare array or under "configs".
inline std::vector<ExperimentConfig> configs_from_json(const json& j) {
  const json& list = j.is_object() && j.contains("configs") ? j.at("configs") : j;
  if (!list.is_array()) throw ConfigError({"configs: expected an array"});
  std::vector<ExperimentConfig> out;
  std::vector<std::string> issues;
  for (std::size_t i = 0; i < list.size(); ++i) {
    try {
      out.push_back(list[i].is_string() ? preset(list[i].get<std::string>()) : config_from_json(list[i]));
    } catch (const ConfigError& e) {
      for (const auto& s : e.issues()) issues.push_back("configs[" + std::to_string(i) + "]." + s);
    }
  }
  if (!issues.empty()) throw ConfigError(issues);
  return out;
}

inline std::string format_table_text(const std::vector<TableRow>& rows) {
  std::vector<std::vector<std::string>> cols;
  auto sci = [](double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << v;
    return os.str();
  };
  const std::vector<std::string> names{"", "replicates", "failures", "train median", "train min",
                                       "test median", "test min"};
  cols.push_back(names);
  for (const auto& r : rows)
    cols.push_back({r.label, std::to_string(r.replicates), std::to_string(r.failures), sci(r.train_median),
                    sci(r.train_min), sci(r.test_median), sci(r.test_min)});
  std::vector<std::size_t> width;
  for (const auto& c : cols) {
    std::size_t w = 0;
    for (const auto& s : c) w = std::max(w, s.size());
    width.push_back(w);
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const auto& s = cols[k][i];
      os << (k == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[k])) << s
         << (k + 1 < cols.size() ? "  " : "");
    }
    os << "\n";
  }
  return os.str();
}

inline void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "label,replicates,failures,train_median,train_min,test_median,test_min\n"
     << std::setprecision(17);
  for (const auto& r : rows)
    os << r.label << "," << r.replicates << "," << r.failures << "," << r.train_median << ","
       << r.train_min << "," << r.test_median << "," << r.test_min << "\n";
}

/// Runs every config with seeds seed, seed+1, ... and writes table.csv and
/// table.txt plus one run directory per replicate under `out_dir`.
inline std::vector<TableRow> run_table(const std::vector<ExperimentConfig>& configs, std::size_t replicates,
                                       const fs::path& out_dir, std::optional<std::uint64_t> seed = {}) {
  if (replicates == 0) throw ConfigError({"replicates: must be >= 1"});
  std::vector<TableRow> rows;
  for (const auto& base : configs) {
    std::vector<RunResult> runs;
    for (std::size_t k = 0; k < replicates; ++k) {
      ExperimentConfig c = base;
      c.seed = seed.value_or(base.seed) + k;
      const fs::path dir =
          out_dir.empty() ? fs::path() : out_dir / c.name / ("seed_" + std::to_string(c.seed));
      runs.push_back(run_experiment(c, dir));
    }
    rows.push_back(summarize_runs(base.name, runs));
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ostringstream csv;
    write_table_csv(csv, rows);
    detail::write_text(out_dir / "table.csv", csv.str());
    detail::write_text(out_dir / "table.txt", format_table_text(rows));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Plot data

namespace detail {

inline std::string trajectory_csv(const Trajectory& t) {
  std::ostringstream os;
  write_csv(os, t);
  return os.str();
}

inline Trajectory learned_trajectory(const RunResult& r) {
  if (r.config.is_control()) return control_rollout(r.theta, make_problem_control(r.config)).trajectory;
  const SysIdProblem prob = make_problem_sysid(r.config);
  return integrate(neural_field(prob.net, r.theta), prob.x0, prob.observations.reference.times,
                   prob.integrator);
}

inline constexpr const char* kSysIdPlotScript = R"(import csv
import matplotlib.pyplot as plt

def load(name):
    with open(name) as f:
        rows = list(csv.reader(f))
    return rows[0], [[float(v) if v else float("nan") for v in r] for r in rows[1:]]

_, ref = load("reference.csv")
_, fit = load("trajectory.csv")
_, obs = load("observations.csv")
_, loss = load("loss_curve.csv")

fig, ax = plt.subplots(1, 3, figsize=(15, 4.5))
ax[0].plot([r[1] for r in ref], [r[2] for r in ref], "k-", lw=1, label="reference")
ax[0].plot([r[1] for r in fit], [r[2] for r in fit], "r--", lw=1, label="learned")
ax[0].plot([r[1] for r in obs], [r[2] for r in obs], "b.", ms=4, label="observed")
ax[0].set_xlabel("x1")
ax[0].set_ylabel("x2")
ax[0].legend()
for j, name in enumerate(("x1", "x2")):
    ax[1].plot([r[0] for r in ref], [r[j + 1] for r in ref], "k-", lw=1)
    ax[1].plot([r[0] for r in fit], [r[j + 1] for r in fit], "--", lw=1, label=name + " learned")
ax[1].set_xlabel("t")
ax[1].legend()
ax[2].semilogy([r[0] for r in loss], [r[1] for r in loss], label="min loss")
ax[2].semilogy([r[0] for r in loss], [r[2] for r in loss], label="test mse")
ax[2].set_xlabel("epoch")
ax[2].legend()
fig.tight_layout()
fig.savefig("plot.png", dpi=150)
)";

inline constexpr const char* kControlPlotScript = R"(import csv
import matplotlib.pyplot as plt

def load(name):
    with open(name) as f:
        rows = list(csv.reader(f))
    return rows[0], [[float(v) if v else float("nan") for v in r] for r in rows[1:]]

_, ctl = load("control.csv")
_, fit = load("trajectory.csv")
_, loss = load("loss_curve.csv")

fig, ax = plt.subplots(1, 3, figsize=(15, 4.5))
ax[0].plot([r[0] for r in ctl], [r[1] for r in ctl], "r--", label="learned u")
ax[0].plot([r[0] for r in ctl], [r[2] for r in ctl], "k-", label="optimal u")
ax[0].set_xlabel("t")
ax[0].legend()
ax[1].plot([r[0] for r in fit], [r[1] for r in fit], "r--", label="learned x")
ax[1].plot([r[0] for r in ctl], [r[3] for r in ctl], "k-", label="optimal x")
ax[1].set_xlabel("t")
ax[1].legend()
ax[2].semilogy([r[0] for r in loss], [r[1] for r in loss], label="min loss")
ax[2].set_xlabel("epoch")
ax[2].legend()
fig.tight_layout()
fig.savefig("plot.png", dpi=150)
)";

inline constexpr const char* kOverlayPlotScript = R"(import csv
import glob
import matplotlib.pyplot as plt

fig, ax = plt.subplots(figsize=(7, 5))
for name in sorted(glob.glob("trajectory_*.csv")):
    with open(name) as f:
        rows = list(csv.reader(f))[1:]
    label = name[len("trajectory_"):-len(".csv")]
    if len(rows[0]) > 2:
        ax.plot([float(r[1]) for r in rows], [float(r[2]) for r in rows], lw=1, label=label)
    else:
        ax.plot([float(r[0]) for r in rows], [float(r[1]) for r in rows], lw=1, label=label)
ax.legend(fontsize="small")
fig.tight_layout()
fig.savefig("overlay.png", dpi=150)
)";

inline void write_single_plot(const RunResult& r, const fs::path& out) {
  fs::create_directories(out);
  write_text(out / "trajectory.csv", trajectory_csv(learned_trajectory(r)));
  {
    std::ostringstream os;
    os << "epoch,min_loss,test_mse\n" << std::setprecision(17);
    for (const auto& row : r.log) os << row.epoch << "," << row.min_loss << "," << row.test_mse << "\n";
    write_text(out / "loss_curve.csv", os.str());
  }
  if (r.config.is_control()) {
    const ControlProblem prob = make_problem_control(r.config);
    const ControlRollout roll = control_rollout(r.theta, prob);
    std::ostringstream os;
    os << "t,u,u_opt,x_opt\n" << std::setprecision(17);
    for (std::size_t k = 0; k < roll.control.size(); ++k) {
      const double t = roll.trajectory.times[k];
      os << t << "," << roll.control[k] << "," << optimal_control(t, prob) << ","
         << optimal_state(t, prob) << "\n";
    }
    write_text(out / "control.csv", os.str());
    write_text(out / "plot.py", kControlPlotScript);
  } else {
    const SysIdProblem prob = make_problem_sysid(r.config);
    write_text(out / "reference.csv", trajectory_csv(prob.observations.reference));
    Trajectory obs;
    for (std::size_t i : prob.observations.indices) {
      obs.times.push_back(prob.observations.reference.times[i]);
      obs.states.push_back(prob.observations.reference.states[i]);
    }
    write_text(out / "observations.csv", trajectory_csv(obs));
    write_text(out / "plot.py", kSysIdPlotScript);
  }
}

}  // namespace detail

/// Writes plot data and a matplotlib script to <report_dir>/plot. A
/// directory holding several run directories gets one trajectory per run
/// and an overlay script. Returns the files written.
inline std::vector<fs::path> write_plot_data(const fs::path& report_dir) {
  if (!fs::is_directory(report_dir)) throw std::runtime_error("not a directory: " + report_dir.string());
  const fs::path out = report_dir / "plot";
  if (fs::exists(report_dir / "report.json")) {
    detail::write_single_plot(load_report(report_dir), out);
  } else {
    std::vector<fs::path> reports;
    for (const auto& entry : fs::recursive_directory_iterator(report_dir))
      if (entry.path().filename() == "report.json" &&
          entry.path().parent_path().filename() != "plot")
        reports.push_back(entry.path().parent_path());
    if (reports.empty()) throw std::runtime_error("no report.json under " + report_dir.string());
    std::sort(reports.begin(), reports.end());
    fs::create_directories(out);
    for (const auto& dir : reports) {
      std::string label = fs::relative(dir, report_dir).generic_string();
      std::replace(label.begin(), label.end(), '/', '_');
      detail::write_text(out / ("trajectory_" + label + ".csv"),
                         detail::trajectory_csv(detail::learned_trajectory(load_report(dir))));
    }
    detail::write_text(out / "plot.py", detail::kOverlayPlotScript);
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(out)) files.push_back(entry.path().filename());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace ekinode
