#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ekinode/eki.hpp"
#include "ekinode/gradbase.hpp"
#include "ekinode/ode.hpp"
#include "ekinode/problems.hpp"

namespace ekinode {

using json = nlohmann::json;

enum class ProblemKind { Spiral, Pendulum, LinearControl };
enum class OptimizerKind { Eki, Adam, Sgd };

inline std::string_view to_string(ProblemKind p) {
  switch (p) {
    case ProblemKind::Spiral: return "spiral";
    case ProblemKind::Pendulum: return "pendulum";
    case ProblemKind::LinearControl: return "linear_control";
  }
  return "?";
}

inline std::string_view to_string(OptimizerKind o) {
  switch (o) {
    case OptimizerKind::Eki: return "eki";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Sgd: return "sgd";
  }
  return "?";
}

inline std::string_view to_string(Assembly a) {
  return a == Assembly::FullHorizon ? "full_horizon" : "multiple_shooting";
}

inline std::string_view to_string(ExpansionMode m) {
  return m == ExpansionMode::Fresh ? "fresh" : "perturb_mean";
}

struct SysIdSettings {
  std::size_t grid_size = 500;
  double horizon = 40.0;
  std::size_t num_subsets = 10;
  std::size_t subset_length = 10;
  double omega = 1.0;
  Assembly assembly = Assembly::MultipleShooting;
  std::vector<std::size_t> hidden{10};
  Activation activation = Activation::Tanh;
  std::optional<std::uint64_t> data_seed;  // defaults to the run seed

  bool operator==(const SysIdSettings&) const = default;
};

struct ControlSettings {
  double a = 1.0;
  double b = 1.0;
  double x0 = 0.0;
  double x_star = 1.0;
  double horizon = 1.0;
  double mu = 0.001;
  double gamma = 1.0;  // loss Gamma for gradient runs; EKI uses its data-block schedule
  double gamma_prime = 0.01;
  std::vector<std::size_t> hidden{5, 5, 5};
  Activation activation = Activation::Elu;
  std::size_t quadrature_intervals = 100;
  bool state_feedback = false;

  bool operator==(const ControlSettings&) const = default;
};

struct EkiSettings {
  std::size_t ensemble_size = 22;
  CovarianceSchedule schedule{0.9, 0.35, 2, true};
  StepSchedule gamma_steps;  // overrides the schedule from the given epochs on
  double step = 1.0;
  UpdateForm form = UpdateForm::Kalman;
  std::vector<ExpansionRecord> expansions;
  ExpansionMode expansion_mode = ExpansionMode::Fresh;
  double perturb_scale = 1.0;
  std::size_t workers = 1;

  double gamma(std::size_t epoch) const { return gamma_steps.at(epoch, gamma_at(schedule, epoch)); }

  bool operator==(const EkiSettings&) const = default;
};

struct GradientSettings {
  double eta = 0.01;
  UnfoldConfig unfold;

  bool operator==(const GradientSettings&) const = default;
};

struct ExperimentConfig {
  std::string name;
  ProblemKind problem = ProblemKind::Spiral;
  OptimizerKind optimizer = OptimizerKind::Eki;
  std::uint64_t seed = 1;
  std::optional<std::size_t> epochs;
  std::optional<double> wall_clock_seconds;
  SysIdSettings sysid;
  ControlSettings control;
  EkiSettings eki;
  GradientSettings gradient;
  IntegratorConfig integrator;
  std::string output_dir = "out";

  bool is_control() const { return problem == ProblemKind::LinearControl; }
  bool is_eki() const { return optimizer == OptimizerKind::Eki; }

  bool operator==(const ExperimentConfig&) const = default;
};

/// Config problems, one "path: message" entry per issue.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> issues)
      : std::runtime_error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid config:";
    for (const auto& i : v) s += "\n  " + i;
    return s;
  }
  std::vector<std::string> issues_;
};

/// Starting point for a problem/optimizer pair, before any overrides.
inline ExperimentConfig default_config(ProblemKind problem, OptimizerKind optimizer) {
  ExperimentConfig c;
  c.problem = problem;
  c.optimizer = optimizer;
  c.name = std::string(to_string(problem)) + "-" + std::string(to_string(optimizer));
  const bool eki = optimizer == OptimizerKind::Eki;
  if (problem == ProblemKind::Pendulum) {
    c.sysid.grid_size = 200;
    c.sysid.horizon = 20.0;
    c.eki.schedule = {2.0, 0.4, 2, true};
  }
  if (problem == ProblemKind::LinearControl) {
    c.epochs = eki ? 10 : 150;
    c.eki.ensemble_size = 2;
    c.eki.schedule = {0.3, 0.0, 1, false};
    c.eki.gamma_steps = {{{3, 0.15}}};
    c.eki.expansions = {{3, 20}};
    c.gradient.eta = 0.175;
    if (!eki) c.control.gamma_prime = 1.0;
  } else {
    c.epochs = eki ? 100 : 2500;
  }
  if (eki) {
    c.integrator.max_steps = 20000;
  } else {
    // Train and evaluate on the same fixed-step discretization.
    c.integrator.method = Method::RK4;
    c.integrator.dt = problem == ProblemKind::LinearControl
                          ? c.control.horizon / static_cast<double>(c.control.quadrature_intervals)
                          : c.sysid.horizon / static_cast<double>(c.sysid.grid_size - 1);
  }
  return c;
}

inline const std::vector<double>& control_mu_sweep() {
  static const std::vector<double> mus{0.001, 0.0025, 0.005, 0.0075, 0.01};
  return mus;
}

namespace detail {

inline std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const char* p : {"spiral", "pendulum"}) {
    const std::string s(p);
    names.push_back(s + "-eki");
    names.push_back(s + "-eki-noschedule");
    for (const char* opt : {"sgd", "adam"})
      for (const char* eta : {"0.01", "0.1"}) names.push_back(s + "-" + opt + "-" + eta);
  }
  for (const char* opt : {"eki", "adam"})
    for (double mu : control_mu_sweep())
      names.push_back(std::string("control-") + opt + "-mu" + detail::format_number(mu));
  return names;
}

inline std::optional<ExperimentConfig> find_preset(const std::string& name) {
  for (const auto& candidate : preset_names()) {
    if (candidate != name) continue;
    const auto dash = name.find('-');
    const std::string head = name.substr(0, dash);
    const std::string rest = name.substr(dash + 1);
    const std::string opt = rest.substr(0, rest.find('-'));
    const OptimizerKind o = opt == "eki" ? OptimizerKind::Eki
                            : opt == "adam" ? OptimizerKind::Adam
                                            : OptimizerKind::Sgd;
    const ProblemKind p = head == "spiral"     ? ProblemKind::Spiral
                          : head == "pendulum" ? ProblemKind::Pendulum
                                               : ProblemKind::LinearControl;
    ExperimentConfig c = default_config(p, o);
    c.name = name;
    c.output_dir = "runs/" + name;
    if (rest == "eki-noschedule") c.eki.schedule.enabled = false;
    if (p == ProblemKind::LinearControl) {
      c.control.mu = std::stod(rest.substr(rest.find("mu") + 2));
    } else if (o != OptimizerKind::Eki) {
      c.gradient.eta = std::stod(rest.substr(rest.rfind('-') + 1));
    }
    return c;
  }
  return std::nullopt;
}

inline ExperimentConfig preset(const std::string& name) {
  auto c = find_preset(name);
  if (!c) throw ConfigError({"preset: unknown preset '" + name + "'"});
  return *c;
}

/// Every field-level constraint, reported together.
inline std::vector<std::string> validation_issues(const ExperimentConfig& c) {
  std::vector<std::string> out;
  auto need = [&](bool ok, const std::string& path, const std::string& msg) {
    if (!ok) out.push_back(path + ": " + msg);
  };
  need(c.epochs.has_value() != c.wall_clock_seconds.has_value(), "epochs",
       "exactly one of 'epochs' and 'wall_clock_budget_seconds' must be set");
  if (c.wall_clock_seconds) need(*c.wall_clock_seconds > 0.0, "wall_clock_budget_seconds", "must be > 0");
  need(!c.output_dir.empty(), "output_dir", "must be nonempty");
  try {
    c.integrator.validate();
  } catch (const std::exception& e) {
    out.push_back(std::string("integrator: ") + e.what());
  }
  auto check_hidden = [&](const std::vector<std::size_t>& h, const std::string& path) {
    for (std::size_t v : h) need(v >= 1, path, "layer sizes must be >= 1");
  };
  if (c.is_control()) {
    const auto& k = c.control;
    need(k.b != 0.0, "control.b", "must be nonzero");
    need(k.a != 0.0, "control.a", "must be nonzero (closed-form oracle)");
    need(k.horizon > 0.0, "control.horizon", "must be > 0");
    need(k.mu >= 0.0, "control.mu", "must be >= 0");
    if (c.is_eki()) need(k.mu > 0.0, "control.mu", "must be > 0 for the regularized update");
    need(k.gamma > 0.0, "control.gamma", "must be > 0");
    need(k.gamma_prime > 0.0, "control.gamma_prime", "must be > 0");
    need(k.quadrature_intervals >= 1, "control.quadrature_intervals", "must be >= 1");
    check_hidden(k.hidden, "control.hidden");
  } else {
    const auto& s = c.sysid;
    need(s.grid_size >= 2, "sysid.grid_size", "must be >= 2");
    need(s.horizon > 0.0, "sysid.horizon", "must be > 0");
    need(s.num_subsets >= 1, "sysid.num_subsets", "must be >= 1");
    need(s.subset_length >= 1, "sysid.subset_length", "must be >= 1");
    need(s.num_subsets * s.subset_length <= s.grid_size, "sysid.num_subsets",
         "num_subsets * subset_length exceeds grid_size");
    check_hidden(s.hidden, "sysid.hidden");
  }
  if (c.is_eki()) {
    const auto& e = c.eki;
    need(e.ensemble_size >= 1, "eki.ensemble_size", "must be >= 1");
    need(e.schedule.gamma0 > 0.0, "eki.gamma0", "must be > 0");
    need(e.schedule.alpha >= 0.0, "eki.alpha", "must be >= 0");
    need(e.schedule.period >= 1, "eki.period", "must be >= 1");
    need(e.step > 0.0, "eki.step", "must be > 0");
    need(e.workers >= 1, "eki.workers", "must be >= 1");
    need(e.perturb_scale >= 0.0, "eki.perturb_scale", "must be >= 0");
    for (std::size_t i = 0; i < e.gamma_steps.steps.size(); ++i) {
      need(e.gamma_steps.steps[i].second > 0.0, "eki.gamma_steps[" + std::to_string(i) + "]",
           "value must be > 0");
      if (i > 0)
        need(e.gamma_steps.steps[i - 1].first < e.gamma_steps.steps[i].first,
             "eki.gamma_steps[" + std::to_string(i) + "]", "epochs must be increasing");
    }
    for (std::size_t i = 0; i < e.expansions.size(); ++i)
      need(e.expansions[i].count >= 1, "eki.expansions[" + std::to_string(i) + "].count",
           "must be >= 1");
  } else {
    need(c.gradient.eta >= 0.0, "gradient.eta", "must be >= 0");
    need(c.gradient.unfold.method != Method::DormandPrince, "gradient.unfold.method",
         "must be euler or rk4");
    need(c.gradient.unfold.dt >= 0.0, "gradient.unfold.dt", "must be >= 0 (0: grid spacing)");
  }
  return out;
}

inline void validate(const ExperimentConfig& c) {
  auto issues = validation_issues(c);
  if (!issues.empty()) throw ConfigError(std::move(issues));
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["problem"] = to_string(c.problem);
  j["optimizer"] = to_string(c.optimizer);
  j["seed"] = c.seed;
  if (c.epochs) j["epochs"] = *c.epochs;
  if (c.wall_clock_seconds) j["wall_clock_budget_seconds"] = *c.wall_clock_seconds;
  if (c.is_control()) {
    const auto& k = c.control;
    j["control"] = {{"a", k.a},
                    {"b", k.b},
                    {"x0", k.x0},
                    {"x_star", k.x_star},
                    {"horizon", k.horizon},
                    {"mu", k.mu},
                    {"gamma", k.gamma},
                    {"gamma_prime", k.gamma_prime},
                    {"hidden", k.hidden},
                    {"activation", to_string(k.activation)},
                    {"quadrature_intervals", k.quadrature_intervals},
                    {"state_feedback", k.state_feedback}};
  } else {
    const auto& s = c.sysid;
    j["sysid"] = {{"grid_size", s.grid_size},
                  {"horizon", s.horizon},
                  {"num_subsets", s.num_subsets},
                  {"subset_length", s.subset_length},
                  {"omega", s.omega},
                  {"assembly", to_string(s.assembly)},
                  {"hidden", s.hidden},
                  {"activation", to_string(s.activation)}};
    if (s.data_seed) j["sysid"]["data_seed"] = *s.data_seed;
  }
  if (c.is_eki()) {
    const auto& e = c.eki;
    json steps = json::array();
    for (const auto& [epoch, v] : e.gamma_steps.steps) steps.push_back({epoch, v});
    json exps = json::array();
    for (const auto& x : e.expansions) exps.push_back({{"epoch", x.epoch}, {"count", x.count}});
    j["eki"] = {{"ensemble_size", e.ensemble_size},
                {"gamma0", e.schedule.gamma0},
                {"alpha", e.schedule.alpha},
                {"period", e.schedule.period},
                {"scheduler", e.schedule.enabled},
                {"gamma_steps", steps},
                {"step", e.step},
                {"update", to_string(e.form)},
                {"expansions", exps},
                {"expansion_mode", to_string(e.expansion_mode)},
                {"perturb_scale", e.perturb_scale},
                {"workers", e.workers}};
  } else {
    j["gradient"] = {{"eta", c.gradient.eta},
                     {"unfold", {{"method", to_string(c.gradient.unfold.method)},
                                 {"dt", c.gradient.unfold.dt}}}};
  }
  j["integrator"] = {{"method", to_string(c.integrator.method)},
                     {"dt", c.integrator.dt},
                     {"rtol", c.integrator.rtol},
                     {"atol", c.integrator.atol},
                     {"max_steps", c.integrator.max_steps}};
  j["output_dir"] = c.output_dir;
  return j;
}

namespace detail {

/// Typed access to one JSON object; problems are collected rather than thrown.
class Reader {
 public:
  Reader(const json& j, std::string path, std::vector<std::string>& issues)
      : j_(j), path_(std::move(path)), issues_(issues) {
    if (!j_.is_object()) issue("", "expected an object");
  }

  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }

  template <class T>
  void get(const char* key, T& out) const {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const std::exception&) {
      issue(key, "has the wrong type");
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) const {
    if (!has(key)) return;
    T v{};
    get(key, v);
    out = v;
  }

  template <class E, class Parse>
  void get_enum(const char* key, E& out, Parse parse) const {
    if (!has(key)) return;
    try {
      out = parse(j_.at(key).get<std::string>());
    } catch (const std::exception& e) {
      issue(key, e.what());
    }
  }

  void get_size(const char* key, std::size_t& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
      issue(key, "must be a nonnegative integer");
    else
      out = v.get<std::size_t>();
  }

  void get_sizes(const char* key, std::vector<std::size_t>& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    bool ok = v.is_array();
    if (ok)
      for (const auto& e : v) ok = ok && e.is_number_integer() && e.get<long long>() >= 1;
    if (!ok)
      issue(key, "must be an array of positive integers");
    else
      out = v.get<std::vector<std::size_t>>();
  }

  Reader child(const char* key) const { return Reader(j_.at(key), path_ + key + ".", issues_); }
  const json& at(const char* key) const { return j_.at(key); }

  void reject_unknown(std::initializer_list<const char*> known) const {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      bool ok = false;
      for (const char* n : known) ok = ok || k == n;
      if (!ok) issue(k.c_str(), "unknown key");
    }
  }

  void issue(const char* key, const std::string& msg) const {
    const std::string p = path_ + key;
    issues_.push_back((p.empty() ? std::string("<root>") : (p.back() == '.' ? p.substr(0, p.size() - 1) : p)) +
                      ": " + msg);
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& issues_;
};

inline ProblemKind problem_from_string(const std::string& s) {
  if (s == "spiral") return ProblemKind::Spiral;
  if (s == "pendulum") return ProblemKind::Pendulum;
  if (s == "linear_control" || s == "control") return ProblemKind::LinearControl;
  throw std::invalid_argument("unknown problem '" + s + "' (spiral, pendulum, linear_control)");
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "eki") return OptimizerKind::Eki;
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "' (eki, adam, sgd)");
}

inline Assembly assembly_from_string(const std::string& s) {
  if (s == "full_horizon") return Assembly::FullHorizon;
  if (s == "multiple_shooting") return Assembly::MultipleShooting;
  throw std::invalid_argument("unknown assembly '" + s + "'");
}

inline ExpansionMode expansion_mode_from_string(const std::string& s) {
  if (s == "fresh") return ExpansionMode::Fresh;
  if (s == "perturb_mean") return ExpansionMode::PerturbMean;
  throw std::invalid_argument("unknown expansion mode '" + s + "'");
}

}  // namespace detail

/// Parses a config document. A "preset" key starts from that preset; other
/// keys override it. Missing keys keep the defaults of the problem/optimizer
/// pair. Throws ConfigError listing every issue found.
inline ExperimentConfig config_from_json(const json& j) {
  std::vector<std::string> issues;
  detail::Reader r(j, "", issues);
  if (!issues.empty()) throw ConfigError(issues);

  ExperimentConfig c;
  std::string preset_name;
  r.get("preset", preset_name);
  if (!preset_name.empty()) {
    if (auto p = find_preset(preset_name))
      c = *p;
    else
      r.issue("preset", "unknown preset '" + preset_name + "'");
  } else {
    ProblemKind p = ProblemKind::Spiral;
    OptimizerKind o = OptimizerKind::Eki;
    if (!r.has("problem")) r.issue("problem", "required");
    if (!r.has("optimizer")) r.issue("optimizer", "required");
    r.get_enum("problem", p, detail::problem_from_string);
    r.get_enum("optimizer", o, detail::optimizer_from_string);
    c = default_config(p, o);
  }
  // Without a problem and optimizer the remaining keys cannot be checked.
  if (!issues.empty()) throw ConfigError(issues);

  r.reject_unknown({"name", "preset", "problem", "optimizer", "seed", "epochs", "wall_clock_budget_seconds",
                    "sysid", "control", "eki", "gradient", "integrator", "output_dir"});
  r.get("name", c.name);
  r.get("seed", c.seed);
  if (r.has("epochs") || r.has("wall_clock_budget_seconds")) {
    c.epochs.reset();
    c.wall_clock_seconds.reset();
    if (r.has("epochs")) {
      std::size_t e = 0;
      r.get_size("epochs", e);
      c.epochs = e;
    }
    r.get("wall_clock_budget_seconds", c.wall_clock_seconds);
  }
  r.get("output_dir", c.output_dir);

  if (r.has("sysid")) {
    if (c.is_control()) r.issue("sysid", "not applicable to linear_control");
    const auto s = r.child("sysid");
    s.reject_unknown({"grid_size", "horizon", "num_subsets", "subset_length", "omega", "assembly",
                      "hidden", "activation", "data_seed"});
    s.get_size("grid_size", c.sysid.grid_size);
    s.get("horizon", c.sysid.horizon);
    s.get_size("num_subsets", c.sysid.num_subsets);
    s.get_size("subset_length", c.sysid.subset_length);
    s.get("omega", c.sysid.omega);
    s.get_enum("assembly", c.sysid.assembly, detail::assembly_from_string);
    s.get_sizes("hidden", c.sysid.hidden);
    s.get_enum("activation", c.sysid.activation, activation_from_string);
    s.get("data_seed", c.sysid.data_seed);
  }
  if (r.has("control")) {
    if (!c.is_control()) r.issue("control", "only applicable to linear_control");
    const auto k = r.child("control");
    k.reject_unknown({"a", "b", "x0", "x_star", "horizon", "mu", "gamma", "gamma_prime", "hidden",
                      "activation", "quadrature_intervals", "state_feedback"});
    k.get("a", c.control.a);
    k.get("b", c.control.b);
    k.get("x0", c.control.x0);
    k.get("x_star", c.control.x_star);
    k.get("horizon", c.control.horizon);
    k.get("mu", c.control.mu);
    k.get("gamma", c.control.gamma);
    k.get("gamma_prime", c.control.gamma_prime);
    k.get_sizes("hidden", c.control.hidden);
    k.get_enum("activation", c.control.activation, activation_from_string);
    k.get_size("quadrature_intervals", c.control.quadrature_intervals);
    k.get("state_feedback", c.control.state_feedback);
  }
  if (r.has("eki")) {
    if (!c.is_eki()) r.issue("eki", "only applicable to optimizer 'eki'");
    const auto e = r.child("eki");
    e.reject_unknown({"ensemble_size", "gamma0", "alpha", "period", "scheduler", "gamma_steps", "step",
                      "update", "expansions", "expansion_mode", "perturb_scale", "workers"});
    e.get_size("ensemble_size", c.eki.ensemble_size);
    e.get("gamma0", c.eki.schedule.gamma0);
    e.get("alpha", c.eki.schedule.alpha);
    e.get_size("period", c.eki.schedule.period);
    e.get("scheduler", c.eki.schedule.enabled);
    if (e.has("gamma_steps")) {
      try {
        c.eki.gamma_steps.steps =
            e.at("gamma_steps").get<std::vector<std::pair<std::size_t, double>>>();
      } catch (const std::exception&) {
        e.issue("gamma_steps", "must be an array of [epoch, gamma] pairs");
      }
    }
    e.get("step", c.eki.step);
    e.get_enum("update", c.eki.form, update_form_from_string);
    if (e.has("expansions")) {
      c.eki.expansions.clear();
      const json& xs = e.at("expansions");
      if (!xs.is_array()) e.issue("expansions", "must be an array");
      for (std::size_t i = 0; xs.is_array() && i < xs.size(); ++i) {
        const std::string p = "eki.expansions[" + std::to_string(i) + "].";
        detail::Reader x(xs[i], p, issues);
        x.reject_unknown({"epoch", "count"});
        ExpansionRecord rec{0, 0};
        if (!x.has("epoch") || !x.has("count")) x.issue("", "needs 'epoch' and 'count'");
        x.get_size("epoch", rec.epoch);
        x.get_size("count", rec.count);
        c.eki.expansions.push_back(rec);
      }
    }
    e.get_enum("expansion_mode", c.eki.expansion_mode, detail::expansion_mode_from_string);
    e.get("perturb_scale", c.eki.perturb_scale);
    e.get_size("workers", c.eki.workers);
  }
  if (r.has("gradient")) {
    if (c.is_eki()) r.issue("gradient", "only applicable to optimizers 'adam' and 'sgd'");
    const auto g = r.child("gradient");
    g.reject_unknown({"eta", "unfold"});
    g.get("eta", c.gradient.eta);
    if (g.has("unfold")) {
      const auto u = g.child("unfold");
      u.reject_unknown({"method", "dt"});
      u.get_enum("method", c.gradient.unfold.method, method_from_string);
      u.get("dt", c.gradient.unfold.dt);
    }
  }
  if (r.has("integrator")) {
    const auto i = r.child("integrator");
    i.reject_unknown({"method", "dt", "rtol", "atol", "max_steps"});
    i.get_enum("method", c.integrator.method, method_from_string);
    i.get("dt", c.integrator.dt);
    i.get("rtol", c.integrator.rtol);
    i.get("atol", c.integrator.atol);
    i.get_size("max_steps", c.integrator.max_steps);
  }
  auto more = validation_issues(c);
  issues.insert(issues.end(), more.begin(), more.end());
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return c;
}

inline ExperimentConfig config_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("<root>: malformed JSON: ") + e.what()});
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Problem construction

inline SysIdProblem make_problem_sysid(const ExperimentConfig& c) {
  SysIdOptions opt;
  opt.grid_size = c.sysid.grid_size;
  opt.horizon = c.sysid.horizon;
  opt.num_subsets = c.sysid.num_subsets;
  opt.subset_length = c.sysid.subset_length;
  opt.omega = c.sysid.omega;
  opt.integrator = c.integrator;
  opt.assembly = c.sysid.assembly;
  opt.hidden = c.sysid.hidden;
  opt.activation = c.sysid.activation;
  Rng data = Rng(c.sysid.data_seed.value_or(c.seed)).split(streams::kData);
  return c.problem == ProblemKind::Spiral ? make_spiral_problem(data, opt)
                                          : make_pendulum_problem(data, opt);
}

inline ControlProblem make_problem_control(const ExperimentConfig& c) {
  ControlProblem p;
  const auto& k = c.control;
  p.a = k.a;
  p.b = k.b;
  p.x0 = k.x0;
  p.x_star = k.x_star;
  p.horizon = k.horizon;
  p.mu = k.mu;
  p.gamma = c.is_eki() ? c.eki.gamma(0) : k.gamma;
  p.gamma_prime = k.gamma_prime;
  std::vector<std::size_t> layers{k.state_feedback ? 2u : 1u};
  layers.insert(layers.end(), k.hidden.begin(), k.hidden.end());
  layers.push_back(1);
  p.controller = MlpSpec(layers, k.activation);
  p.quadrature_intervals = k.quadrature_intervals;
  p.integrator = c.integrator;
  p.state_feedback = k.state_feedback;
  return p;
}

}  // namespace ekinode
