#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ekinode/eki.hpp"
#include "ekinode/nnet.hpp"
#include "ekinode/ode.hpp"
#include "ekinode/rng.hpp"

namespace ekinode {

// ---------------------------------------------------------------------------
// Benchmark vector fields

/// Damped linear spiral: x1' = -0.05 x1 + x2, x2' = -x1 - 0.05 x2.
inline State spiral_field(const State& x, double /*t*/) {
  State dx(2);
  dx[0] = -0.05 * x[0] + x[1];
  dx[1] = -x[0] - 0.05 * x[1];
  return dx;
}

/// Closed-form solution of the spiral from (1, 0).
inline State spiral_solution(double t) {
  State x(2);
  const double decay = std::exp(-t / 20.0);
  x[0] = decay * std::cos(t);
  x[1] = -decay * std::sin(t);
  return x;
}

/// Pendulum x'' = -omega sin x as the first-order system (x, v).
inline State pendulum_field(const State& s, double /*t*/, double omega = 1.0) {
  State ds(2);
  ds[0] = s[1];
  ds[1] = -omega * std::sin(s[0]);
  return ds;
}

/// First integral of the pendulum: v^2 / 2 - omega cos x.
inline double pendulum_energy(const State& s, double omega = 1.0) {
  return 0.5 * s[1] * s[1] - omega * std::cos(s[0]);
}

/// Integrator settings used to generate reference data.
inline IntegratorConfig reference_integrator() {
  IntegratorConfig c;
  c.method = Method::DormandPrince;
  c.rtol = 1e-9;
  c.atol = 1e-12;
  return c;
}

inline Trajectory make_reference(const VectorField& field, const State& x0, double horizon,
                                 std::size_t grid_size,
                                 const IntegratorConfig& config = reference_integrator()) {
  return integrate(field, x0, linspace(0.0, horizon, grid_size), config);
}

// ---------------------------------------------------------------------------
// Observations

struct SubsetScheme {
  std::size_t num_subsets = 10;
  std::size_t subset_length = 10;
  std::uint64_t seed = 0;
};

/// Training data: union of runs of consecutive reference-grid points.
struct ObservationSet {
  Trajectory reference;
  std::vector<std::size_t> starts;   // run start indices, in draw order
  std::vector<std::size_t> indices;  // sorted grid indices of all observed points
  SubsetScheme scheme;

  std::size_t size() const { return indices.size(); }
  double time(std::size_t k) const { return reference.times[indices[k]]; }
  const State& value(std::size_t k) const { return reference.states[indices[k]]; }

  std::vector<double> times() const {
    std::vector<double> t;
    t.reserve(indices.size());
    for (std::size_t i : indices) t.push_back(reference.times[i]);
    return t;
  }

  /// Observed states stacked time-major.
  Vector stacked_values() const {
    const auto n = static_cast<Eigen::Index>(reference.dim());
    Vector y(n * static_cast<Eigen::Index>(indices.size()));
    for (std::size_t k = 0; k < indices.size(); ++k)
      y.segment(static_cast<Eigen::Index>(k) * n, n) = reference.states[indices[k]];
    return y;
  }

  /// Grid indices not used for training.
  std::vector<std::size_t> test_indices() const {
    std::vector<std::size_t> out;
    std::size_t k = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
      if (k < indices.size() && indices[k] == i) {
        ++k;
        continue;
      }
      out.push_back(i);
    }
    return out;
  }
};

/// Draws `num_subsets` non-overlapping runs of `subset_length` consecutive
/// grid points. Start indices are uniform on {0, ..., G - L} without
/// replacement; a start whose run overlaps an earlier run is re-drawn.
inline ObservationSet make_observations(Trajectory reference, std::size_t num_subsets,
                                        std::size_t subset_length, Rng& rng) {
  const std::size_t grid = reference.size();
  if (num_subsets == 0 || subset_length == 0)
    throw std::invalid_argument("make_observations: counts must be >= 1");
  if (grid < num_subsets * subset_length)
    throw std::invalid_argument("make_observations: grid of " + std::to_string(grid) +
                                " points cannot hold " + std::to_string(num_subsets) + " x " +
                                std::to_string(subset_length) + " observations");
  const std::size_t num_starts = grid - subset_length + 1;

  ObservationSet obs;
  obs.scheme = {num_subsets, subset_length, rng.seed()};
  // Random packings can dead-end (no admissible start left); start over then.
  constexpr int kMaxRestarts = 1000;
  for (int attempt = 0; attempt < kMaxRestarts; ++attempt) {
    std::vector<char> used(grid, 0);
    std::vector<std::size_t> starts;
    std::size_t rejects = 0;
    while (starts.size() < num_subsets && rejects < 100 * num_starts) {
      const auto s = static_cast<std::size_t>(rng.index(num_starts));
      const bool overlaps =
          std::any_of(used.begin() + static_cast<std::ptrdiff_t>(s),
                      used.begin() + static_cast<std::ptrdiff_t>(s + subset_length),
                      [](char u) { return u != 0; });
      if (overlaps) {
        ++rejects;
        continue;
      }
      std::fill_n(used.begin() + static_cast<std::ptrdiff_t>(s), subset_length, 1);
      starts.push_back(s);
    }
    if (starts.size() < num_subsets) continue;
    obs.starts = std::move(starts);
    for (std::size_t i = 0; i < grid; ++i)
      if (used[i]) obs.indices.push_back(i);
    obs.reference = std::move(reference);
    return obs;
  }
  throw std::invalid_argument("make_observations: could not place non-overlapping subsets");
}

// ---------------------------------------------------------------------------
// System identification

enum class Assembly {
  FullHorizon,       // one trajectory from x0 over [0, T]
  MultipleShooting,  // each run restarts from its first observed state
};

struct SysIdProblem {
  std::string name;
  VectorField true_field;
  State x0;
  double horizon = 0.0;
  std::size_t grid_size = 0;
  ObservationSet observations;
  MlpSpec net{{2, 10, 2}, Activation::Tanh};
  IntegratorConfig integrator;
  Assembly assembly = Assembly::FullHorizon;

  std::size_t state_dim() const { return static_cast<std::size_t>(x0.size()); }
};

/// f_theta(x, t) = MLP(x); the benchmark networks are autonomous.
inline VectorField neural_field(const MlpSpec& spec, const ParamVector& theta) {
  return [spec, theta](const State& x, double) { return mlp_forward(spec, theta, x); };
}

struct SysIdOptions {
  std::size_t grid_size = 0;  // 0: benchmark default
  double horizon = 0.0;       // 0: benchmark default
  std::size_t num_subsets = 10;
  std::size_t subset_length = 10;
  double omega = 1.0;
  IntegratorConfig integrator{};
  Assembly assembly = Assembly::FullHorizon;
  std::vector<std::size_t> hidden{10};
  Activation activation = Activation::Tanh;
};

inline SysIdProblem make_sysid_problem(std::string name, VectorField field, State x0,
                                       double horizon, std::size_t grid_size,
                                       const SysIdOptions& opt, Rng& data_rng) {
  const auto n = static_cast<std::size_t>(x0.size());
  std::vector<std::size_t> layers{n};
  layers.insert(layers.end(), opt.hidden.begin(), opt.hidden.end());
  layers.push_back(n);

  SysIdProblem p;
  p.name = std::move(name);
  p.true_field = std::move(field);
  p.x0 = std::move(x0);
  p.horizon = horizon;
  p.grid_size = grid_size;
  p.net = MlpSpec(layers, opt.activation);
  p.integrator = opt.integrator;
  p.assembly = opt.assembly;
  p.observations =
      make_observations(make_reference(p.true_field, p.x0, horizon, grid_size), opt.num_subsets,
                        opt.subset_length, data_rng);
  return p;
}

/// Spiral benchmark: 500 grid points on [0, 40], x0 = (1, 0).
inline SysIdProblem make_spiral_problem(Rng& data_rng, const SysIdOptions& opt = {}) {
  State x0(2);
  x0 << 1.0, 0.0;
  return make_sysid_problem("spiral", spiral_field, x0, opt.horizon > 0 ? opt.horizon : 40.0,
                            opt.grid_size ? opt.grid_size : 500, opt, data_rng);
}

/// Pendulum benchmark: 200 grid points on [0, 20], (x, v)(0) = (pi/4, 0).
inline SysIdProblem make_pendulum_problem(Rng& data_rng, const SysIdOptions& opt = {}) {
  State x0(2);
  x0 << std::numbers::pi / 4.0, 0.0;
  const double omega = opt.omega;
  VectorField f = [omega](const State& s, double t) { return pendulum_field(s, t, omega); };
  return make_sysid_problem("pendulum", std::move(f), x0, opt.horizon > 0 ? opt.horizon : 20.0,
                            opt.grid_size ? opt.grid_size : 200, opt, data_rng);
}

/// Consecutive index runs of the observation set, sorted by start.
inline std::vector<std::pair<std::size_t, std::size_t>> observation_runs(const ObservationSet& o) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;  // (first, last)
  for (std::size_t i : o.indices) {
    if (!runs.empty() && runs.back().second + 1 == i)
      runs.back().second = i;
    else
      runs.emplace_back(i, i);
  }
  return runs;
}

/// Predicted states at the observation times, stacked time-major. Throws
/// IntegrationError when the trajectory cannot be computed.
inline Vector sysid_predictions(const VectorField& field, const SysIdProblem& prob) {
  const auto& obs = prob.observations;
  const auto n = static_cast<Eigen::Index>(prob.state_dim());
  Vector out(n * static_cast<Eigen::Index>(obs.size()));

  if (prob.assembly == Assembly::FullHorizon) {
    std::vector<double> times = obs.times();
    const bool starts_at_zero = !times.empty() && times.front() == 0.0;
    if (!starts_at_zero) times.insert(times.begin(), 0.0);
    const Trajectory traj = integrate(field, prob.x0, times, prob.integrator);
    const std::size_t skip = starts_at_zero ? 0 : 1;
    for (std::size_t k = 0; k < obs.size(); ++k)
      out.segment(static_cast<Eigen::Index>(k) * n, n) = traj.states[k + skip];
    return out;
  }

  Eigen::Index pos = 0;
  for (const auto& [first, last] : observation_runs(obs)) {
    std::vector<double> times(obs.reference.times.begin() + static_cast<std::ptrdiff_t>(first),
                              obs.reference.times.begin() + static_cast<std::ptrdiff_t>(last + 1));
    const Trajectory traj = integrate(field, obs.reference.states[first], times, prob.integrator);
    for (const auto& s : traj.states) {
      out.segment(pos, n) = s;
      pos += n;
    }
  }
  return out;
}

inline Vector sysid_predictions(const ParamVector& theta, const SysIdProblem& prob) {
  return sysid_predictions(neural_field(prob.net, theta), prob);
}

/// G(theta); integration failures come back as a flagged output.
inline ForwardMapOutput sysid_forward_map(const ParamVector& theta, const SysIdProblem& prob) {
  try {
    return {sysid_predictions(theta, prob), std::nullopt, false};
  } catch (const IntegrationError&) {
    return ForwardMapOutput::failure();
  }
}

/// (1/M) sum_l ||observed_l - predicted_l||^2 over M points of dimension n.
inline double mse_stacked(const Vector& predicted, const Vector& observed, std::size_t n) {
  if (predicted.size() != observed.size() || n == 0 ||
      predicted.size() % static_cast<Eigen::Index>(n) != 0)
    throw std::invalid_argument("mse: dimension mismatch");
  const auto points = predicted.size() / static_cast<Eigen::Index>(n);
  if (points == 0) return 0.0;
  return (observed - predicted).squaredNorm() / static_cast<double>(points);
}

inline double mse(const ParamVector& theta, const SysIdProblem& prob) {
  return mse_stacked(sysid_predictions(theta, prob), prob.observations.stacked_values(),
                     prob.state_dim());
}

/// MSE over the reference-grid points not used for training, on a single
/// trajectory from x0.
inline double test_mse(const VectorField& field, const SysIdProblem& prob) {
  const auto& ref = prob.observations.reference;
  const auto test = prob.observations.test_indices();
  if (test.empty()) return 0.0;
  const Trajectory traj = integrate(field, prob.x0, ref.times, prob.integrator);
  double acc = 0.0;
  for (std::size_t i : test) acc += (ref.states[i] - traj.states[i]).squaredNorm();
  return acc / static_cast<double>(test.size());
}

inline double test_mse(const ParamVector& theta, const SysIdProblem& prob) {
  return test_mse(neural_field(prob.net, theta), prob);
}

// ---------------------------------------------------------------------------
// Linear optimal control: x' = a x + b u, x(0) = x0, steer to x(T) = x*
// with minimum energy int_0^T u^2 dt.

struct ControlProblem {
  double a = 1.0;
  double b = 1.0;
  double x0 = 0.0;
  double x_star = 1.0;
  double horizon = 1.0;
  double mu = 0.001;
  double gamma = 0.3;
  double gamma_prime = 0.01;
  MlpSpec controller{{1, 5, 5, 5, 1}, Activation::Elu};
  std::size_t quadrature_intervals = 100;
  IntegratorConfig integrator;
  bool state_feedback = false;  // controller input (t, x) instead of t

  void validate() const {
    if (b == 0.0) throw std::invalid_argument("control: b must be nonzero");
    if (!(horizon > 0.0)) throw std::invalid_argument("control: T must be > 0");
    if (quadrature_intervals == 0)
      throw std::invalid_argument("control: quadrature intervals must be >= 1");
    if (controller.output_dim() != 1)
      throw std::invalid_argument("control: controller must have one output");
    if (controller.input_dim() != (state_feedback ? 2u : 1u))
      throw std::invalid_argument("control: controller input must be t (or (t, x) with feedback)");
  }

  std::vector<double> quadrature_grid() const {
    return linspace(0.0, horizon, quadrature_intervals + 1);
  }
};

/// u(t, x).
using ControlLaw = std::function<double(double, double)>;

inline ControlLaw neural_control(const ControlProblem& prob, const ParamVector& theta) {
  if (prob.state_feedback) {
    return [spec = prob.controller, theta](double t, double x) {
      Vector in(2);
      in << t, x;
      return mlp_forward(spec, theta, in)[0];
    };
  }
  return [spec = prob.controller, theta](double t, double) {
    return mlp_forward(spec, theta, t)[0];
  };
}

namespace detail {
inline void require_nonzero_rate(double a) {
  if (a == 0.0)
    throw std::invalid_argument(
        "optimal control: a = 0 needs the limiting closed form, which is not provided");
}
}  // namespace detail

inline double optimal_control(double t, double a, double b, double x0, double x_star,
                              double horizon) {
  detail::require_nonzero_rate(a);
  return a * std::exp(-a * t) * (x_star - x0 * std::exp(a * horizon)) /
         (b * std::sinh(a * horizon));
}

inline double optimal_state(double t, double a, double /*b*/, double x0, double x_star,
                            double horizon) {
  detail::require_nonzero_rate(a);
  return x0 * std::exp(a * t) +
         std::sinh(a * t) / std::sinh(a * horizon) * (x_star - x0 * std::exp(a * horizon));
}

inline double optimal_energy(double a, double b, double x0, double x_star, double horizon) {
  detail::require_nonzero_rate(a);
  const double miss = x_star - x0 * std::exp(a * horizon);
  const double s = std::sinh(a * horizon);
  return a * (1.0 - std::exp(-2.0 * a * horizon)) * miss * miss / (2.0 * b * b * s * s);
}

inline double optimal_control(double t, const ControlProblem& p) {
  return optimal_control(t, p.a, p.b, p.x0, p.x_star, p.horizon);
}
inline double optimal_state(double t, const ControlProblem& p) {
  return optimal_state(t, p.a, p.b, p.x0, p.x_star, p.horizon);
}
inline double optimal_energy(const ControlProblem& p) {
  return optimal_energy(p.a, p.b, p.x0, p.x_star, p.horizon);
}

/// Trapezoid rule over uniformly spaced samples covering [0, horizon].
inline double trapezoid(const std::vector<double>& values, double horizon) {
  if (values.size() < 2) throw std::invalid_argument("trapezoid: need >= 2 samples");
  const double h = horizon / static_cast<double>(values.size() - 1);
  double acc = 0.5 * (values.front() + values.back());
  for (std::size_t i = 1; i + 1 < values.size(); ++i) acc += values[i];
  return h * acc;
}

/// State and control sampled on the quadrature grid.
struct ControlRollout {
  Trajectory trajectory;
  std::vector<double> control;
  double energy = 0.0;

  double terminal() const { return trajectory.states.back()[0]; }
};

inline ControlRollout control_rollout(const ControlLaw& u, const ControlProblem& prob) {
  prob.validate();
  const double a = prob.a, b = prob.b;
  VectorField f = [&u, a, b](const State& x, double t) {
    State dx(1);
    dx[0] = a * x[0] + b * u(t, x[0]);
    return dx;
  };
  State x0(1);
  x0[0] = prob.x0;
  ControlRollout r;
  r.trajectory = integrate(f, x0, prob.quadrature_grid(), prob.integrator);
  std::vector<double> sq;
  sq.reserve(r.trajectory.size());
  for (std::size_t k = 0; k < r.trajectory.size(); ++k) {
    const double v = u(r.trajectory.times[k], r.trajectory.states[k][0]);
    r.control.push_back(v);
    sq.push_back(v * v);
  }
  r.energy = trapezoid(sq, prob.horizon);
  return r;
}

inline ControlRollout control_rollout(const ParamVector& theta, const ControlProblem& prob) {
  return control_rollout(neural_control(prob, theta), prob);
}

/// Trapezoid approximation of int_0^T u^2 dt on K+1 points.
inline double control_energy(const ParamVector& theta, const ControlProblem& prob) {
  if (prob.state_feedback) return control_rollout(theta, prob).energy;
  prob.validate();
  std::vector<double> sq;
  for (double t : prob.quadrature_grid()) {
    const double v = mlp_forward(prob.controller, theta, t)[0];
    sq.push_back(v * v);
  }
  return trapezoid(sq, prob.horizon);
}

inline ForwardMapOutput control_forward_map(const ControlLaw& u, const ControlProblem& prob) {
  try {
    const ControlRollout r = control_rollout(u, prob);
    Vector g(1);
    g[0] = r.terminal();
    return {g, std::sqrt(r.energy), false};
  } catch (const IntegrationError&) {
    return ForwardMapOutput::failure();
  }
}

/// F(theta) = (x(T; theta), sqrt(E_T[u_theta])).
inline ForwardMapOutput control_forward_map(const ParamVector& theta, const ControlProblem& prob) {
  return control_forward_map(neural_control(prob, theta), prob);
}

/// 0.5 (x(T) - x*)^2 / Gamma + mu / (2 Gamma') E_T.
inline double control_loss_from(double terminal, double energy, const ControlProblem& prob) {
  const double miss = terminal - prob.x_star;
  return 0.5 * miss * miss / prob.gamma + prob.mu / (2.0 * prob.gamma_prime) * energy;
}

inline double control_loss(const ParamVector& theta, const ControlProblem& prob) {
  const ControlRollout r = control_rollout(theta, prob);
  return control_loss_from(r.terminal(), r.energy, prob);
}

/// Mean squared difference between the learned and optimal control on the
/// quadrature grid.
inline double control_mse_vs_optimal(const ParamVector& theta, const ControlProblem& prob) {
  const ControlRollout r = control_rollout(theta, prob);
  double acc = 0.0;
  for (std::size_t k = 0; k < r.control.size(); ++k) {
    const double d = r.control[k] - optimal_control(r.trajectory.times[k], prob);
    acc += d * d;
  }
  return acc / static_cast<double>(r.control.size());
}

}  // namespace ekinode
