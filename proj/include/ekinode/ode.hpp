#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace ekinode {

using State = Eigen::VectorXd;

/// Right-hand side f(x, t) of x' = f(x, t).
using VectorField = std::function<State(const State&, double)>;

/// Raised when a trajectory cannot be completed: non-finite state or field
/// value, step-size underflow, or the step budget ran out.
class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double t, State x)
      : std::runtime_error(what + " at t=" + std::to_string(t)), t_(t), x_(std::move(x)) {}
  double time() const { return t_; }
  const State& state() const { return x_; }

 private:
  double t_;
  State x_;
};

enum class Method { Euler, RK4, DormandPrince };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Euler: return "euler";
    case Method::RK4: return "rk4";
    case Method::DormandPrince: return "dopri5";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  if (s == "euler") return Method::Euler;
  if (s == "rk4") return Method::RK4;
  if (s == "dopri5" || s == "dormand_prince") return Method::DormandPrince;
  throw std::invalid_argument("unknown integrator '" + std::string(s) + "'");
}

struct IntegratorConfig {
  Method method = Method::DormandPrince;
  double dt = 0.01;  // Euler / RK4
  double rtol = 1e-6;
  double atol = 1e-8;
  std::size_t max_steps = 1'000'000;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("integrator.dt must be > 0");
    if (!(rtol > 0.0) || !(atol > 0.0))
      throw std::invalid_argument("integrator tolerances must be > 0");
    if (max_steps == 0) throw std::invalid_argument("integrator.max_steps must be >= 1");
  }

  bool operator==(const IntegratorConfig&) const = default;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;

  std::size_t size() const { return times.size(); }
  std::size_t dim() const { return states.empty() ? 0 : static_cast<std::size_t>(states[0].size()); }
};

namespace detail {

inline bool all_finite(const State& x) { return x.allFinite(); }

inline State eval_checked(const VectorField& field, const State& x, double t) {
  State f = field(x, t);
  if (f.size() != x.size())
    throw std::invalid_argument("vector field returned wrong dimension");
  if (!all_finite(f)) throw IntegrationError("non-finite vector field value", t, x);
  return f;
}

}  // namespace detail

inline State euler_step(const VectorField& field, const State& x, double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("euler_step: dt must be > 0");
  return x + dt * detail::eval_checked(field, x, t);
}

inline State rk4_step(const VectorField& field, const State& x, double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be > 0");
  const State k1 = detail::eval_checked(field, x, t);
  const State k2 = detail::eval_checked(field, x + 0.5 * dt * k1, t + 0.5 * dt);
  const State k3 = detail::eval_checked(field, x + 0.5 * dt * k2, t + 0.5 * dt);
  const State k4 = detail::eval_checked(field, x + dt * k3, t + dt);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Dormand-Prince 5(4) coefficients.
namespace dopri {
inline constexpr std::array<double, 7> c{0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                        a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                        a64 = 49.0 / 176, a65 = -5103.0 / 18656;
// Fifth-order weights (also row 7 of the tableau, hence FSAL).
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                        b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// Fifth minus fourth order weights.
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                        e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

inline constexpr double kSafety = 0.9;
inline constexpr double kMinFactor = 0.2;
inline constexpr double kMaxFactor = 5.0;
}  // namespace dopri

struct DopriStep {
  State x;            // fifth-order solution at t + h
  State error;        // embedded error estimate
  double error_norm;  // scaled RMS norm; accepted iff <= 1
  bool accepted;
  double h_next;
  State k_last;  // f(t + h, x), reusable as the next step's first stage
};

/// Scaled RMS norm of `err` with per-component scale atol + rtol*max(|x|,|x_new|).
inline double dopri_error_norm(const State& err, const State& x, const State& x_new, double rtol,
                               double atol) {
  if (err.size() == 0) return 0.0;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double sc = atol + rtol * std::max(std::abs(x[i]), std::abs(x_new[i]));
    const double r = err[i] / sc;
    acc += r * r;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

inline double dopri_step_factor(double error_norm) {
  if (error_norm == 0.0) return dopri::kMaxFactor;
  return std::clamp(dopri::kSafety * std::pow(error_norm, -0.2), dopri::kMinFactor,
                    dopri::kMaxFactor);
}

/// One Dormand-Prince attempt of size h. `k1` may carry f(x, t) from the
/// previous accepted step.
inline DopriStep dopri_step(const VectorField& field, const State& x, double t, double h,
                            double rtol, double atol, const State* k1_in = nullptr) {
  using namespace dopri;
  if (!(h > 0.0)) throw std::invalid_argument("dopri_step: h must be > 0");
  const State k1 = k1_in ? *k1_in : detail::eval_checked(field, x, t);
  const State k2 = field(x + h * (a21 * k1), t + c[1] * h);
  const State k3 = field(x + h * (a31 * k1 + a32 * k2), t + c[2] * h);
  const State k4 = field(x + h * (a41 * k1 + a42 * k2 + a43 * k3), t + c[3] * h);
  const State k5 = field(x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + c[4] * h);
  const State k6 =
      field(x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), t + c[5] * h);
  State x_new = x + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
  State k7 = field(x_new, t + h);
  State err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

  double norm = dopri_error_norm(err, x, x_new, rtol, atol);
  if (!std::isfinite(norm) || !x_new.allFinite() || !k7.allFinite())
    norm = std::numeric_limits<double>::infinity();
  const bool accepted = norm <= 1.0;
  const double factor = std::isfinite(norm) ? dopri_step_factor(norm) : kMinFactor;
  return {std::move(x_new), std::move(err), norm, accepted, h * factor, std::move(k7)};
}

namespace detail {

inline void check_times(std::span<const double> times) {
  if (times.empty()) throw std::invalid_argument("integrate: times must be nonempty");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i])) throw std::invalid_argument("integrate: non-finite time");
    if (i > 0 && !(times[i] > times[i - 1]))
      throw std::invalid_argument("integrate: times must be strictly increasing");
  }
}

/// Number of equal fixed steps covering `interval` with steps no longer than dt.
inline std::size_t fixed_step_count(double interval, double dt) {
  const double n = std::ceil(interval / dt - 1e-9);
  return static_cast<std::size_t>(std::max(1.0, n));
}

// Starting step size (Hairer, Norsett & Wanner, II.4).
inline double initial_step(const VectorField& field, const State& x0, const State& f0, double t0,
                           double rtol, double atol, double span) {
  const auto scaled_norm = [&](const State& v) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double r = v[i] / (atol + rtol * std::abs(x0[i]));
      acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(std::max<Eigen::Index>(1, v.size())));
  };
  const double d0 = scaled_norm(x0);
  const double d1 = scaled_norm(f0);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, span);
  const State f1 = field(x0 + h0 * f0, t0 + h0);
  const double d2 = f1.allFinite() ? scaled_norm(f1 - f0) / h0 : 1e10;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
  return std::min({100.0 * h0, h1, span});
}

}  // namespace detail

/// Integrates x' = field(x, t) from x0 at times[0], returning states at
/// exactly the requested times. Adaptive steps are clipped so that every
/// sample time is hit; fixed-step methods split each sample interval into
/// ceil(interval / dt) equal steps.
inline Trajectory integrate(const VectorField& field, const State& x0,
                            std::span<const double> times, const IntegratorConfig& config) {
  config.validate();
  detail::check_times(times);
  if (!x0.allFinite()) throw IntegrationError("non-finite initial state", times[0], x0);

  Trajectory traj;
  traj.times.assign(times.begin(), times.end());
  traj.states.reserve(times.size());
  traj.states.push_back(x0);

  std::size_t steps = 0;
  State x = x0;

  if (config.method != Method::DormandPrince) {
    for (std::size_t i = 0; i + 1 < times.size(); ++i) {
      const double t0 = times[i];
      const double interval = times[i + 1] - t0;
      const std::size_t n = detail::fixed_step_count(interval, config.dt);
      const double h = interval / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        if (++steps > config.max_steps)
          throw IntegrationError("step budget exhausted", t0 + static_cast<double>(k) * h, x);
        const double t = t0 + static_cast<double>(k) * h;
        x = config.method == Method::Euler ? euler_step(field, x, t, h) : rk4_step(field, x, t, h);
        if (!x.allFinite()) throw IntegrationError("non-finite state", t + h, x);
      }
      traj.states.push_back(x);
    }
    return traj;
  }

  if (times.size() == 1) return traj;
  double t = times[0];
  State k1 = detail::eval_checked(field, x, t);
  double h_prop = detail::initial_step(field, x, k1, t, config.rtol, config.atol,
                                       times.back() - times.front());
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    const double target = times[i + 1];
    while (t < target) {
      const double remaining = target - t;
      bool clipped = false;
      double h = h_prop;
      // Stretch slightly rather than leave a sliver before the sample time.
      if (h >= remaining * (1.0 - 1e-10)) {
        h = remaining;
        clipped = true;
      }
      if (h <= 1e-14 * std::max(1.0, std::abs(t)))
        throw IntegrationError("step size underflow", t, x);
      if (++steps > config.max_steps) throw IntegrationError("step budget exhausted", t, x);

      DopriStep s = dopri_step(field, x, t, h, config.rtol, config.atol, &k1);
      if (!s.accepted) {
        h_prop = std::min(s.h_next, h);
        continue;
      }
      x = std::move(s.x);
      k1 = std::move(s.k_last);
      t = clipped ? target : t + h;
      h_prop = clipped ? std::max(s.h_next, h_prop) : s.h_next;
      if (!k1.allFinite()) throw IntegrationError("non-finite vector field value", t, x);
    }
    traj.states.push_back(x);
  }
  return traj;
}

inline Trajectory integrate(const VectorField& field, const State& x0,
                            const std::vector<double>& times, const IntegratorConfig& config) {
  return integrate(field, x0, std::span<const double>(times), config);
}

/// `count` equally spaced points on [t0, t1], endpoints included exactly.
inline std::vector<double> linspace(double t0, double t1, std::size_t count) {
  if (count < 2) throw std::invalid_argument("linspace: need at least two points");
  std::vector<double> out(count);
  const double step = (t1 - t0) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) out[i] = t0 + static_cast<double>(i) * step;
  out.back() = t1;
  return out;
}

/// CSV with header `t,x1,...,xn` and 17 significant digits.
inline void write_csv(std::ostream& os, const Trajectory& traj) {
  const std::size_t n = traj.dim();
  os << "t";
  for (std::size_t j = 1; j <= n; ++j) os << ",x" << j;
  os << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    os << traj.times[i];
    for (Eigen::Index j = 0; j < traj.states[i].size(); ++j) os << "," << traj.states[i][j];
    os << "\n";
  }
}

inline Trajectory read_csv(std::istream& is) {
  Trajectory traj;
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("read_csv: empty input");
  const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    traj.times.push_back(std::stod(cell));
    State x(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
      if (!std::getline(ss, cell, ',')) throw std::invalid_argument("read_csv: short row");
      x[j] = std::stod(cell);
    }
    traj.states.push_back(std::move(x));
  }
  return traj;
}

}  // namespace ekinode
