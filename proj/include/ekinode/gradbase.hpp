#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ekinode/nnet.hpp"
#include "ekinode/ode.hpp"
#include "ekinode/problems.hpp"

namespace ekinode {

// ---------------------------------------------------------------------------
// Optimizers

struct AdamState {
  Vector m;
  Vector v;
  std::size_t step = 0;
  double eta = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState fresh(Eigen::Index n, double eta) {
    AdamState s;
    s.m = Vector::Zero(n);
    s.v = Vector::Zero(n);
    s.eta = eta;
    return s;
  }
};

/// Bias-corrected Adam; the step counter is incremented before the corrections.
inline void adam_step(AdamState& s, ParamVector& theta, const Vector& grad) {
  if (grad.size() != theta.size() || s.m.size() != theta.size() || s.v.size() != theta.size())
    throw std::invalid_argument("adam_step: dimension mismatch");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  const Vector m_hat = s.m / c1;
  const Vector v_hat = s.v / c2;
  theta.array() -= s.eta * m_hat.array() / (v_hat.array().sqrt() + s.eps);
}

inline void sgd_step(ParamVector& theta, const Vector& grad, double eta) {
  if (grad.size() != theta.size()) throw std::invalid_argument("sgd_step: dimension mismatch");
  theta -= eta * grad;
}

// ---------------------------------------------------------------------------
// Reverse mode through the network

/// Vector-Jacobian product of one recorded forward pass. Accumulates
/// upstream^T d(output)/d(theta) into `grad_theta` and returns
/// upstream^T d(output)/d(input).
inline Vector mlp_vjp(const MlpSpec& spec, const ParamVector& theta, const MlpTrace& trace,
                      const Vector& upstream, Eigen::Ref<Vector> grad_theta) {
  const std::size_t last = spec.num_layers() - 1;
  Vector grad = upstream;
  for (std::size_t l = last + 1; l-- > 0;) {
    Vector dz = grad;
    if (l != last) {
      const auto& z = trace.preactivations[l];
      for (Eigen::Index i = 0; i < dz.size(); ++i)
        dz[i] *= activate_derivative(spec.activation(), z[i]);
    }
    const auto in = static_cast<Eigen::Index>(spec.fan_in(l));
    const auto out = static_cast<Eigen::Index>(spec.fan_out(l));
    double* base = grad_theta.data() + spec.offset(l);
    Eigen::Map<RowMajorMatrix>(base, out, in).noalias() += dz * trace.inputs[l].transpose();
    Eigen::Map<Vector>(base + out * in, out) += dz;
    grad = layer_view(spec, theta, l).weight.transpose() * dz;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Differentiable time unfolding

/// A vector field whose evaluations can be recorded and pulled back.
struct DifferentiableField {
  /// f(x, t); fills the trace of every network evaluation involved.
  std::function<State(const State&, double, MlpTrace&)> eval;
  /// Given the trace of f(x, t) and upstream dL/df, accumulate dL/dtheta and
  /// return dL/dx.
  std::function<State(const State&, double, const MlpTrace&, const State&, Eigen::Ref<Vector>)>
      vjp;
};

/// Raised when the unfolded computation produces a non-finite value.
class BpttError : public std::runtime_error {
 public:
  BpttError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at unfolding step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct StageRecord {
  State input;
  double t = 0.0;
  MlpTrace trace;
};

struct StepRecord {
  double t = 0.0;
  double h = 0.0;
  std::vector<StageRecord> stages;  // 1 (Euler) or 4 (RK4)
};

/// One unfolded trajectory: the recorded steps and the states at the sample times.
struct Segment {
  State x0;
  std::vector<double> times;
  std::vector<State> samples;
  std::vector<std::size_t> steps_before;  // steps completed when sample k is reached
  std::vector<StepRecord> steps;
};

/// Everything recorded during one discrete loss evaluation.
struct Tape {
  Method method = Method::RK4;
  double dt = 0.0;
  std::vector<Segment> segments;
  double loss = 0.0;
};

inline Segment unfold(const DifferentiableField& field, const State& x0,
                      const std::vector<double>& times, Method method, double dt) {
  if (method == Method::DormandPrince)
    throw std::invalid_argument("unfold: only fixed-step methods are differentiable");
  if (!(dt > 0.0)) throw std::invalid_argument("unfold: dt must be > 0");
  detail::check_times(times);
  Segment seg;
  seg.x0 = x0;
  seg.times = times;
  seg.samples.push_back(x0);
  seg.steps_before.push_back(0);
  State x = x0;
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    const double interval = times[i + 1] - times[i];
    const std::size_t n = detail::fixed_step_count(interval, dt);
    const double h = interval / static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      StepRecord rec;
      rec.t = times[i] + static_cast<double>(k) * h;
      rec.h = h;
      const auto stage = [&](const State& in, double t) {
        StageRecord s{in, t, {}};
        State f = field.eval(in, t, s.trace);
        rec.stages.push_back(std::move(s));
        return f;
      };
      if (method == Method::Euler) {
        x = x + h * stage(x, rec.t);
      } else {
        const State k1 = stage(x, rec.t);
        const State k2 = stage(x + 0.5 * h * k1, rec.t + 0.5 * h);
        const State k3 = stage(x + 0.5 * h * k2, rec.t + 0.5 * h);
        const State k4 = stage(x + h * k3, rec.t + h);
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
      if (!x.allFinite()) throw BpttError("non-finite state", seg.steps.size());
      seg.steps.push_back(std::move(rec));
    }
    seg.samples.push_back(x);
    seg.steps_before.push_back(seg.steps.size());
  }
  return seg;
}

/// Pulls dL/d(sample_k) back through a segment. Accumulates dL/dtheta and
/// returns dL/dx0.
inline State unfold_backward(const DifferentiableField& field, const Segment& seg,
                             const std::vector<State>& sample_grads, Eigen::Ref<Vector> grad_theta) {
  if (sample_grads.size() != seg.samples.size())
    throw std::invalid_argument("unfold_backward: one gradient per sample required");
  State adj = State::Zero(seg.x0.size());
  std::size_t next_sample = seg.samples.size();  // samples are consumed from the back
  for (std::size_t s = seg.steps.size() + 1; s-- > 0;) {
    while (next_sample > 0 && seg.steps_before[next_sample - 1] == s) {
      --next_sample;
      adj += sample_grads[next_sample];
    }
    if (s == 0) break;
    const StepRecord& rec = seg.steps[s - 1];
    const double h = rec.h;
    const auto pull = [&](std::size_t i, const State& up) {
      const StageRecord& st = rec.stages[i];
      return field.vjp(st.input, st.t, st.trace, up, grad_theta);
    };
    if (rec.stages.size() == 1) {
      adj += pull(0, h * adj);
    } else {
      const State g = adj;
      State k1 = (h / 6.0) * g, k2 = (h / 3.0) * g, k3 = (h / 3.0) * g;
      const State k4 = (h / 6.0) * g;
      const State u4 = pull(3, k4);
      adj += u4;
      k3 += h * u4;
      const State u3 = pull(2, k3);
      adj += u3;
      k2 += 0.5 * h * u3;
      const State u2 = pull(1, k2);
      adj += u2;
      k1 += 0.5 * h * u2;
      adj += pull(0, k1);
    }
    if (!adj.allFinite() || !grad_theta.allFinite())
      throw BpttError("non-finite adjoint", s - 1);
  }
  return adj;
}

inline DifferentiableField differentiable_neural_field(const MlpSpec& spec,
                                                       const ParamVector& theta) {
  DifferentiableField f;
  f.eval = [&spec, &theta](const State& x, double, MlpTrace& tr) {
    return mlp_forward(spec, theta, x, &tr);
  };
  f.vjp = [&spec, &theta](const State&, double, const MlpTrace& tr, const State& up,
                          Eigen::Ref<Vector> g) { return mlp_vjp(spec, theta, tr, up, g); };
  return f;
}

inline DifferentiableField differentiable_control_field(const ControlProblem& prob,
                                                        const ParamVector& theta) {
  DifferentiableField f;
  f.eval = [&prob, &theta](const State& x, double t, MlpTrace& tr) {
    Vector in(prob.state_feedback ? 2 : 1);
    in[0] = t;
    if (prob.state_feedback) in[1] = x[0];
    State dx(1);
    dx[0] = prob.a * x[0] + prob.b * mlp_forward(prob.controller, theta, in, &tr)[0];
    return dx;
  };
  f.vjp = [&prob, &theta](const State&, double, const MlpTrace& tr, const State& up,
                          Eigen::Ref<Vector> g) {
    Vector du(1);
    du[0] = prob.b * up[0];
    const Vector din = mlp_vjp(prob.controller, theta, tr, du, g);
    State dx(1);
    dx[0] = prob.a * up[0] + (prob.state_feedback ? din[1] : 0.0);
    return dx;
  };
  return f;
}

/// Fixed-step unfolding used for differentiation; Euler or RK4 only.
struct UnfoldConfig {
  Method method = Method::RK4;
  double dt = 0.0;  // 0: spacing of the problem's reference (or quadrature) grid

  bool operator==(const UnfoldConfig&) const = default;
};

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;
  Tape tape;
};

namespace detail {

inline double default_dt(const SysIdProblem& prob) {
  const auto& t = prob.observations.reference.times;
  return (t.back() - t.front()) / static_cast<double>(t.size() - 1);
}

inline double default_dt(const ControlProblem& prob) {
  return prob.horizon / static_cast<double>(prob.quadrature_intervals);
}

}  // namespace detail

/// Exact gradient of the discrete training MSE of the unfolded network.
inline LossAndGradient bptt_gradient(const ParamVector& theta, const SysIdProblem& prob,
                                     UnfoldConfig unfold_cfg = {}) {
  if (static_cast<std::size_t>(theta.size()) != prob.net.param_count())
    throw std::invalid_argument("bptt_gradient: parameter vector has wrong length");
  if (unfold_cfg.dt <= 0.0) unfold_cfg.dt = detail::default_dt(prob);
  const DifferentiableField field = differentiable_neural_field(prob.net, theta);
  const auto& obs = prob.observations;

  LossAndGradient out;
  out.tape.method = unfold_cfg.method;
  out.tape.dt = unfold_cfg.dt;
  out.gradient = Vector::Zero(theta.size());

  // Each segment lists which observation (if any) every sample corresponds to.
  std::vector<std::vector<long>> sample_obs;
  if (prob.assembly == Assembly::FullHorizon) {
    std::vector<double> times = obs.times();
    std::vector<long> ids(times.size());
    for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = static_cast<long>(k);
    if (times.empty() || times.front() != 0.0) {
      times.insert(times.begin(), 0.0);
      ids.insert(ids.begin(), -1);
    }
    out.tape.segments.push_back(unfold(field, prob.x0, times, unfold_cfg.method, unfold_cfg.dt));
    sample_obs.push_back(std::move(ids));
  } else {
    std::size_t k = 0;
    for (const auto& [first, last] : observation_runs(obs)) {
      std::vector<double> times(obs.reference.times.begin() + static_cast<std::ptrdiff_t>(first),
                                obs.reference.times.begin() + static_cast<std::ptrdiff_t>(last + 1));
      std::vector<long> ids;
      for (std::size_t i = first; i <= last; ++i) ids.push_back(static_cast<long>(k++));
      out.tape.segments.push_back(
          unfold(field, obs.reference.states[first], times, unfold_cfg.method, unfold_cfg.dt));
      sample_obs.push_back(std::move(ids));
    }
  }

  const double inv_m = 1.0 / static_cast<double>(obs.size());
  double loss = 0.0;
  for (std::size_t s = 0; s < out.tape.segments.size(); ++s) {
    const Segment& seg = out.tape.segments[s];
    std::vector<State> grads(seg.samples.size(), State::Zero(prob.x0.size()));
    for (std::size_t k = 0; k < seg.samples.size(); ++k) {
      const long id = sample_obs[s][k];
      if (id < 0) continue;
      const State diff = seg.samples[k] - obs.value(static_cast<std::size_t>(id));
      loss += diff.squaredNorm();
      grads[k] = 2.0 * inv_m * diff;
    }
    unfold_backward(field, seg, grads, out.gradient);
  }
  out.loss = loss * inv_m;
  out.tape.loss = out.loss;
  return out;
}

/// Exact gradient of the discrete control loss: RK4/Euler unfolding on the
/// quadrature grid, trapezoid energy differentiated term by term.
inline LossAndGradient bptt_gradient(const ParamVector& theta, const ControlProblem& prob,
                                     UnfoldConfig unfold_cfg = {}) {
  prob.validate();
  if (static_cast<std::size_t>(theta.size()) != prob.controller.param_count())
    throw std::invalid_argument("bptt_gradient: parameter vector has wrong length");
  if (unfold_cfg.dt <= 0.0) unfold_cfg.dt = detail::default_dt(prob);
  const DifferentiableField field = differentiable_control_field(prob, theta);
  const std::vector<double> grid = prob.quadrature_grid();
  State x0(1);
  x0[0] = prob.x0;

  LossAndGradient out;
  out.tape.method = unfold_cfg.method;
  out.tape.dt = unfold_cfg.dt;
  out.gradient = Vector::Zero(theta.size());
  out.tape.segments.push_back(unfold(field, x0, grid, unfold_cfg.method, unfold_cfg.dt));
  const Segment& seg = out.tape.segments.front();

  std::vector<State> grads(seg.samples.size(), State::Zero(1));
  const double miss = seg.samples.back()[0] - prob.x_star;
  grads.back()[0] = miss / prob.gamma;

  const double energy_weight = prob.mu / (2.0 * prob.gamma_prime);
  const double spacing = prob.horizon / static_cast<double>(grid.size() - 1);
  double energy = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double w = (k == 0 || k + 1 == grid.size()) ? 0.5 * spacing : spacing;
    Vector in(prob.state_feedback ? 2 : 1);
    in[0] = grid[k];
    if (prob.state_feedback) in[1] = seg.samples[k][0];
    MlpTrace tr;
    const double u = mlp_forward(prob.controller, theta, in, &tr)[0];
    energy += w * u * u;
    Vector du(1);
    du[0] = energy_weight * w * 2.0 * u;
    const Vector din = mlp_vjp(prob.controller, theta, tr, du, out.gradient);
    if (prob.state_feedback) grads[k][0] += din[1];
  }
  unfold_backward(field, seg, grads, out.gradient);
  out.loss = 0.5 * miss * miss / prob.gamma + energy_weight * energy;
  out.tape.loss = out.loss;
  return out;
}

}  // namespace ekinode
