#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "ekinode/problems.hpp"

using namespace ekinode;

namespace {

State st(double a, double b) {
  State s(2);
  s << a, b;
  return s;
}

const double kSinh1 = std::sinh(1.0);

}  // namespace

TEST(Spiral, FieldExamples) {
  EXPECT_EQ(spiral_field(st(1, 0), 0.0), st(-0.05, -1));
  EXPECT_EQ(spiral_field(st(0, 0), 0.0), st(0, 0));
  EXPECT_EQ(spiral_field(st(0, 1), 0.0), st(1, -0.05));
}

TEST(Spiral, SolutionExamples) {
  EXPECT_EQ(spiral_solution(0.0), st(1, 0));
  EXPECT_NEAR(spiral_solution(std::numbers::pi)[0], -0.854635, 1e-6);
  EXPECT_NEAR(spiral_solution(std::numbers::pi)[1], 0.0, 1e-15);
  for (double t : {0.3, 5.0, 27.0}) EXPECT_NEAR(spiral_solution(t).norm(), std::exp(-t / 20), 1e-15);
}

TEST(Pendulum, FieldExamples) {
  EXPECT_EQ(pendulum_field(st(0, 0), 0.0), st(0, 0));
  const State f = pendulum_field(st(std::numbers::pi / 4, 0), 0.0);
  EXPECT_EQ(f[0], 0.0);
  EXPECT_NEAR(f[1], -std::sqrt(2.0) / 2, 1e-15);
  EXPECT_NEAR(pendulum_field(st(std::numbers::pi, 0), 0.0).norm(), 0.0, 1e-15);
}

TEST(Observations, SpiralCountsAndRuns) {
  Rng rng(1, streams::kData);
  const auto prob = make_spiral_problem(rng);
  const auto& obs = prob.observations;
  EXPECT_EQ(obs.size(), 100u);
  EXPECT_EQ(obs.reference.size(), 500u);
  EXPECT_EQ(obs.stacked_values().size(), 200);
  const auto runs = observation_runs(obs);
  std::size_t total = 0;
  for (const auto& [a, b] : runs) {
    EXPECT_EQ((b - a + 1) % 10, 0u);
    total += b - a + 1;
  }
  EXPECT_EQ(total, 100u);
  EXPECT_EQ(std::set<std::size_t>(obs.indices.begin(), obs.indices.end()).size(), 100u);
  EXPECT_EQ(obs.starts.size(), 10u);
  for (std::size_t s : obs.starts) EXPECT_LE(s, 490u);
  for (std::size_t k = 0; k < obs.size(); ++k)
    EXPECT_EQ(obs.time(k), obs.reference.times[obs.indices[k]]);
}

TEST(Observations, TrainTestDisjoint) {
  Rng rng(2, streams::kData);
  const auto prob = make_pendulum_problem(rng);
  const auto test = prob.observations.test_indices();
  EXPECT_EQ(test.size(), 100u);
  std::vector<std::size_t> both;
  std::set_intersection(test.begin(), test.end(), prob.observations.indices.begin(),
                        prob.observations.indices.end(), std::back_inserter(both));
  EXPECT_TRUE(both.empty());
}

TEST(Observations, WholeGridAndDeterminism) {
  const auto ref = make_reference(spiral_field, st(1, 0), 1.0, 20);
  Rng rng(3);
  const auto all = make_observations(ref, 1, 20, rng);
  EXPECT_EQ(all.size(), 20u);
  Rng a(4), b(4);
  EXPECT_EQ(make_observations(ref, 3, 4, a).indices, make_observations(ref, 3, 4, b).indices);
  Rng c(5);
  EXPECT_THROW(make_observations(ref, 3, 8, c), std::invalid_argument);
}

TEST(Observations, PendulumReferenceConservesEnergy) {
  Rng rng(6);
  const auto prob = make_pendulum_problem(rng);
  const double e0 = pendulum_energy(prob.x0);
  for (const auto& s : prob.observations.reference.states) EXPECT_NEAR(pendulum_energy(s), e0, 1e-6);
}

TEST(SysId, ForwardMapDimensionAndZeroTheta) {
  Rng rng(7);
  for (Assembly asmb : {Assembly::FullHorizon, Assembly::MultipleShooting}) {
    SysIdOptions opt;
    opt.assembly = asmb;
    Rng r = rng;
    const auto prob = make_spiral_problem(r, opt);
    const auto out = sysid_forward_map(ParamVector::Zero(52), prob);
    ASSERT_FALSE(out.failed);
    EXPECT_EQ(out.g.size(), 200);
    if (asmb == Assembly::FullHorizon) {
      for (Eigen::Index i = 0; i < 100; ++i) EXPECT_EQ(out.g.segment(2 * i, 2), prob.x0);
    }
  }
}

TEST(SysId, TrueFieldReproducesObservations) {
  Rng rng(8);
  for (Assembly asmb : {Assembly::FullHorizon, Assembly::MultipleShooting}) {
    SysIdOptions opt;
    opt.assembly = asmb;
    opt.integrator.rtol = 1e-9;
    opt.integrator.atol = 1e-12;
    Rng r = rng;
    const auto prob = make_spiral_problem(r, opt);
    const Vector pred = sysid_predictions(prob.true_field, prob);
    EXPECT_LE((pred - prob.observations.stacked_values()).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LE(test_mse(prob.true_field, prob), 1e-14);
  }
}

TEST(SysId, MseMatchesLoopOracle) {
  Rng rng(9);
  const Vector obs = Vector::Random(10);
  const Vector pred = Vector::Random(10);
  double brute = 0.0;
  for (int l = 0; l < 5; ++l)
    for (int c = 0; c < 2; ++c) brute += std::pow(obs[2 * l + c] - pred[2 * l + c], 2);
  brute /= 5.0;
  EXPECT_NEAR(mse_stacked(pred, obs, 2), brute, 1e-14);
  EXPECT_EQ(mse_stacked(obs, obs, 2), 0.0);
  EXPECT_EQ(mse_stacked(st(0, 0), st(1, 0), 2), 1.0);
}

TEST(SysId, MseNonNegative) {
  Rng rng(10);
  const auto prob = make_spiral_problem(rng);
  Rng init(11);
  for (int k = 0; k < 5; ++k) EXPECT_GE(mse(mlp_init(prob.net, init), prob), 0.0);
}

TEST(SysId, BlowUpReportedAsFailure) {
  Rng rng(12);
  auto prob = make_spiral_problem(rng);
  prob.integrator.max_steps = 50;
  ParamVector theta = ParamVector::Constant(52, 3.0);
  EXPECT_TRUE(sysid_forward_map(theta, prob).failed);
}

TEST(ControlOracle, ClosedForms) {
  EXPECT_NEAR(optimal_energy(1, 1, 0, 1, 1), 2.0 / (std::exp(2.0) - 1.0), 1e-12);
  EXPECT_NEAR(optimal_energy(1, 1, 0, 1, 1), 0.313, 5e-4);
  EXPECT_NEAR(optimal_control(0.0, 1, 1, 0, 1, 1), 1.0 / kSinh1, 1e-15);
  EXPECT_NEAR(optimal_control(0.0, 1, 1, 0, 1, 1), 0.850918, 1e-6);
  EXPECT_NEAR(optimal_state(1.0, 1, 1, 0, 1, 1), 1.0, 1e-15);
  for (double t : {0.2, 0.5, 0.9}) {
    EXPECT_NEAR(optimal_control(t, 1, 1, 0, 1, 1), std::exp(-t) / kSinh1, 1e-15);
    EXPECT_NEAR(optimal_state(t, 1, 1, 0, 1, 1), std::sinh(t) / kSinh1, 1e-15);
  }
  EXPECT_THROW(optimal_energy(0, 1, 0, 1, 1), std::invalid_argument);
}

TEST(ControlOracle, IntegratingOptimalControlReproducesState) {
  ControlProblem p;
  const ControlLaw u = [&](double t, double) { return optimal_control(t, p); };
  const VectorField f = [&](const State& x, double t) {
    State dx(1);
    dx[0] = p.a * x[0] + p.b * u(t, x[0]);
    return dx;
  };
  State x0(1);
  x0[0] = 0.0;
  const auto times = linspace(0.0, 1.0, 100);
  const auto traj = integrate(f, x0, times, reference_integrator());
  for (std::size_t i = 0; i < times.size(); ++i)
    EXPECT_NEAR(traj.states[i][0], optimal_state(times[i], p), 1e-6);
  EXPECT_NEAR(traj.states.back()[0], 1.0, 1e-6);
}

TEST(ControlOracle, EnergyMinimalAlongConstraintFamilies) {
  // u* + s*w with w orthogonal (in the terminal-map sense) to the constraint keeps x(1) = 1.
  ControlProblem p;
  const auto grid = p.quadrature_grid();
  auto energy = [&](const std::function<double(double)>& u) {
    std::vector<double> v;
    for (double t : grid) v.push_back(u(t) * u(t));
    return trapezoid(v, p.horizon);
  };
  // terminal map: x(1) = int_0^1 e^{1-t} u(t) dt; w_k(t) = sin(k pi t) - c_k e^{-t}
  // with c_k chosen so int e^{1-t} w_k = 0.
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const double k = 1.0 + static_cast<double>(rng.index(5));
    std::vector<double> num, den;
    for (double t : grid) {
      num.push_back(std::exp(1 - t) * std::sin(k * std::numbers::pi * t));
      den.push_back(std::exp(1 - t) * std::exp(-t));
    }
    const double c = trapezoid(num, 1.0) / trapezoid(den, 1.0);
    const auto w = [&](double t) { return std::sin(k * std::numbers::pi * t) - c * std::exp(-t); };
    const double e0 = energy([&](double t) { return optimal_control(t, p); });
    for (double s : {-0.1, -0.01, 0.01, 0.1})
      EXPECT_GE(energy([&](double t) { return optimal_control(t, p) + s * w(t); }), e0 - 1e-4);
  }
}

TEST(Control, EnergyExamples) {
  ControlProblem p;
  const std::size_t n = p.controller.param_count();
  EXPECT_EQ(control_energy(ParamVector::Zero(static_cast<Eigen::Index>(n)), p), 0.0);

  // Output bias only: u == c.
  ParamVector theta = ParamVector::Zero(static_cast<Eigen::Index>(n));
  theta[theta.size() - 1] = 0.7;
  EXPECT_NEAR(control_energy(theta, p), 0.49, 1e-15);

  std::vector<double> v;
  for (double t : p.quadrature_grid()) v.push_back(std::pow(optimal_control(t, p), 2));
  EXPECT_NEAR(trapezoid(v, 1.0), 0.313, 1e-3);
  EXPECT_NEAR(trapezoid(v, 1.0), optimal_energy(p), 1e-4);
}

TEST(Control, ForwardMapExamples) {
  ControlProblem p;
  const auto zero = control_forward_map(ParamVector::Zero(76), p);
  EXPECT_EQ(zero.g[0], 0.0);
  EXPECT_EQ(*zero.h, 0.0);
  const ControlLaw u = [&](double t, double) { return optimal_control(t, p); };
  const auto opt = control_forward_map(u, p);
  EXPECT_NEAR(opt.g[0], 1.0, 1e-4);
  EXPECT_NEAR(*opt.h, std::sqrt(optimal_energy(p)), 1e-4);
}

TEST(Control, LossExamples) {
  ControlProblem p;
  p.gamma = 1.0;
  p.gamma_prime = 1.0;
  p.mu = 0.0;
  EXPECT_NEAR(control_loss(ParamVector::Zero(76), p), 0.5, 1e-15);
  p.gamma = 0.3;
  p.mu = 0.004;
  EXPECT_NEAR(control_loss(ParamVector::Zero(76), p), 0.5 / 0.3, 1e-12);
  p.gamma = 1.0;
  p.mu = 0.0;
  const ControlLaw u = [&](double t, double) { return optimal_control(t, p); };
  const auto rollout = control_rollout(u, p);
  EXPECT_NEAR(control_loss_from(rollout.terminal(), rollout.energy, p), 0.0, 1e-8);
}

TEST(Control, Validation) {
  ControlProblem p;
  p.b = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.b = 1.0;
  p.horizon = -1.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}
