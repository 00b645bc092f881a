#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ekinode/nnet.hpp"
#include "ekinode/rng.hpp"

namespace ekinode {

/// Value reported for members whose forward map could not be evaluated.
inline constexpr double kFailedMemberLoss = 1e300;

/// Forward-map value for one member: predictions g, plus the optional
/// regularization channel h (sqrt of the control energy).
struct ForwardMapOutput {
  Vector g;
  std::optional<double> h;
  bool failed = false;

  static ForwardMapOutput failure() { return {Vector(), std::nullopt, true}; }

  Eigen::Index dim() const { return g.size() + (h ? 1 : 0); }

  /// (g, h) stacked into a single vector.
  Vector stacked() const {
    Vector out(dim());
    out.head(g.size()) = g;
    if (h) out[g.size()] = *h;
    return out;
  }
};

struct ExpansionRecord {
  std::size_t epoch;
  std::size_t count;

  bool operator==(const ExpansionRecord&) const = default;
};

/// EKI state: J parameter vectors plus the epoch counter and the random
/// stream used for expansions.
struct Ensemble {
  std::vector<ParamVector> members;
  std::size_t epoch = 0;
  Rng rng;
  std::vector<ExpansionRecord> expansions;
  std::vector<bool> flagged;  // members frozen during the most recent step

  std::size_t size() const { return members.size(); }
  Eigen::Index dim() const { return members.empty() ? 0 : members.front().size(); }
};

inline Ensemble make_ensemble(const MlpSpec& spec, std::size_t count, Rng rng) {
  Ensemble ens;
  ens.rng = rng;
  ens.members.reserve(count);
  for (std::size_t j = 0; j < count; ++j) ens.members.push_back(mlp_init(spec, ens.rng));
  ens.flagged.assign(count, false);
  return ens;
}

/// gamma(m) = gamma0 * exp(-alpha * m'), m' the last multiple of `period` <= m.
struct CovarianceSchedule {
  double gamma0 = 1.0;
  double alpha = 0.0;
  std::size_t period = 1;
  bool enabled = true;

  void validate() const {
    if (!(gamma0 > 0.0)) throw std::invalid_argument("schedule.gamma0 must be > 0");
    if (!(alpha >= 0.0)) throw std::invalid_argument("schedule.alpha must be >= 0");
    if (period == 0) throw std::invalid_argument("schedule.period must be >= 1");
  }
  bool operator==(const CovarianceSchedule&) const = default;
};

inline double gamma_at(const CovarianceSchedule& s, std::size_t epoch) {
  if (!s.enabled) return s.gamma0;
  const std::size_t held = epoch - epoch % s.period;
  return s.gamma0 * std::exp(-s.alpha * static_cast<double>(held));
}

/// Piecewise-constant value over epochs: entry (from, v) applies for all
/// epochs >= from until the next entry. Entries must be sorted by `from`.
struct StepSchedule {
  std::vector<std::pair<std::size_t, double>> steps;

  bool empty() const { return steps.empty(); }

  double at(std::size_t epoch, double fallback) const {
    double v = fallback;
    for (const auto& [from, value] : steps)
      if (epoch >= from) v = value;
    return v;
  }
  bool operator==(const StepSchedule&) const = default;
};

/// Observation-noise blocks: Gamma*I on the data, Gamma'/mu on the energy channel.
struct BlockCovariance {
  double gamma = 1.0;
  double gamma_prime = 1.0;
  double mu = 0.0;

  void validate() const {
    if (!(gamma > 0.0)) throw std::invalid_argument("Gamma must be > 0");
    if (!(gamma_prime > 0.0)) throw std::invalid_argument("Gamma' must be > 0");
    if (!(mu >= 0.0)) throw std::invalid_argument("mu must be >= 0");
  }
};

namespace detail {

inline std::vector<std::size_t> usable_members(const std::vector<ForwardMapOutput>& outputs) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < outputs.size(); ++j)
    if (!outputs[j].failed) idx.push_back(j);
  return idx;
}

}  // namespace detail

inline ParamVector ensemble_mean(const std::vector<ParamVector>& members) {
  if (members.empty()) throw std::invalid_argument("ensemble_mean: empty ensemble");
  ParamVector sum = ParamVector::Zero(members.front().size());
  for (const auto& m : members) sum += m;
  return sum / static_cast<double>(members.size());
}

inline ParamVector ensemble_mean(const Ensemble& ens) { return ensemble_mean(ens.members); }

inline ForwardMapOutput output_mean(const std::vector<ForwardMapOutput>& outputs) {
  if (outputs.empty()) throw std::invalid_argument("output_mean: no outputs");
  ForwardMapOutput mean;
  mean.g = Vector::Zero(outputs.front().g.size());
  if (outputs.front().h) mean.h = 0.0;
  for (const auto& o : outputs) {
    mean.g += o.g;
    if (mean.h) *mean.h += *o.h;
  }
  const double inv = 1.0 / static_cast<double>(outputs.size());
  mean.g *= inv;
  if (mean.h) *mean.h *= inv;
  return mean;
}

/// (1/J) sum_j (theta_j - mean theta)(F_j - mean F)^T, F including the h channel.
inline Matrix cross_covariance(const std::vector<ParamVector>& members,
                               const std::vector<ForwardMapOutput>& outputs) {
  if (members.size() != outputs.size())
    throw std::invalid_argument("cross_covariance: members and outputs misaligned");
  if (members.empty()) throw std::invalid_argument("cross_covariance: empty ensemble");
  const ParamVector theta_bar = ensemble_mean(members);
  const Vector out_bar = output_mean(outputs).stacked();
  Matrix c = Matrix::Zero(theta_bar.size(), out_bar.size());
  for (std::size_t j = 0; j < members.size(); ++j)
    c.noalias() += (members[j] - theta_bar) * (outputs[j].stacked() - out_bar).transpose();
  return c / static_cast<double>(members.size());
}

inline Matrix cross_covariance(const Ensemble& ens, const std::vector<ForwardMapOutput>& outputs) {
  return cross_covariance(ens.members, outputs);
}

/// How one epoch advances the ensemble in artificial time.
enum class UpdateForm {
  /// Explicit Euler on the continuous flow:
  ///   theta_j <- theta_j - h C^{thetaF} W (F_j - z).
  Flow,
  /// Kalman-gain iteration, whose h -> 0 limit is the same flow:
  ///   theta_j <- theta_j - C^{thetaF} (C^{FF} + (hW)^{-1})^{-1} (F_j - z).
  /// Unconditionally stable; needed once gamma has decayed.
  Kalman,
};

inline std::string_view to_string(UpdateForm f) { return f == UpdateForm::Flow ? "flow" : "kalman"; }

inline UpdateForm update_form_from_string(std::string_view s) {
  if (s == "flow") return UpdateForm::Flow;
  if (s == "kalman") return UpdateForm::Kalman;
  throw std::invalid_argument("unknown update form '" + std::string(s) + "'");
}

/// One ensemble update with diagonal inverse noise covariance W (`weights`)
/// and target z. Members whose output failed are held fixed and excluded from
/// the ensemble statistics; members whose update is non-finite keep their old
/// value. Both are flagged.
inline Ensemble weighted_step(Ensemble ens, const std::vector<ForwardMapOutput>& outputs,
                              const Vector& target, const Vector& weights, double h,
                              UpdateForm form = UpdateForm::Flow) {
  if (outputs.size() != ens.size())
    throw std::invalid_argument("eki step: outputs not aligned with members");
  if (!(h > 0.0)) throw std::invalid_argument("eki step: step size must be > 0");
  if (weights.size() != target.size())
    throw std::invalid_argument("eki step: weights/target dimension mismatch");
  ens.flagged.assign(ens.size(), false);
  const auto usable = detail::usable_members(outputs);
  for (std::size_t j = 0; j < ens.size(); ++j)
    if (outputs[j].failed) ens.flagged[j] = true;

  if (usable.size() >= 2) {
    const Eigen::Index n = ens.dim();
    const auto J = static_cast<Eigen::Index>(usable.size());
    const Eigen::Index d = target.size();

    Matrix theta_dev(n, J);
    Matrix out_dev(d, J);
    Matrix resid(d, J);
    for (Eigen::Index k = 0; k < J; ++k) {
      const auto j = usable[static_cast<std::size_t>(k)];
      theta_dev.col(k) = ens.members[j];
      const Vector f = outputs[j].stacked();
      if (f.size() != d) throw std::invalid_argument("eki step: output/target dimension mismatch");
      out_dev.col(k) = f;
      resid.col(k) = f - target;
    }
    const Vector theta_bar = theta_dev.rowwise().mean();
    const Vector out_bar = out_dev.rowwise().mean();
    theta_dev.colwise() -= theta_bar;
    out_dev.colwise() -= out_bar;

    const double inv_j = 1.0 / static_cast<double>(J);
    const Matrix weighted_dev = (h * weights).asDiagonal() * out_dev;  // h W (F - mean F)
    // Everything is expressed in ensemble coordinates (J x J systems).
    Matrix coeffs = weighted_dev.transpose() * resid;
    if (form == UpdateForm::Kalman) {
      // Push-through identity: Fd^T (Fd Fd^T / J + (hW)^{-1})^{-1} = (I + K)^{-1} Fd^T hW
      const Matrix k = Matrix::Identity(J, J) + inv_j * (out_dev.transpose() * weighted_dev);
      coeffs = k.ldlt().solve(coeffs);
    }
    const Matrix delta = inv_j * (theta_dev * coeffs);
    for (Eigen::Index k = 0; k < J; ++k) {
      const auto j = usable[static_cast<std::size_t>(k)];
      ParamVector updated = ens.members[j] - delta.col(k);
      if (updated.allFinite())
        ens.members[j] = std::move(updated);
      else
        ens.flagged[j] = true;
    }
  }
  ++ens.epoch;
  return ens;
}

/// theta_j <- theta_j - h * C^{thetaG} gamma^{-1} (G(theta_j) - y) for the
/// Flow form; see UpdateForm for the Kalman variant.
inline Ensemble eki_step(Ensemble ens, const std::vector<ForwardMapOutput>& outputs,
                         const Vector& y, double gamma, double h = 1.0,
                         UpdateForm form = UpdateForm::Flow) {
  if (!(gamma > 0.0)) throw std::invalid_argument("eki_step: gamma must be > 0");
  for (const auto& o : outputs)
    if (!o.failed && o.h) throw std::invalid_argument("eki_step: unexpected regularization channel");
  const Vector weights = Vector::Constant(y.size(), 1.0 / gamma);
  return weighted_step(std::move(ens), outputs, y, weights, h, form);
}

/// Extended problem with target z = (y, 0) and Sigma = diag(Gamma I, Gamma'/mu):
///   theta_j <- theta_j - h * B^{thetaF} Sigma^{-1} (F(theta_j) - z).
/// The data block is scaled by 1/Gamma and the energy channel by mu/Gamma'.
inline Ensemble eki_step_regularized(Ensemble ens, const std::vector<ForwardMapOutput>& outputs,
                                     const Vector& y, const BlockCovariance& cov, double h = 1.0,
                                     UpdateForm form = UpdateForm::Flow) {
  cov.validate();
  for (const auto& o : outputs)
    if (!o.failed && !o.h)
      throw std::invalid_argument("eki_step_regularized: output lacks regularization channel");
  const Eigen::Index d = y.size();
  Vector target = Vector::Zero(d + 1);
  target.head(d) = y;
  Vector weights(d + 1);
  weights.head(d).setConstant(1.0 / cov.gamma);
  weights[d] = cov.mu / cov.gamma_prime;
  return weighted_step(std::move(ens), outputs, target, weights, h, form);
}

enum class ExpansionMode { Fresh, PerturbMean };

/// Appends `count` members. Fresh: independent mlp_init draws. PerturbMean:
/// mean + scale * (mlp_init draw).
inline Ensemble ensemble_expand(Ensemble ens, std::size_t count, const MlpSpec& spec,
                                ExpansionMode mode = ExpansionMode::Fresh,
                                double perturb_scale = 1.0) {
  if (count == 0) throw std::invalid_argument("ensemble_expand: count must be >= 1");
  const ParamVector mean = ens.members.empty() ? ParamVector::Zero(static_cast<Eigen::Index>(
                                                     spec.param_count()))
                                               : ensemble_mean(ens);
  for (std::size_t i = 0; i < count; ++i) {
    ParamVector draw = mlp_init(spec, ens.rng);
    if (mode == ExpansionMode::PerturbMean) draw = mean + perturb_scale * draw;
    ens.members.push_back(std::move(draw));
  }
  ens.flagged.resize(ens.members.size(), false);
  ens.expansions.push_back({ens.epoch, count});
  return ens;
}

/// Smallest loss; ties go to the lowest index.
inline std::pair<std::size_t, double> min_loss_member(const std::vector<double>& losses) {
  if (losses.empty()) throw std::invalid_argument("min_loss_member: empty ensemble");
  std::size_t best = 0;
  for (std::size_t j = 1; j < losses.size(); ++j)
    if (losses[j] < losses[best]) best = j;
  return {best, losses[best]};
}

}  // namespace ekinode
