#pragma once

// Auto-oscillator near a Hopf bifurcation under continuous phase
// measurement. The reduced model evolves the action j with additive noise
// (the phase carries no diffusion and rotates uniformly), the stationary
// action density is bimodal with extrema at j = 0 and j = eps/2c, and long
// runs are compared against the normalized closed-form density.

#include <mnl/phase.hpp>
#include <mnl/rng.hpp>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mnl {

struct HopfParams {
  double omega = 0.0;    // rotation rate
  double epsilon = 0.0;  // distance to the bifurcation point
  double c = 0.0;        // saturation coefficient
  double Dj = 0.0;       // action diffusion constant (gamma hbar^2 / 2)

  HopfParams(double omega_in, double epsilon_in, double c_in, double dj_in)
      : omega(omega_in), epsilon(epsilon_in), c(c_in), Dj(dj_in) {
    if (!(c > 0.0)) throw std::invalid_argument("saturation c must be positive");
    if (!(Dj > 0.0))
      throw std::invalid_argument("action diffusion D must be positive");
  }

  double limit_cycle_action() const { return epsilon / (2.0 * c); }
};

// Real and imaginary parts of z (i omega + eps - c |z|^2), z = x + i y.
inline std::pair<double, double> cartesian_drift(const HopfParams& p, double x,
                                                 double y) {
  const double r2 = x * x + y * y;
  const double radial = p.epsilon - p.c * r2;
  return {x * radial - p.omega * y, y * radial + p.omega * x};
}

struct ActionAngle {
  double j = 0.0;
  double phi = 0.0;
  bool phi_defined = true;
};

// j = (x^2 + y^2)/2, phi = -arctan(y/x), with phi in (-pi, pi].
inline ActionAngle action_angle(double x, double y) {
  ActionAngle aa;
  aa.j = 0.5 * (x * x + y * y);
  if (x == 0.0 && y == 0.0) {
    aa.phi_defined = false;
    return aa;
  }
  aa.phi = -std::atan2(y, x);
  if (aa.phi == -M_PI) aa.phi = M_PI;
  return aa;
}

inline double action_drift(const HopfParams& p, double j) {
  return 2.0 * p.epsilon * j - 4.0 * p.c * j * j;
}

// Euler-Maruyama step of dj = (2 eps j - 4 c j^2) dt + sqrt(2 D) dW with a
// reflecting (zero-flux) boundary at j = 0.
inline double action_sde_step(const HopfParams& p, double j, double dt,
                              double dW) {
  if (!(j >= 0.0)) throw std::invalid_argument("action must be nonnegative");
  const double next = j + action_drift(p, j) * dt + std::sqrt(2.0 * p.Dj) * dW;
  return std::fabs(next);
}

// Normalized stationary action density on [0, infinity):
// F(j) proportional to exp(eps j^2 / D - 4 c j^3 / (3 D)).
class ActionDensity {
 public:
  explicit ActionDensity(const HopfParams& p) : p_(p) {
    if (!(p.epsilon > 0.0))
      throw std::invalid_argument(
          "stationary analysis requires epsilon > 0 (past the bifurcation)");
    log_peak_ = log_unnormalized(p_.limit_cycle_action());
    boost::math::quadrature::exp_sinh<double> integrator;
    scaled_mass_ = integrator.integrate(
        [this](double j) { return std::exp(log_unnormalized(j) - log_peak_); },
        1e-8);
  }

  const HopfParams& params() const { return p_; }
  double mode() const { return p_.limit_cycle_action(); }

  double log_unnormalized(double j) const {
    return (p_.epsilon * j * j - 4.0 * p_.c * j * j * j / 3.0) / p_.Dj;
  }

  double operator()(double j) const {
    if (j < 0.0) return 0.0;
    return std::exp(log_unnormalized(j) - log_peak_) / scaled_mass_;
  }

  double bin_mass(double lo, double hi) const {
    const double raw = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(
        [this](double j) { return std::exp(log_unnormalized(j) - log_peak_); },
        lo, hi, 8, 1e-10);
    return raw / scaled_mass_;
  }

  // Point beyond the mode where the density has dropped by exp(-drop).
  double upper_cutoff(double drop = 14.0) const {
    const double target = log_peak_ - drop;
    double lo = mode();
    double hi = std::max(2.0 * mode(), 1.0);
    while (log_unnormalized(hi) > target) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (log_unnormalized(mid) > target ? lo : hi) = mid;
    }
    return hi;
  }

 private:
  HopfParams p_;
  double log_peak_ = 0.0;
  double scaled_mass_ = 0.0;
};

inline double stationary_action_density(const HopfParams& p, double j) {
  return ActionDensity(p)(j);
}

// Closed-form ratio of the density at the limit cycle to the density at the
// origin: exp(eps^3 / (12 D c^2)).
inline double extremum_ratio(const HopfParams& p) {
  if (!(p.epsilon > 0.0))
    throw std::invalid_argument("extremum ratio requires epsilon > 0");
  const double e = p.epsilon;
  return std::exp(e * e * e / (12.0 * p.Dj * p.c * p.c));
}

struct Histogram {
  std::vector<double> edges;       // size bins + 1
  std::vector<std::int64_t> counts;
  std::vector<double> model_mass;  // closed-form probability per bin
  std::int64_t total = 0;

  double l1_distance() const {
    double acc = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      acc += std::fabs(static_cast<double>(counts[i]) /
                           static_cast<double>(total) -
                       model_mass[i]);
    return acc;
  }
};

struct HopfRunConfig {
  std::int64_t n_traj = 1;
  double dt = 1e-3;
  double t_final = 0.0;
  double burn_in = 0.0;        // defaults to 10/epsilon when <= 0
  double sample_stride = 0.5;  // time between recorded samples
  std::uint64_t seed = 0;
  int bins = 32;
  std::vector<double> record_times;  // action moment series
};

struct ActionMomentRecord {
  double t = 0.0;
  double mean_j = 0.0;
  double var_j = 0.0;
  double stderr_mean = 0.0;
};

struct HopfRunResult {
  Histogram action_histogram;
  std::vector<std::int64_t> phase_histogram;  // 36 bins over (-pi, pi]
  std::vector<ActionMomentRecord> moments;
  std::int64_t samples = 0;
};

// Ensemble of action-angle trajectories of the reduced model; trajectory i
// draws from stream (seed, i), so the result is independent of scheduling.
// Stationary samples are taken every sample_stride after burn_in.
inline HopfRunResult run_hopf_ensemble(const HopfParams& p,
                                       const HopfRunConfig& cfg) {
  if (cfg.n_traj <= 0 || !(cfg.dt > 0.0) || !(cfg.t_final > 0.0))
    throw std::invalid_argument("hopf run needs n_traj, dt, t_final > 0");
  if (cfg.bins < 2) throw std::invalid_argument("need at least two bins");
  const double burn_in =
      cfg.burn_in > 0.0 ? cfg.burn_in : 10.0 / std::max(p.epsilon, 1e-6);
  if (burn_in >= cfg.t_final)
    throw std::invalid_argument("burn-in must end before t_final");

  const ActionDensity density(p);
  const double j_max = density.upper_cutoff();

  HopfRunResult result;
  result.action_histogram.edges.resize(static_cast<std::size_t>(cfg.bins) + 1);
  for (int b = 0; b <= cfg.bins; ++b)
    result.action_histogram.edges[static_cast<std::size_t>(b)] =
        j_max * b / cfg.bins;
  result.action_histogram.counts.assign(static_cast<std::size_t>(cfg.bins), 0);
  result.phase_histogram.assign(36, 0);

  const std::int64_t stride_steps = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(cfg.sample_stride / cfg.dt)));
  const std::int64_t burn_steps =
      static_cast<std::int64_t>(std::llround(burn_in / cfg.dt));
  const std::int64_t total_steps =
      static_cast<std::int64_t>(std::llround(cfg.t_final / cfg.dt));

  std::vector<double> rec_sum(cfg.record_times.size(), 0.0);
  std::vector<double> rec_sum2(cfg.record_times.size(), 0.0);

  const double sqrt_dt = std::sqrt(cfg.dt);
  for (std::int64_t traj = 0; traj < cfg.n_traj; ++traj) {
    NormalStream stream(cfg.seed, static_cast<std::uint64_t>(traj));
    // Start on the limit cycle with a trajectory-dependent phase.
    double j = p.limit_cycle_action();
    double phi = 2.0 * M_PI * stream.uniform() - M_PI;
    std::size_t rec = 0;
    for (std::int64_t step = 1; step <= total_steps; ++step) {
      j = action_sde_step(p, j, cfg.dt, stream.normal() * sqrt_dt);
      phi += p.omega * cfg.dt;
      if (phi > M_PI || phi < -M_PI)
        phi -= 2.0 * M_PI * std::floor((phi + M_PI) / (2.0 * M_PI));
      const double t = static_cast<double>(step) * cfg.dt;
      if (!std::isfinite(j) || j > 1e12)
        throw NumericError("action diverged (j = " + std::to_string(j) +
                           ") at t = " + std::to_string(t) + " in trajectory " +
                           std::to_string(traj));
      if (rec < cfg.record_times.size() &&
          t >= cfg.record_times[rec] - 0.5 * cfg.dt) {
        rec_sum[rec] += j;
        rec_sum2[rec] += j * j;
        ++rec;
      }
      if (step > burn_steps && (step - burn_steps) % stride_steps == 0) {
        // Samples beyond the last edge land in the final bin.
        const int bin =
            j >= j_max ? cfg.bins - 1
                       : static_cast<int>(j / j_max *
                                          static_cast<double>(cfg.bins));
        ++result.action_histogram.counts[static_cast<std::size_t>(bin)];
        const int pbin = std::min(
            35, static_cast<int>((phi + M_PI) / (2.0 * M_PI) * 36.0));
        ++result.phase_histogram[static_cast<std::size_t>(pbin)];
        ++result.action_histogram.total;
      }
    }
  }
  result.samples = result.action_histogram.total;

  // Model mass per bin, with the tail beyond the last edge lumped into the
  // final bin to match the sample clipping.
  result.action_histogram.model_mass.resize(static_cast<std::size_t>(cfg.bins));
  double mass_acc = 0.0;
  for (int b = 0; b < cfg.bins; ++b) {
    const double lo = result.action_histogram.edges[static_cast<std::size_t>(b)];
    const double hi =
        result.action_histogram.edges[static_cast<std::size_t>(b) + 1];
    result.action_histogram.model_mass[static_cast<std::size_t>(b)] =
        density.bin_mass(lo, hi);
    mass_acc += result.action_histogram.model_mass[static_cast<std::size_t>(b)];
  }
  result.action_histogram.model_mass.back() += std::max(0.0, 1.0 - mass_acc);

  // Action moment series across trajectories.
  result.moments.resize(cfg.record_times.size());
  const double n = static_cast<double>(cfg.n_traj);
  for (std::size_t r = 0; r < cfg.record_times.size(); ++r) {
    ActionMomentRecord& m = result.moments[r];
    m.t = cfg.record_times[r];
    m.mean_j = rec_sum[r] / n;
    m.var_j = std::max(0.0, rec_sum2[r] / n - m.mean_j * m.mean_j);
    m.stderr_mean = std::sqrt(m.var_j / std::max(n - 1.0, 1.0));
  }
  return result;
}

}  // namespace mnl
