#pragma once

// Ensemble simulation of the stochastic flow whose Fokker-Planck equation is
// deterministic drift plus the measurement generator kappa {O, {O, .}}.
//
// Production scheme: Stratonovich form dx = K dt + sqrt(2 kappa) w(x) o dW
// integrated with a Heun predictor-corrector. The noise field w is the
// Hamiltonian vector field of the observable, so it is divergence free and
// the scheme needs no drift correction. An Euler-Maruyama stepper in Ito
// form (drift K + kappa div D) is kept as an independent discretization of
// the same equation for cross-checks.

#include <mnl/expr.hpp>
#include <mnl/phase.hpp>
#include <mnl/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace mnl {

using DriftFn =
    std::function<void(std::span<const double>, std::span<double>)>;

// A vector field compiled from expression trees. Fields that are constant or
// affine in the coordinates (every scenario in this library) take a matrix
// fast path; anything else falls back to tree evaluation.
class CompiledField {
 public:
  enum class Kind { kZero, kConstant, kAffine, kGeneral };

  static CompiledField zero(int dim) {
    CompiledField f;
    f.kind_ = Kind::kZero;
    f.dim_ = dim;
    return f;
  }

  static CompiledField linear(const Eigen::MatrixXd& A) {
    CompiledField f;
    f.kind_ = Kind::kAffine;
    f.dim_ = static_cast<int>(A.rows());
    f.jac_ = A;
    f.offset_ = Eigen::VectorXd::Zero(f.dim_);
    return f;
  }

  static CompiledField from_exprs(std::vector<Expr> comps) {
    CompiledField f;
    f.dim_ = static_cast<int>(comps.size());
    Eigen::MatrixXd jac(f.dim_, f.dim_);
    bool affine = true;
    for (int i = 0; i < f.dim_ && affine; ++i) {
      for (int c = 0; c < f.dim_; ++c) {
        const Expr d = comps[i].differentiate(c);
        if (!d.is_constant()) {
          affine = false;
          break;
        }
        jac(i, c) = d.constant_value();
      }
    }
    if (affine) {
      const Eigen::VectorXd origin = Eigen::VectorXd::Zero(f.dim_);
      Eigen::VectorXd off(f.dim_);
      std::vector<double> scratch;
      for (int i = 0; i < f.dim_; ++i)
        off[i] = comps[i].evaluate(
            std::span<const double>(origin.data(), f.dim_), scratch);
      if (jac.cwiseAbs().maxCoeff() == 0.0) {
        if (off.cwiseAbs().maxCoeff() == 0.0) return zero(f.dim_);
        f.kind_ = Kind::kConstant;
        f.offset_ = off;
        return f;
      }
      f.kind_ = Kind::kAffine;
      f.jac_ = jac;
      f.offset_ = off;
      return f;
    }
    f.kind_ = Kind::kGeneral;
    f.comps_ = std::move(comps);
    for (const Expr& e : f.comps_)
      f.scratch_size_ = std::max(f.scratch_size_, e.node_count());
    return f;
  }

  Kind kind() const { return kind_; }
  int dimension() const { return dim_; }
  std::size_t scratch_size() const { return scratch_size_; }

  void eval(const Eigen::VectorXd& x, Eigen::VectorXd& out,
            std::vector<double>& scratch) const {
    switch (kind_) {
      case Kind::kZero:
        out.setZero(dim_);
        break;
      case Kind::kConstant:
        out = offset_;
        break;
      case Kind::kAffine:
        out.noalias() = jac_ * x;
        out += offset_;
        break;
      case Kind::kGeneral: {
        const std::span<const double> pt(x.data(),
                                         static_cast<std::size_t>(x.size()));
        for (int i = 0; i < dim_; ++i) out[i] = comps_[i].evaluate(pt, scratch);
        break;
      }
    }
  }

 private:
  Kind kind_ = Kind::kZero;
  int dim_ = 0;
  Eigen::MatrixXd jac_;
  Eigen::VectorXd offset_;
  std::vector<Expr> comps_;
  std::size_t scratch_size_ = 0;
};

class SdeSystem {
 public:
  static SdeSystem linear(const Eigen::MatrixXd& A, MeasurementSpec meas) {
    if (A.rows() != A.cols() || A.rows() != meas.observable.dimension())
      throw std::invalid_argument(
          "drift matrix dimension must match the observable's phase space");
    SdeSystem s(std::move(meas));
    s.drift_ = CompiledField::linear(A);
    return s;
  }

  static SdeSystem hamiltonian(const Expr& H, MeasurementSpec meas) {
    if (H.dimension() != meas.observable.dimension())
      throw std::invalid_argument(
          "Hamiltonian and observable must share the phase space");
    // Canonical equations: qdot_i = dH/dp_i, pdot_i = -dH/dq_i.
    std::vector<Expr> comps;
    comps.reserve(H.dimension());
    for (int i = 1; i <= H.n_dof(); ++i) {
      comps.push_back(H.differentiate(coord_index_p(i)));
      ExprBuilder b(H.n_dof());
      comps.push_back(
          b.take(b.negate(b.copy(H.differentiate(coord_index_q(i))))));
    }
    SdeSystem s(std::move(meas));
    s.drift_ = CompiledField::from_exprs(std::move(comps));
    return s;
  }

  static SdeSystem drift_free(MeasurementSpec meas) {
    SdeSystem s(std::move(meas));
    s.drift_ = CompiledField::zero(s.dimension());
    return s;
  }

  static SdeSystem custom(DriftFn drift, MeasurementSpec meas) {
    SdeSystem s(std::move(meas));
    s.custom_drift_ = std::move(drift);
    s.drift_ = CompiledField::zero(s.dimension());
    return s;
  }

  int dimension() const { return measurement_.observable.dimension(); }
  double kappa() const { return measurement_.kappa; }
  double noise_scale() const { return std::sqrt(2.0 * kappa()); }
  const MeasurementSpec& measurement() const { return measurement_; }
  const CompiledField& noise_field() const { return noise_; }

  struct Workspace {
    std::vector<double> scratch;
    Eigen::VectorXd k0, k1, w0, w1, xpred, ito;
    bool noise_cached = false;
  };

  Workspace workspace() const {
    Workspace ws;
    const int d = dimension();
    ws.k0.resize(d);
    ws.k1.resize(d);
    ws.w0.resize(d);
    ws.w1.resize(d);
    ws.xpred.resize(d);
    ws.ito.resize(d);
    ws.scratch.resize(std::max({noise_.scratch_size(), drift_.scratch_size(),
                                ito_divergence_.scratch_size(),
                                std::size_t{1}}));
    return ws;
  }

  void eval_drift(const Eigen::VectorXd& x, Eigen::VectorXd& out,
                  Workspace& ws) const {
    if (custom_drift_) {
      custom_drift_(std::span<const double>(x.data(), x.size()),
                    std::span<double>(out.data(), out.size()));
      return;
    }
    drift_.eval(x, out, ws.scratch);
  }

  void eval_noise(const Eigen::VectorXd& x, Eigen::VectorXd& out,
                  Workspace& ws) const {
    noise_.eval(x, out, ws.scratch);
  }

  // kappa * divergence of the diffusion tensor (Ito form drift correction).
  void eval_ito_correction(const Eigen::VectorXd& x, Eigen::VectorXd& out,
                           Workspace& ws) const {
    ito_divergence_.eval(x, out, ws.scratch);
    out *= kappa();
  }

  bool noise_is_constant() const {
    return noise_.kind() == CompiledField::Kind::kConstant ||
           noise_.kind() == CompiledField::Kind::kZero;
  }

 private:
  explicit SdeSystem(MeasurementSpec meas)
      : measurement_(std::move(meas)),
        noise_(CompiledField::from_exprs(
            noise_vector_exprs(measurement_.observable))),
        ito_divergence_(CompiledField::from_exprs(
            diffusion_divergence_exprs(measurement_.observable))),
        drift_(CompiledField::zero(measurement_.observable.dimension())) {}

  MeasurementSpec measurement_;
  CompiledField noise_;
  CompiledField ito_divergence_;
  CompiledField drift_;
  DriftFn custom_drift_;
};

namespace detail {

// One Heun (midpoint-averaged) predictor-corrector step of the Stratonovich
// equation. Exact Euler-Maruyama when the noise field is constant.
inline void heun_step_inplace(const SdeSystem& sys, Eigen::VectorXd& x,
                              double dt, double dW, SdeSystem::Workspace& ws) {
  sys.eval_drift(x, ws.k0, ws);
  const double s = sys.noise_scale();
  if (s == 0.0) {
    ws.xpred = x + dt * ws.k0;
    sys.eval_drift(ws.xpred, ws.k1, ws);
    x += 0.5 * dt * (ws.k0 + ws.k1);
    return;
  }
  if (sys.noise_is_constant()) {
    if (!ws.noise_cached) {
      sys.eval_noise(x, ws.w0, ws);
      ws.noise_cached = true;
    }
    ws.xpred = x + dt * ws.k0 + (s * dW) * ws.w0;
    sys.eval_drift(ws.xpred, ws.k1, ws);
    x += 0.5 * dt * (ws.k0 + ws.k1) + (s * dW) * ws.w0;
    return;
  }
  sys.eval_noise(x, ws.w0, ws);
  ws.xpred = x + dt * ws.k0 + (s * dW) * ws.w0;
  sys.eval_drift(ws.xpred, ws.k1, ws);
  sys.eval_noise(ws.xpred, ws.w1, ws);
  x += 0.5 * dt * (ws.k0 + ws.k1) + (0.5 * s * dW) * (ws.w0 + ws.w1);
}

// Euler-Maruyama step of the Ito form with the explicit drift correction.
inline void euler_maruyama_ito_step_inplace(const SdeSystem& sys,
                                            Eigen::VectorXd& x, double dt,
                                            double dW,
                                            SdeSystem::Workspace& ws) {
  sys.eval_drift(x, ws.k0, ws);
  const double s = sys.noise_scale();
  if (s == 0.0) {
    x += dt * ws.k0;
    return;
  }
  sys.eval_ito_correction(x, ws.ito, ws);
  sys.eval_noise(x, ws.w0, ws);
  x += dt * (ws.k0 + ws.ito) + (s * dW) * ws.w0;
}

}  // namespace detail

inline PhasePoint heun_stratonovich_step(const SdeSystem& sys,
                                         const PhasePoint& x, double dt,
                                         double dW) {
  auto ws = sys.workspace();
  Eigen::VectorXd v = x.coords();
  detail::heun_step_inplace(sys, v, dt, dW, ws);
  return PhasePoint(std::move(v));
}

inline PhasePoint euler_maruyama_ito_step(const SdeSystem& sys,
                                          const PhasePoint& x, double dt,
                                          double dW) {
  auto ws = sys.workspace();
  Eigen::VectorXd v = x.coords();
  detail::euler_maruyama_ito_step_inplace(sys, v, dt, dW, ws);
  return PhasePoint(std::move(v));
}

class InitialCondition {
 public:
  static InitialCondition point(Eigen::VectorXd x0) {
    InitialCondition ic;
    ic.mean_ = std::move(x0);
    return ic;
  }

  static InitialCondition gaussian(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
    if (cov.rows() != cov.cols() || cov.rows() != mean.size())
      throw std::invalid_argument("covariance shape must match the mean");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() >
        1e-12 * (1.0 + cov.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.eigenvalues().minCoeff() <
        -1e-10 * (1.0 + cov.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("covariance must be positive semidefinite");
    InitialCondition ic;
    ic.mean_ = std::move(mean);
    ic.transform_ = es.eigenvectors() *
                    es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    return ic;
  }

  int dimension() const { return static_cast<int>(mean_.size()); }
  bool is_gaussian() const { return transform_.has_value(); }
  const Eigen::VectorXd& mean() const { return mean_; }

  // Raw second-moment matrix E[x x^T] of the sampler.
  Eigen::MatrixXd raw_second_moment() const {
    Eigen::MatrixXd m = mean_ * mean_.transpose();
    if (transform_) m += *transform_ * transform_->transpose();
    return m;
  }

  void sample(NormalStream& rng, Eigen::VectorXd& out) const {
    out = mean_;
    if (transform_) {
      Eigen::VectorXd z(mean_.size());
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
      out.noalias() += *transform_ * z;
    }
  }

 private:
  Eigen::VectorXd mean_;
  std::optional<Eigen::MatrixXd> transform_;
};

struct EnsembleConfig {
  std::int64_t n_traj = 0;
  double dt = 0.0;
  double t_final = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> record_times;

  void validate() const {
    if (n_traj <= 0) throw std::invalid_argument("n_traj must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    if (!(t_final > 0.0)) throw std::invalid_argument("t_final must be positive");
    if (dt > t_final) throw std::invalid_argument("dt must not exceed t_final");
    if (record_times.empty())
      throw std::invalid_argument("record_times must not be empty");
    double prev = -1.0;
    for (double t : record_times) {
      if (!(t >= 0.0 && t <= t_final))
        throw std::invalid_argument("record times must lie in [0, t_final]");
      if (t <= prev)
        throw std::invalid_argument("record times must be strictly increasing");
      prev = t;
    }
  }
};

struct MomentRecord {
  double t = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd second_moment;  // raw, about the origin
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd stderr_second;  // standard error of each raw second moment
  Eigen::VectorXd stderr_mean;
};

struct MomentReport {
  int dimension = 0;
  std::int64_t n_traj = 0;
  std::vector<MomentRecord> records;
};

enum class StepperKind { kHeunStratonovich, kEulerMaruyamaIto };

namespace detail {

struct BlockAccumulator {
  std::vector<Eigen::VectorXd> sum_x;
  std::vector<Eigen::MatrixXd> sum_xx;
  std::vector<Eigen::MatrixXd> sum_xx_sq;

  void init(int n_rec, int dim) {
    sum_x.assign(n_rec, Eigen::VectorXd::Zero(dim));
    sum_xx.assign(n_rec, Eigen::MatrixXd::Zero(dim, dim));
    sum_xx_sq.assign(n_rec, Eigen::MatrixXd::Zero(dim, dim));
  }

  void add(int rec, const Eigen::VectorXd& x) {
    sum_x[rec] += x;
    Eigen::MatrixXd outer = x * x.transpose();
    sum_xx[rec] += outer;
    sum_xx_sq[rec] += outer.cwiseProduct(outer);
  }
};

}  // namespace detail

// Runs n_traj independent trajectories. Trajectory i draws from the
// counter-based stream (seed, i), and trajectories are reduced in fixed
// 128-trajectory blocks merged in block order, so the report is
// bit-identical for any thread count.
inline MomentReport simulate_ensemble(
    const SdeSystem& sys, const InitialCondition& init,
    const EnsembleConfig& cfg, int n_threads = 1,
    StepperKind stepper = StepperKind::kHeunStratonovich) {
  cfg.validate();
  if (init.dimension() != sys.dimension())
    throw std::invalid_argument("initial condition dimension mismatch");
  const int dim = sys.dimension();
  const int n_rec = static_cast<int>(cfg.record_times.size());
  constexpr std::int64_t kBlock = 128;
  const std::int64_t n_blocks = (cfg.n_traj + kBlock - 1) / kBlock;

  std::vector<detail::BlockAccumulator> blocks(
      static_cast<std::size_t>(n_blocks));

  std::atomic<std::int64_t> next_block{0};
  std::atomic<bool> failed{false};
  std::mutex failure_mutex;
  std::string failure_message;

  auto worker = [&]() {
    auto ws = sys.workspace();
    Eigen::VectorXd x(dim);
    while (true) {
      const std::int64_t b = next_block.fetch_add(1);
      if (b >= n_blocks || failed.load()) break;
      auto& acc = blocks[static_cast<std::size_t>(b)];
      acc.init(n_rec, dim);
      const std::int64_t lo = b * kBlock;
      const std::int64_t hi = std::min(cfg.n_traj, lo + kBlock);
      for (std::int64_t traj = lo; traj < hi; ++traj) {
        NormalStream stream(cfg.seed, static_cast<std::uint64_t>(traj));
        init.sample(stream, x);
        ws.noise_cached = false;
        double t = 0.0;
        for (int rec = 0; rec < n_rec; ++rec) {
          const double target = cfg.record_times[rec];
          while (t < target - 1e-12) {
            const double remaining = target - t;
            const double h = std::min(cfg.dt, remaining);
            const double dW = stream.normal() * std::sqrt(h);
            if (stepper == StepperKind::kHeunStratonovich)
              detail::heun_step_inplace(sys, x, h, dW, ws);
            else
              detail::euler_maruyama_ito_step_inplace(sys, x, h, dW, ws);
            t += h;
            if (!x.allFinite()) {
              {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (failure_message.empty())
                  failure_message = "non-finite state at t = " +
                                    std::to_string(t) + " in trajectory " +
                                    std::to_string(traj);
              }
              failed.store(true);
              return;
            }
          }
          acc.add(rec, x);
        }
      }
    }
  };

  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failed.load()) throw NumericError(failure_message);

  MomentReport report;
  report.dimension = dim;
  report.n_traj = cfg.n_traj;
  report.records.resize(static_cast<std::size_t>(n_rec));
  const double n = static_cast<double>(cfg.n_traj);
  const double n_minus_1 = std::max(n - 1.0, 1.0);
  for (int rec = 0; rec < n_rec; ++rec) {
    Eigen::VectorXd sx = Eigen::VectorXd::Zero(dim);
    Eigen::MatrixXd sxx = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::MatrixXd sxxsq = Eigen::MatrixXd::Zero(dim, dim);
    for (std::int64_t b = 0; b < n_blocks; ++b) {
      sx += blocks[static_cast<std::size_t>(b)].sum_x[rec];
      sxx += blocks[static_cast<std::size_t>(b)].sum_xx[rec];
      sxxsq += blocks[static_cast<std::size_t>(b)].sum_xx_sq[rec];
    }
    MomentRecord& r = report.records[static_cast<std::size_t>(rec)];
    r.t = cfg.record_times[static_cast<std::size_t>(rec)];
    r.mean = sx / n;
    r.second_moment = sxx / n;
    r.covariance = r.second_moment - r.mean * r.mean.transpose();
    r.stderr_second =
        ((sxxsq / n - r.second_moment.cwiseProduct(r.second_moment))
             .cwiseMax(0.0) /
         n_minus_1)
            .cwiseSqrt();
    r.stderr_mean =
        ((r.second_moment.diagonal().array() - r.mean.array().square())
             .max(0.0) /
         n_minus_1)
            .sqrt();
  }
  return report;
}

struct RelaxationFit {
  double rate = 0.0;       // decay rate of |value - limit|
  double r_squared = 0.0;  // quality of the log-linear fit
  bool reliable = false;   // r_squared >= 0.9
};

// Least-squares slope of log|value - limit| against time.
inline RelaxationFit estimate_relaxation_rate(std::span<const double> times,
                                              std::span<const double> values,
                                              double limit) {
  if (times.size() != values.size() || times.size() < 2)
    throw std::invalid_argument("need at least two samples to fit a rate");
  const std::size_t n = times.size();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double gap = values[i] - limit;
    if (!(gap > 0.0))
      throw std::invalid_argument(
          "series must stay strictly above its limit for a log fit");
    y[i] = std::log(gap);
  }
  double st = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    st += times[i];
    sy += y[i];
  }
  const double tbar = st / static_cast<double>(n);
  const double ybar = sy / static_cast<double>(n);
  double stt = 0, sty = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dt = times[i] - tbar;
    const double dy = y[i] - ybar;
    stt += dt * dt;
    sty += dt * dy;
    syy += dy * dy;
  }
  if (stt == 0.0) throw std::invalid_argument("times must not be identical");
  RelaxationFit fit;
  // A spread at rounding level means the series is constant; report a zero
  // rate with flagged quality instead of fitting noise.
  const double floor = 1e-20 * static_cast<double>(n) * std::max(1.0, ybar * ybar);
  if (syy <= floor) return fit;
  const double slope = sty / stt;
  fit.rate = -slope;
  fit.r_squared = (sty * sty) / (stt * syy);
  fit.reliable = fit.r_squared >= 0.9;
  return fit;
}

}  // namespace mnl
