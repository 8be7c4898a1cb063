#include <mnl/report_io.hpp>
#include <mnl/sde.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

using mnl::EnsembleConfig;
using mnl::estimate_relaxation_rate;
using mnl::Expr;
using mnl::heun_stratonovich_step;
using mnl::InitialCondition;
using mnl::MeasurementSpec;
using mnl::MomentReport;
using mnl::NormalStream;
using mnl::NumericError;
using mnl::parse_observable;
using mnl::PhasePoint;
using mnl::SdeSystem;
using mnl::simulate_ensemble;
using mnl::StepperKind;

namespace {

Eigen::MatrixXd minus_identity(int d) { return -Eigen::MatrixXd::Identity(d, d); }

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = lo + (hi - lo) * i / (n - 1);
  return out;
}

}  // namespace

TEST_CASE("with kappa = 0 one step reduces to a deterministic Heun step") {
  Eigen::MatrixXd A(2, 2);
  A << -0.3, 1.2, -0.8, -0.5;
  const auto sys =
      SdeSystem::linear(A, MeasurementSpec(parse_observable("p1", 1), 0.0));
  const PhasePoint x{0.7, -0.2};
  const double dt = 0.01;
  const PhasePoint stepped = heun_stratonovich_step(sys, x, dt, 0.123);

  const Eigen::Vector2d v = x.coords();
  const Eigen::Vector2d k0 = A * v;
  const Eigen::Vector2d k1 = A * (v + dt * k0);
  const Eigen::Vector2d expected = v + 0.5 * dt * (k0 + k1);
  CHECK(stepped[0] == Catch::Approx(expected[0]).margin(1e-15));
  CHECK(stepped[1] == Catch::Approx(expected[1]).margin(1e-15));
}

TEST_CASE("constant noise reduces to exact Euler-Maruyama in the noise") {
  // O = p1 gives w = (1, 0); with K = 0 and kappa = 0.5 the update is
  // x1 += sqrt(2*0.5) dW = dW exactly.
  const auto sys = SdeSystem::drift_free(
      MeasurementSpec(parse_observable("p1", 1), 0.5));
  const PhasePoint x{0.25, -1.5};
  const double dW = 0.037;
  const PhasePoint stepped = heun_stratonovich_step(sys, x, 0.01, dW);
  CHECK(stepped[0] == Catch::Approx(0.25 + dW).margin(1e-16));
  CHECK(stepped[1] == -1.5);
}

TEST_CASE("noise steps conserve the measured angular momentum to O(dt^2)") {
  const Expr mz = parse_observable("q1*p2 - q2*p1", 2);
  const auto sys = SdeSystem::drift_free(MeasurementSpec(mz, 0.5));

  auto single_step_error = [&](double dt) {
    // Average |M_z drift| of one step over a fixed set of noise magnitudes.
    NormalStream stream(77, 0);
    double acc = 0;
    const int n = 200;
    for (int i = 0; i < n; ++i) {
      const PhasePoint x{0.9, -0.4, 0.2, 1.3};
      const double before = mz.evaluate(x.span());
      const double dW = stream.normal() * std::sqrt(dt);
      const PhasePoint y = heun_stratonovich_step(sys, x, dt, dW);
      acc += std::fabs(mz.evaluate(y.span()) - before);
    }
    return acc / n;
  };

  const double e1 = single_step_error(1e-2);
  const double e2 = single_step_error(1e-2 / 4.0);
  // O(dt^2) per step implies a factor ~16 when dt shrinks by 4 (the noise
  // magnitudes rescale with sqrt(dt), and the cubic remainder dominates).
  CHECK(e2 < e1 / 8.0);
}

TEST_CASE("ornstein-uhlenbeck benchmark relaxes to the closed-form variance") {
  const auto sys = SdeSystem::linear(
      minus_identity(2), MeasurementSpec(parse_observable("p1", 1), 1.0));
  EnsembleConfig cfg;
  cfg.n_traj = 2000;
  cfg.dt = 2e-3;
  cfg.t_final = 20.0;
  cfg.seed = 2024;
  cfg.record_times = {10.0, 20.0};
  const MomentReport rep = simulate_ensemble(
      sys, InitialCondition::point(Eigen::Vector2d::Zero()), cfg);

  const auto& last = rep.records.back();
  const double var_x1 = last.covariance(0, 0);
  const double se = last.stderr_second(0, 0);
  CHECK(std::fabs(var_x1 - 1.0) < 3 * se);
  // x2 never receives noise and decays from zero: exactly frozen.
  CHECK(last.covariance(1, 1) <= 3 * last.stderr_second(1, 1) + 1e-12);

  // Covariances are PSD up to standard-error tolerance.
  for (const auto& rec : rep.records) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(rec.covariance);
    CHECK(es.eigenvalues().minCoeff() >
          -3 * rec.stderr_second.cwiseAbs().maxCoeff() - 1e-12);
  }
}

TEST_CASE("weak error in the stationary variance shrinks with dt") {
  auto run = [&](double dt, std::uint64_t seed) {
    const auto sys = SdeSystem::linear(
        minus_identity(2), MeasurementSpec(parse_observable("p1", 1), 1.0));
    EnsembleConfig cfg;
    cfg.n_traj = 40000;
    cfg.dt = dt;
    cfg.t_final = 20.0;
    cfg.seed = seed;
    cfg.record_times = {20.0};
    const MomentReport rep = simulate_ensemble(
        sys, InitialCondition::point(Eigen::Vector2d::Zero()), cfg);
    return std::pair{rep.records[0].covariance(0, 0),
                     rep.records[0].stderr_second(0, 0)};
  };
  const auto [v_big, se_big] = run(0.5, 5);
  const auto [v_small, se_small] = run(0.25, 5);
  const double err_big = std::fabs(v_big - 1.0);
  const double err_small = std::fabs(v_small - 1.0);
  CHECK(err_small < 0.5 * err_big + 3 * (se_big + se_small));
}

TEST_CASE("free measurement spreads the conjugate variable linearly in time") {
  const auto sys = SdeSystem::drift_free(
      MeasurementSpec(parse_observable("p1", 1), 1.0));
  EnsembleConfig cfg;
  cfg.n_traj = 4000;
  cfg.dt = 5e-3;
  cfg.t_final = 2.0;
  cfg.seed = 99;
  cfg.record_times = {0.5, 1.0, 2.0};
  const MomentReport rep = simulate_ensemble(
      sys, InitialCondition::point(Eigen::Vector2d::Zero()), cfg);
  for (const auto& rec : rep.records) {
    CHECK(std::fabs(rec.covariance(0, 0) - 2.0 * rec.t) <
          3 * rec.stderr_second(0, 0));
    CHECK(rec.covariance(1, 1) == 0.0);  // p1 itself is untouched
  }
}

TEST_CASE("kappa = 0 keeps every trajectory on the deterministic flow") {
  const Expr h = parse_observable("(p1^2 + q1^2)/2", 1);
  const auto sys = SdeSystem::hamiltonian(h, MeasurementSpec(parse_observable("p1", 1), 0.0));
  EnsembleConfig cfg;
  cfg.n_traj = 8;
  cfg.dt = 1e-3;
  cfg.t_final = 10.0;
  cfg.seed = 1;
  cfg.record_times = linspace(1.0, 10.0, 10);
  Eigen::Vector2d x0(1.0, 0.0);
  const MomentReport rep = simulate_ensemble(sys, InitialCondition::point(x0), cfg);
  const double e0 = 0.5;
  for (const auto& rec : rep.records) {
    // All trajectories coincide, so the covariance vanishes to rounding and
    // the mean carries the conserved energy.
    CHECK(rec.covariance.cwiseAbs().maxCoeff() < 1e-13);
    const double energy =
        0.5 * (rec.mean[0] * rec.mean[0] + rec.mean[1] * rec.mean[1]);
    CHECK(energy == Catch::Approx(e0).epsilon(1e-8));
  }
}

TEST_CASE("reports are byte-identical across runs and thread counts") {
  const Expr mz = parse_observable("q1*p2 - q2*p1", 2);
  const Expr h = parse_observable("(p1^2 + p2^2)/2 + (q1^2 + q2^2)/2", 2);
  const auto sys = SdeSystem::hamiltonian(h, MeasurementSpec(mz, 0.3));
  EnsembleConfig cfg;
  cfg.n_traj = 512;
  cfg.dt = 5e-3;
  cfg.t_final = 2.0;
  cfg.seed = 31415;
  cfg.record_times = {0.5, 1.0, 2.0};
  Eigen::VectorXd x0(4);
  x0 << 1, 0, 0, 1;
  const auto ic = InitialCondition::point(x0);

  const std::string serial = mnl::to_csv(simulate_ensemble(sys, ic, cfg, 1));
  const std::string again = mnl::to_csv(simulate_ensemble(sys, ic, cfg, 1));
  const std::string threaded4 = mnl::to_csv(simulate_ensemble(sys, ic, cfg, 4));
  const std::string threaded3 = mnl::to_csv(simulate_ensemble(sys, ic, cfg, 3));
  CHECK(serial == again);
  CHECK(serial == threaded4);
  CHECK(serial == threaded3);
}

TEST_CASE("gaussian initial conditions reproduce their own moments") {
  Eigen::VectorXd mean(2);
  mean << 0.5, -1.0;
  Eigen::MatrixXd cov(2, 2);
  cov << 0.8, 0.3, 0.3, 0.5;
  const auto ic = InitialCondition::gaussian(mean, cov);
  CHECK(ic.raw_second_moment()(0, 0) ==
        Catch::Approx(cov(0, 0) + mean[0] * mean[0]));

  const auto sys = SdeSystem::drift_free(
      MeasurementSpec(parse_observable("p1", 1), 0.0));
  EnsembleConfig cfg;
  cfg.n_traj = 20000;
  cfg.dt = 0.5;
  cfg.t_final = 1.0;
  cfg.seed = 7;
  cfg.record_times = {1.0};
  const MomentReport rep = simulate_ensemble(sys, ic, cfg);
  const auto& rec = rep.records[0];
  for (int i = 0; i < 2; ++i) {
    CHECK(std::fabs(rec.mean[i] - mean[i]) < 3 * rec.stderr_mean[i]);
    for (int j = 0; j < 2; ++j)
      CHECK(std::fabs(rec.covariance(i, j) - cov(i, j)) <
            3 * rec.stderr_second(i, j) + 1e-3);
  }
}

TEST_CASE("both discretizations of the same generator agree on moments") {
  // Heun in Stratonovich form vs Euler-Maruyama in Ito form with the
  // symbolic drift correction; the composite observable has state-dependent
  // noise, so this exercises the correction for real.
  const Expr mz = parse_observable("q1*p2 - q2*p1", 2);
  const Expr h = parse_observable("(p1^2 + p2^2)/2 + (q1^2 + q2^2)/2", 2);
  const auto sys = SdeSystem::hamiltonian(h, MeasurementSpec(mz, 0.2));
  EnsembleConfig cfg;
  cfg.n_traj = 4000;
  cfg.dt = 1e-3;
  cfg.t_final = 2.0;
  cfg.seed = 88;
  cfg.record_times = {2.0};
  Eigen::VectorXd x0(4);
  x0 << 1.2, 0, 0, 0.4;
  const auto ic = InitialCondition::point(x0);

  const MomentReport heun =
      simulate_ensemble(sys, ic, cfg, 1, StepperKind::kHeunStratonovich);
  cfg.seed = 89;  // independent draws for the second scheme
  const MomentReport em =
      simulate_ensemble(sys, ic, cfg, 1, StepperKind::kEulerMaruyamaIto);
  const auto& a = heun.records[0];
  const auto& b = em.records[0];
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) {
      const double se =
          std::hypot(a.stderr_second(i, j), b.stderr_second(i, j));
      CHECK(std::fabs(a.second_moment(i, j) - b.second_moment(i, j)) <
            3.5 * se + 1e-3);
    }
}

TEST_CASE("per-trajectory conservation error of M_z scales like dt") {
  const Expr mz = parse_observable("q1*p2 - q2*p1", 2);
  const Expr h = parse_observable("(p1^2 + p2^2)/2 + (q1^2 + q2^2)/2", 2);
  const auto sys = SdeSystem::hamiltonian(h, MeasurementSpec(mz, 0.1));

  auto mean_drift = [&](double dt) {
    auto ws = sys.workspace();
    double acc = 0;
    const int n_traj = 16;
    for (int traj = 0; traj < n_traj; ++traj) {
      NormalStream stream(4242, traj);
      Eigen::VectorXd x(4);
      x << 1.1, -0.3, 0.4, 0.9;
      const double before = mz.evaluate({x.data(), 4});
      ws.noise_cached = false;
      const int steps = static_cast<int>(std::lround(10.0 / dt));
      for (int s = 0; s < steps; ++s)
        mnl::detail::heun_step_inplace(sys, x, dt,
                                       stream.normal() * std::sqrt(dt), ws);
      acc += std::fabs(mz.evaluate({x.data(), 4}) - before);
    }
    return acc / n_traj;
  };

  const double d1 = mean_drift(4e-3);
  const double d2 = mean_drift(1e-3);
  CHECK(d2 < d1 / 2.0);
}

TEST_CASE("ensemble conservation of energy sum and angular momentum") {
  const Expr mz = parse_observable("q1*p2 - q2*p1", 2);
  const Expr h = parse_observable("(p1^2 + p2^2)/2 + (q1^2 + q2^2)/2", 2);
  const auto sys = SdeSystem::hamiltonian(h, MeasurementSpec(mz, 0.1));
  EnsembleConfig cfg;
  cfg.n_traj = 2000;
  cfg.dt = 2e-3;
  cfg.t_final = 10.0;
  cfg.seed = 555;
  cfg.record_times = linspace(0.0, 10.0, 6);
  Eigen::VectorXd x0(4);
  x0 << 0, 2, 0, 0;  // E1 = 2, E2 = 0, M_z = 0
  const MomentReport rep = simulate_ensemble(sys, InitialCondition::point(x0), cfg);

  for (const auto& rec : rep.records) {
    const auto& m = rec.second_moment;
    const double e_total =
        0.5 * (m(1, 1) + m(3, 3)) + 0.5 * (m(0, 0) + m(2, 2));
    const double mbar = m(0, 3) - m(2, 1);
    const double se_e = 0.5 * (rec.stderr_second(1, 1) + rec.stderr_second(3, 3) +
                               rec.stderr_second(0, 0) + rec.stderr_second(2, 2));
    const double se_m =
        std::hypot(rec.stderr_second(0, 3), rec.stderr_second(2, 1));
    CHECK(std::fabs(e_total - 2.0) < 3 * se_e + 1e-3);
    CHECK(std::fabs(mbar) < 3 * se_m + 1e-3);
  }
}

TEST_CASE("numeric blow-up aborts with trajectory and time diagnostics") {
  auto cubic = [](std::span<const double> x, std::span<double> out) {
    out[0] = x[0] * x[0] * x[0];
    out[1] = 0.0;
  };
  const auto sys = SdeSystem::custom(
      cubic, MeasurementSpec(parse_observable("p1", 1), 0.0));
  EnsembleConfig cfg;
  cfg.n_traj = 3;
  cfg.dt = 0.5;
  cfg.t_final = 100.0;
  cfg.seed = 0;
  cfg.record_times = {100.0};
  try {
    simulate_ensemble(sys, InitialCondition::point(Eigen::Vector2d(3.0, 0.0)),
                      cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("trajectory") != std::string::npos);
    CHECK(msg.find("t = ") != std::string::npos);
  }
}

TEST_CASE("relaxation-rate fit examples") {
  // Exact exponential decay with rate 4*kappa, kappa = 0.25.
  const auto ts = linspace(0.0, 5.0, 26);
  std::vector<double> values(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) values[i] = std::exp(-ts[i]);
  const auto fit = estimate_relaxation_rate(ts, values, 0.0);
  CHECK(fit.rate == Catch::Approx(1.0).margin(1e-10));
  CHECK(fit.r_squared == Catch::Approx(1.0).margin(1e-12));
  CHECK(fit.reliable);

  // Constant series: zero rate, flagged quality.
  std::vector<double> flat(ts.size(), 2.5);
  const auto flat_fit = estimate_relaxation_rate(ts, flat, 0.0);
  CHECK(flat_fit.rate == 0.0);
  CHECK(flat_fit.r_squared == 0.0);
  CHECK_FALSE(flat_fit.reliable);

  // Values touching the limit are rejected.
  std::vector<double> bad = {1.0, 0.0, -1.0};
  CHECK_THROWS_AS(estimate_relaxation_rate(std::vector<double>{0, 1, 2}, bad, 0.0),
                  std::invalid_argument);
}

TEST_CASE("csv serialization has the documented layout") {
  const auto sys = SdeSystem::drift_free(
      MeasurementSpec(parse_observable("p1", 1), 1.0));
  EnsembleConfig cfg;
  cfg.n_traj = 16;
  cfg.dt = 0.1;
  cfg.t_final = 1.0;
  cfg.seed = 3;
  cfg.record_times = {0.5, 1.0};
  const MomentReport rep = simulate_ensemble(
      sys, InitialCondition::point(Eigen::Vector2d::Zero()), cfg);
  const std::string csv = mnl::to_csv(rep);
  CHECK(csv.rfind("t,mean_1,mean_2,cov_11,cov_12,cov_22,stderr_11,stderr_12,stderr_22\n",
                  0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("\r") == std::string::npos);

  const auto doc = mnl::to_json(rep);
  CHECK(doc["n_traj"] == 16);
  CHECK(doc["records"].size() == 2);
  CHECK(doc["records"][0]["t"] == 0.5);
}

TEST_CASE("ensemble configuration invariants are enforced") {
  const auto sys = SdeSystem::drift_free(
      MeasurementSpec(parse_observable("p1", 1), 1.0));
  const auto ic = InitialCondition::point(Eigen::Vector2d::Zero());
  EnsembleConfig cfg;
  cfg.n_traj = 4;
  cfg.dt = 0.1;
  cfg.t_final = 1.0;
  cfg.seed = 0;
  cfg.record_times = {0.5};

  auto broken = cfg;
  broken.n_traj = 0;
  CHECK_THROWS_AS(simulate_ensemble(sys, ic, broken), std::invalid_argument);
  broken = cfg;
  broken.dt = 2.0;
  CHECK_THROWS_AS(simulate_ensemble(sys, ic, broken), std::invalid_argument);
  broken = cfg;
  broken.record_times = {0.5, 0.25};
  CHECK_THROWS_AS(simulate_ensemble(sys, ic, broken), std::invalid_argument);
  broken = cfg;
  broken.record_times = {0.5, 1.5};
  CHECK_THROWS_AS(simulate_ensemble(sys, ic, broken), std::invalid_argument);
}
