#pragma once

// Two identical noninteracting harmonic oscillators under continuous
// measurement of the angular momentum M_z = x1 p2 - x2 p1. The measurement
// alone equalizes the subsystem energies and drives the pair into a
// Gibbs-form stationary state with effective Hamiltonian H - Omega M_z.
//
// Variable ordering is y = (x1, p1, x2, p2) throughout; the second-moment
// state is the symmetric 4x4 matrix of raw moments, carried as the 10
// independent entries in row-major upper-triangular order.

#include <mnl/expr.hpp>
#include <mnl/phase.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace mnl {

struct OscillatorPair {
  double m = 1.0;      // mass
  double k = 1.0;      // stiffness
  double kappa = 0.0;  // measurement coupling

  OscillatorPair(double m_in, double k_in, double kappa_in)
      : m(m_in), k(k_in), kappa(kappa_in) {
    if (!(m > 0.0)) throw std::invalid_argument("mass must be positive");
    if (!(k > 0.0)) throw std::invalid_argument("stiffness must be positive");
    if (!(kappa >= 0.0)) throw std::invalid_argument("kappa must be >= 0");
  }

  double omega0() const { return std::sqrt(k / m); }
};

// H = (p1^2 + p2^2)/2m + k (x1^2 + x2^2)/2 on the 2-dof phase space.
inline Expr pair_hamiltonian(const OscillatorPair& pair) {
  ExprBuilder b(2);
  const int kinetic =
      b.div(b.add(b.pow(b.variable_p(1), 2), b.pow(b.variable_p(2), 2)),
            b.constant(2.0 * pair.m));
  const int potential =
      b.mul(b.constant(0.5 * pair.k),
            b.add(b.pow(b.variable_q(1), 2), b.pow(b.variable_q(2), 2)));
  return b.take(b.add(kinetic, potential));
}

inline Expr angular_momentum_observable() {
  ExprBuilder b(2);
  return b.take(b.sub(b.mul(b.variable_q(1), b.variable_p(2)),
                      b.mul(b.variable_q(2), b.variable_p(1))));
}

namespace detail {

constexpr int kNumMoments = 10;

// (alpha, beta) pairs, alpha <= beta, row-major upper triangle of 4x4.
constexpr std::array<std::pair<int, int>, kNumMoments> kMomentIndex = {{
    {0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 1},
    {1, 2}, {1, 3}, {2, 2}, {2, 3}, {3, 3},
}};

}  // namespace detail

class SecondMoments4 {
 public:
  SecondMoments4() : mat_(Eigen::Matrix4d::Zero()) {}

  explicit SecondMoments4(const Eigen::Matrix4d& raw) : mat_(raw) {
    if ((mat_ - mat_.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * (1.0 + mat_.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("second-moment matrix must be symmetric");
    mat_ = 0.5 * (mat_ + mat_.transpose().eval());
  }

  static SecondMoments4 from_vector(const Eigen::Matrix<double, 10, 1>& v) {
    Eigen::Matrix4d m;
    for (int i = 0; i < detail::kNumMoments; ++i) {
      const auto [a, b] = detail::kMomentIndex[i];
      m(a, b) = v[i];
      m(b, a) = v[i];
    }
    return SecondMoments4(m);
  }

  Eigen::Matrix<double, 10, 1> to_vector() const {
    Eigen::Matrix<double, 10, 1> v;
    for (int i = 0; i < detail::kNumMoments; ++i) {
      const auto [a, b] = detail::kMomentIndex[i];
      v[i] = mat_(a, b);
    }
    return v;
  }

  const Eigen::Matrix4d& matrix() const { return mat_; }
  double operator()(int i, int j) const { return mat_(i, j); }

  bool is_psd(double tol = 1e-9) const {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(mat_);
    return es.eigenvalues().minCoeff() >=
           -tol * (1.0 + mat_.cwiseAbs().maxCoeff());
  }

  double energy1(const OscillatorPair& pair) const {
    return mat_(1, 1) / (2.0 * pair.m) + 0.5 * pair.k * mat_(0, 0);
  }
  double energy2(const OscillatorPair& pair) const {
    return mat_(3, 3) / (2.0 * pair.m) + 0.5 * pair.k * mat_(2, 2);
  }
  // Ensemble mean of M_z.
  double angular_momentum() const { return mat_(0, 3) - mat_(2, 1); }

 private:
  Eigen::Matrix4d mat_;
};

// The closed linear system satisfied by the ten second moments, generated
// symbolically: for each quadratic monomial A the rate is the average of
// {A, H} + kappa {M_z, {M_z, A}}, and the coefficients are read off the
// resulting homogeneous quadratic polynomial exactly.
class MomentOde {
 public:
  explicit MomentOde(const OscillatorPair& pair) : pair_(pair) {
    const Expr h = pair_hamiltonian(pair);
    const Expr mz = angular_momentum_observable();
    std::vector<double> scratch;
    for (int i = 0; i < detail::kNumMoments; ++i) {
      const auto [alpha, beta] = detail::kMomentIndex[i];
      ExprBuilder b(2);
      const Expr mono = b.take(b.mul(b.variable(alpha), b.variable(beta)));

      const Expr drift_part = poisson_bracket_expr(mono, h);
      const Expr noise_part =
          poisson_bracket_expr(mz, poisson_bracket_expr(mz, mono));
      ExprBuilder rb(2);
      const Expr rate = rb.take(
          rb.add(rb.copy(drift_part),
                 rb.mul(rb.constant(pair.kappa), rb.copy(noise_part))));

      // Coefficient extraction for a homogeneous quadratic: evaluate at the
      // basis points e_a and e_a + e_b.
      auto eval_at = [&](int va, int vb) {
        Eigen::Vector4d y = Eigen::Vector4d::Zero();
        y[va] = 1.0;
        y[vb] = 1.0;  // vb == va leaves the same unit basis point
        return rate.evaluate(std::span<const double>(y.data(), 4), scratch);
      };
      for (int j = 0; j < detail::kNumMoments; ++j) {
        const auto [a2, b2] = detail::kMomentIndex[j];
        if (a2 == b2)
          generator_(i, j) = eval_at(a2, a2);
        else
          generator_(i, j) =
              eval_at(a2, b2) - eval_at(a2, a2) - eval_at(b2, b2);
      }
    }
  }

  const Eigen::Matrix<double, 10, 10>& generator() const { return generator_; }
  const OscillatorPair& pair() const { return pair_; }

  SecondMoments4 rhs(const SecondMoments4& s) const {
    return SecondMoments4::from_vector(generator_ * s.to_vector());
  }

  // Classic RK4 on the linear moment system.
  SecondMoments4 integrate(const SecondMoments4& s0, double t,
                           double dt) const {
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
    Eigen::Matrix<double, 10, 1> v = s0.to_vector();
    double remaining = t;
    while (remaining > 1e-12) {
      const double h = std::min(dt, remaining);
      const Eigen::Matrix<double, 10, 1> k1 = generator_ * v;
      const Eigen::Matrix<double, 10, 1> k2 = generator_ * (v + 0.5 * h * k1);
      const Eigen::Matrix<double, 10, 1> k3 = generator_ * (v + 0.5 * h * k2);
      const Eigen::Matrix<double, 10, 1> k4 = generator_ * (v + h * k3);
      v += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      remaining -= h;
    }
    return SecondMoments4::from_vector(v);
  }

 private:
  OscillatorPair pair_;
  Eigen::Matrix<double, 10, 10> generator_ =
      Eigen::Matrix<double, 10, 10>::Zero();
};

inline SecondMoments4 second_moment_rhs(const OscillatorPair& pair,
                                        const SecondMoments4& s) {
  return MomentOde(pair).rhs(s);
}

// Energy exchange under measurement: both energies relax to the common mean
// at rate 4 kappa while the total is conserved.
inline std::pair<double, double> energy_relaxation(double e1_0, double e2_0,
                                                   double kappa, double t) {
  if (!(t >= 0.0)) throw std::invalid_argument("time must be nonnegative");
  const double mean = 0.5 * (e1_0 + e2_0);
  const double gap = (e1_0 - mean) * std::exp(-4.0 * kappa * t);
  return {mean + gap, mean - gap};
}

inline void check_admissible(double E, double M, const OscillatorPair& pair) {
  if (!(E > 0.0)) throw std::invalid_argument("energy must be positive");
  const double bound = 2.0 * E / pair.omega0();
  if (!(std::fabs(M) < bound))
    throw std::invalid_argument(
        "angular momentum |M| = " + std::to_string(std::fabs(M)) +
        " must be below 2E/omega0 = " + std::to_string(bound) +
        " for a positive-definite stationary state");
}

// Stationary raw second moments for prescribed per-oscillator energy E and
// mean angular momentum M.
inline SecondMoments4 stationary_moments(double E, double M,
                                         const OscillatorPair& pair) {
  check_admissible(E, M, pair);
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  m(0, 0) = m(2, 2) = E / pair.k;
  m(1, 1) = m(3, 3) = pair.m * E;
  m(0, 3) = m(3, 0) = M / 2.0;
  m(1, 2) = m(2, 1) = -M / 2.0;
  return SecondMoments4(m);
}

// The stationary covariance and its inverse (the entropy matrix), both from
// closed forms; their product is checked against the identity.
inline std::pair<Eigen::Matrix4d, Eigen::Matrix4d> beta_matrices(
    double E, double M, const OscillatorPair& pair) {
  check_admissible(E, M, pair);
  const Eigen::Matrix4d beta_inverse = stationary_moments(E, M, pair).matrix();

  const double denom = pair.m * E * E / pair.k - M * M / 4.0;
  Eigen::Matrix4d beta = Eigen::Matrix4d::Zero();
  beta(0, 0) = beta(2, 2) = pair.m * E;
  beta(1, 1) = beta(3, 3) = E / pair.k;
  beta(0, 3) = beta(3, 0) = -M / 2.0;
  beta(1, 2) = beta(2, 1) = M / 2.0;
  beta /= denom;

  const double err =
      (beta * beta_inverse - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff();
  if (err > 1e-10 * (1.0 + beta.cwiseAbs().maxCoeff()))
    throw NumericError("beta matrices are not mutually inverse: " +
                       std::to_string(err));
  return {beta_inverse, beta};
}

struct GibbsParams {
  double beta = 0.0;    // inverse effective temperature
  double Omega = 0.0;   // rotation rate conjugate to M_z
  double KT_eff = 0.0;  // effective temperature times Boltzmann constant
  double E = 0.0;
  double M = 0.0;
};

namespace detail {

// Consistency guard: beta (H - Omega M_z) == 1/2 y' beta_hat y at a fixed
// set of pseudo-random phase points.
inline void verify_gibbs_quadratic_form(const GibbsParams& g,
                                        const Eigen::Matrix4d& beta_mat,
                                        const OscillatorPair& pair) {
  const Expr h = pair_hamiltonian(pair);
  const Expr mz = angular_momentum_observable();
  std::uint64_t state = 0x9E3779B97F4A7C15ull;
  auto next = [&state]() {
    state ^= state << 13;
    state ^= state >> 7;
    state ^= state << 17;
    return 4.0 * (static_cast<double>(state >> 11) * 0x1.0p-53) - 2.0;
  };
  std::vector<double> scratch;
  for (int i = 0; i < 20; ++i) {
    Eigen::Vector4d y;
    for (int c = 0; c < 4; ++c) y[c] = next();
    const std::span<const double> pt(y.data(), 4);
    const double lhs =
        g.beta * (h.evaluate(pt, scratch) - g.Omega * mz.evaluate(pt, scratch));
    const double rhs = 0.5 * y.dot(beta_mat * y);
    if (std::fabs(lhs - rhs) > 1e-9 * std::max(1.0, std::fabs(rhs)))
      throw NumericError(
          "Gibbs quadratic form disagrees with the entropy matrix");
  }
}

}  // namespace detail

// Parameters of the Gibbs form exp(-beta (H - Omega M_z)) matching the
// stationary moments; the quadratic forms are verified to coincide before
// returning.
inline GibbsParams gibbs_parameters(double E, double M,
                                    const OscillatorPair& pair) {
  check_admissible(E, M, pair);
  const double w0sq = pair.omega0() * pair.omega0();
  GibbsParams g;
  g.E = E;
  g.M = M;
  g.beta = (E / w0sq) / (pair.m * E * E / pair.k - M * M / 4.0);
  g.Omega = M * w0sq / (2.0 * E);
  g.KT_eff = E - M * M * w0sq / (4.0 * E);

  const auto [beta_inv, beta_mat] = beta_matrices(E, M, pair);
  static_cast<void>(beta_inv);
  detail::verify_gibbs_quadratic_form(g, beta_mat, pair);
  return g;
}

}  // namespace mnl
