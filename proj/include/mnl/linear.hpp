#pragma once

// Closed-form stationary theory for linear open systems under continuous
// measurement: the Lyapunov equation A X + X A' = -2 D for the stationary
// covariance, explicit 2x2 moment formulas, the kinetic matrix with its
// fluctuation relation L + L' = 2 D, the reciprocity residual whose zero
// marks a symmetric kinetic matrix, the correlation coefficient, and the
// measurement-frozen (Zeno) stationary state.

#include <mnl/phase.hpp>

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace mnl {

// Drift matrix [[a, b], [c, d]] with negative trace and positive
// determinant, i.e. exactly the 2x2 Hurwitz conditions.
struct LinearSystem2 {
  double a, b, c, d;

  LinearSystem2(double a_in, double b_in, double c_in, double d_in)
      : a(a_in), b(b_in), c(c_in), d(d_in) {
    if (!(trace() < 0.0))
      throw std::invalid_argument(
          "drift matrix must have negative trace (got " +
          std::to_string(trace()) + ")");
    if (!(det() > 0.0))
      throw std::invalid_argument(
          "drift matrix must have positive determinant (got " +
          std::to_string(det()) + ")");
  }

  double trace() const { return a + d; }
  double det() const { return a * d - b * c; }

  Eigen::Matrix2d matrix() const {
    Eigen::Matrix2d m;
    m << a, b, c, d;
    return m;
  }
};

// Effective 2x2 diffusion matrix [[D1, D], [D, D2]], kappa already applied.
// Measurement-induced matrices are rank 1 (D1 D2 = D^2); the flag records
// whether that constraint was asserted at construction.
struct DiffusionMatrix2 {
  double D1, D2, D;
  bool rank1;

  static DiffusionMatrix2 measurement(double w1, double w2, double kappa) {
    if (!(kappa >= 0.0))
      throw std::invalid_argument("kappa must be nonnegative");
    return DiffusionMatrix2(kappa * w1 * w1, kappa * w2 * w2, kappa * w1 * w2,
                            true);
  }

  static DiffusionMatrix2 general(double D1, double D2, double D) {
    DiffusionMatrix2 m(D1, D2, D, false);
    return m;
  }

  Eigen::Matrix2d matrix() const {
    Eigen::Matrix2d m;
    m << D1, D, D, D2;
    return m;
  }

 private:
  DiffusionMatrix2(double D1_in, double D2_in, double D_in, bool rank1_in)
      : D1(D1_in), D2(D2_in), D(D_in), rank1(rank1_in) {
    if (D1 < 0.0 || D2 < 0.0)
      throw std::invalid_argument("diagonal diffusion entries must be >= 0");
    const double scale = std::max({D1, D2, std::fabs(D), 1.0});
    if (D1 * D2 - D * D < -1e-12 * scale * scale)
      throw std::invalid_argument("diffusion matrix must be positive semidefinite");
  }
};

struct CorrelationResult {
  bool degenerate = false;  // a coordinate is frozen; |eta| -> 1 limit
  double eta = 0.0;
};

// Stationary second moments (entries of the inverse entropy matrix).
class StationaryMoments2 {
 public:
  StationaryMoments2(double m11, double m12, double m22)
      : m11_(m11), m12_(m12), m22_(m22) {
    const double scale = std::max({std::fabs(m11), std::fabs(m22), 1.0});
    if (m11 < -1e-12 * scale || m22 < -1e-12 * scale ||
        m11 * m22 - m12 * m12 < -1e-10 * scale * scale)
      throw std::invalid_argument("stationary covariance must be PSD");
  }

  double m11() const { return m11_; }
  double m12() const { return m12_; }
  double m22() const { return m22_; }

  Eigen::Matrix2d covariance() const {
    Eigen::Matrix2d m;
    m << m11_, m12_, m12_, m22_;
    return m;
  }

  double det() const { return m11_ * m22_ - m12_ * m12_; }
  bool singular(double tol = 1e-12) const {
    const double scale = std::max({m11_ * m22_, m12_ * m12_, 1e-300});
    return det() <= tol * scale;
  }

  // Entropy matrix beta = covariance^{-1}; the stationary density is
  // exp(-1/2 x' beta x). Throws when a coordinate is frozen.
  Eigen::Matrix2d entropy_matrix() const {
    if (singular())
      throw NumericError("entropy matrix undefined: stationary covariance is singular");
    const double inv_det = 1.0 / det();
    Eigen::Matrix2d b;
    b << m22_ * inv_det, -m12_ * inv_det, -m12_ * inv_det, m11_ * inv_det;
    return b;
  }

  CorrelationResult correlation() const {
    CorrelationResult r;
    const double prod = m11_ * m22_;
    if (prod <= 0.0) {
      r.degenerate = true;
      return r;
    }
    r.eta = m12_ / std::sqrt(prod);
    return r;
  }

 private:
  double m11_, m12_, m22_;
};

// Solves A X + X A' = -2 D for symmetric X with A Hurwitz, via the
// vectorized Kronecker form; the residual is verified before returning.
inline Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& A,
                                      const Eigen::MatrixXd& Dm) {
  const auto n = A.rows();
  if (A.cols() != n || Dm.rows() != n || Dm.cols() != n)
    throw std::invalid_argument("lyapunov solve needs square matrices of one size");
  if ((Dm - Dm.transpose()).cwiseAbs().maxCoeff() >
      1e-10 * (1.0 + Dm.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("diffusion matrix must be symmetric");
  const Eigen::VectorXcd eigs = A.eigenvalues();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(eigs[i].real() < 0.0))
      throw std::invalid_argument(
          "drift matrix must be Hurwitz (eigenvalue with real part " +
          std::to_string(eigs[i].real()) + ")");

  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  // vec(A X + X A') = (I (x) A + A (x) I) vec(X) for column-major vec.
  const Eigen::MatrixXd op =
      Eigen::kroneckerProduct(I, A).eval() + Eigen::kroneckerProduct(A, I).eval();
  const Eigen::VectorXd rhs =
      -2.0 * Eigen::Map<const Eigen::VectorXd>(Dm.data(), n * n);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(op);
  if (!qr.isInvertible())
    throw NumericError("lyapunov operator is singular");
  const Eigen::VectorXd x = qr.solve(rhs);
  Eigen::MatrixXd X = Eigen::Map<const Eigen::MatrixXd>(x.data(), n, n);
  X = 0.5 * (X + X.transpose().eval());

  const double residual =
      (A * X + X * A.transpose() + 2.0 * Dm).cwiseAbs().maxCoeff();
  if (residual >= 1e-10 * (1.0 + X.cwiseAbs().maxCoeff()))
    throw NumericError("lyapunov residual too large: " + std::to_string(residual));
  return X;
}

// The three rational expressions for the stationary second moments of the
// 2x2 system, written out verbatim.
inline StationaryMoments2 closed_form_moments(const LinearSystem2& sys,
                                              const DiffusionMatrix2& dm) {
  const double a = sys.a, b = sys.b, c = sys.c, d = sys.d;
  const double den = sys.trace() * sys.det();
  const double m11 =
      ((b * c - a * d - d * d) * dm.D1 + 2 * b * d * dm.D - b * b * dm.D2) / den;
  const double m12 = (c * d * dm.D1 - 2 * a * d * dm.D + a * b * dm.D2) / den;
  const double m22 =
      (-c * c * dm.D1 + 2 * a * c * dm.D + (b * c - a * a - a * d) * dm.D2) / den;
  return StationaryMoments2(m11, m12, m22);
}

// Matrix form of the same solution. The sign of the first coefficient is
// fixed by substituting back into A X + X A' = -2 D: with the opposite sign
// (A = -I, D = diag(1, 0)) the identity fails by a factor of -4.
inline constexpr double kCovarianceTraceTermSign = -1.0;

inline Eigen::Matrix2d stationary_covariance_matrix_form(
    const LinearSystem2& sys, const DiffusionMatrix2& dm) {
  const double t = sys.trace();
  const double det = sys.det();
  const Eigen::Matrix2d A = sys.matrix();
  const Eigen::Matrix2d D = dm.matrix();
  return kCovarianceTraceTermSign * ((t * t + det) / (t * det)) * D +
         (1.0 / det) * (A * D + D * A.transpose()) -
         (1.0 / (t * det)) * A * D * A.transpose();
}

// Kinetic matrix linking flows to thermodynamic forces. Both routes -- the
// definition -A X through the Lyapunov solution and the closed form
// D + (A D - D A') / tr(A) -- are computed and must agree.
inline Eigen::Matrix2d kinetic_matrix(const LinearSystem2& sys,
                                      const DiffusionMatrix2& dm) {
  const Eigen::Matrix2d A = sys.matrix();
  const Eigen::Matrix2d D = dm.matrix();
  const Eigen::Matrix2d X = solve_lyapunov(A, D);
  const Eigen::Matrix2d via_definition = -A * X;
  const Eigen::Matrix2d via_closed_form =
      D + (A * D - D * A.transpose()) / sys.trace();
  const double scale = 1.0 + via_definition.cwiseAbs().maxCoeff();
  if ((via_definition - via_closed_form).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw NumericError("kinetic matrix routes disagree");
  return via_definition;
}

// Reciprocity residual b D2 - c D1 + (a - d) D; zero iff the kinetic matrix
// is symmetric (given the rank-1 measurement constraint).
inline double onsager_residual(const LinearSystem2& sys,
                               const DiffusionMatrix2& dm) {
  return sys.b * dm.D2 - sys.c * dm.D1 + (sys.a - sys.d) * dm.D;
}

inline CorrelationResult correlation_coefficient(const StationaryMoments2& m) {
  return m.correlation();
}

// Stationary state under measurement of the first coordinate in measured
// coordinates (b = 0, diffusion only on the conjugate): the measured
// variable freezes at zero (delta factor) and the conjugate is Gaussian.
struct ZenoStationary {
  double frozen_value = 0.0;     // location of the delta factor
  double otilde_variance = 0.0;  // variance of the conjugate coordinate
  double normalization = 0.0;    // Gaussian prefactor 1/sqrt(2 pi var)
};

inline ZenoStationary zeno_stationary(const LinearSystem2& sys,
                                      const DiffusionMatrix2& dm) {
  if (sys.b != 0.0)
    throw std::invalid_argument(
        "zeno stationary state requires b = 0 (the kinetic-matrix symmetry "
        "condition in measured coordinates)");
  if (dm.D1 != 0.0 || dm.D != 0.0 || !(dm.D2 > 0.0))
    throw std::invalid_argument(
        "zeno stationary state requires diffusion only on the conjugate "
        "coordinate");
  // b = 0 with the Hurwitz constraints forces a < 0 and d < 0.
  ZenoStationary z;
  z.frozen_value = 0.0;
  z.otilde_variance = dm.D2 / std::fabs(sys.d);
  z.normalization = 1.0 / std::sqrt(2.0 * M_PI * z.otilde_variance);
  return z;
}

}  // namespace mnl
