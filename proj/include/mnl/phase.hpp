#pragma once

// Canonical phase-space machinery: Poisson brackets, the measurement noise
// vector (the Hamiltonian vector field of the measured observable), the
// rank-1 diffusion tensor it generates, the Ito drift correction, and the
// free-measurement heat kernel.
//
// Conventions, fixed globally:
//  * coordinates are ordered (q1, p1, ..., qn, pn);
//  * the symplectic tensor is block-diagonal with 2x2 blocks [[0,1],[-1,0]];
//  * the conjugate of an observable O is the function O~ with {O, O~} = +1
//    (for O = p1 this gives O~ = -q1);
//  * phase-level objects are unscaled geometry; the coupling kappa enters
//    only where an SDE or Fokker-Planck operator is assembled.

#include <mnl/expr.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mnl {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PhasePoint {
 public:
  explicit PhasePoint(Eigen::VectorXd coords) : coords_(std::move(coords)) {
    if (coords_.size() == 0 || coords_.size() % 2 != 0)
      throw std::invalid_argument(
          "phase point must have positive even dimension, got " +
          std::to_string(coords_.size()));
    if (!coords_.allFinite())
      throw std::invalid_argument("phase point entries must be finite");
  }

  PhasePoint(std::initializer_list<double> values)
      : PhasePoint(Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(
            values.begin(), static_cast<Eigen::Index>(values.size())))) {}

  static PhasePoint zero(int n_dof) {
    return PhasePoint(Eigen::VectorXd::Zero(2 * n_dof));
  }

  const Eigen::VectorXd& coords() const { return coords_; }
  int dimension() const { return static_cast<int>(coords_.size()); }
  int n_dof() const { return dimension() / 2; }
  double operator[](int i) const { return coords_[i]; }

  std::span<const double> span() const {
    return {coords_.data(), static_cast<std::size_t>(coords_.size())};
  }

 private:
  Eigen::VectorXd coords_;
};

struct MeasurementSpec {
  Expr observable;
  double kappa = 0.0;  // gamma hbar^2 / 2; zero degrades to pure drift

  MeasurementSpec(Expr obs, double kappa_in)
      : observable(std::move(obs)), kappa(kappa_in) {
    if (!(kappa >= 0.0))
      throw std::invalid_argument("measurement coupling kappa must be >= 0");
  }
};

// Symmetric positive-semidefinite diffusion tensor. Tensors produced from a
// single measured observable have rank <= 1 (their determinant vanishes).
class DiffusionMatrix {
 public:
  explicit DiffusionMatrix(Eigen::MatrixXd entries)
      : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols())
      throw std::invalid_argument("diffusion matrix must be square");
    const double scale = entries_.cwiseAbs().maxCoeff();
    if ((entries_ - entries_.transpose()).cwiseAbs().maxCoeff() >
        1e-12 * (1.0 + scale))
      throw std::invalid_argument("diffusion matrix must be symmetric");
    entries_ = 0.5 * (entries_ + entries_.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(entries_);
    if (es.eigenvalues().minCoeff() < -1e-10 * (1.0 + scale))
      throw std::invalid_argument("diffusion matrix must be positive semidefinite");
  }

  const Eigen::MatrixXd& matrix() const { return entries_; }
  int dimension() const { return static_cast<int>(entries_.rows()); }

  // Ratio of the second-largest to the largest eigenvalue, 0 for rank <= 1.
  double rank1_defect() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(entries_);
    const auto& ev = es.eigenvalues();
    const double largest = ev(ev.size() - 1);
    if (largest <= 0.0) return 0.0;
    return std::fabs(ev(ev.size() - 2)) / largest;
  }

 private:
  Eigen::MatrixXd entries_;
};

// All 2n partial derivatives of f, indexed by coordinate.
inline std::vector<Expr> phase_gradient(const Expr& f) {
  std::vector<Expr> out;
  out.reserve(f.dimension());
  for (int c = 0; c < f.dimension(); ++c) out.push_back(f.differentiate(c));
  return out;
}

// {A, B} = sum_i dA/dq_i dB/dp_i - dA/dp_i dB/dq_i as an expression tree.
inline Expr poisson_bracket_expr(const Expr& A, const Expr& B) {
  if (A.n_dof() != B.n_dof())
    throw std::invalid_argument("poisson bracket requires matching n_dof");
  ExprBuilder b(A.n_dof());
  int acc = b.constant(0.0);
  for (int i = 1; i <= A.n_dof(); ++i) {
    const int aq = b.copy(A.differentiate(coord_index_q(i)));
    const int ap = b.copy(A.differentiate(coord_index_p(i)));
    const int bq = b.copy(B.differentiate(coord_index_q(i)));
    const int bp = b.copy(B.differentiate(coord_index_p(i)));
    acc = b.add(acc, b.sub(b.mul(aq, bp), b.mul(ap, bq)));
  }
  return b.take(acc);
}

inline double poisson_bracket(const Expr& A, const Expr& B,
                              const PhasePoint& x) {
  if (A.n_dof() != B.n_dof())
    throw std::invalid_argument("poisson bracket requires matching n_dof");
  if (x.dimension() != A.dimension())
    throw std::invalid_argument("phase point dimension mismatch");
  std::vector<double> scratch;
  double acc = 0.0;
  for (int i = 1; i <= A.n_dof(); ++i) {
    const double aq = A.differentiate(coord_index_q(i)).evaluate(x.span(), scratch);
    const double ap = A.differentiate(coord_index_p(i)).evaluate(x.span(), scratch);
    const double bq = B.differentiate(coord_index_q(i)).evaluate(x.span(), scratch);
    const double bp = B.differentiate(coord_index_p(i)).evaluate(x.span(), scratch);
    acc += aq * bp - ap * bq;
  }
  return acc;
}

// Components of the measurement noise vector w_i = eps_il dO/dx_l, i.e.
// w = (dO/dp_1, -dO/dq_1, ..., dO/dp_n, -dO/dq_n). The flow xdot = w
// conserves O exactly, and the diffusion tensor is w w^T.
inline std::vector<Expr> noise_vector_exprs(const Expr& O) {
  std::vector<Expr> w;
  w.reserve(O.dimension());
  for (int i = 1; i <= O.n_dof(); ++i) {
    w.push_back(O.differentiate(coord_index_p(i)));
    Expr dq = O.differentiate(coord_index_q(i));
    ExprBuilder b(O.n_dof());
    w.push_back(b.take(b.negate(b.copy(dq))));
  }
  return w;
}

inline Eigen::VectorXd noise_vector(const Expr& O, const PhasePoint& x) {
  if (x.dimension() != O.dimension())
    throw std::invalid_argument("phase point dimension mismatch");
  const auto exprs = noise_vector_exprs(O);
  Eigen::VectorXd w(O.dimension());
  std::vector<double> scratch;
  for (int i = 0; i < O.dimension(); ++i)
    w[i] = exprs[i].evaluate(x.span(), scratch);
  return w;
}

inline DiffusionMatrix diffusion_tensor(const Expr& O, const PhasePoint& x) {
  const Eigen::VectorXd w = noise_vector(O, x);
  return DiffusionMatrix(w * w.transpose());
}

// Unscaled divergence sum_k d(w_i w_k)/dx_k of the diffusion tensor, one
// expression per coordinate; multiply by kappa for the Ito drift.
inline std::vector<Expr> diffusion_divergence_exprs(const Expr& O) {
  const auto w = noise_vector_exprs(O);
  const int dim = O.dimension();
  std::vector<Expr> out;
  out.reserve(dim);
  for (int i = 0; i < dim; ++i) {
    ExprBuilder b(O.n_dof());
    int acc = b.constant(0.0);
    for (int k = 0; k < dim; ++k) {
      ExprBuilder prod_builder(O.n_dof());
      const int prod =
          prod_builder.mul(prod_builder.copy(w[i]), prod_builder.copy(w[k]));
      const Expr d_ik = prod_builder.take(prod);
      acc = b.add(acc, b.copy(d_ik.differentiate(k)));
    }
    out.push_back(b.take(acc));
  }
  return out;
}

// B_i = kappa * sum_k dD_ik/dx_k, computed symbolically.
inline Eigen::VectorXd ito_drift_correction(const MeasurementSpec& spec,
                                            const PhasePoint& x) {
  if (x.dimension() != spec.observable.dimension())
    throw std::invalid_argument("phase point dimension mismatch");
  const auto div = diffusion_divergence_exprs(spec.observable);
  Eigen::VectorXd out(x.dimension());
  std::vector<double> scratch;
  for (int i = 0; i < x.dimension(); ++i)
    out[i] = spec.kappa * div[i].evaluate(x.span(), scratch);
  return out;
}

// Free-measurement heat kernel: Gaussian in the conjugate variable with
// variance 2*kappa*t, normalized to unit mass.
inline double measurement_kernel(double o_tilde, double o_tilde_src, double t,
                                 double kappa_units) {
  if (!(t > 0.0)) throw std::invalid_argument("kernel time must be positive");
  if (!(kappa_units > 0.0))
    throw std::invalid_argument("kernel coupling must be positive");
  const double var = 2.0 * kappa_units * t;
  const double d = o_tilde - o_tilde_src;
  constexpr double kTwoPi = 6.283185307179586476925286766559005768;
  return std::exp(-d * d / (2.0 * var)) / std::sqrt(kTwoPi * var);
}

// Conjugate observable O~ with {O, O~} = +1 for observables with constant
// gradient (linear in the coordinates). Measurement of O diffuses exactly
// this combination.
inline Expr conjugate_observable(const Expr& O) {
  const auto grad = phase_gradient(O);
  double norm = 0.0;
  std::vector<double> coeff(grad.size());
  for (std::size_t c = 0; c < grad.size(); ++c) {
    if (!grad[c].is_constant())
      throw std::invalid_argument(
          "conjugate observable requires a linear observable");
    coeff[c] = grad[c].constant_value();
    norm += coeff[c] * coeff[c];
  }
  if (norm == 0.0)
    throw std::invalid_argument("constant observable has no conjugate");
  ExprBuilder b(O.n_dof());
  int acc = b.constant(0.0);
  for (int i = 1; i <= O.n_dof(); ++i) {
    const double alpha = coeff[coord_index_q(i)];
    const double beta = coeff[coord_index_p(i)];
    acc = b.add(acc, b.mul(b.constant(alpha / norm), b.variable_p(i)));
    acc = b.sub(acc, b.mul(b.constant(beta / norm), b.variable_q(i)));
  }
  return b.take(acc);
}

}  // namespace mnl
