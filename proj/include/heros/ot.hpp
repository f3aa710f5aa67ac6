#pragma once

#include "heros/autodiff.hpp"
#include "heros/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace heros {

/// Entropic transport between two equally sized feature sets.
struct SinkhornOptions {
  double eps = 0.05;
  double tol = 1e-6;
  int max_iter = 500;

  void validate() const;
};

/// Coupling produced by sinkhorn(). gamma is N x N and nonnegative; mass 1.
template <typename Scalar>
struct BasicTransportPlan {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix gamma;
  Vector row_marginal;
  Vector col_marginal;
  int iterations = 0;
  Scalar residual = 0;  ///< max |marginal - target| over rows and columns
  bool converged = false;
};

using TransportPlan = BasicTransportPlan<double>;

/// C[i][j] = exp(1 - <f_Li, f_Hj>) over L2-normalized rows, so C is in [1, e^2].
template <typename DerivedL, typename DerivedH>
Eigen::Matrix<typename DerivedL::Scalar, Eigen::Dynamic, Eigen::Dynamic> cost_matrix(
    const Eigen::MatrixBase<DerivedL>& features_low, const Eigen::MatrixBase<DerivedH>& features_high) {
  using Scalar = typename DerivedL::Scalar;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (features_low.rows() != features_high.rows() || features_low.cols() != features_high.cols())
    throw ShapeError("cost_matrix: feature sets must both be N x d");
  auto normalized = [](const auto& f, const char* side) {
    Matrix out = f;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const Scalar n = out.row(i).norm();
      if (!(n > Scalar(0)))
        throw DegenerateError(std::string("cost_matrix: zero-norm ") + side + " feature row " + std::to_string(i));
      out.row(i) /= n;
    }
    return out;
  };
  const Matrix lo = normalized(features_low, "low-cost");
  const Matrix hi = normalized(features_high, "high-cost");
  // Rounding can push |cos| a hair past 1; keep the documented range.
  const Matrix cos = (lo * hi.transpose()).cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
  return (Scalar(1) - cos.array()).exp().matrix();
}

/// Sinkhorn with uniform marginals 1/N.
///
/// Dual potentials f, g are updated alternately; the plan is
/// gamma_ij = exp((f_i + g_j - C_ij) / eps), equivalently u_i K_ij v_j with
/// K = exp(-C / eps). Small cost ranges (relative to eps) iterate on u, v
/// directly; larger ones run in the log domain to avoid underflow. Stops when the marginal residual drops below tol or
/// after max_iter iterations; check `converged`.
template <typename Derived>
BasicTransportPlan<typename Derived::Scalar> sinkhorn(const Eigen::MatrixBase<Derived>& cost,
                                                      const SinkhornOptions& opt = {}) {
  using Scalar = typename Derived::Scalar;
  using Plan = BasicTransportPlan<Scalar>;
  using Matrix = typename Plan::Matrix;
  using Vector = typename Plan::Vector;
  opt.validate();
  const Eigen::Index n = cost.rows();
  if (n < 1 || cost.cols() != n) throw ShapeError("sinkhorn: cost must be square and non-empty");
  if (!cost.allFinite()) throw NumericError("sinkhorn: non-finite cost entries");

  const Scalar eps = static_cast<Scalar>(opt.eps);
  const Scalar target = Scalar(1) / static_cast<Scalar>(n);
  const Scalar log_target = std::log(target);
  Plan plan;
  plan.residual = std::numeric_limits<Scalar>::infinity();
  const Scalar shift = cost.minCoeff();
  if ((cost.maxCoeff() - shift) / eps <= Scalar(200)) {
    // Kernel entries stay within e^-200 of each other: iterate on scalings
    // u = exp(f), v = exp(g) directly, with the kernel shifted to max 1.
    const Matrix kernel = (-(cost.array() - shift) / eps).exp().matrix();
    Vector u = Vector::Ones(n), v = Vector::Ones(n);
    for (int it = 1; it <= opt.max_iter; ++it) {
      const Vector kv = kernel * v;
      if (it > 1) {
        plan.residual = (u.cwiseProduct(kv).array() - target).abs().maxCoeff();
        if (plan.residual < static_cast<Scalar>(opt.tol)) {
          plan.converged = true;
          plan.iterations = it - 1;
          break;
        }
      }
      u = target * kv.cwiseInverse();
      v = target * (kernel.transpose() * u).cwiseInverse();
      plan.iterations = it;
    }
    plan.gamma = u.asDiagonal() * kernel * v.asDiagonal();
  } else {
    const Matrix scaled = -cost / eps;  // log K
    Vector f = Vector::Zero(n), g = Vector::Zero(n);  // potentials divided by eps

    // log sum_j exp(a_ij + b_j), row by row, max-shifted.
    auto lse_rows = [n](const Matrix& a, const Vector& b) {
      Vector out(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = (a.row(i).transpose() + b).eval();
        const Scalar m = row.maxCoeff();
        out[i] = m + std::log((row.array() - m).exp().sum());
      }
      return out;
    };
    const Matrix scaled_t = scaled.transpose();

    for (int it = 1; it <= opt.max_iter; ++it) {
      const Vector row_lse = lse_rows(scaled, g);
      // Row mass of the current plan is exp(f_i + row_lse_i); columns are exact after the g update.
      if (it > 1) {
        plan.residual = ((f + row_lse).array().exp() - target).abs().maxCoeff();
        if (plan.residual < static_cast<Scalar>(opt.tol)) {
          plan.converged = true;
          plan.iterations = it - 1;
          break;
        }
      }
      f = log_target - row_lse.array();
      g = log_target - lse_rows(scaled_t, f).array();
      plan.iterations = it;
    }
    plan.gamma = (scaled.colwise() + f).rowwise() + g.transpose();
    plan.gamma = plan.gamma.array().exp().matrix();
  }
  if (!plan.gamma.allFinite()) throw NumericError("sinkhorn: plan overflowed");
  plan.row_marginal = plan.gamma.rowwise().sum();
  plan.col_marginal = plan.gamma.colwise().sum().transpose();
  plan.residual = std::max((plan.row_marginal.array() - target).abs().maxCoeff(),
                           (plan.col_marginal.array() - target).abs().maxCoeff());
  plan.converged = plan.residual < static_cast<Scalar>(opt.tol);
  return plan;
}

enum class TransportDirection {
  Forward,  ///< T: re-express the high-cost set in low-cost row order (uses plan rows)
  Inverse,  ///< T^-1: re-express the low-cost set in high-cost row order (uses plan columns)
};

/// Barycentric projection: T(F_H)[i] = sum_j gamma_ij F_H[j] / sum_j gamma_ij.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> barycentric_map(const BasicTransportPlan<Scalar>& plan,
                                                                      const Eigen::MatrixBase<Derived>& features,
                                                                      TransportDirection dir) {
  const auto& gamma = plan.gamma;
  if (features.rows() != gamma.rows()) throw ShapeError("barycentric_map: feature rows != plan size");
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const bool fwd = dir == TransportDirection::Forward;
  const Vector mass = fwd ? Vector(gamma.rowwise().sum()) : Vector(gamma.colwise().sum().transpose());
  if (!(mass.array() > Scalar(0)).all()) throw DegenerateError("barycentric_map: plan has a zero-mass row or column");
  Matrix out = fwd ? Matrix(gamma * features) : Matrix(gamma.transpose() * features);
  return mass.cwiseInverse().asDiagonal() * out;
}

/// Optimal transport supervision on a tape.
///
///   mean_i ||F_GL[i] - T(F_H)[i]||^2 + mean_j ||F_GH[j] - T^-1(F_L)[j]||^2
///
/// The plan comes from a fresh solve on cost_matrix(F_L, F_H) and is a
/// constant: gradients flow only into F_GL and F_GH. `plan_out`, if given,
/// receives the solved plan.
ad::Node ots_loss(ad::Node gen_low, ad::Node gen_high, const Eigen::MatrixXd& features_low,
                  const Eigen::MatrixXd& features_high, const SinkhornOptions& opt = {},
                  TransportPlan* plan_out = nullptr);

/// Feature L2 substitute for OTS: mean_i ||F_GL[i] - F_H[i]||^2 (row-by-row pairing).
ad::Node l2_feature_loss(ad::Node gen_low, const Eigen::MatrixXd& features_high);

}  // namespace heros
