#pragma once

#include "heros/autodiff.hpp"
#include "heros/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace heros {

struct MleOptions {
  double kappa_min = 0.1;
  double kappa_max = 10.0;
  /// Multiplier on the raw energy before the sigmoid. 1 reproduces the
  /// plain sigma(E); other values are for experiments only.
  double energy_prescale = 1.0;

  void validate() const;
};

/// Sum of squared interior second differences: sum_{i=1}^{d-2} (h[i+1] - 2h[i] + h[i-1])^2.
template <typename Derived>
typename Derived::Scalar laplace_energy(const Eigen::MatrixBase<Derived>& h) {
  const Eigen::Index d = h.size();
  if (d < 3) throw ValidationError("laplace_energy: feature dimension must be >= 3");
  const auto second = (h.tail(d - 2) - 2 * h.segment(1, d - 2) + h.head(d - 2)).eval();
  return second.squaredNorm();
}

/// Raw Laplace energy together with its sigmoid normalization.
struct LaplaceEnergy {
  double raw = 0.0;
  double normalized = 0.5;

  static LaplaceEnergy from_raw(double raw);
};

/// Raw kurtosis m4 / m2^2 from central sample moments, clamped to [kappa_min, kappa_max].
/// Throws DegenerateError when the sample std-dev is <= 1e-8.
template <typename Derived>
typename Derived::Scalar kurtosis_kappa(const Eigen::MatrixBase<Derived>& h, double kappa_min = 0.1,
                                        double kappa_max = 10.0) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index d = h.size();
  if (d < 4) throw ValidationError("kurtosis_kappa: feature dimension must be >= 4");
  const auto centered = (h.array() - h.mean()).eval();
  const Scalar m2 = centered.square().mean();
  if (!(std::sqrt(m2) > Scalar(1e-8))) throw DegenerateError("kurtosis_kappa: feature has (near) zero variance");
  const Scalar m4 = centered.square().square().mean();
  return std::clamp(m4 / (m2 * m2), Scalar(kappa_min), Scalar(kappa_max));
}

/// -log(e) - kappa * log(1 - e) for a normalized energy e in (0, 1).
double r_mle_normalized(double normalized_energy, double kappa);

/// R_MLE evaluated from the raw energy: e = sigmoid(raw). Overflow-safe for large raw.
double r_mle(double raw_energy, double kappa);

/// Minimizer of r_mle_normalized over (0, 1): 1 / (1 + kappa).
inline double r_mle_argmin(double kappa) { return 1.0 / (1.0 + kappa); }

struct MleStats {
  double mean_raw_energy = 0.0;
  double mean_kappa = 0.0;
  Eigen::Index degenerate_rows = 0;  ///< rows that fell back to kappa = 1
  Eigen::VectorXd kappa;             ///< per-row kappa actually used
};

/// Per-row R_MLE on a tape. `raw_energy` is M x 1; kappa is a constant per row.
ad::Node r_mle(ad::Node raw_energy, const Eigen::VectorXd& kappa, double energy_prescale = 1.0);

/// Mean over the rows of `features` (M x d, d >= 4) of
/// r_mle(laplace_energy(row), kurtosis_kappa(row)). kappa is held constant;
/// rows with degenerate variance use kappa = 1. A non-null `kappa` (one entry
/// per row) replaces the kurtosis estimate, e.g. to hold it at a reference point.
ad::Node mle_loss(ad::Node features, const MleOptions& opt = {}, MleStats* stats = nullptr,
                  const Eigen::VectorXd* kappa = nullptr);

}  // namespace heros
