#pragma once

#include "heros/signal.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace heros {

/// Standard gravity used to convert g to m/s^2.
inline constexpr double kGravity = 9.8;

/// Root-mean-square difference over every axis and sample, in g.
double csre(const Signal& ref, const Signal& recon);

/// |trapezoid integral of a(t) * 9.8| over the whole signal, per axis, in m/s.
Eigen::VectorXd zvre(const Signal& s);

/// One log-log line fit used to read a noise coefficient off the Allan curve.
struct SlopeFit {
  bool present = false;   ///< a segment within tolerance of the nominal slope was found
  double nominal_slope = 0.0;
  double fitted_slope = 0.0;
  Index first = 0;        ///< first curve index of the segment
  Index last = 0;         ///< last curve index (inclusive)
  double rms_residual = 0.0;  ///< log10 residual of the fixed-slope line
  double coefficient = 0.0;
};

struct AllanReport {
  double dt = 0.0;
  Index samples = 0;
  std::vector<Index> cluster_sizes;
  Eigen::VectorXd taus;  ///< seconds, strictly increasing
  Eigen::VectorXd adev;  ///< g

  // Filled by fit_noise_params().
  double qn = 0.0;   ///< g*s, read at tau = sqrt(3) s on the slope -1 line
  double vrw = 0.0;  ///< g*sqrt(s) (g/sqrt(Hz)), read at tau = 1 s on the slope -1/2 line
  double bi = 0.0;   ///< g, min(adev) / 0.664
  SlopeFit qn_fit;
  SlopeFit vrw_fit;
  Index bi_index = 0;
  bool bi_at_boundary = false;  ///< minimum at either end of the curve: no flat region observed
};

struct AllanOptions {
  int points = 30;            ///< requested log-spaced cluster sizes in [1, N/5]
  double slope_tol = 0.15;    ///< accepted |fitted - nominal| slope
  double min_span_decades = 1.0;  ///< minimum tau span of a fitted segment
};

/// Overlapping Allan deviation of one axis of a static signal (>= 2000 samples).
/// sigma^2(m) = 1 / (2 (N - 2m)) * sum_k (ybar_{k+m} - ybar_k)^2 over cluster means of size m.
AllanReport allan_deviation(const Signal& s, Index axis, const AllanOptions& opt = {});

/// Read QN, VRW and BI off the curve. Absent segments yield 0 with present = false.
void fit_noise_params(AllanReport& report, const AllanOptions& opt = {});

nlohmann::json to_json(const AllanReport& report);
/// Two-column "tau,adev" CSV of the curve.
std::string adev_csv(const AllanReport& report);

}  // namespace heros
