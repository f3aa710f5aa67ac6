#include "heros/metrics.hpp"

#include "heros/error.hpp"

#include <charconv>
#include <cmath>

namespace heros {

double csre(const Signal& ref, const Signal& recon) {
  if (ref.axes() != recon.axes() || ref.length() != recon.length())
    throw ValidationError("csre: signals differ in shape (" + std::to_string(ref.axes()) + "x" +
                          std::to_string(ref.length()) + " vs " + std::to_string(recon.axes()) + "x" +
                          std::to_string(recon.length()) + ")");
  if (ref.dt != recon.dt) throw ValidationError("csre: signals differ in dt");
  return std::sqrt((ref.samples - recon.samples).squaredNorm() / static_cast<double>(ref.samples.size()));
}

Eigen::VectorXd zvre(const Signal& s) {
  const Index n = s.length();
  Eigen::VectorXd out(s.axes());
  for (Index a = 0; a < s.axes(); ++a) {
    const auto row = s.samples.row(a);
    const double integral = s.dt * (row.sum() - 0.5 * (row(0) + row(n - 1)));
    out[a] = std::abs(integral * kGravity);
  }
  return out;
}

AllanReport allan_deviation(const Signal& s, Index axis, const AllanOptions& opt) {
  if (axis < 0 || axis >= s.axes()) throw ValidationError("allan_deviation: axis out of range");
  const Index n = s.length();
  if (n < 2000) throw ValidationError("allan_deviation: need >= 2000 samples, got " + std::to_string(n));
  if (opt.points < 2) throw ValidationError("allan_deviation: need >= 2 curve points");

  AllanReport r;
  r.dt = s.dt;
  r.samples = n;
  const Index m_max = n / 5;
  const double log_max = std::log(static_cast<double>(m_max));
  for (int i = 0; i < opt.points; ++i) {
    const auto m = static_cast<Index>(std::llround(std::exp(log_max * i / (opt.points - 1))));
    if (r.cluster_sizes.empty() || m > r.cluster_sizes.back()) r.cluster_sizes.push_back(m);
  }

  // Prefix sums of the centered series; centering keeps s and s + c numerically alike.
  const auto row = s.samples.row(axis);
  const double offset = row.mean();
  std::vector<double> prefix(static_cast<std::size_t>(n) + 1, 0.0);
  for (Index t = 0; t < n; ++t) prefix[t + 1] = prefix[t] + (row(t) - offset);

  const auto count = static_cast<Index>(r.cluster_sizes.size());
  r.taus.resize(count);
  r.adev.resize(count);
  for (Index i = 0; i < count; ++i) {
    const Index m = r.cluster_sizes[static_cast<std::size_t>(i)];
    const Index terms = n - 2 * m;
    double acc = 0.0;
    for (Index k = 0; k < terms; ++k) {
      const double diff = (prefix[k + 2 * m] - 2.0 * prefix[k + m] + prefix[k]) / static_cast<double>(m);
      acc += diff * diff;
    }
    r.taus[i] = static_cast<double>(m) * s.dt;
    r.adev[i] = std::sqrt(acc / (2.0 * static_cast<double>(terms)));
  }
  return r;
}

namespace {

// Longest segment (ties: closest slope) whose least-squares log-log slope is
// within tol of `nominal`; intercept refit with the slope fixed at nominal and
// read at tau_ref.
SlopeFit fit_segment(const Eigen::VectorXd& log_tau, const Eigen::VectorXd& log_adev, double nominal, double tau_ref,
                     const AllanOptions& opt) {
  SlopeFit best;
  best.nominal_slope = nominal;
  const Index n = log_tau.size();
  Index best_len = 0;
  double best_dev = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 2; j < n; ++j) {
      if (log_tau[j] - log_tau[i] < opt.min_span_decades - 1e-12) continue;
      const Index len = j - i + 1;
      const auto x = log_tau.segment(i, len).array();
      const auto y = log_adev.segment(i, len).array();
      const double mx = x.mean(), my = y.mean();
      const double slope = ((x - mx) * (y - my)).sum() / (x - mx).square().sum();
      const double dev = std::abs(slope - nominal);
      if (dev > opt.slope_tol) continue;
      if (len > best_len || (len == best_len && dev < best_dev)) {
        best_len = len;
        best_dev = dev;
        best.present = true;
        best.fitted_slope = slope;
        best.first = i;
        best.last = j;
      }
    }
  if (!best.present) return best;
  const auto x = log_tau.segment(best.first, best_len).array();
  const auto y = log_adev.segment(best.first, best_len).array();
  const double intercept = (y - nominal * x).mean();
  best.rms_residual = std::sqrt((y - (intercept + nominal * x)).square().mean());
  best.coefficient = std::pow(10.0, intercept + nominal * std::log10(tau_ref));
  return best;
}

}  // namespace

void fit_noise_params(AllanReport& r, const AllanOptions& opt) {
  const Index n = r.adev.size();
  if (n < 10) throw ValidationError("fit_noise_params: curve needs >= 10 points");
  r.qn_fit = SlopeFit{false, -1.0};
  r.vrw_fit = SlopeFit{false, -0.5};
  r.qn = r.vrw = r.bi = 0.0;
  r.bi_index = 0;
  r.bi_at_boundary = false;
  if (!(r.adev.array() > 0.0).all()) return;  // flat-zero or partially zero curve: nothing to fit

  const Eigen::VectorXd log_tau = r.taus.array().log10();
  const Eigen::VectorXd log_adev = r.adev.array().log10();
  r.qn_fit = fit_segment(log_tau, log_adev, -1.0, std::sqrt(3.0), opt);
  r.vrw_fit = fit_segment(log_tau, log_adev, -0.5, 1.0, opt);
  r.qn = r.qn_fit.coefficient;
  r.vrw = r.vrw_fit.coefficient;

  Index imin = 0;
  r.bi = r.adev.minCoeff(&imin) / 0.664;
  r.bi_index = imin;
  r.bi_at_boundary = imin == 0 || imin == n - 1;
}

namespace {
nlohmann::json fit_json(const SlopeFit& f) {
  return {{"present", f.present},       {"nominal_slope", f.nominal_slope}, {"fitted_slope", f.fitted_slope},
          {"first", f.first},           {"last", f.last},                   {"rms_residual", f.rms_residual},
          {"coefficient", f.coefficient}};
}
}  // namespace

nlohmann::json to_json(const AllanReport& r) {
  return {
      {"dt", r.dt},
      {"samples", r.samples},
      {"cluster_sizes", r.cluster_sizes},
      {"taus", std::vector<double>(r.taus.data(), r.taus.data() + r.taus.size())},
      {"adev", std::vector<double>(r.adev.data(), r.adev.data() + r.adev.size())},
      {"qn", r.qn},
      {"vrw", r.vrw},
      {"bi", r.bi},
      {"diagnostics",
       {{"qn_fit", fit_json(r.qn_fit)},
        {"vrw_fit", fit_json(r.vrw_fit)},
        {"bi_index", r.bi_index},
        {"bi_at_boundary", r.bi_at_boundary}}},
  };
}

std::string adev_csv(const AllanReport& r) {
  std::string out = "tau,adev\n";
  char buf[32];
  for (Index i = 0; i < r.taus.size(); ++i) {
    out.append(buf, std::to_chars(buf, buf + sizeof(buf), r.taus[i]).ptr);
    out += ',';
    out.append(buf, std::to_chars(buf, buf + sizeof(buf), r.adev[i]).ptr);
    out += '\n';
  }
  return out;
}

}  // namespace heros
