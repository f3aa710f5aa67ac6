#include "heros/signal.hpp"

#include "heros/error.hpp"
#include "heros/rng.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace heros {

Signal Signal::make(Eigen::MatrixXd samples, double dt, std::string label) {
  Signal s{std::move(samples), dt, std::move(label)};
  s.validate();
  return s;
}

void Signal::validate() const {
  if (axes() < 1 || axes() > 3)
    throw ValidationError("signal must have 1-3 axes, got " + std::to_string(axes()));
  if (length() < 2) throw ValidationError("signal must have at least 2 samples");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("signal dt must be positive");
  if (!samples.allFinite()) throw ValidationError("signal contains non-finite samples");
}

void NoiseModel::validate() const {
  if (!(white_sigma >= 0.0) || !(bias_rw_sigma >= 0.0) || !(quant_step >= 0.0))
    throw ValidationError("noise model fields must be >= 0");
  if (!std::isfinite(white_sigma) || !std::isfinite(bias_rw_sigma) || !std::isfinite(quant_step))
    throw ValidationError("noise model sigmas and quant_step must be finite");
  if (!(clip_level > 0.0)) throw ValidationError("clip_level must be > 0");
}

void MotionSpec::validate() const {
  if (!(rest_s >= 1.0)) throw ValidationError("motion rest_s must be >= 1.0");
  if (!(shake_s > 0.0)) throw ValidationError("motion shake_s must be > 0");
  if (!(peak_g > 0.0)) throw ValidationError("motion peak_g must be > 0");
  if (n_bursts < 1) throw ValidationError("motion n_bursts must be >= 1");
}

namespace {

// Hann-windowed sinusoid with the window-weighted mean removed. The window is
// zero at both ends, so plain and trapezoid sums coincide and both vanish.
Eigen::VectorXd burst(Index len, double dt, double freq, double phase) {
  Eigen::VectorXd w(len), x(len);
  for (Index k = 0; k < len; ++k) {
    w[k] = len > 1 ? 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / (len - 1)) : 0.0;
    x[k] = w[k] * std::sin(2.0 * std::numbers::pi * freq * k * dt + phase);
  }
  const double wsum = w.sum();
  if (wsum > 0.0) x -= w * (x.sum() / wsum);
  return x;
}

}  // namespace

Signal synth_motion(const MotionSpec& spec, int axes, double dt) {
  spec.validate();
  if (!(dt > 0.0)) throw ValidationError("dt must be > 0");
  if (axes < 1 || axes > 3) throw ValidationError("axes must be 1-3");

  const auto n_rest = static_cast<Index>(std::llround(spec.rest_s / dt));
  const auto n_shake = static_cast<Index>(std::llround(spec.shake_s / dt));
  if (n_shake < 3 * spec.n_bursts) throw ValidationError("shake_s too short for n_bursts at this dt");

  Eigen::MatrixXd samples = Eigen::MatrixXd::Zero(axes, 2 * n_rest + n_shake);
  const Index seg = n_shake / spec.n_bursts;
  // Burst frequencies stay well below Nyquist and give a few cycles per burst.
  const double f_lo = 2.0, f_hi = std::min(6.0, 0.1 / dt);

  Rng rng(spec.seed);
  for (int a = 0; a < axes; ++a) {
    Eigen::VectorXd shake = Eigen::VectorXd::Zero(n_shake);
    for (int b = 0; b < spec.n_bursts; ++b) {
      const Index len = b + 1 < spec.n_bursts ? seg : n_shake - seg * (spec.n_bursts - 1);
      const double freq = rng.uniform(f_lo, f_hi);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(0.5, 1.0);
      shake.segment(b * seg, len) = amp * burst(len, dt, freq, phase);
    }
    const double peak = shake.cwiseAbs().maxCoeff();
    if (peak > 0.0) shake *= spec.peak_g / peak;
    samples.row(a).segment(n_rest, n_shake) = shake.transpose();
  }
  return Signal::make(std::move(samples), dt, "synth seed=" + std::to_string(spec.seed));
}

Signal clip(const Signal& s, double tau) {
  if (!(tau > 0.0)) throw ValidationError("clip threshold must be > 0");
  Signal out = s;
  if (std::isinf(tau)) return out;
  out.samples = s.samples.cwiseMax(-tau).cwiseMin(tau);
  return out;
}

double quantize(double x, double step) {
  if (step <= 0.0) return x;
  return std::round(x / step) * step;  // std::round rounds halves away from zero
}

Signal degrade(const Signal& s, const NoiseModel& nm, std::uint64_t seed) {
  nm.validate();
  Signal out = s;
  if (nm.white_sigma > 0.0 || nm.bias_rw_sigma > 0.0) {
    for (Index a = 0; a < s.axes(); ++a) {
      Rng white = Rng::derive(seed, 2 * static_cast<std::uint64_t>(a));
      Rng walk = Rng::derive(seed, 2 * static_cast<std::uint64_t>(a) + 1);
      double bias = 0.0;
      for (Index t = 0; t < s.length(); ++t) {
        if (nm.bias_rw_sigma > 0.0) bias += nm.bias_rw_sigma * walk.normal();
        const double w = nm.white_sigma > 0.0 ? nm.white_sigma * white.normal() : 0.0;
        out.samples(a, t) += w + bias;
      }
    }
  }
  out = clip(out, nm.clip_level);
  if (nm.quant_step > 0.0)
    out.samples = out.samples.unaryExpr([&](double x) { return quantize(x, nm.quant_step); });
  return out;
}

namespace {

std::string_view trim(std::string_view v) {
  while (!v.empty() && (v.front() == ' ' || v.front() == '\t')) v.remove_prefix(1);
  while (!v.empty() && (v.back() == ' ' || v.back() == '\t' || v.back() == '\r')) v.remove_suffix(1);
  return v;
}

double parse_double(std::string_view v, std::size_t line) {
  v = trim(v);
  double x = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ParseError("invalid number '" + std::string(v) + "'", line);
  if (!std::isfinite(x)) throw ParseError("non-finite value '" + std::string(v) + "'", line);
  return x;
}

}  // namespace

Signal load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  double dt = 0.0;
  long axes = 0;
  std::string label;
  std::vector<double> values;
  std::string text;
  std::size_t line = 0;
  bool in_body = false;
  while (std::getline(in, text)) {
    ++line;
    std::string_view v = trim(text);
    if (v.empty()) continue;
    if (v.front() == '#') {
      if (in_body) throw ParseError("header line after data rows", line);
      v = trim(v.substr(1));
      const auto eq = v.find('=');
      if (eq == std::string_view::npos) throw ParseError("malformed header line", line);
      const auto key = trim(v.substr(0, eq));
      const auto val = trim(v.substr(eq + 1));
      if (key == "dt") {
        dt = parse_double(val, line);
        if (!(dt > 0.0)) throw ParseError("dt must be > 0", line);
      } else if (key == "axes") {
        const auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), axes);
        if (ec != std::errc() || ptr != val.data() + val.size() || axes < 1 || axes > 3)
          throw ParseError("axes must be an integer in 1-3", line);
      } else if (key == "label") {
        label = std::string(val);
      } else {
        throw ParseError("unknown header key '" + std::string(key) + "'", line);
      }
      continue;
    }
    if (!in_body) {
      if (dt == 0.0) throw ParseError("missing '# dt=' header", line);
      if (axes == 0) throw ParseError("missing '# axes=' header", line);
      in_body = true;
    }
    long count = 0;
    std::size_t pos = 0;
    while (true) {
      const auto comma = v.find(',', pos);
      values.push_back(parse_double(v.substr(pos, comma == std::string_view::npos ? v.npos : comma - pos), line));
      ++count;
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (count != axes)
      throw ParseError("expected " + std::to_string(axes) + " values, got " + std::to_string(count), line);
  }
  if (!in_body) {
    if (dt == 0.0) throw ParseError("missing '# dt=' header", line);
    if (axes == 0) throw ParseError("missing '# axes=' header", line);
  }
  const auto n = static_cast<Index>(values.size()) / axes;
  if (n < 2) throw ParseError("signal needs at least 2 rows", line);
  Eigen::MatrixXd samples = Eigen::Map<Eigen::MatrixXd>(values.data(), axes, n);
  return Signal::make(std::move(samples), dt, label);
}

void save_csv(const Signal& s, const std::filesystem::path& path) {
  s.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[32];
  auto put = [&](double x) {
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);  // shortest round-trip form
    out.write(buf, res.ptr - buf);
  };
  out << "# dt=";
  put(s.dt);
  out << "\n# axes=" << s.axes() << "\n";
  if (!s.label.empty()) out << "# label=" << s.label << "\n";
  for (Index t = 0; t < s.length(); ++t) {
    for (Index a = 0; a < s.axes(); ++a) {
      if (a) out << ',';
      put(s.samples(a, t));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<Frame> window(const Signal& s, Index len, Index stride) {
  if (len <= 0 || len > s.length())
    throw ValidationError("window length must be in (0, " + std::to_string(s.length()) + "]");
  if (stride < 1) throw ValidationError("window stride must be >= 1");
  const Index count = (s.length() - len) / stride + 1;
  std::vector<Frame> frames;
  frames.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i)
    frames.push_back({i * stride, s.samples.middleCols(i * stride, len)});
  return frames;
}

Eigen::MatrixXd overlap_add(const std::vector<Frame>& frames, Index axes, Index length,
                            const Eigen::VectorXd& weights) {
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(axes, length);
  Eigen::VectorXd wsum = Eigen::VectorXd::Zero(length);
  for (const auto& f : frames) {
    const Index len = f.samples.cols();
    if (f.samples.rows() != axes || f.start < 0 || f.start + len > length)
      throw ShapeError("frame does not fit the output signal");
    if (weights.size() != 0 && weights.size() != len) throw ShapeError("weights length != frame length");
    for (Index k = 0; k < len; ++k) {
      const double w = weights.size() ? weights[k] : 1.0;
      acc.col(f.start + k) += w * f.samples.col(k);
      wsum[f.start + k] += w;
    }
  }
  for (Index t = 0; t < length; ++t)
    if (wsum[t] > 0.0) acc.col(t) /= wsum[t];
  return acc;
}

}  // namespace heros
