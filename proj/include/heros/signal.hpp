#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace heros {

using Eigen::Index;

/// Uniformly sampled multi-axis acceleration in g (1 g = 9.8 m/s^2).
///
/// `samples` is axes x length. Construct through make() to get the
/// invariants checked: 1-3 axes, length >= 2, dt > 0, all samples finite.
struct Signal {
  Eigen::MatrixXd samples;
  double dt = 0.0;
  std::string label;

  static Signal make(Eigen::MatrixXd samples, double dt, std::string label = {});

  Index axes() const { return samples.rows(); }
  Index length() const { return samples.cols(); }
  double duration() const { return dt * static_cast<double>(length()); }

  void validate() const;
};

/// Degradation applied to turn a clean signal into a "low-cost" one.
struct NoiseModel {
  double white_sigma = 0.0;    ///< additive white noise std-dev, g
  double bias_rw_sigma = 0.0;  ///< per-sample std-dev of the bias random walk, g
  double quant_step = 0.0;     ///< quantization step, g (0 disables)
  double clip_level = std::numeric_limits<double>::infinity();  ///< saturation threshold, g

  void validate() const;
};

/// Rest / shake / rest episode description for synth_motion().
struct MotionSpec {
  double rest_s = 1.0;
  double shake_s = 2.0;
  double peak_g = 12.0;
  int n_bursts = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rest-shake-rest episode. Each axis is a sum of Hann-windowed sinusoid
/// bursts corrected to zero mean, so the trapezoid integral of every axis is
/// zero up to rounding. Each axis is scaled so that its peak |a| is peak_g.
Signal synth_motion(const MotionSpec& spec, int axes, double dt);

/// Saturate every sample to [-tau, tau].
Signal clip(const Signal& s, double tau);

/// Round to the nearest multiple of `step`, ties away from zero. step == 0 is the identity.
double quantize(double x, double step);

/// quantize(clip(s + white + cumulative bias walk, clip_level), quant_step).
Signal degrade(const Signal& s, const NoiseModel& nm, std::uint64_t seed);

/// CSV with `# dt=<float>` and `# axes=<n>` header lines (optional `# label=`),
/// then one comma-separated row per sample.
Signal load_csv(const std::filesystem::path& path);
void save_csv(const Signal& s, const std::filesystem::path& path);

struct Frame {
  Index start = 0;
  Eigen::MatrixXd samples;  ///< axes x len
};

/// Contiguous frames of `len` samples every `stride` samples.
/// Count is floor((N - len) / stride) + 1.
std::vector<Frame> window(const Signal& s, Index len, Index stride);

/// Weighted overlap-add: out[t] = sum_f w[t - start_f] * frame_f[t - start_f] / sum_f w[...].
/// `weights` of size 0 means uniform averaging. Samples no frame covers are 0.
Eigen::MatrixXd overlap_add(const std::vector<Frame>& frames, Index axes, Index length,
                            const Eigen::VectorXd& weights = {});

}  // namespace heros
