#pragma once

#include "heros/checkpoint.hpp"
#include "heros/mle.hpp"
#include "heros/nets.hpp"
#include "heros/ot.hpp"
#include "heros/signal.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <vector>

namespace heros {

struct LossWeights {
  double adv = 1.0;
  double cyc = 10.0;
  double id = 5.0;
  double ots = 1.0;
  double mle = 0.1;

  void validate() const;
};

struct TrainConfig {
  ArchConfig arch;
  Index batch = 8;             ///< windows per domain per step
  Index stride = 16;           ///< hop between training windows
  int steps = 5000;
  double lr_g = 5e-4;
  double lr_d = 5e-4;
  LossWeights weights;
  bool ots_on = true;
  bool mle_on = true;
  bool l1_substitute_on = false;
  std::uint64_t seed = 0;
  SinkhornOptions sinkhorn;
  MleOptions mle;
  int checkpoint_every = 1000;  ///< 0 writes only the final checkpoint
  /// Checkpoints carry an exponential moving average of the generator weights
  /// with this decay (discriminators are stored as trained). 0 stores the raw
  /// generator weights.
  double ema_decay = 0.995;

  std::filesystem::path high_dir;
  std::filesystem::path low_dir;
  std::filesystem::path checkpoint_out;
  std::filesystem::path report_out;  ///< empty: no JSON-lines stream

  void validate() const;
};

/// Per-step diagnostics. Disabled terms are reported as exactly 0.
struct StepReport {
  std::uint64_t step = 0;
  double adv = 0.0;
  double cyc = 0.0;
  double id = 0.0;
  double ots = 0.0;
  double mle = 0.0;
  double generator_total = 0.0;
  double discriminator = 0.0;
  double d_real_high = 0.0;  ///< mean discriminator score on real high-cost windows
  double d_fake_high = 0.0;
  double d_real_low = 0.0;
  double d_fake_low = 0.0;
  double sinkhorn_residual = 0.0;
  int sinkhorn_iterations = 0;
  double laplace_energy = 0.0;  ///< mean raw feature Laplace energy over both generators

  bool finite() const;
};

nlohmann::json to_json(const StepReport& r);

/// One step's windows, already normalized; column b is window b.
struct Batch {
  Eigen::MatrixXd low;   ///< window x batch
  Eigen::MatrixXd high;  ///< window x batch
};

/// Stop-gradient inputs of the generator objective: the feature sets the
/// transport plan is solved on (F_L, F_H) and the per-row MLE kappa of each
/// generator's features. Empty members mean "not used by this objective".
struct DetachedTargets {
  Eigen::MatrixXd features_low;
  Eigen::MatrixXd features_high;
  Eigen::VectorXd kappa_low;
  Eigen::VectorXd kappa_high;
};

/// Generator objective on a tape together with its scalar breakdown.
struct GeneratorLoss {
  ad::Node total;
  StepReport terms;
  DetachedTargets detached;  ///< values used for the stop-gradient inputs
};

/// lambda_adv * LSGAN generator terms + lambda_cyc * L1 cycle terms
/// + lambda_id * L1 identity terms + lambda_ots * L_OTS (or the feature L2
/// substitute) + lambda_mle * mean R_MLE of both generators' features.
/// Disabled terms are not built at all. Gradients reach whichever views of
/// `p` were bound as trainable.
///
/// By default the stop-gradient inputs come from the current forward pass.
/// Passing `frozen` reuses earlier values instead, which turns the objective
/// into the plain function whose gradient backward() computes.
GeneratorLoss build_generator_loss(const BoundParams& p, const Batch& batch, const TrainConfig& cfg,
                                   const DetachedTargets* frozen = nullptr);
double total_generator_loss(const ModelParams& params, const Batch& batch, const TrainConfig& cfg,
                            StepReport* report = nullptr);

/// LSGAN discriminator objective, fakes produced by the current generators and
/// held constant: 1/2 mean[(D(real) - 1)^2 + D(fake)^2] summed over both domains.
ad::Node build_discriminator_loss(const BoundParams& p, const Batch& batch, const Eigen::MatrixXd& fake_high,
                                  const Eigen::MatrixXd& fake_low, StepReport* report = nullptr);
double discriminator_loss(const ModelParams& params, const Batch& batch);

/// Adam with bias correction.
class Adam {
 public:
  Adam(Index size, double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8);
  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  Eigen::VectorXd m_, v_;
  std::uint64_t t_ = 0;
};

/// Unpaired training pool: every axis of every file cut into windows.
struct TrainingData {
  Eigen::MatrixXd low;   ///< window x count, normalized
  Eigen::MatrixXd high;  ///< window x count, normalized
  double scale = 1.0;    ///< max |a| over the high-cost signals
  double dt = 0.0;
};

/// Sorted *.csv files of a directory; throws IoError if it is missing or empty.
std::vector<std::filesystem::path> list_signals(const std::filesystem::path& dir);

TrainingData make_training_data(const std::vector<Signal>& low, const std::vector<Signal>& high, Index window,
                                Index stride);
TrainingData load_training_data(const TrainConfig& cfg);

/// Called after every step; return false to stop early.
using StepCallback = std::function<bool(const StepReport&, const ModelParams&)>;

/// Alternates one discriminator and one generator Adam step per iteration.
/// Writes cfg.checkpoint_out every cfg.checkpoint_every steps and at the end
/// (when set), and one JSON line per step to `reports` (when given). On a
/// non-finite loss the current state goes to "<checkpoint_out>.diverged" and a
/// NumericError is thrown with the raw training state. `provenance` is stored
/// in the checkpoint. `on_step` sees the raw parameters; the returned and saved
/// checkpoints carry the averaged generators (see TrainConfig::ema_decay).
Checkpoint train(const TrainConfig& cfg, const TrainingData& data, std::ostream* reports = nullptr,
                 const nlohmann::json& provenance = nlohmann::json::object(), const StepCallback& on_step = {});

/// G_L->H over 50%-overlapping Hann-weighted windows, each axis independently.
/// A tail shorter than a window is left-aligned in a window padded with its
/// last sample, and the padded part of the output is dropped.
Signal enhance(const Checkpoint& ckpt, const Signal& s);

}  // namespace heros
