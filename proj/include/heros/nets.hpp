#pragma once

#include "heros/autodiff.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace heros {

using Eigen::Index;

/// Network geometry shared by both translation directions.
///
/// Generator: conv(k7,s2) -> conv(k5,s2) -> conv(k5) -> conv(k5) [features]
/// -> tconv(k4,s2) -> tconv(k4,s2), plus a global residual input -> output.
/// Discriminator: conv(k7,s2) -> conv(k5,s2) -> conv(k5,s2) -> mean pool -> linear.
/// All hidden activations are leaky ReLU.
struct ArchConfig {
  Index window = 256;        ///< frame length; multiple of 8
  Index gen_channels = 16;   ///< bottleneck channels = feature vectors per frame (N)
  Index disc_channels = 16;  ///< first discriminator layer width (later layers double it)

  Index feature_count() const { return gen_channels; }
  Index feature_dim() const { return window / 4; }

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

enum class Net { GenLowToHigh, GenHighToLow, DiscHigh, DiscLow };

std::string_view net_prefix(Net net);

struct ParamView {
  std::string name;  ///< "<net prefix>.<layer>.<w|b>"
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
  Index size() const { return rows * cols; }
};

/// Flat parameter store for all four networks with named matrix views.
///
/// Views partition `values` exactly. Generators occupy the leading block and
/// discriminators the trailing block, so each side can be optimized as one
/// contiguous segment.
struct ModelParams {
  ArchConfig arch;
  std::uint64_t seed = 0;
  Eigen::VectorXd values;
  std::vector<ParamView> views;

  const ParamView& view(std::string_view name) const;
  Eigen::Map<const Eigen::MatrixXd> matrix(std::string_view name) const;
  Eigen::Map<Eigen::MatrixXd> matrix(std::string_view name);

  /// Contiguous [offset, offset + size) covering every view of `net`.
  std::pair<Index, Index> span_of(Net net) const;
  Index generator_block() const;  ///< count of leading generator parameters
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; the last
/// generator layer is all zeros so both generators start as the identity.
ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// Parameters copied onto a tape as leaves.
class BoundParams {
 public:
  /// Only views of the `trainable` nets request gradients.
  BoundParams(ad::Tape& tape, const ModelParams& params, std::span<const Net> trainable);
  /// Views sliced out of a (params.values.size() x 1) node; used for gradient checks.
  BoundParams(const ModelParams& params, ad::Node flat);

  ad::Node operator[](std::string_view name) const;
  const ModelParams& params() const { return *params_; }

  /// Add the tape gradients of the bound leaves into `flat` (same layout as params.values).
  void accumulate_grad(Eigen::VectorXd& flat) const;

 private:
  const ModelParams* params_;
  std::vector<ad::Node> leaves_;
};

struct GenGraph {
  ad::Node output;    ///< 1 x (batch * window)
  ad::Node features;  ///< (batch * N) x d, rows grouped by frame
};

/// frames: 1 x (batch * window), frames back to back.
GenGraph generator_graph(const BoundParams& p, Net net, ad::Node frames, Index batch);
/// Returns 1 x batch logits.
ad::Node discriminator_graph(const BoundParams& p, Net net, ad::Node frames, Index batch);

struct GenOutput {
  Eigen::VectorXd output;    ///< same length as the input frame
  Eigen::MatrixXd features;  ///< N x d
};

GenOutput generator_forward(const ModelParams& p, Net net, const Eigen::VectorXd& frame);
/// Columns of `frames` are independent frames; returns outputs column by column.
Eigen::MatrixXd generator_forward_batch(const ModelParams& p, Net net, const Eigen::MatrixXd& frames);
double discriminator_forward(const ModelParams& p, Net net, const Eigen::VectorXd& frame);

}  // namespace heros
