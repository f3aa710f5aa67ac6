#include "heros/nets.hpp"

#include "heros/error.hpp"
#include "heros/rng.hpp"

#include <array>
#include <cmath>

namespace heros {

void ArchConfig::validate() const {
  if (window < 16 || window % 8 != 0) throw ValidationError("arch.window must be a multiple of 8 and >= 16");
  if (gen_channels < 1 || disc_channels < 1) throw ValidationError("arch channel counts must be >= 1");
  if (feature_dim() < 4) throw ValidationError("arch.window too small for a feature dimension >= 4");
}

std::string_view net_prefix(Net net) {
  switch (net) {
    case Net::GenLowToHigh: return "g_lh";
    case Net::GenHighToLow: return "g_hl";
    case Net::DiscHigh: return "d_h";
    case Net::DiscLow: return "d_l";
  }
  return "?";
}

namespace {

enum class LayerKind { Conv, ConvT, Linear };

struct Layer {
  const char* name;
  LayerKind kind;
  Index in, out, kernel, stride, pad;

  Index weight_rows() const { return kind == LayerKind::ConvT ? out * kernel : out; }
  Index weight_cols() const { return kind == LayerKind::Conv ? in * kernel : in; }
  Index fan_in() const { return kind == LayerKind::ConvT ? out * kernel : in * kernel; }
};

constexpr std::array kAllNets{Net::GenLowToHigh, Net::GenHighToLow, Net::DiscHigh, Net::DiscLow};

bool is_generator(Net net) { return net == Net::GenLowToHigh || net == Net::GenHighToLow; }

std::vector<Layer> layers(const ArchConfig& a, Net net) {
  const Index c = a.gen_channels, dc = a.disc_channels;
  if (is_generator(net))
    return {
        {"enc1", LayerKind::Conv, 1, c, 7, 2, 3},   {"enc2", LayerKind::Conv, c, c, 5, 2, 2},
        {"mid1", LayerKind::Conv, c, c, 5, 1, 2},   {"mid2", LayerKind::Conv, c, c, 5, 1, 2},
        {"dec1", LayerKind::ConvT, c, c, 4, 2, 1},  {"dec2", LayerKind::ConvT, c, 1, 4, 2, 1},
    };
  return {
      {"conv1", LayerKind::Conv, 1, dc, 7, 2, 3},
      {"conv2", LayerKind::Conv, dc, 2 * dc, 5, 2, 2},
      {"conv3", LayerKind::Conv, 2 * dc, 2 * dc, 5, 2, 2},
      {"head", LayerKind::Linear, 2 * dc, 1, 1, 1, 0},
  };
}

std::string view_name(Net net, const Layer& l, char part) {
  return std::string(net_prefix(net)) + "." + l.name + "." + part;
}

}  // namespace

const ParamView& ModelParams::view(std::string_view name) const {
  for (const auto& v : views)
    if (v.name == name) return v;
  throw ValidationError("unknown parameter view '" + std::string(name) + "'");
}

Eigen::Map<const Eigen::MatrixXd> ModelParams::matrix(std::string_view name) const {
  const auto& v = view(name);
  return {values.data() + v.offset, v.rows, v.cols};
}

Eigen::Map<Eigen::MatrixXd> ModelParams::matrix(std::string_view name) {
  const auto& v = view(name);
  return {values.data() + v.offset, v.rows, v.cols};
}

std::pair<Index, Index> ModelParams::span_of(Net net) const {
  const std::string prefix = std::string(net_prefix(net)) + ".";
  Index begin = -1, end = -1;
  for (const auto& v : views)
    if (v.name.starts_with(prefix)) {
      if (begin < 0) begin = v.offset;
      end = v.offset + v.size();
    }
  return {begin, end - begin};
}

Index ModelParams::generator_block() const {
  const auto [off, size] = span_of(Net::GenHighToLow);
  return off + size;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams p;
  p.arch = arch;
  p.seed = seed;
  Index offset = 0;
  for (Net net : kAllNets)
    for (const auto& l : layers(arch, net)) {
      p.views.push_back({view_name(net, l, 'w'), offset, l.weight_rows(), l.weight_cols()});
      offset += l.weight_rows() * l.weight_cols();
      p.views.push_back({view_name(net, l, 'b'), offset, l.out, 1});
      offset += l.out;
    }
  p.values = Eigen::VectorXd::Zero(offset);

  std::uint64_t stream = 0;
  for (Net net : kAllNets) {
    const auto ls = layers(arch, net);
    for (std::size_t i = 0; i < ls.size(); ++i) {
      const auto& l = ls[i];
      Rng rng = Rng::derive(seed, stream++);
      if (is_generator(net) && i + 1 == ls.size()) continue;  // zero output layer
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in()));
      for (char part : {'w', 'b'}) {
        auto m = p.matrix(view_name(net, l, part));
        for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
      }
    }
  }
  return p;
}

BoundParams::BoundParams(ad::Tape& tape, const ModelParams& params, std::span<const Net> trainable)
    : params_(&params) {
  leaves_.reserve(params.views.size());
  for (const auto& v : params.views) {
    bool train = false;
    for (Net n : trainable) train = train || v.name.starts_with(std::string(net_prefix(n)) + ".");
    leaves_.push_back(tape.leaf(params.matrix(v.name), train));
  }
}

BoundParams::BoundParams(const ModelParams& params, ad::Node flat) : params_(&params) {
  if (flat.rows() != params.values.size() || flat.cols() != 1)
    throw ShapeError("BoundParams: flat node must be a column of all parameters");
  leaves_.reserve(params.views.size());
  for (const auto& v : params.views)
    leaves_.push_back(ad::reshape(ad::slice(flat, v.offset, 0, v.size(), 1), v.rows, v.cols));
}

ad::Node BoundParams::operator[](std::string_view name) const {
  const auto& views = params_->views;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (views[i].name == name) return leaves_[i];
  throw ValidationError("unknown parameter view '" + std::string(name) + "'");
}

void BoundParams::accumulate_grad(Eigen::VectorXd& flat) const {
  if (flat.size() != params_->values.size()) throw ShapeError("gradient vector size != parameter count");
  const auto& views = params_->views;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!leaves_[i].requires_grad()) continue;
    const auto& g = leaves_[i].grad();
    flat.segment(views[i].offset, views[i].size()) += Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
  }
}

namespace {

ad::Node apply_layer(const BoundParams& p, Net net, const Layer& l, ad::Node x, Index batch) {
  const ad::Node w = p[view_name(net, l, 'w')];
  const ad::Node b = p[view_name(net, l, 'b')];
  const ad::Conv1dSpec spec{l.kernel, l.stride, l.pad, batch};
  switch (l.kind) {
    case LayerKind::Conv: return ad::add_bias(ad::conv1d(x, w, spec), b);
    case LayerKind::ConvT: return ad::add_bias(ad::conv_transpose1d(x, w, spec), b);
    case LayerKind::Linear: return ad::add_bias(ad::matmul(w, x), b);
  }
  return x;
}

void check_frames(const ArchConfig& arch, ad::Node frames, Index batch) {
  if (batch < 1 || frames.rows() != 1 || frames.cols() != batch * arch.window)
    throw ShapeError("frames " + std::to_string(frames.rows()) + "x" + std::to_string(frames.cols()) +
                     " do not hold " + std::to_string(batch) + " frames of length " + std::to_string(arch.window));
}

}  // namespace

GenGraph generator_graph(const BoundParams& p, Net net, ad::Node frames, Index batch) {
  if (!is_generator(net)) throw ValidationError("generator_graph: not a generator");
  const ArchConfig& arch = p.params().arch;
  check_frames(arch, frames, batch);
  const auto ls = layers(arch, net);

  ad::Node h = frames;
  for (std::size_t i = 0; i < 4; ++i) h = ad::leaky_relu(apply_layer(p, net, ls[i], h, batch));
  const ad::Node bottleneck = h;  // C x (batch * d)
  h = ad::leaky_relu(apply_layer(p, net, ls[4], h, batch));
  h = apply_layer(p, net, ls[5], h, batch);

  const Index d = arch.feature_dim();
  std::vector<ad::Node> per_frame;
  per_frame.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b)
    per_frame.push_back(ad::slice(bottleneck, 0, b * d, bottleneck.rows(), d));
  const ad::Node features = batch == 1 ? per_frame.front() : ad::concat(per_frame, ad::Axis::Rows);
  return {ad::add(frames, h), features};
}

ad::Node discriminator_graph(const BoundParams& p, Net net, ad::Node frames, Index batch) {
  if (is_generator(net)) throw ValidationError("discriminator_graph: not a discriminator");
  const ArchConfig& arch = p.params().arch;
  check_frames(arch, frames, batch);
  const auto ls = layers(arch, net);

  ad::Node h = frames;
  for (std::size_t i = 0; i < 3; ++i) h = ad::leaky_relu(apply_layer(p, net, ls[i], h, batch));
  // Mean over time within each frame as a product with a block pooling matrix.
  const Index len = h.cols() / batch;
  Eigen::MatrixXd pool = Eigen::MatrixXd::Zero(h.cols(), batch);
  for (Index b = 0; b < batch; ++b) pool.block(b * len, b, len, 1).setConstant(1.0 / static_cast<double>(len));
  h = ad::matmul(h, frames.tape()->constant(std::move(pool)));
  return apply_layer(p, net, ls[3], h, batch);
}

GenOutput generator_forward(const ModelParams& p, Net net, const Eigen::VectorXd& frame) {
  if (frame.size() != p.arch.window)
    throw ShapeError("frame length " + std::to_string(frame.size()) + " != window " + std::to_string(p.arch.window));
  ad::Tape tape;
  BoundParams bound(tape, p, {});
  const auto g = generator_graph(bound, net, tape.constant(frame.transpose()), 1);
  return {g.output.value().row(0).transpose(), g.features.value()};
}

Eigen::MatrixXd generator_forward_batch(const ModelParams& p, Net net, const Eigen::MatrixXd& frames) {
  if (frames.rows() != p.arch.window)
    throw ShapeError("frame length " + std::to_string(frames.rows()) + " != window " + std::to_string(p.arch.window));
  const Index batch = frames.cols();
  ad::Tape tape;
  BoundParams bound(tape, p, {});
  const Eigen::Map<const Eigen::MatrixXd> flat(frames.data(), 1, frames.size());
  const auto g = generator_graph(bound, net, tape.constant(flat), batch);
  return Eigen::Map<const Eigen::MatrixXd>(g.output.value().data(), p.arch.window, batch);
}

double discriminator_forward(const ModelParams& p, Net net, const Eigen::VectorXd& frame) {
  if (frame.size() != p.arch.window)
    throw ShapeError("frame length " + std::to_string(frame.size()) + " != window " + std::to_string(p.arch.window));
  ad::Tape tape;
  BoundParams bound(tape, p, {});
  return discriminator_graph(bound, net, tape.constant(frame.transpose()), 1).scalar();
}

}  // namespace heros
