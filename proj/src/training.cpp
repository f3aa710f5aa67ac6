#include "heros/training.hpp"

#include "heros/error.hpp"
#include "heros/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace heros {

void LossWeights::validate() const {
  for (double w : {adv, cyc, id, ots, mle})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("loss weights must be finite and >= 0");
}

void TrainConfig::validate() const {
  arch.validate();
  weights.validate();
  sinkhorn.validate();
  mle.validate();
  if (batch < 1) throw ValidationError("train.batch must be >= 1");
  if (stride < 1) throw ValidationError("train.stride must be >= 1");
  if (steps < 0) throw ValidationError("train.steps must be >= 0");
  if (!(lr_g > 0.0) || !(lr_d > 0.0)) throw ValidationError("learning rates must be > 0");
  if (checkpoint_every < 0) throw ValidationError("train.checkpoint_every must be >= 0");
  if (ots_on && l1_substitute_on) throw ValidationError("ots and l1_substitute are mutually exclusive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ValidationError("train.ema_decay must be in [0, 1)");
}

bool StepReport::finite() const {
  for (double v : {adv, cyc, id, ots, mle, generator_total, discriminator, d_real_high, d_fake_high, d_real_low,
                   d_fake_low, sinkhorn_residual, laplace_energy})
    if (!std::isfinite(v)) return false;
  return true;
}

nlohmann::json to_json(const StepReport& r) {
  return {
      {"step", r.step},
      {"loss",
       {{"adv", r.adv},
        {"cyc", r.cyc},
        {"id", r.id},
        {"ots", r.ots},
        {"mle", r.mle},
        {"generator", r.generator_total},
        {"discriminator", r.discriminator}}},
      {"d_scores",
       {{"real_high", r.d_real_high}, {"fake_high", r.d_fake_high}, {"real_low", r.d_real_low}, {"fake_low", r.d_fake_low}}},
      {"sinkhorn", {{"residual", r.sinkhorn_residual}, {"iterations", r.sinkhorn_iterations}}},
      {"laplace_energy", r.laplace_energy},
  };
}

namespace {

// window x batch (column-major) viewed as 1 x (batch * window), frames back to back.
ad::Node frames_node(ad::Tape& t, const Eigen::MatrixXd& windows) {
  return t.constant(Eigen::Map<const Eigen::MatrixXd>(windows.data(), 1, windows.size()));
}

ad::Node l1_mean(ad::Node a, ad::Node b) { return ad::mean(ad::abs(ad::sub(a, b))); }

// mean((x - target)^2)
ad::Node squared_mean(ad::Node x, double target) { return ad::mean(ad::pow(ad::add_scalar(x, -target), 2.0)); }

void check_batch(const Batch& b, const ArchConfig& arch) {
  if (b.low.rows() != arch.window || b.high.rows() != arch.window)
    throw ShapeError("batch windows must have " + std::to_string(arch.window) + " samples");
  if (b.low.cols() != b.high.cols() || b.low.cols() < 1)
    throw ShapeError("batch must hold the same positive number of windows per domain");
}

ad::Tape& tape_of(const BoundParams& p) { return *p[p.params().views.front().name].tape(); }

}  // namespace

GeneratorLoss build_generator_loss(const BoundParams& p, const Batch& batch, const TrainConfig& cfg,
                                   const DetachedTargets* frozen) {
  const ArchConfig& arch = p.params().arch;
  check_batch(batch, arch);
  const Index n = batch.low.cols();
  const LossWeights& w = cfg.weights;
  ad::Tape& t = tape_of(p);

  const ad::Node xl = frames_node(t, batch.low);
  const ad::Node xh = frames_node(t, batch.high);
  const GenGraph to_high = generator_graph(p, Net::GenLowToHigh, xl, n);
  const GenGraph to_low = generator_graph(p, Net::GenHighToLow, xh, n);

  GeneratorLoss out;
  StepReport& r = out.terms;
  DetachedTargets& used = out.detached;
  std::vector<ad::Node> terms;

  if (w.adv > 0.0) {
    const ad::Node adv = ad::add(squared_mean(discriminator_graph(p, Net::DiscHigh, to_high.output, n), 1.0),
                                 squared_mean(discriminator_graph(p, Net::DiscLow, to_low.output, n), 1.0));
    r.adv = adv.scalar();
    terms.push_back(ad::scale(adv, w.adv));
  }
  if (w.cyc > 0.0) {
    const ad::Node back_low = generator_graph(p, Net::GenHighToLow, to_high.output, n).output;
    const ad::Node back_high = generator_graph(p, Net::GenLowToHigh, to_low.output, n).output;
    const ad::Node cyc = ad::add(l1_mean(back_low, xl), l1_mean(back_high, xh));
    r.cyc = cyc.scalar();
    terms.push_back(ad::scale(cyc, w.cyc));
  }
  if (w.id > 0.0) {
    const ad::Node same_high = generator_graph(p, Net::GenLowToHigh, xh, n).output;
    const ad::Node same_low = generator_graph(p, Net::GenHighToLow, xl, n).output;
    const ad::Node id = ad::add(l1_mean(same_high, xh), l1_mean(same_low, xl));
    r.id = id.scalar();
    terms.push_back(ad::scale(id, w.id));
  }
  const bool feature_targets = (cfg.ots_on || cfg.l1_substitute_on) && w.ots > 0.0;
  if (feature_targets) {
    used.features_low = frozen ? frozen->features_low : to_high.features.value();
    used.features_high = frozen ? frozen->features_high : to_low.features.value();
  }
  if (cfg.ots_on && w.ots > 0.0) {
    TransportPlan plan;
    const ad::Node ots =
        ots_loss(to_high.features, to_low.features, used.features_low, used.features_high, cfg.sinkhorn, &plan);
    r.ots = ots.scalar();
    r.sinkhorn_residual = plan.residual;
    r.sinkhorn_iterations = plan.iterations;
    terms.push_back(ad::scale(ots, w.ots));
  } else if (cfg.l1_substitute_on && w.ots > 0.0) {
    const ad::Node sub = l2_feature_loss(to_high.features, used.features_high);
    r.ots = sub.scalar();
    terms.push_back(ad::scale(sub, w.ots));
  }
  if (cfg.mle_on && w.mle > 0.0) {
    MleStats sl, sh;
    const ad::Node mle = ad::scale(ad::add(mle_loss(to_high.features, cfg.mle, &sl, frozen ? &frozen->kappa_low : nullptr),
                                           mle_loss(to_low.features, cfg.mle, &sh, frozen ? &frozen->kappa_high : nullptr)),
                                   0.5);
    used.kappa_low = sl.kappa;
    used.kappa_high = sh.kappa;
    r.mle = mle.scalar();
    r.laplace_energy = 0.5 * (sl.mean_raw_energy + sh.mean_raw_energy);
    terms.push_back(ad::scale(mle, w.mle));
  }

  out.total = t.scalar(0.0);
  for (const auto& term : terms) out.total = ad::add(out.total, term);
  r.generator_total = out.total.scalar();
  return out;
}

double total_generator_loss(const ModelParams& params, const Batch& batch, const TrainConfig& cfg,
                            StepReport* report) {
  ad::Tape tape;
  BoundParams bound(tape, params, {});
  const GeneratorLoss loss = build_generator_loss(bound, batch, cfg);
  if (report) *report = loss.terms;
  return loss.terms.generator_total;
}

ad::Node build_discriminator_loss(const BoundParams& p, const Batch& batch, const Eigen::MatrixXd& fake_high,
                                  const Eigen::MatrixXd& fake_low, StepReport* report) {
  check_batch(batch, p.params().arch);
  check_batch(Batch{fake_low, fake_high}, p.params().arch);
  if (fake_high.cols() != batch.low.cols()) throw ShapeError("fake batch size differs from the real batch");
  const Index n = batch.low.cols();
  ad::Tape& t = tape_of(p);

  const ad::Node real_h = discriminator_graph(p, Net::DiscHigh, frames_node(t, batch.high), n);
  const ad::Node fake_h = discriminator_graph(p, Net::DiscHigh, frames_node(t, fake_high), n);
  const ad::Node real_l = discriminator_graph(p, Net::DiscLow, frames_node(t, batch.low), n);
  const ad::Node fake_l = discriminator_graph(p, Net::DiscLow, frames_node(t, fake_low), n);

  const ad::Node high = ad::scale(ad::add(squared_mean(real_h, 1.0), squared_mean(fake_h, 0.0)), 0.5);
  const ad::Node low = ad::scale(ad::add(squared_mean(real_l, 1.0), squared_mean(fake_l, 0.0)), 0.5);
  const ad::Node loss = ad::add(high, low);
  if (report) {
    report->discriminator = loss.scalar();
    report->d_real_high = real_h.value().mean();
    report->d_fake_high = fake_h.value().mean();
    report->d_real_low = real_l.value().mean();
    report->d_fake_low = fake_l.value().mean();
  }
  return loss;
}

double discriminator_loss(const ModelParams& params, const Batch& batch) {
  const Eigen::MatrixXd fake_high = generator_forward_batch(params, Net::GenLowToHigh, batch.low);
  const Eigen::MatrixXd fake_low = generator_forward_batch(params, Net::GenHighToLow, batch.high);
  ad::Tape tape;
  BoundParams bound(tape, params, {});
  return build_discriminator_loss(bound, batch, fake_high, fake_low).scalar();
}

Adam::Adam(Index size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(size)),
      v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("Adam: size mismatch");
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

std::vector<std::filesystem::path> list_signals(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv") out.push_back(entry.path());
  if (out.empty()) throw IoError("no .csv signals in " + dir.string());
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

Eigen::MatrixXd cut_windows(const std::vector<Signal>& signals, Index window, Index stride, double scale) {
  Index count = 0;
  for (const auto& s : signals)
    if (s.length() >= window) count += s.axes() * ((s.length() - window) / stride + 1);
  Eigen::MatrixXd out(window, count);
  Index col = 0;
  for (const auto& s : signals)
    for (const auto& f : heros::window(s, window, stride))
      for (Index a = 0; a < s.axes(); ++a) out.col(col++) = f.samples.row(a).transpose() / scale;
  return out;
}

}  // namespace

TrainingData make_training_data(const std::vector<Signal>& low, const std::vector<Signal>& high, Index window,
                                Index stride) {
  if (low.empty() || high.empty()) throw ValidationError("training data needs >= 1 signal per domain");
  TrainingData d;
  d.dt = high.front().dt;
  for (const auto* set : {&low, &high})
    for (const auto& s : *set)
      if (s.dt != d.dt) throw ValidationError("training signals must share one dt ('" + s.label + "' differs)");
  d.scale = 0.0;
  for (const auto& s : high) d.scale = std::max(d.scale, s.samples.cwiseAbs().maxCoeff());
  if (!(d.scale > 0.0)) throw DegenerateError("high-cost training signals are all zero");
  d.low = cut_windows(low, window, stride, d.scale);
  d.high = cut_windows(high, window, stride, d.scale);
  if (d.low.cols() == 0 || d.high.cols() == 0)
    throw ValidationError("no training signal is at least one window (" + std::to_string(window) + ") long");
  return d;
}

TrainingData load_training_data(const TrainConfig& cfg) {
  auto load_dir = [](const std::filesystem::path& dir) {
    std::vector<Signal> out;
    for (const auto& path : list_signals(dir)) out.push_back(load_csv(path));
    return out;
  };
  return make_training_data(load_dir(cfg.low_dir), load_dir(cfg.high_dir), cfg.arch.window, cfg.stride);
}

namespace {

constexpr std::array kGenerators{Net::GenLowToHigh, Net::GenHighToLow};
constexpr std::array kDiscriminators{Net::DiscHigh, Net::DiscLow};

Batch sample_batch(const TrainingData& data, Index size, Rng& rng) {
  Batch b{Eigen::MatrixXd(data.low.rows(), size), Eigen::MatrixXd(data.high.rows(), size)};
  for (Index i = 0; i < size; ++i) {
    b.low.col(i) = data.low.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(data.low.cols()))));
    b.high.col(i) = data.high.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(data.high.cols()))));
  }
  return b;
}

std::filesystem::path diverged_path(const std::filesystem::path& out) {
  if (out.empty()) return "heros.diverged";
  std::filesystem::path p = out;
  p += ".diverged";
  return p;
}

}  // namespace

Checkpoint train(const TrainConfig& cfg, const TrainingData& data, std::ostream* reports,
                 const nlohmann::json& provenance, const StepCallback& on_step) {
  cfg.validate();
  if (data.low.rows() != cfg.arch.window || data.high.rows() != cfg.arch.window)
    throw ShapeError("training windows do not match arch.window");
  if (data.low.cols() < 1 || data.high.cols() < 1) throw ValidationError("training data is empty");

  Checkpoint ckpt;
  ckpt.params = init_params(cfg.arch, cfg.seed);
  ckpt.scale = data.scale;
  ckpt.config = provenance;
  ModelParams& params = ckpt.params;

  const Index n_gen = params.generator_block();
  const Index n_disc = params.values.size() - n_gen;
  Eigen::VectorXd gen_average = params.values.head(n_gen);
  auto exported = [&] {
    Checkpoint out = ckpt;
    out.params.values.head(n_gen) = gen_average;
    return out;
  };
  Adam adam_g(n_gen, cfg.lr_g);
  Adam adam_d(n_disc, cfg.lr_d);
  Rng rng = Rng::derive(cfg.seed, 0xBA7C4);
  Eigen::VectorXd grad(params.values.size());

  auto abort_numeric = [&](const std::string& what) {
    save_checkpoint(ckpt, diverged_path(cfg.checkpoint_out));
    throw NumericError("non-finite " + what + " at step " + std::to_string(ckpt.step + 1) +
                       "; state saved to " + diverged_path(cfg.checkpoint_out).string());
  };

  for (int it = 0; it < cfg.steps; ++it) {
    const Batch batch = sample_batch(data, cfg.batch, rng);
    StepReport report;
    report.step = ckpt.step + 1;

    const Eigen::MatrixXd fake_high = generator_forward_batch(params, Net::GenLowToHigh, batch.low);
    const Eigen::MatrixXd fake_low = generator_forward_batch(params, Net::GenHighToLow, batch.high);
    {
      ad::Tape tape;
      BoundParams bound(tape, params, kDiscriminators);
      const ad::Node loss = build_discriminator_loss(bound, batch, fake_high, fake_low, &report);
      tape.backward(loss);
      grad.setZero();
      bound.accumulate_grad(grad);
      if (!std::isfinite(loss.scalar()) || !grad.allFinite()) abort_numeric("discriminator loss or gradient");
      adam_d.step(params.values.tail(n_disc), grad.tail(n_disc));
    }
    {
      ad::Tape tape;
      BoundParams bound(tape, params, kGenerators);
      const GeneratorLoss loss = build_generator_loss(bound, batch, cfg);
      tape.backward(loss.total);
      grad.setZero();
      bound.accumulate_grad(grad);
      const StepReport& g = loss.terms;
      report.adv = g.adv;
      report.cyc = g.cyc;
      report.id = g.id;
      report.ots = g.ots;
      report.mle = g.mle;
      report.generator_total = g.generator_total;
      report.sinkhorn_residual = g.sinkhorn_residual;
      report.sinkhorn_iterations = g.sinkhorn_iterations;
      report.laplace_energy = g.laplace_energy;
      if (!report.finite() || !grad.allFinite()) abort_numeric("generator loss or gradient");
      adam_g.step(params.values.head(n_gen), grad.head(n_gen));
    }
    if (!params.values.allFinite()) abort_numeric("parameters");
    ++ckpt.step;
    if (cfg.ema_decay > 0.0)
      gen_average = cfg.ema_decay * gen_average + (1.0 - cfg.ema_decay) * params.values.head(n_gen);
    else
      gen_average = params.values.head(n_gen);

    if (reports) *reports << to_json(report).dump() << '\n';
    if (!cfg.checkpoint_out.empty() && cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0)
      save_checkpoint(exported(), cfg.checkpoint_out);
    if (on_step && !on_step(report, params)) break;
  }
  if (reports) reports->flush();
  Checkpoint out = exported();
  if (!cfg.checkpoint_out.empty()) save_checkpoint(out, cfg.checkpoint_out);
  return out;
}

Signal enhance(const Checkpoint& ckpt, const Signal& s) {
  s.validate();
  const Index w = ckpt.params.arch.window;
  const Index n = s.length();
  if (n < w)
    throw ValidationError("signal of " + std::to_string(n) + " samples is shorter than the window (" +
                          std::to_string(w) + ")");
  if (!(ckpt.scale > 0.0) || !std::isfinite(ckpt.scale)) throw ValidationError("checkpoint scale must be > 0");

  const Index hop = w / 2;
  std::vector<Index> starts;
  for (Index st = 0;; st += hop) {
    starts.push_back(st);
    if (st + w >= n) break;
  }
  Eigen::VectorXd weight(w);
  for (Index k = 0; k < w; ++k)
    weight[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(k) + 0.5) / static_cast<double>(w));

  constexpr Index kChunk = 64;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(s.axes(), n);
  Eigen::VectorXd norm = Eigen::VectorXd::Zero(n);
  for (Index st : starts) {
    const Index len = std::min(w, n - st);
    norm.segment(st, len) += weight.head(len);
  }
  for (Index a = 0; a < s.axes(); ++a) {
    const auto row = s.samples.row(a);
    for (std::size_t c0 = 0; c0 < starts.size(); c0 += kChunk) {
      const std::size_t c1 = std::min(starts.size(), c0 + kChunk);
      Eigen::MatrixXd frames(w, static_cast<Index>(c1 - c0));
      for (std::size_t i = c0; i < c1; ++i) {
        const Index st = starts[i], len = std::min(w, n - st);
        auto col = frames.col(static_cast<Index>(i - c0));
        col.head(len) = row.segment(st, len).transpose() / ckpt.scale;
        col.tail(w - len).setConstant(row(n - 1) / ckpt.scale);
      }
      const Eigen::MatrixXd y = generator_forward_batch(ckpt.params, Net::GenLowToHigh, frames) * ckpt.scale;
      for (std::size_t i = c0; i < c1; ++i) {
        const Index st = starts[i], len = std::min(w, n - st);
        out.row(a).segment(st, len) +=
            (y.col(static_cast<Index>(i - c0)).head(len).array() * weight.head(len).array()).matrix().transpose();
      }
    }
    out.row(a).array() /= norm.transpose().array();
  }
  return Signal::make(std::move(out), s.dt, s.label);
}

}  // namespace heros
