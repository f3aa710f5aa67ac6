#include "heros/error.hpp"
#include "heros/rng.hpp"
#include "heros/training.hpp"

#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace heros;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

TrainConfig tiny_config(Index window = 32) {
  TrainConfig cfg;
  cfg.arch = ArchConfig{window, 2, 2};
  cfg.batch = 2;
  cfg.stride = 8;
  cfg.steps = 4;
  cfg.checkpoint_every = 0;
  return cfg;
}

ModelParams randomized(const ArchConfig& arch, std::uint64_t seed, double spread = 0.3) {
  ModelParams p = init_params(arch, seed);
  Rng rng(seed + 1000);
  for (auto& x : p.values) x = spread * rng.normal();
  return p;
}

Batch random_batch(Index window, Index n, std::uint64_t seed) {
  Rng rng(seed);
  Batch b{MatrixXd(window, n), MatrixXd(window, n)};
  for (Index i = 0; i < b.low.size(); ++i) b.low(i) = 0.5 * rng.normal();
  for (Index i = 0; i < b.high.size(); ++i) b.high(i) = 0.5 * rng.normal();
  return b;
}

TrainingData tiny_data(Index window, std::uint64_t seed) {
  std::vector<Signal> low, high;
  for (std::uint64_t i = 0; i < 3; ++i) {
    MotionSpec spec;
    spec.seed = seed + i;
    const Signal s = synth_motion(spec, 2, 0.005);
    high.push_back(s);
    low.push_back(degrade(s, NoiseModel{0.05, 1e-4, 0.0, 6.0}, seed + 100 + i));
  }
  return make_training_data(low, high, window, 8);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "heros_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

double mean_abs(const MatrixXd& m) { return m.cwiseAbs().mean(); }

}  // namespace

TEST_CASE("identity generators with only cycle and identity terms give zero loss") {
  TrainConfig cfg = tiny_config();
  cfg.weights.adv = 0.0;
  cfg.weights.ots = 0.0;
  cfg.weights.mle = 0.0;
  const ModelParams p = init_params(cfg.arch, 1);
  StepReport r;
  CHECK(total_generator_loss(p, random_batch(32, 3, 2), cfg, &r) == 0.0);
  CHECK(r.cyc == 0.0);
  CHECK(r.id == 0.0);
  CHECK(r.adv == 0.0);
}

TEST_CASE("all extensions off is the CycleGAN objective") {
  TrainConfig cfg = tiny_config();
  cfg.ots_on = false;
  cfg.mle_on = false;
  const ModelParams p = randomized(cfg.arch, 3);
  const Batch b = random_batch(32, 3, 4);

  // Independent composition from the forward passes.
  const MatrixXd fh = generator_forward_batch(p, Net::GenLowToHigh, b.low);
  const MatrixXd fl = generator_forward_batch(p, Net::GenHighToLow, b.high);
  double adv = 0.0;
  for (Index i = 0; i < 3; ++i) {
    adv += std::pow(discriminator_forward(p, Net::DiscHigh, fh.col(i)) - 1.0, 2) / 3.0;
    adv += std::pow(discriminator_forward(p, Net::DiscLow, fl.col(i)) - 1.0, 2) / 3.0;
  }
  const double cyc = mean_abs(generator_forward_batch(p, Net::GenHighToLow, fh) - b.low) +
                     mean_abs(generator_forward_batch(p, Net::GenLowToHigh, fl) - b.high);
  const double id = mean_abs(generator_forward_batch(p, Net::GenLowToHigh, b.high) - b.high) +
                    mean_abs(generator_forward_batch(p, Net::GenHighToLow, b.low) - b.low);
  const double expect = 1.0 * adv + 10.0 * cyc + 5.0 * id;

  StepReport r;
  const double total = total_generator_loss(p, b, cfg, &r);
  CHECK(total == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.adv == doctest::Approx(adv).epsilon(1e-12));
  CHECK(r.cyc == doctest::Approx(cyc).epsilon(1e-12));
  CHECK(r.id == doctest::Approx(id).epsilon(1e-12));
  CHECK(r.ots == 0.0);
  CHECK(r.mle == 0.0);
  CHECK(r.sinkhorn_iterations == 0);

  // The weights of disabled terms do not matter.
  TrainConfig other = cfg;
  other.weights.ots = 7.0;
  other.weights.mle = 3.0;
  CHECK(total_generator_loss(p, b, other) == total);
}

TEST_CASE("full objective terms are non-negative and add up") {
  const TrainConfig cfg = tiny_config();
  const ModelParams p = randomized(cfg.arch, 5);
  StepReport r;
  const double total = total_generator_loss(p, random_batch(32, 4, 6), cfg, &r);
  for (double v : {r.adv, r.cyc, r.id, r.ots, r.mle}) CHECK(v >= 0.0);
  CHECK(r.ots > 0.0);
  CHECK(r.mle > 0.0);
  CHECK(r.sinkhorn_iterations > 0);
  CHECK(r.laplace_energy > 0.0);
  const auto& w = cfg.weights;
  CHECK(total == doctest::Approx(w.adv * r.adv + w.cyc * r.cyc + w.id * r.id + w.ots * r.ots + w.mle * r.mle)
                     .epsilon(1e-12));
  CHECK(r.finite());
}

TEST_CASE("feature L2 substitute pairs generated and target features row by row") {
  TrainConfig cfg = tiny_config();
  cfg.ots_on = false;
  cfg.mle_on = false;
  cfg.l1_substitute_on = true;
  cfg.weights = LossWeights{0.0, 0.0, 0.0, 1.0, 0.0};
  const ModelParams p = randomized(cfg.arch, 7);
  const Batch b = random_batch(32, 2, 8);
  double expect = 0.0;
  for (Index i = 0; i < 2; ++i) {
    const MatrixXd fgl = generator_forward(p, Net::GenLowToHigh, b.low.col(i)).features;
    const MatrixXd fh = generator_forward(p, Net::GenHighToLow, b.high.col(i)).features;
    expect += (fgl - fh).rowwise().squaredNorm().sum();
  }
  expect /= 2.0 * cfg.arch.feature_count();
  StepReport r;
  CHECK(total_generator_loss(p, b, cfg, &r) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.ots == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("OTS term matches a plan solved on the generated features") {
  TrainConfig cfg = tiny_config();
  cfg.mle_on = false;
  cfg.weights = LossWeights{0.0, 0.0, 0.0, 1.0, 0.0};
  const ModelParams p = randomized(cfg.arch, 9);
  const Batch b = random_batch(32, 2, 10);
  MatrixXd fl(4, 8), fh(4, 8);
  for (Index i = 0; i < 2; ++i) {
    fl.middleRows(2 * i, 2) = generator_forward(p, Net::GenLowToHigh, b.low.col(i)).features;
    fh.middleRows(2 * i, 2) = generator_forward(p, Net::GenHighToLow, b.high.col(i)).features;
  }
  const TransportPlan plan = sinkhorn(cost_matrix(fl, fh), cfg.sinkhorn);
  const MatrixXd t = barycentric_map(plan, fh, TransportDirection::Forward);
  const MatrixXd ti = barycentric_map(plan, fl, TransportDirection::Inverse);
  const double expect = (fl - t).rowwise().squaredNorm().mean() + (fh - ti).rowwise().squaredNorm().mean();
  CHECK(total_generator_loss(p, b, cfg) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("total generator loss gradient matches central differences") {
  // Window 32 gives feature vectors of dimension 8. The stop-gradient inputs
  // (transport targets, kappa) are held at their values from the base point.
  for (Index window : {16, 32}) {
    CAPTURE(window);
    TrainConfig cfg = tiny_config(window);
    const ModelParams p = randomized(cfg.arch, 11);
    const Batch b = random_batch(window, 2, 12);

    ad::Tape base_tape;
    BoundParams base(base_tape, p, {});
    const DetachedTargets frozen = build_generator_loss(base, b, cfg).detached;
    REQUIRE(frozen.features_low.size() > 0);
    REQUIRE(frozen.kappa_low.size() == 2 * cfg.arch.feature_count());

    const auto r = ad::grad_check(
        [&](ad::Tape&, ad::Node flat) {
          const BoundParams bound(p, flat);
          return build_generator_loss(bound, b, cfg, &frozen).total;
        },
        MatrixXd(p.values));
    CHECK(r.max_rel_error < 1e-3);

    // What training differentiates is exactly this frozen function.
    ad::Tape tape;
    BoundParams trainable(tape, p, std::array{Net::GenLowToHigh, Net::GenHighToLow});
    tape.backward(build_generator_loss(trainable, b, cfg).total);
    VectorXd grad = VectorXd::Zero(p.values.size());
    trainable.accumulate_grad(grad);
    const Index g = p.generator_block();
    CHECK((grad.head(g) - r.analytic.col(0).head(g)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("discriminator loss examples") {
  const ArchConfig arch{32, 2, 2};
  const Batch b = random_batch(32, 3, 13);
  // Zero weights leave only the head bias (the last value of each
  // discriminator block), so D(x) = c for every frame.
  auto constant_disc = [&](double c_high, double c_low) {
    ModelParams p = init_params(arch, 1);
    for (auto [net, c] : {std::pair{Net::DiscHigh, c_high}, std::pair{Net::DiscLow, c_low}}) {
      const auto [off, len] = p.span_of(net);
      p.values.segment(off, len).setZero();
      p.values[off + len - 1] = c;
    }
    return p;
  };
  CHECK(discriminator_loss(constant_disc(0.0, 0.0), b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(discriminator_loss(constant_disc(1.0, 0.0), b) == doctest::Approx(0.5 + 0.5).epsilon(1e-15));
  CHECK(discriminator_loss(constant_disc(0.5, 0.5), b) == doctest::Approx(0.25 + 0.25).epsilon(1e-15));

  // General case against the reported mean scores, fakes equal to reals.
  ad::Tape tape2;
  const ModelParams q = randomized(arch, 14);
  BoundParams bound2(tape2, q, {});
  StepReport r2;
  const ad::Node loss = build_discriminator_loss(bound2, b, b.high, b.low, &r2);
  CHECK(r2.d_real_high == doctest::Approx(r2.d_fake_high).epsilon(1e-15));
  double expect = 0.0;
  for (Index i = 0; i < 3; ++i) {
    const double dh = discriminator_forward(q, Net::DiscHigh, b.high.col(i));
    const double dl = discriminator_forward(q, Net::DiscLow, b.low.col(i));
    expect += (0.5 * (std::pow(dh - 1.0, 2) + dh * dh) + 0.5 * (std::pow(dl - 1.0, 2) + dl * dl)) / 3.0;
  }
  CHECK(loss.scalar() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("discriminator loss is symmetric under swapping domains") {
  const ArchConfig arch{32, 2, 2};
  const ModelParams p = randomized(arch, 15);
  ModelParams swapped = p;
  for (auto [a, b] : {std::pair{Net::GenLowToHigh, Net::GenHighToLow}, std::pair{Net::DiscHigh, Net::DiscLow}}) {
    const auto [oa, la] = p.span_of(a);
    const auto [ob, lb] = p.span_of(b);
    REQUIRE(la == lb);
    swapped.values.segment(oa, la) = p.values.segment(ob, lb);
    swapped.values.segment(ob, lb) = p.values.segment(oa, la);
  }
  const Batch batch = random_batch(32, 3, 16);
  const Batch flipped{batch.high, batch.low};
  CHECK(discriminator_loss(swapped, flipped) == doctest::Approx(discriminator_loss(p, batch)).epsilon(1e-12));
}

TEST_CASE("Adam matches a hand-written update") {
  const VectorXd g1 = (VectorXd(3) << 0.5, -2.0, 1e-3).finished();
  const VectorXd g2 = (VectorXd(3) << -0.1, 0.3, 4.0).finished();
  VectorXd x = VectorXd::Zero(3);
  Adam adam(3, 0.01);
  adam.step(x, g1);
  adam.step(x, g2);

  VectorXd ref = VectorXd::Zero(3), m = VectorXd::Zero(3), v = VectorXd::Zero(3);
  int t = 0;
  for (const VectorXd* g : {&g1, &g2}) {
    ++t;
    m = 0.5 * m + 0.5 * *g;
    v = 0.999 * v + 0.001 * g->cwiseProduct(*g);
    const VectorXd mh = m / (1.0 - std::pow(0.5, t));
    const VectorXd vh = v / (1.0 - std::pow(0.999, t));
    ref -= 0.01 * mh.cwiseQuotient((vh.array().sqrt() + 1e-8).matrix());
  }
  CHECK((x - ref).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK_THROWS_AS(adam.step(x, VectorXd::Zero(2)), ShapeError);
}

TEST_CASE("make_training_data normalizes by the high-cost maximum") {
  const TrainingData d = tiny_data(32, 1);
  CHECK(d.scale == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(d.high.cwiseAbs().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.low.cwiseAbs().maxCoeff() <= 0.5 + 1e-12);
  // 3 signals x 2 axes x ((800 - 32) / 8 + 1) windows
  CHECK(d.high.cols() == 3 * 2 * 97);
  CHECK(d.low.cols() == d.high.cols());
  CHECK(d.dt == 0.005);

  CHECK_THROWS_AS(make_training_data({}, {Signal::make(MatrixXd::Ones(1, 64), 0.005)}, 32, 8), ValidationError);
  CHECK_THROWS_AS(make_training_data({Signal::make(MatrixXd::Ones(1, 16), 0.005)},
                                     {Signal::make(MatrixXd::Ones(1, 16), 0.005)}, 32, 8),
                  ValidationError);
  CHECK_THROWS_AS(make_training_data({Signal::make(MatrixXd::Ones(1, 64), 0.01)},
                                     {Signal::make(MatrixXd::Ones(1, 64), 0.005)}, 32, 8),
                  ValidationError);
}

TEST_CASE("list_signals") {
  const auto dir = scratch("list");
  CHECK_THROWS_AS(list_signals(dir / "missing"), IoError);
  CHECK_THROWS_AS(list_signals(dir), IoError);
  std::ofstream(dir / "b.csv") << "x";
  std::ofstream(dir / "a.csv") << "x";
  std::ofstream(dir / "notes.txt") << "x";
  const auto files = list_signals(dir);
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "a.csv");
  CHECK(files[1].filename() == "b.csv");
}

TEST_CASE("train with zero steps returns the initialization") {
  const auto dir = scratch("zero");
  TrainConfig cfg = tiny_config();
  cfg.steps = 0;
  cfg.seed = 21;
  cfg.checkpoint_out = dir / "init.ckpt";
  const TrainingData data = tiny_data(32, 2);
  const Checkpoint ck = train(cfg, data);
  CHECK(ck.step == 0);
  CHECK(ck.params.values == init_params(cfg.arch, 21).values);
  CHECK(ck.scale == data.scale);
  CHECK(load_checkpoint(cfg.checkpoint_out).params.values == ck.params.values);
}

TEST_CASE("train is deterministic and reports every step") {
  const auto dir = scratch("determinism");
  TrainConfig cfg = tiny_config();
  cfg.steps = 6;
  cfg.checkpoint_every = 4;
  const TrainingData data = tiny_data(32, 3);

  cfg.checkpoint_out = dir / "a.ckpt";
  std::ostringstream ra, rb;
  int calls = 0;
  const Checkpoint a = train(cfg, data, &ra, {{"run", 1}}, [&](const StepReport& r, const ModelParams&) {
    CHECK(r.step == static_cast<std::uint64_t>(++calls));
    return true;
  });
  cfg.checkpoint_out = dir / "b.ckpt";
  const Checkpoint b = train(cfg, data, &rb, {{"run", 1}});
  CHECK(calls == 6);
  CHECK(a.step == 6);
  CHECK(a.params.values != init_params(cfg.arch, cfg.seed).values);
  CHECK(a.params.values == b.params.values);
  CHECK(ra.str() == rb.str());
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  CHECK(load_checkpoint(dir / "a.ckpt").config == nlohmann::json{{"run", 1}});

  std::istringstream lines(ra.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == ++count);
    for (const char* key : {"adv", "cyc", "id", "ots", "mle", "generator", "discriminator"})
      CHECK(std::isfinite(j["loss"][key].get<double>()));
    CHECK(j["loss"]["ots"].get<double>() > 0.0);
  }
  CHECK(count == 6);

  cfg.seed = 1;
  cfg.checkpoint_out.clear();
  CHECK(train(cfg, data).params.values != a.params.values);
}

TEST_CASE("checkpoints carry averaged generator weights") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 5;
  cfg.ema_decay = 0.6;
  const TrainingData data = tiny_data(32, 8);
  const ModelParams init = init_params(cfg.arch, cfg.seed);
  const Index g = init.generator_block();
  VectorXd average = init.values.head(g);
  VectorXd last;
  const Checkpoint ck = train(cfg, data, nullptr, {}, [&](const StepReport&, const ModelParams& p) {
    average = 0.6 * average + 0.4 * p.values.head(g);
    last = p.values;
    return true;
  });
  CHECK((ck.params.values.head(g) - average).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(ck.params.values.tail(last.size() - g) == last.tail(last.size() - g));
  CHECK(ck.params.values.head(g) != last.head(g));

  cfg.ema_decay = 0.0;
  const Checkpoint raw = train(cfg, data, nullptr, {}, [&](const StepReport&, const ModelParams& p) {
    last = p.values;
    return true;
  });
  CHECK(raw.params.values == last);
  cfg.ema_decay = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("train stops early when the callback says so") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 10;
  const Checkpoint ck = train(cfg, tiny_data(32, 4), nullptr, {}, [](const StepReport& r, const ModelParams&) {
    return r.step < 3;
  });
  CHECK(ck.step == 3);
}

TEST_CASE("toggled-off terms report exactly zero during training") {
  TrainConfig cfg = tiny_config();
  cfg.ots_on = false;
  cfg.mle_on = false;
  cfg.steps = 3;
  std::ostringstream out;
  train(cfg, tiny_data(32, 5), &out);
  std::istringstream lines(out.str());
  std::string line;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["loss"]["ots"].get<double>() == 0.0);
    CHECK(j["loss"]["mle"].get<double>() == 0.0);
  }
}

TEST_CASE("divergence saves a diagnostic checkpoint and throws") {
  const auto dir = scratch("diverge");
  TrainConfig cfg = tiny_config();
  cfg.steps = 5;
  cfg.lr_g = 1e300;
  cfg.checkpoint_out = dir / "run.ckpt";
  CHECK_THROWS_AS(train(cfg, tiny_data(32, 6)), NumericError);
  CHECK(std::filesystem::exists(dir / "run.ckpt.diverged"));
  CHECK_FALSE(std::filesystem::exists(dir / "run.ckpt"));
}

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_config();
  cfg.l1_substitute_on = true;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.weights.cyc = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.lr_d = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  CHECK_THROWS_AS(train(cfg, tiny_data(64, 1)), ShapeError);
}

TEST_CASE("enhance with identity generators returns the input") {
  Checkpoint ck;
  ck.params = init_params(ArchConfig{64, 2, 2}, 1);
  ck.scale = 12.0;
  Rng rng(17);
  for (Index n : {64, 65, 96, 127, 128, 200, 301}) {
    CAPTURE(n);
    MatrixXd m(3, n);
    for (Index i = 0; i < m.size(); ++i) m(i) = 4.0 * rng.normal();
    const Signal s = Signal::make(m, 0.005);
    const Signal e = enhance(ck, s);
    CHECK(e.length() == n);
    CHECK(e.axes() == 3);
    CHECK(e.dt == s.dt);
    CHECK((e.samples - s.samples).cwiseAbs().maxCoeff() <= 1e-10);
  }
  CHECK_THROWS_AS(enhance(ck, Signal::make(MatrixXd::Zero(1, 63), 0.005)), ValidationError);
  ck.scale = 0.0;
  CHECK_THROWS_AS(enhance(ck, Signal::make(MatrixXd::Zero(1, 64), 0.005)), ValidationError);
}

TEST_CASE("enhance applies the generator window by window") {
  // A generator whose correction is a constant c (bias of the last layer)
  // shifts every sample by c * scale, whatever the overlap weighting.
  Checkpoint ck;
  ck.params = init_params(ArchConfig{32, 2, 2}, 1);
  ck.scale = 2.0;
  const auto [off, len] = ck.params.span_of(Net::GenLowToHigh);
  ck.params.values[off + len - 1] = 0.25;  // final transposed-conv bias
  MatrixXd m = MatrixXd::Zero(2, 90);
  const Signal e = enhance(ck, Signal::make(m, 0.01));
  CHECK((e.samples.array() - 0.5).abs().maxCoeff() <= 1e-12);
}
