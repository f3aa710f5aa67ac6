#include "heros/error.hpp"
#include "heros/ot.hpp"
#include "heros/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <utility>

using namespace heros;
using Eigen::MatrixXd;

namespace {

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  return m;
}

const double e2 = std::exp(2.0);

// Cost whose entropic plan is known in closed form: C = eps * (-log P) plus
// row and column offsets, with P doubly stochastic. The plan is P / n.
struct KnownPlan {
  MatrixXd cost;
  MatrixXd plan;
};

KnownPlan known_plan(Eigen::Index n, double eps, double off_weight, double floor, Rng& rng) {
  MatrixXd p = MatrixXd::Constant(n, n, floor);
  for (Eigen::Index i = 0; i < n; ++i) {
    p(i, i) += 1.0 - 2.0 * off_weight;
    p(i, (i + 1) % n) += off_weight;
    p(i, (i + 3) % n) += off_weight;
  }
  MatrixXd cost = -eps * p.array().log().matrix();
  for (Eigen::Index i = 0; i < n; ++i) cost.row(i).array() += rng.uniform();
  for (Eigen::Index j = 0; j < n; ++j) cost.col(j).array() += rng.uniform();
  return {cost, p / p.sum()};
}

}  // namespace

TEST_CASE("cost_matrix of unit vectors") {
  MatrixXd lo(3, 2), hi(3, 2);
  lo << 1, 0, 0, 1, 2, 0;
  hi << 3, 0, 0, -1, -1, 0;
  const MatrixXd c = cost_matrix(lo, hi);
  CHECK(c(0, 0) == doctest::Approx(1.0).epsilon(1e-15));       // identical direction
  CHECK(c(1, 1) == doctest::Approx(e2).epsilon(1e-15));        // antipodal
  CHECK(c(0, 1) == doctest::Approx(std::numbers::e).epsilon(1e-15));  // orthogonal
  CHECK(c(2, 2) == doctest::Approx(e2).epsilon(1e-15));
  CHECK((c.array() >= 1.0).all());
  CHECK((c.array() <= e2).all());

  MatrixXd zero = lo;
  zero.row(1).setZero();
  CHECK_THROWS_AS(cost_matrix(zero, hi), DegenerateError);
  CHECK_THROWS_AS(cost_matrix(lo, MatrixXd(2, 2)), ShapeError);
}

TEST_CASE("cost_matrix stays in [1, e^2] on random features") {
  Rng rng(1);
  const MatrixXd c = cost_matrix(random_matrix(32, 16, rng), random_matrix(32, 16, rng));
  CHECK(c.minCoeff() >= 1.0);
  CHECK(c.maxCoeff() <= e2);
}

TEST_CASE("sinkhorn on a constant 2x2 cost is exactly uniform") {
  const TransportPlan p = sinkhorn(MatrixXd::Constant(2, 2, 3.0));
  CHECK(p.converged);
  CHECK((p.gamma.array() - 0.25).abs().maxCoeff() <= 1e-9);
}

TEST_CASE("sinkhorn concentrates on the optimal permutation at small eps") {
  MatrixXd c(2, 2);
  c << 1, e2, e2, 1;
  SinkhornOptions opt;
  opt.eps = 0.01;
  const TransportPlan p = sinkhorn(c, opt);
  CHECK(p.converged);
  CHECK(p.gamma.trace() >= 0.99);
  CHECK(std::abs(p.gamma(0, 0) - 0.5) <= 1e-6);
  CHECK(std::abs(p.gamma(1, 1) - 0.5) <= 1e-6);
  CHECK(p.gamma(0, 1) <= 1e-6);

  MatrixXd f(2, 3);
  f << 1, 2, 3, -4, 5, 0.5;
  const MatrixXd t = barycentric_map(p, f, TransportDirection::Forward);
  CHECK((t - f).cwiseAbs().maxCoeff() <= 1e-4);
}

TEST_CASE("converged plans meet their marginals") {
  Rng rng(2);
  for (double eps : {0.05, 0.1, 0.5}) {
    CAPTURE(eps);
    const MatrixXd c = cost_matrix(random_matrix(24, 8, rng), random_matrix(24, 8, rng));
    SinkhornOptions opt;
    opt.eps = eps;
    opt.max_iter = 20000;
    const TransportPlan p = sinkhorn(c, opt);
    REQUIRE(p.converged);
    CHECK(p.residual < 1e-6);
    CHECK((p.row_marginal.array() - 1.0 / 24).abs().maxCoeff() < 1e-6);
    CHECK((p.col_marginal.array() - 1.0 / 24).abs().maxCoeff() < 1e-6);
    CHECK((p.gamma.array() >= 0.0).all());
    CHECK(p.gamma.sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("sinkhorn plan is invariant to a constant cost shift") {
  Rng rng(3);
  const MatrixXd c = cost_matrix(random_matrix(16, 8, rng), random_matrix(16, 8, rng));
  SinkhornOptions opt;
  opt.max_iter = 5000;
  opt.tol = 1e-12;
  const TransportPlan a = sinkhorn(c, opt);
  const TransportPlan b = sinkhorn((c.array() + 5.0).matrix(), opt);
  CHECK((a.gamma - b.gamma).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("sinkhorn recovers a closed-form plan on both code paths") {
  Rng rng(4);
  // off-diagonal mass 0.2: kernel range stays inside the direct-scaling path
  const KnownPlan mild = known_plan(7, 0.05, 0.2, 1e-3, rng);
  // a 1e-120 floor puts range / eps near 276, which selects the log domain
  const KnownPlan sharp = known_plan(7, 0.01, 0.1, 1e-120, rng);
  REQUIRE((mild.cost.maxCoeff() - mild.cost.minCoeff()) / 0.05 <= 200.0);
  REQUIRE((sharp.cost.maxCoeff() - sharp.cost.minCoeff()) / 0.01 > 200.0);
  for (const auto& [k, eps] : {std::pair{&mild, 0.05}, std::pair{&sharp, 0.01}}) {
    CAPTURE(eps);
    const TransportPlan p = sinkhorn(k->cost, SinkhornOptions{eps, 1e-14, 10000});
    REQUIRE(p.converged);
    CHECK((p.gamma - k->plan).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("sinkhorn reports non-convergence instead of failing") {
  Rng rng(5);
  const MatrixXd c = cost_matrix(random_matrix(32, 8, rng), random_matrix(32, 8, rng));
  SinkhornOptions opt;
  opt.eps = 0.01;
  opt.max_iter = 2;
  const TransportPlan p = sinkhorn(c, opt);
  CHECK_FALSE(p.converged);
  CHECK(p.iterations == 2);
  CHECK(p.residual > opt.tol);
  CHECK(p.gamma.allFinite());
}

TEST_CASE("sinkhorn input validation") {
  CHECK_THROWS_AS(sinkhorn(MatrixXd::Ones(2, 3)), ShapeError);
  MatrixXd bad = MatrixXd::Ones(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(sinkhorn(bad), NumericError);
  CHECK_THROWS_AS(sinkhorn(MatrixXd::Ones(2, 2), SinkhornOptions{0.0, 1e-6, 10}), ValidationError);
}

TEST_CASE("barycentric_map special plans") {
  Rng rng(6);
  const MatrixXd f = random_matrix(4, 3, rng);
  TransportPlan diag;
  diag.gamma = MatrixXd::Identity(4, 4) / 4.0;
  CHECK((barycentric_map(diag, f, TransportDirection::Forward) - f).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((barycentric_map(diag, f, TransportDirection::Inverse) - f).cwiseAbs().maxCoeff() <= 1e-15);

  TransportPlan uniform;
  uniform.gamma = MatrixXd::Constant(4, 4, 1.0 / 16);
  const MatrixXd t = barycentric_map(uniform, f, TransportDirection::Forward);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK((t.row(i) - f.colwise().mean()).cwiseAbs().maxCoeff() <= 1e-15);

  TransportPlan hole = diag;
  hole.gamma(2, 2) = 0.0;
  CHECK_THROWS_AS(barycentric_map(hole, f, TransportDirection::Forward), DegenerateError);
  CHECK_THROWS_AS(barycentric_map(diag, random_matrix(3, 3, rng), TransportDirection::Forward), ShapeError);
}

TEST_CASE("barycentric_map inverse direction uses plan columns") {
  TransportPlan p;
  p.gamma.resize(2, 2);
  p.gamma << 0.3, 0.1, 0.0, 0.6;
  MatrixXd f(2, 1);
  f << 1.0, 5.0;
  const MatrixXd fwd = barycentric_map(p, f, TransportDirection::Forward);
  const MatrixXd inv = barycentric_map(p, f, TransportDirection::Inverse);
  CHECK(fwd(0, 0) == doctest::Approx((0.3 * 1 + 0.1 * 5) / 0.4));
  CHECK(fwd(1, 0) == doctest::Approx(5.0));
  CHECK(inv(0, 0) == doctest::Approx(1.0));
  CHECK(inv(1, 0) == doctest::Approx((0.1 * 1 + 0.6 * 5) / 0.7));
}

TEST_CASE("ots_loss values") {
  Rng rng(7);
  const MatrixXd fl = random_matrix(4, 8, rng), fh = random_matrix(4, 8, rng);
  const TransportPlan plan = sinkhorn(cost_matrix(fl, fh));
  const MatrixXd t = barycentric_map(plan, fh, TransportDirection::Forward);
  const MatrixXd ti = barycentric_map(plan, fl, TransportDirection::Inverse);

  ad::Tape tape;
  CHECK(ots_loss(tape.constant(t), tape.constant(ti), fl, fh).scalar() == doctest::Approx(0.0).epsilon(1e-12));

  Eigen::RowVectorXd delta(8);
  for (Eigen::Index k = 0; k < 8; ++k) delta[k] = 0.1 * static_cast<double>(k) - 0.3;
  const MatrixXd shifted = t.rowwise() + delta;
  const double loss = ots_loss(tape.constant(shifted), tape.constant(ti), fl, fh).scalar();
  CHECK(loss == doctest::Approx(delta.squaredNorm()).epsilon(1e-12));

  const double random = ots_loss(tape.constant(random_matrix(4, 8, rng)), tape.constant(random_matrix(4, 8, rng)), fl, fh).scalar();
  CHECK(random > 0.0);
}

TEST_CASE("ots_loss gradient matches central differences") {
  Rng rng(8);
  const MatrixXd fl = random_matrix(4, 8, rng), fh = random_matrix(4, 8, rng);
  MatrixXd point(8, 8);
  point << random_matrix(4, 8, rng), random_matrix(4, 8, rng);
  const auto r = ad::grad_check(
      [&](ad::Tape&, ad::Node x) {
        return ots_loss(ad::slice(x, 0, 0, 4, 8), ad::slice(x, 4, 0, 4, 8), fl, fh);
      },
      point);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("l2_feature_loss pairs rows directly") {
  MatrixXd a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 1, 0, 0, 4;
  ad::Tape t;
  CHECK(l2_feature_loss(t.constant(a), b).scalar() == doctest::Approx((4.0 + 9.0) / 2.0));
}

TEST_CASE("float instantiation of the templates") {
  Eigen::MatrixXf lo(2, 2), hi(2, 2);
  lo << 1, 0, 0, 1;
  hi << 1, 0, 0, 1;
  const Eigen::MatrixXf c = cost_matrix(lo, hi);
  SinkhornOptions opt;
  opt.tol = 1e-4;
  const auto plan = sinkhorn(c, opt);
  CHECK(plan.converged);
  CHECK(plan.gamma.trace() > 0.9f);
}
