#include "heros/ot.hpp"

namespace heros {

void SinkhornOptions::validate() const {
  if (!(eps > 0.0)) throw ValidationError("sinkhorn eps must be > 0");
  if (!(tol > 0.0)) throw ValidationError("sinkhorn tol must be > 0");
  if (max_iter < 1) throw ValidationError("sinkhorn max_iter must be >= 1");
}

namespace {

// mean over rows of the squared row distance to a constant target.
ad::Node mean_row_sq_dist(ad::Node x, const Eigen::MatrixXd& target) {
  const ad::Node diff = ad::sub(x, x.tape()->constant(target));
  return ad::scale(ad::dot(diff, diff), 1.0 / static_cast<double>(x.rows()));
}

}  // namespace

ad::Node ots_loss(ad::Node gen_low, ad::Node gen_high, const Eigen::MatrixXd& features_low,
                  const Eigen::MatrixXd& features_high, const SinkhornOptions& opt, TransportPlan* plan_out) {
  if (gen_low.rows() != features_low.rows() || gen_low.cols() != features_low.cols() ||
      gen_high.rows() != features_high.rows() || gen_high.cols() != features_high.cols())
    throw ShapeError("ots_loss: all feature matrices must be N x d");
  TransportPlan plan = sinkhorn(cost_matrix(features_low, features_high), opt);
  const Eigen::MatrixXd to_low = barycentric_map(plan, features_high, TransportDirection::Forward);
  const Eigen::MatrixXd to_high = barycentric_map(plan, features_low, TransportDirection::Inverse);
  ad::Node loss = ad::add(mean_row_sq_dist(gen_low, to_low), mean_row_sq_dist(gen_high, to_high));
  if (plan_out) *plan_out = std::move(plan);
  return loss;
}

ad::Node l2_feature_loss(ad::Node gen_low, const Eigen::MatrixXd& features_high) {
  if (gen_low.rows() != features_high.rows() || gen_low.cols() != features_high.cols())
    throw ShapeError("l2_feature_loss: feature matrices must both be N x d");
  return mean_row_sq_dist(gen_low, features_high);
}

}  // namespace heros
