#include "heros/mle.hpp"

namespace heros {

void MleOptions::validate() const {
  if (!(kappa_min > 0.0) || !(kappa_max >= kappa_min)) throw ValidationError("mle kappa bounds must satisfy 0 < min <= max");
  if (!(energy_prescale > 0.0) || !std::isfinite(energy_prescale))
    throw ValidationError("mle.energy_prescale must be positive and finite");
}

LaplaceEnergy LaplaceEnergy::from_raw(double raw) {
  if (!(raw >= 0.0)) throw ValidationError("Laplace energy must be >= 0");
  return {raw, 1.0 / (1.0 + std::exp(-raw))};
}

double r_mle_normalized(double e, double kappa) { return -std::log(e) - kappa * std::log1p(-e); }

namespace {
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
}  // namespace

double r_mle(double raw_energy, double kappa) {
  // -log sigmoid(E) = softplus(-E); -log(1 - sigmoid(E)) = softplus(E).
  return softplus(-raw_energy) + kappa * softplus(raw_energy);
}

ad::Node r_mle(ad::Node raw_energy, const Eigen::VectorXd& kappa, double energy_prescale) {
  if (raw_energy.cols() != 1 || raw_energy.rows() != kappa.size())
    throw ShapeError("r_mle: energy must be M x 1 with one kappa per row");
  ad::Tape& t = *raw_energy.tape();
  const ad::Node e = ad::scale(raw_energy, energy_prescale);
  const ad::Node low = ad::softplus(ad::scale(e, -1.0));
  const ad::Node high = ad::mul(t.constant(kappa), ad::softplus(e));
  return ad::add(low, high);
}

ad::Node mle_loss(ad::Node features, const MleOptions& opt, MleStats* stats, const Eigen::VectorXd* fixed_kappa) {
  opt.validate();
  const Eigen::Index rows = features.rows(), d = features.cols();
  if (d < 4) throw ValidationError("mle_loss: feature dimension must be >= 4");
  ad::Tape& t = *features.tape();

  Eigen::VectorXd kappa(rows);
  MleStats local;
  if (fixed_kappa) {
    if (fixed_kappa->size() != rows) throw ShapeError("mle_loss: need one kappa per feature row");
    if (!(fixed_kappa->array() > 0.0).all()) throw ValidationError("mle_loss: kappa must be > 0");
    kappa = *fixed_kappa;
  } else {
    const Eigen::MatrixXd& fv = features.value();
    for (Eigen::Index i = 0; i < rows; ++i) {
      try {
        kappa[i] = kurtosis_kappa(fv.row(i), opt.kappa_min, opt.kappa_max);
      } catch (const DegenerateError&) {
        kappa[i] = 1.0;
        ++local.degenerate_rows;
      }
    }
  }

  // Second differences as a product with a d x (d-2) stencil, then row sums of squares.
  Eigen::MatrixXd stencil = Eigen::MatrixXd::Zero(d, d - 2);
  for (Eigen::Index j = 0; j < d - 2; ++j) {
    stencil(j, j) = 1.0;
    stencil(j + 1, j) = -2.0;
    stencil(j + 2, j) = 1.0;
  }
  const ad::Node second = ad::matmul(features, t.constant(std::move(stencil)));
  const ad::Node energy = ad::matmul(ad::mul(second, second), t.constant(Eigen::VectorXd::Ones(d - 2)));

  if (stats) {
    local.mean_raw_energy = energy.value().mean();
    local.mean_kappa = kappa.mean();
    local.kappa = kappa;
    *stats = std::move(local);
  }
  return ad::mean(r_mle(energy, kappa, opt.energy_prescale));
}

}  // namespace heros
