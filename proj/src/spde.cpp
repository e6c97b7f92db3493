#include "surfbayes/spde.hpp"

#include "surfbayes/rng.hpp"

namespace surfbayes {

SpMat build_qtilde(double kappa2, const FemMatrices& fem) {
  if (!(kappa2 > 0.0) || !std::isfinite(kappa2))
    throw ValidationError("kappa2 must be positive and finite");
  // sparse sums keep the union of stored entries, so the pattern is the
  // same for every kappa2 and one symbolic analysis serves them all
  SpMat q = kappa2 * fem.C + 2.0 * fem.G + (1.0 / kappa2) * fem.GCinvG;
  q.makeCompressed();
  return q;
}

PrecisionOperator build_precision(double kappa2, double phi,
                                  const FemMatrices& fem) {
  if (!(phi > 0.0) || !std::isfinite(phi))
    throw ValidationError("phi must be positive and finite");
  PrecisionOperator op;
  op.qtilde = build_qtilde(kappa2, fem);
  op.scale = 1.0 / (kFourPi * phi);
  return op;
}

double log_det_spd(const SpMat& a) {
  SparseCholesky chol;
  chol.compute(a);
  return chol.log_det();
}

double marginal_variance(double kappa2, double tau2) {
  if (!(kappa2 > 0.0) || !(tau2 > 0.0))
    throw ValidationError("kappa2 and tau2 must be positive");
  return 1.0 / (kFourPi * kappa2 * tau2);
}

double tau2_from(double kappa2, double phi) {
  if (!(kappa2 > 0.0) || !(phi > 0.0))
    throw ValidationError("kappa2 and phi must be positive");
  return 1.0 / (kFourPi * kappa2 * phi);
}

Mat sample_gaussian_field(const SparseCholesky& factor, const Vec& mean,
                          std::uint64_t seed, int count) {
  const int n = factor.dim();
  if (mean.size() != n) throw ValidationError("mean has wrong size");
  Rng rng(seed);
  Mat out(n, count);
  Vec z(n);
  for (int h = 0; h < count; ++h) {
    for (int i = 0; i < n; ++i) z(i) = rng.normal();
    out.col(h) = mean + factor.solve_factor_transpose(z);
  }
  return out;
}

Mat sample_gaussian_field(const SpMat& precision, const Vec& mean,
                          std::uint64_t seed, int count) {
  SparseCholesky chol;
  chol.compute(precision);
  return sample_gaussian_field(chol, mean, seed, count);
}

}  // namespace surfbayes
