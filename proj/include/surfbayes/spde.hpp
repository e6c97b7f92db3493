#pragma once

#include <cstdint>
#include <memory>

#include "surfbayes/fem.hpp"
#include "surfbayes/sparse_chol.hpp"
#include "surfbayes/types.hpp"

namespace surfbayes {

inline constexpr double kFourPi = 4.0 * 3.14159265358979323846;

// EM state vector theta = (kappa2_1..K, phi_1..K, sigma2).
struct Hyperparameters {
  Vec kappa2;
  Vec phi;
  double sigma2 = 1.0;

  int K() const { return static_cast<int>(kappa2.size()); }

  bool valid() const {
    if (kappa2.size() != phi.size()) return false;
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) return false;
    for (int k = 0; k < K(); ++k) {
      if (!(kappa2(k) > 0.0) || !std::isfinite(kappa2(k))) return false;
      if (!(phi(k) > 0.0) || !std::isfinite(phi(k))) return false;
    }
    return true;
  }

  Vec to_vector() const {
    Vec v(2 * K() + 1);
    v << kappa2, phi, sigma2;
    return v;
  }

  static Hyperparameters from_vector(const Vec& v) {
    const int K = (static_cast<int>(v.size()) - 1) / 2;
    Hyperparameters t;
    t.kappa2 = v.head(K);
    t.phi = v.segment(K, K);
    t.sigma2 = v(2 * K);
    return t;
  }
};

// Qtilde(kappa2) = kappa2*C + 2*G + kappa2^-1 * G C^-1 G. The stored pattern
// is the union pattern of the three terms and does not depend on kappa2.
SpMat build_qtilde(double kappa2, const FemMatrices& fem);

// Q = Qtilde / (4 pi phi), kept in factored form (scale * Qtilde).
struct PrecisionOperator {
  SpMat qtilde;
  double scale = 1.0;  // 1 / (4 pi phi)
  SpMat q() const { return SpMat(scale * qtilde); }
};

PrecisionOperator build_precision(double kappa2, double phi,
                                  const FemMatrices& fem);

// log-determinant of a sparse SPD matrix (factorize + sum of log pivots)
double log_det_spd(const SpMat& a);

// Marginal field variance phi = (4 pi kappa2 tau2)^-1 and its inverse map.
double marginal_variance(double kappa2, double tau2);
double tau2_from(double kappa2, double phi);

// Draws x = mean + L^-T z with LL^T (LDL^T) factoring the precision;
// deterministic given seed. Returns dim x count.
Mat sample_gaussian_field(const SpMat& precision, const Vec& mean,
                          std::uint64_t seed, int count);
Mat sample_gaussian_field(const SparseCholesky& factor, const Vec& mean,
                          std::uint64_t seed, int count);

}  // namespace surfbayes
