#pragma once

#include <cstdint>
#include <vector>

#include "surfbayes/types.hpp"

namespace surfbayes {

// Largest vertex set whose field values jointly exceed gamma with empirical
// posterior probability >= 1 - alpha.
struct ExcursionResult {
  std::vector<std::uint8_t> active;
  double gamma = 0.0;
  double alpha = 0.05;
  Vec joint_prob_trace;  // joint probability after each greedy inclusion
  int n_samples = 0;

  int count() const {
    int c = 0;
    for (auto a : active) c += a;
    return c;
  }
};

// samples: H x V posterior draws. Vertices are ordered by decreasing
// marginal exceedance (ties by index) and the candidate prefix grows while
// the empirical joint probability stays >= 1 - alpha.
ExcursionResult excursion_set(const Mat& samples, double gamma, double alpha);

// Masks for several thresholds on the same draws; processed in ascending
// gamma order and intersected cumulatively so the masks nest.
std::vector<ExcursionResult> excursion_sets_nested(const Mat& samples,
                                                   const std::vector<double>& gammas,
                                                   double alpha);

// 1 - Phi((gamma - mu) / sd)
double marginal_exceedance(double mu, double sd, double gamma);

// One-sided t-tests of beta > gamma with Benjamini-Hochberg at level q.
std::vector<std::uint8_t> classical_activation(const Vec& beta_hat,
                                               const Vec& se, int df,
                                               double gamma, double q = 0.01);

// Benjamini-Hochberg step-up rejections for arbitrary p-values.
std::vector<std::uint8_t> benjamini_hochberg(const Vec& pvalues, double q);

double student_t_sf(double t, int df);  // P(T_df > t)

double rmse(const Vec& estimate, const Vec& truth);

// 2 |A n B| / (|A| + |B|); both-empty defined as 1.
double dice(const std::vector<std::uint8_t>& a,
            const std::vector<std::uint8_t>& b);

}  // namespace surfbayes
