#pragma once

#include <vector>

#include "surfbayes/em.hpp"
#include "surfbayes/inference.hpp"

namespace surfbayes {

// theta_G = sum_m lambda_m theta_m on the raw scale (weights normalized).
Hyperparameters combine_theta(const std::vector<Hyperparameters>& thetas,
                              Vec lambda = Vec());

// Weights proportional to per-subject scan length.
Vec scan_length_weights(const std::vector<SubjectInput>& subjects);

// Same machinery as the E-step at fixed group hyperparameters; no trace
// summaries are computed.
PosteriorField recompute_posterior(const SubjectInput& input,
                                   const Hyperparameters& theta_g);

// Linear combination over (subject, task) fields applied per vertex to
// stacked draws; the I_N (x) c' Kronecker matrix is never materialized.
struct Contrast {
  Vec weights;  // length K*M, index m*K + k
  int n_subjects = 0;
  int n_tasks = 0;

  // draws: per subject an H x (N*K) matrix with column layout k*N + v
  Mat apply(const std::vector<Mat>& subject_draws, int n_locations) const;
};

Contrast build_contrast(int n_subjects, int n_tasks, const Vec& weights);
// The paper's default: equally weighted average of one task across subjects.
Contrast average_task_contrast(int n_subjects, int n_tasks, int task);

struct GroupResult {
  Hyperparameters theta_g;
  Vec lambda;
  Vec beta_star_mean;  // N, empirical mean of the contrast draws
  std::vector<ExcursionResult> excursions;  // one per gamma
  int n_samples = 0;
};

// Recompute each subject posterior under theta_G, draw H samples per subject
// (seed schedule derived per subject), apply the contrast, and run the
// excursion method for every gamma.
GroupResult group_inference(const std::vector<SubjectInput>& subjects,
                            const std::vector<Hyperparameters>& subject_thetas,
                            const Contrast& contrast,
                            const std::vector<double>& gammas, double alpha,
                            int n_samples, std::uint64_t seed,
                            Vec lambda = Vec());

}  // namespace surfbayes
