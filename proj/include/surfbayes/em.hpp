#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "surfbayes/fem.hpp"
#include "surfbayes/preprocess.hpp"
#include "surfbayes/spde.hpp"

namespace surfbayes {

// Massive-univariate baseline: per-location OLS.
struct ClassicalFit {
  Mat beta;       // N x K (NaN at masked locations)
  Mat se;         // N x K
  Vec resid_var;  // N, df = T - K
  std::vector<std::uint8_t> valid;
};

ClassicalFit classical_glm(const Mat& y, const std::vector<Mat>& design,
                           const std::vector<std::uint8_t>& valid = {});

// Per-subject sufficient statistics for the stacked model y = X Psi w + e.
// X is never materialized: X_k is block-diagonal over locations, so X'X
// reduces to K x K blocks of diagonals and X'y to per-task N-vectors.
struct SubjectInput {
  int T = 0, N = 0, K = 0, n = 0;
  int n_valid = 0;          // locations contributing to the likelihood
  double yty = 0.0;
  Mat xty;                  // N x K, entry (v,k) = x_{v,k}' y_v
  std::vector<Mat> xtx;     // N entries of K x K, x_v' x_v
  SpMat psi;                // N x n
  SpMat xtx_psi;            // M = Psi' X' X Psi, nK x nK
  Vec psit_xty;             // Psi' X' y, nK
  const FemMatrices* fem = nullptr;
  int dim() const { return n * K; }
};

SubjectInput build_subject_input(const PreprocessedSubject& data,
                                 const Projector& projector,
                                 const FemMatrices& fem);

// Summaries of E(w w' | y, theta) = Sigma + mu mu' against the FEM matrices,
// stored per task so Tr(Qtilde(k2) E) can be re-evaluated for any kappa2 via
// the three-trace decomposition without new solves.
struct TraceSummaries {
  Vec tr_c;    // K: Tr(C E_kk)
  Vec tr_g;    // K: Tr(G E_kk)
  Vec tr_gcg;  // K: Tr(G C^-1 G E_kk)
  double tr_xtx = 0.0;  // Tr(Psi'X'X Psi E) over the full block vector
  bool exact = false;

  double qtilde_trace(int k, double kappa2) const {
    return kappa2 * tr_c(k) + 2.0 * tr_g(k) + tr_gcg(k) / kappa2;
  }
};

struct PosteriorField {
  Vec mu;                                  // nK
  SpMat precision;                         // Sigma^-1 = Q + sigma^-2 M
  std::shared_ptr<SparseCholesky> factor;  // factorization of Sigma^-1
  TraceSummaries traces;
};

enum class TraceMode { kAuto, kExact, kHutchinson };

struct EmOptions {
  double epsilon = 1e-3;  // stopping tolerance on mean squared theta step
  int max_iter = 100;
  bool squarem = true;
  int ns = 50;  // Hutchinson probe count
  TraceMode trace_mode = TraceMode::kAuto;
  int exact_trace_max_dim = 1500;  // exact traces whenever n*K <= this
  double kappa2_lo = 1e-4;
  double kappa2_hi = 1e4;
  double kappa2_tol = 1e-4;  // relative tolerance of the 1-D kappa2 search
  std::uint64_t seed = 0;
  bool log_scale_metric = false;  // optional metric on log(theta), off for
                                  // fidelity to the stated stopping rule
};

// Reusable symbolic analysis for the n x n Qtilde pattern (shared by every
// kappa2 candidate of every task and iteration).
struct EmWorkspace {
  SparseCholesky qtilde_solver;
  bool qtilde_analyzed = false;
};

// Rademacher probe solves shared by every trace target of one EM iteration.
struct TraceProbes {
  Mat v;  // dim x ns, +-1 entries
  Mat p;  // Sigma V (solves of Sigma^-1 P = V)
};

TraceProbes make_trace_probes(const SparseCholesky& factor, int dim, int ns,
                              std::uint64_t seed);

// (1/Ns) sum_s v_s' A p_s over block k of the probe vectors (A is n x n);
// pass block_k = -1 with a dim x dim A to estimate over the full vector.
double hutchinson_trace(const SpMat& a, const TraceProbes& probes, int block_k,
                        int n);

// One E-step at theta; `iter` seeds the fresh probe draw.
PosteriorField e_step(const SubjectInput& input, const Hyperparameters& theta,
                      const EmOptions& options, std::uint64_t iter,
                      EmWorkspace* ws = nullptr);

// M-step updates. Both recompute exact traces if a Hutchinson estimate turns
// a result nonpositive and n <= 500; otherwise they throw NumericalError.
double update_sigma2(const SubjectInput& input, const PosteriorField& post);
double update_phi(const SubjectInput& input, const PosteriorField& post,
                  int task, double kappa2);

double optimize_kappa2(int task, double phi_hat, const TraceSummaries& traces,
                       const FemMatrices& fem, const EmOptions& options,
                       EmWorkspace* ws = nullptr);

// Shared 1-D search: maximize 0.5 log|Qtilde(k2)| - qtrace(k2)/(8 pi phi),
// where qtrace(k2) = k2*tc + 2*tg + tgcg/k2 (posterior traces during EM,
// quadratic forms of the classical estimates during initialization).
double maximize_kappa_objective(double tc, double tg, double tgcg, double phi,
                                const FemMatrices& fem, const EmOptions& options,
                                EmWorkspace* ws = nullptr,
                                bool* hit_edge = nullptr);

// theta^(0): alternate the two closed-form initialization displays from the
// classical estimates until (phi, kappa2) settles.
Hyperparameters init_hyperparameters(const Mat& w_hat, double resid_var_mean,
                                     const FemMatrices& fem,
                                     const EmOptions& options,
                                     EmWorkspace* ws = nullptr);

// Least-squares projection of per-location estimates onto mesh vertices.
Mat project_to_mesh(const Projector& projector, const Mat& values);

// One EM cycle: e_step -> sigma2 -> per task (phi -> kappa2).
Hyperparameters em_fixed_point(const SubjectInput& input,
                               const Hyperparameters& theta,
                               const EmOptions& options, std::uint64_t iter,
                               EmWorkspace* ws = nullptr);

// Expected complete-data objective R(theta | theta_s) up to an additive
// constant, evaluated from posterior summaries computed at theta_s.
double expected_complete_objective(const SubjectInput& input,
                                   const Hyperparameters& theta,
                                   const PosteriorField& post_at_s,
                                   EmWorkspace* ws = nullptr);

struct SquaremOptions {
  double epsilon = 1e-3;
  int max_iter = 100;
  bool squarem = true;
  bool log_scale_metric = false;
  std::function<bool(const Vec&)> valid = [](const Vec& v) {
    return v.allFinite();
  };
};

struct HistoryEntry {
  Vec theta;
  double metric = 0.0;
  int n_feval = 0;
};

struct SquaremResult {
  Vec theta;
  std::vector<HistoryEntry> history;
  bool converged = false;
  int n_feval = 0;
};

// Fixed-point acceleration (SQUAREM S3 step length with a monotonicity
// safeguard); plain iteration when squarem is off. Stops when the mean
// squared difference between consecutive accepted iterates drops below
// epsilon.
SquaremResult squarem_accelerate(const std::function<Vec(const Vec&)>& f,
                                 const Vec& theta0,
                                 const SquaremOptions& options);

struct FitResult {
  Hyperparameters theta_hat;
  PosteriorField posterior;
  Mat beta_mean;  // N x K = Psi mu
  std::vector<HistoryEntry> history;
  bool converged = false;
  int n_feval = 0;
  double seconds = 0.0;
  ClassicalFit classical;
};

// classical GLM -> initialization -> accelerated EM -> final E-step.
FitResult fit_subject(const SubjectInput& input,
                      const PreprocessedSubject& data, const EmOptions& options);

// Posterior beta draws; H x (N*K) with column layout k*N + v.
Mat sample_beta(const SubjectInput& input, const PosteriorField& post,
                std::uint64_t seed, int count);

}  // namespace surfbayes
