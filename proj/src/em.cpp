#include "surfbayes/em.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

#include "surfbayes/rng.hpp"

namespace surfbayes {

ClassicalFit classical_glm(const Mat& y, const std::vector<Mat>& design,
                           const std::vector<std::uint8_t>& valid) {
  const int T = static_cast<int>(y.rows());
  const int N = static_cast<int>(y.cols());
  if (static_cast<int>(design.size()) != N)
    throw ValidationError("design list size mismatch");
  const int K = static_cast<int>(design[0].cols());
  if (T <= K) throw ValidationError("need T > K for residual variance");

  ClassicalFit fit;
  fit.beta = Mat::Constant(N, K, std::numeric_limits<double>::quiet_NaN());
  fit.se = Mat::Constant(N, K, std::numeric_limits<double>::quiet_NaN());
  fit.resid_var = Vec::Constant(N, std::numeric_limits<double>::quiet_NaN());
  fit.valid.assign(N, 1);

  for (int v = 0; v < N; ++v) {
    if (!valid.empty() && !valid[v]) {
      fit.valid[v] = 0;
      continue;
    }
    const Mat& x = design[v];
    Eigen::ColPivHouseholderQR<Mat> qr(x);
    if (qr.rank() < K) {
      fit.valid[v] = 0;
      continue;
    }
    Vec beta = qr.solve(y.col(v));
    Vec resid = y.col(v) - x * beta;
    double s2 = resid.squaredNorm() / (T - K);
    Mat xtx_inv = (x.transpose() * x).llt().solve(Mat::Identity(K, K));
    fit.beta.row(v) = beta.transpose();
    fit.resid_var(v) = s2;
    fit.se.row(v) = (s2 * xtx_inv.diagonal()).cwiseSqrt().transpose();
  }
  return fit;
}

SubjectInput build_subject_input(const PreprocessedSubject& data,
                                 const Projector& projector,
                                 const FemMatrices& fem) {
  SubjectInput in;
  in.T = static_cast<int>(data.y.rows());
  in.N = static_cast<int>(data.y.cols());
  in.K = data.K();
  in.n = fem.n();
  in.fem = &fem;
  if (projector.n_locations() != in.N)
    throw ValidationError("projector row count != data locations");
  if (projector.n_vertices() != in.n)
    throw ValidationError("projector column count != mesh vertices");

  in.psi = projector.psi;
  in.xty = Mat::Zero(in.N, in.K);
  in.xtx.assign(in.N, Mat::Zero(in.K, in.K));
  in.yty = 0.0;
  in.n_valid = 0;
  for (int v = 0; v < in.N; ++v) {
    if (!data.valid.empty() && !data.valid[v]) continue;
    ++in.n_valid;
    const Mat& x = data.design[v];
    in.xty.row(v) = (x.transpose() * data.y.col(v)).transpose();
    in.xtx[v] = x.transpose() * x;
    in.yty += data.y.col(v).squaredNorm();
  }

  // M = Psi' X'X Psi: block (k,k') = Psi' diag(xtx[.](k,k')) Psi
  const int dim = in.dim();
  std::vector<Triplet> trip;
  SpMat psi_t = in.psi.transpose();
  for (int k = 0; k < in.K; ++k) {
    for (int k2 = 0; k2 < in.K; ++k2) {
      Vec d(in.N);
      for (int v = 0; v < in.N; ++v) d(v) = in.xtx[v](k, k2);
      SpMat block = psi_t * d.asDiagonal() * in.psi;
      for (int o = 0; o < block.outerSize(); ++o)
        for (SpMat::InnerIterator it(block, o); it; ++it)
          trip.emplace_back(k * in.n + static_cast<int>(it.row()),
                            k2 * in.n + static_cast<int>(it.col()), it.value());
    }
  }
  in.xtx_psi.resize(dim, dim);
  in.xtx_psi.setFromTriplets(trip.begin(), trip.end());
  in.xtx_psi.makeCompressed();

  in.psit_xty = Vec::Zero(dim);
  for (int k = 0; k < in.K; ++k)
    in.psit_xty.segment(k * in.n, in.n) = psi_t * in.xty.col(k);
  return in;
}

TraceProbes make_trace_probes(const SparseCholesky& factor, int dim, int ns,
                              std::uint64_t seed) {
  TraceProbes probes;
  Rng rng(seed);
  probes.v.resize(dim, ns);
  for (int s = 0; s < ns; ++s)
    for (int i = 0; i < dim; ++i) probes.v(i, s) = rng.rademacher();
  probes.p = factor.solve(probes.v);
  return probes;
}

double hutchinson_trace(const SpMat& a, const TraceProbes& probes, int block_k,
                        int n) {
  const int ns = static_cast<int>(probes.v.cols());
  double acc = 0.0;
  if (block_k < 0) {
    for (int s = 0; s < ns; ++s)
      acc += probes.v.col(s).dot(a * probes.p.col(s));
  } else {
    for (int s = 0; s < ns; ++s)
      acc += probes.v.col(s).segment(block_k * n, n)
                 .dot(a * probes.p.col(s).segment(block_k * n, n));
  }
  return acc / ns;
}

namespace {

double sparse_quad(const SpMat& a, const Vec& x) { return x.dot(a * x); }

// Tr(A * S_block) for dense S and sparse n x n A, block offset (off, off).
double trace_against_block(const SpMat& a, const Mat& sigma, int off) {
  double acc = 0.0;
  for (int o = 0; o < a.outerSize(); ++o)
    for (SpMat::InnerIterator it(a, o); it; ++it)
      acc += it.value() * sigma(off + it.col(), off + it.row());
  return acc;
}

TraceSummaries exact_trace_summaries(const SubjectInput& input,
                                     const SparseCholesky& factor,
                                     const Vec& mu) {
  const int dim = input.dim();
  const int n = input.n;
  Mat sigma = factor.solve(Mat::Identity(dim, dim));
  TraceSummaries tr;
  tr.exact = true;
  tr.tr_c.resize(input.K);
  tr.tr_g.resize(input.K);
  tr.tr_gcg.resize(input.K);
  for (int k = 0; k < input.K; ++k) {
    const int off = k * n;
    const Vec mu_k = mu.segment(off, n);
    tr.tr_c(k) = trace_against_block(input.fem->C, sigma, off) +
                 sparse_quad(input.fem->C, mu_k);
    tr.tr_g(k) = trace_against_block(input.fem->G, sigma, off) +
                 sparse_quad(input.fem->G, mu_k);
    tr.tr_gcg(k) = trace_against_block(input.fem->GCinvG, sigma, off) +
                   sparse_quad(input.fem->GCinvG, mu_k);
  }
  tr.tr_xtx = trace_against_block(input.xtx_psi, sigma, 0) +
              sparse_quad(input.xtx_psi, mu);
  return tr;
}

TraceSummaries hutchinson_trace_summaries(const SubjectInput& input,
                                          const SparseCholesky& factor,
                                          const Vec& mu, int ns,
                                          std::uint64_t seed) {
  const int n = input.n;
  TraceProbes probes = make_trace_probes(factor, input.dim(), ns, seed);
  TraceSummaries tr;
  tr.exact = false;
  tr.tr_c.resize(input.K);
  tr.tr_g.resize(input.K);
  tr.tr_gcg.resize(input.K);
  for (int k = 0; k < input.K; ++k) {
    const Vec mu_k = mu.segment(k * n, n);
    tr.tr_c(k) = hutchinson_trace(input.fem->C, probes, k, n) +
                 sparse_quad(input.fem->C, mu_k);
    tr.tr_g(k) = hutchinson_trace(input.fem->G, probes, k, n) +
                 sparse_quad(input.fem->G, mu_k);
    tr.tr_gcg(k) = hutchinson_trace(input.fem->GCinvG, probes, k, n) +
                   sparse_quad(input.fem->GCinvG, mu_k);
  }
  tr.tr_xtx = hutchinson_trace(input.xtx_psi, probes, -1, n) +
              sparse_quad(input.xtx_psi, mu);
  return tr;
}

SpMat assemble_posterior_precision(const SubjectInput& input,
                                   const Hyperparameters& theta) {
  const int n = input.n;
  std::vector<Triplet> trip;
  trip.reserve(input.xtx_psi.nonZeros() +
               static_cast<size_t>(input.K) * input.fem->GCinvG.nonZeros() * 2);
  for (int k = 0; k < input.K; ++k) {
    SpMat qt = build_qtilde(theta.kappa2(k), *input.fem);
    const double scale = 1.0 / (kFourPi * theta.phi(k));
    for (int o = 0; o < qt.outerSize(); ++o)
      for (SpMat::InnerIterator it(qt, o); it; ++it)
        trip.emplace_back(k * n + static_cast<int>(it.row()),
                          k * n + static_cast<int>(it.col()),
                          scale * it.value());
  }
  const double inv_s2 = 1.0 / theta.sigma2;
  for (int o = 0; o < input.xtx_psi.outerSize(); ++o)
    for (SpMat::InnerIterator it(input.xtx_psi, o); it; ++it)
      trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                        inv_s2 * it.value());
  SpMat prec(input.dim(), input.dim());
  prec.setFromTriplets(trip.begin(), trip.end());
  prec.makeCompressed();
  return prec;
}

}  // namespace

PosteriorField e_step(const SubjectInput& input, const Hyperparameters& theta,
                      const EmOptions& options, std::uint64_t iter,
                      EmWorkspace*) {
  if (!theta.valid()) throw ValidationError("invalid hyperparameters in e_step");
  PosteriorField post;
  post.precision = assemble_posterior_precision(input, theta);
  post.factor = std::make_shared<SparseCholesky>();
  post.factor->compute(post.precision);
  post.mu = post.factor->solve((input.psit_xty / theta.sigma2).eval());

  const bool exact = options.trace_mode == TraceMode::kExact ||
                     (options.trace_mode == TraceMode::kAuto &&
                      input.dim() <= options.exact_trace_max_dim);
  if (exact) {
    post.traces = exact_trace_summaries(input, *post.factor, post.mu);
  } else {
    post.traces = hutchinson_trace_summaries(
        input, *post.factor, post.mu, options.ns,
        derive_seed(options.seed, /*stream=*/17, iter));
  }
  return post;
}

double update_sigma2(const SubjectInput& input, const PosteriorField& post) {
  const double tn = static_cast<double>(input.T) * input.n_valid;
  auto value = [&](const TraceSummaries& tr) {
    return (input.yty - 2.0 * input.psit_xty.dot(post.mu) + tr.tr_xtx) / tn;
  };
  double s2 = value(post.traces);
  if (!(s2 > 0.0)) {
    if (post.traces.exact || input.n > 500)
      throw NumericalError("nonpositive sigma2 update");
    TraceSummaries exact =
        exact_trace_summaries(input, *post.factor, post.mu);
    s2 = value(exact);
    if (!(s2 > 0.0)) throw NumericalError("nonpositive sigma2 update");
  }
  return s2;
}

double update_phi(const SubjectInput& input, const PosteriorField& post,
                  int task, double kappa2) {
  double phi =
      post.traces.qtilde_trace(task, kappa2) / (kFourPi * input.n);
  if (!(phi > 0.0)) {
    if (post.traces.exact || input.n > 500)
      throw NumericalError("nonpositive phi update for task " +
                           std::to_string(task));
    TraceSummaries exact =
        exact_trace_summaries(input, *post.factor, post.mu);
    phi = exact.qtilde_trace(task, kappa2) / (kFourPi * input.n);
    if (!(phi > 0.0))
      throw NumericalError("nonpositive phi update for task " +
                           std::to_string(task));
  }
  return phi;
}

double maximize_kappa_objective(double tc, double tg, double tgcg, double phi,
                                const FemMatrices& fem, const EmOptions& options,
                                EmWorkspace* ws, bool* hit_edge) {
  EmWorkspace local;
  if (!ws) ws = &local;
  if (!ws->qtilde_analyzed) {
    ws->qtilde_solver.analyze(build_qtilde(1.0, fem));
    ws->qtilde_analyzed = true;
  }
  auto f = [&](double log_k2) {
    const double k2 = std::exp(log_k2);
    ws->qtilde_solver.factorize(build_qtilde(k2, fem));
    const double qtrace = k2 * tc + 2.0 * tg + tgcg / k2;
    return 0.5 * ws->qtilde_solver.log_det() - qtrace / (2.0 * kFourPi * phi);
  };

  double lo = options.kappa2_lo, hi = options.kappa2_hi;
  const double tol = std::max(options.kappa2_tol, 1e-12);
  bool edge = false;
  double best_x = 0.0;

  for (int attempt = 0; attempt < 2; ++attempt) {
    const double xlo = std::log(lo), xhi = std::log(hi);
    // coarse scan brackets the maximum, golden section refines it
    const int grid = 17;
    int best_i = 0;
    double best_f = -std::numeric_limits<double>::infinity();
    std::vector<double> xs(grid);
    for (int i = 0; i < grid; ++i) {
      xs[i] = xlo + (xhi - xlo) * i / (grid - 1);
      double fi = f(xs[i]);
      if (fi > best_f) {
        best_f = fi;
        best_i = i;
      }
    }
    if (best_i == 0 || best_i == grid - 1) {
      best_x = xs[best_i];
      edge = true;
      if (attempt == 0) {  // widen the bracket once by 10x on both sides
        lo /= 10.0;
        hi *= 10.0;
        continue;
      }
      break;
    }
    edge = false;
    double a = xs[best_i - 1], b = xs[best_i + 1];
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
    double f1 = f(x1), f2 = f(x2);
    while (b - a > tol) {
      if (f1 < f2) {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + gr * (b - a);
        f2 = f(x2);
      } else {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - gr * (b - a);
        f1 = f(x1);
      }
    }
    best_x = 0.5 * (a + b);
    break;
  }
  if (edge) {
    std::cerr << "warning: kappa2 search hit bracket edge at "
              << std::exp(best_x) << "\n";
  }
  if (hit_edge) *hit_edge = edge;
  return std::exp(best_x);
}

double optimize_kappa2(int task, double phi_hat, const TraceSummaries& traces,
                       const FemMatrices& fem, const EmOptions& options,
                       EmWorkspace* ws) {
  if (!(phi_hat > 0.0)) throw ValidationError("phi_hat must be positive");
  return maximize_kappa_objective(traces.tr_c(task), traces.tr_g(task),
                                  traces.tr_gcg(task), phi_hat, fem, options,
                                  ws);
}

Mat project_to_mesh(const Projector& projector, const Mat& values) {
  const SpMat& psi = projector.psi;
  SpMat psi_t = psi.transpose();
  SpMat normal = psi_t * psi;
  double ridge = 1e-10;
  for (int i = 0; i < normal.rows(); ++i) normal.coeffRef(i, i) += ridge;
  SparseCholesky chol;
  chol.compute(normal);
  Mat cleaned = values;
  for (int i = 0; i < cleaned.size(); ++i)
    if (!std::isfinite(cleaned(i))) cleaned(i) = 0.0;
  Mat out(psi.cols(), values.cols());
  for (int k = 0; k < values.cols(); ++k)
    out.col(k) = chol.solve((psi_t * cleaned.col(k)).eval());
  return out;
}

Hyperparameters init_hyperparameters(const Mat& w_hat, double resid_var_mean,
                                     const FemMatrices& fem,
                                     const EmOptions& options,
                                     EmWorkspace* ws) {
  EmWorkspace local;
  if (!ws) ws = &local;
  const int K = static_cast<int>(w_hat.cols());
  const int n = fem.n();
  Hyperparameters theta;
  theta.kappa2 = Vec::Ones(K);
  theta.phi = Vec::Ones(K);
  theta.sigma2 = resid_var_mean > 0.0 ? resid_var_mean : 1.0;

  for (int k = 0; k < K; ++k) {
    const Vec w = w_hat.col(k);
    const double qc = sparse_quad(fem.C, w);
    const double qg = sparse_quad(fem.G, w);
    const double qgcg = sparse_quad(fem.GCinvG, w);
    if (!(qc > 0.0)) {  // all-zero classical estimates
      theta.kappa2(k) = 1.0;
      theta.phi(k) = w.squaredNorm() / std::max(n, 1) + 1e-6;
      continue;
    }
    double kappa2 = 1.0, phi = 1.0;
    for (int it = 0; it < 100; ++it) {
      const double phi_new =
          (kappa2 * qc + 2.0 * qg + qgcg / kappa2) / (kFourPi * n);
      const double kappa2_new =
          maximize_kappa_objective(qc, qg, qgcg, phi_new, fem, options, ws);
      const bool done = std::abs(phi_new - phi) <= 1e-6 * std::abs(phi) &&
                        std::abs(kappa2_new - kappa2) <= 1e-6 * kappa2;
      phi = phi_new;
      kappa2 = kappa2_new;
      if (done && it > 0) break;
    }
    theta.kappa2(k) = kappa2;
    theta.phi(k) = phi;
  }
  return theta;
}

Hyperparameters em_fixed_point(const SubjectInput& input,
                               const Hyperparameters& theta,
                               const EmOptions& options, std::uint64_t iter,
                               EmWorkspace* ws) {
  PosteriorField post = e_step(input, theta, options, iter, ws);
  Hyperparameters next = theta;
  next.sigma2 = update_sigma2(input, post);
  for (int k = 0; k < input.K; ++k) {
    const double phi_hat = update_phi(input, post, k, theta.kappa2(k));
    next.phi(k) = phi_hat;
    next.kappa2(k) =
        optimize_kappa2(k, phi_hat, post.traces, *input.fem, options, ws);
  }
  return next;
}

double expected_complete_objective(const SubjectInput& input,
                                   const Hyperparameters& theta,
                                   const PosteriorField& post_at_s,
                                   EmWorkspace* ws) {
  EmWorkspace local;
  if (!ws) ws = &local;
  if (!ws->qtilde_analyzed) {
    ws->qtilde_solver.analyze(build_qtilde(1.0, *input.fem));
    ws->qtilde_analyzed = true;
  }
  const double tn = static_cast<double>(input.T) * input.n_valid;
  const TraceSummaries& tr = post_at_s.traces;
  double r1 = -0.5 * tn * std::log(theta.sigma2) -
              0.5 / theta.sigma2 *
                  (input.yty - 2.0 * input.psit_xty.dot(post_at_s.mu) +
                   tr.tr_xtx);
  double r2 = 0.0;
  for (int k = 0; k < input.K; ++k) {
    ws->qtilde_solver.factorize(build_qtilde(theta.kappa2(k), *input.fem));
    r2 += -0.5 * input.n * std::log(kFourPi * theta.phi(k)) +
          0.5 * ws->qtilde_solver.log_det() -
          tr.qtilde_trace(k, theta.kappa2(k)) /
              (2.0 * kFourPi * theta.phi(k));
  }
  return r1 + r2;
}

namespace {

double step_metric(const Vec& a, const Vec& b, bool log_scale) {
  if (!log_scale) return (a - b).squaredNorm() / a.size();
  Vec la = a.array().abs().max(1e-300).log();
  Vec lb = b.array().abs().max(1e-300).log();
  return (la - lb).squaredNorm() / a.size();
}

}  // namespace

SquaremResult squarem_accelerate(const std::function<Vec(const Vec&)>& f,
                                 const Vec& theta0,
                                 const SquaremOptions& options) {
  SquaremResult res;
  res.theta = theta0;
  res.history.push_back({theta0, std::numeric_limits<double>::infinity(), 0});

  Vec theta = theta0;
  for (int s = 0; s < options.max_iter; ++s) {
    Vec theta_new;
    if (!options.squarem) {
      theta_new = f(theta);
      ++res.n_feval;
    } else {
      Vec t1 = f(theta);
      Vec t2 = f(t1);
      res.n_feval += 2;
      Vec r = t1 - theta;
      Vec v = t2 - 2.0 * t1 + theta;
      if (v.norm() < 1e-300) {
        theta_new = t2;
      } else {
        double alpha = -r.norm() / v.norm();
        if (alpha > -1.0) alpha = -1.0;
        Vec candidate = theta - 2.0 * alpha * r + alpha * alpha * v;
        if (!options.valid(candidate)) {
          theta_new = f(t2);
          ++res.n_feval;
        } else {
          Vec stabilized = f(candidate);
          ++res.n_feval;
          // safeguard: keep the extrapolation only if its fixed-point
          // residual is no worse than the plain step's
          if (step_metric(stabilized, candidate, false) >
              step_metric(t2, t1, false)) {
            theta_new = f(t2);
            ++res.n_feval;
          } else {
            theta_new = stabilized;
          }
        }
      }
    }
    const double metric =
        step_metric(theta_new, theta, options.log_scale_metric);
    theta = theta_new;
    res.history.push_back({theta, metric, res.n_feval});
    if (metric < options.epsilon) {
      res.converged = true;
      break;
    }
  }
  res.theta = theta;
  return res;
}

FitResult fit_subject(const SubjectInput& input,
                      const PreprocessedSubject& data,
                      const EmOptions& options) {
  const auto t_start = std::chrono::steady_clock::now();
  FitResult result;
  result.classical = classical_glm(data.y, data.design, data.valid);

  Projector proj;
  proj.psi = input.psi;
  Mat w_hat = project_to_mesh(proj, result.classical.beta);
  double rv_sum = 0.0;
  int rv_count = 0;
  for (int v = 0; v < input.N; ++v)
    if (result.classical.valid[v]) {
      rv_sum += result.classical.resid_var(v);
      ++rv_count;
    }
  const double resid_var_mean = rv_count > 0 ? rv_sum / rv_count : 1.0;

  EmWorkspace ws;
  Hyperparameters theta0 =
      init_hyperparameters(w_hat, resid_var_mean, *input.fem, options, &ws);

  std::uint64_t eval_counter = 0;
  auto fixed_point = [&](const Vec& tv) -> Vec {
    Hyperparameters t = Hyperparameters::from_vector(tv);
    Hyperparameters next =
        em_fixed_point(input, t, options, eval_counter++, &ws);
    return next.to_vector();
  };

  SquaremOptions sq;
  sq.epsilon = options.epsilon;
  sq.max_iter = options.max_iter;
  sq.squarem = options.squarem;
  sq.log_scale_metric = options.log_scale_metric;
  sq.valid = [](const Vec& v) {
    return v.allFinite() && (v.array() > 0.0).all();
  };
  SquaremResult em = squarem_accelerate(fixed_point, theta0.to_vector(), sq);

  result.theta_hat = Hyperparameters::from_vector(em.theta);
  result.history = em.history;
  result.converged = em.converged;
  result.n_feval = em.n_feval;
  if (!result.converged)
    std::cerr << "warning: EM did not converge within " << options.max_iter
              << " iterations\n";

  result.posterior = e_step(input, result.theta_hat, options, eval_counter, &ws);
  result.beta_mean.resize(input.N, input.K);
  for (int k = 0; k < input.K; ++k)
    result.beta_mean.col(k) =
        input.psi * result.posterior.mu.segment(k * input.n, input.n);
  result.seconds = std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - t_start)
                       .count();
  return result;
}

Mat sample_beta(const SubjectInput& input, const PosteriorField& post,
                std::uint64_t seed, int count) {
  Mat w_draws = sample_gaussian_field(*post.factor, post.mu, seed, count);
  Mat beta(count, input.N * input.K);
  for (int h = 0; h < count; ++h)
    for (int k = 0; k < input.K; ++k)
      beta.row(h).segment(k * input.N, input.N) =
          (input.psi * w_draws.col(h).segment(k * input.n, input.n))
              .transpose();
  return beta;
}

}  // namespace surfbayes
