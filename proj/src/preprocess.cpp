#include "surfbayes/preprocess.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <thread>

namespace surfbayes {

double hrf_double_gamma(double t, const HrfParams& p) {
  if (t < 0.0) throw ValidationError("hrf time must be nonnegative");
  if (t == 0.0) return 0.0;
  const double d1 = p.a1 * p.b1;
  const double d2 = p.a2 * p.b2;
  const double term1 = std::pow(t / d1, p.a1) * std::exp(-(t - d1) / p.b1);
  const double term2 = std::pow(t / d2, p.a2) * std::exp(-(t - d2) / p.b2);
  return term1 - p.c * term2;
}

Vec convolve_design(const Vec& stimulus, double tr, const HrfParams& params) {
  if (!(tr > 0.0)) throw ValidationError("tr must be positive");
  if (!stimulus.allFinite())
    throw ValidationError("stimulus contains non-finite values");
  const int T = static_cast<int>(stimulus.size());
  Vec h(T);
  for (int t = 0; t < T; ++t) h(t) = hrf_double_gamma(t * tr, params);
  Vec out = Vec::Zero(T);
  for (int t = 0; t < T; ++t) {
    double acc = 0.0;
    for (int tau = 0; tau <= t; ++tau) acc += stimulus(tau) * h(t - tau);
    out(t) = acc * tr;
  }
  return out;
}

Mat scale_design(const Mat& x) {
  Mat out = x;
  for (int j = 0; j < x.cols(); ++j) {
    const double mx = x.col(j).maxCoeff();
    if (!(mx > 0.0))
      throw ValidationError("design column " + std::to_string(j) +
                            " has nonpositive maximum");
    if (x.col(j).maxCoeff() - x.col(j).minCoeff() <= 1e-12 * std::abs(mx))
      throw ValidationError("design column " + std::to_string(j) +
                            " is constant");
    out.col(j) /= mx;
    out.col(j).array() -= out.col(j).mean();
  }
  return out;
}

Vec scale_percent_change(const Vec& y) {
  const double mean = y.mean();
  const double scale = y.cwiseAbs().maxCoeff();
  if (std::abs(mean) <= 1e-12 * std::max(scale, 1.0))
    throw ValidationError("time series has (near-)zero mean");
  return 100.0 * (y.array() - mean) / mean;
}

Vec nuisance_regress(const Vec& y, const Mat& z) {
  if (z.rows() != y.size())
    throw ValidationError("nuisance matrix row count mismatch");
  Eigen::ColPivHouseholderQR<Mat> qr(z);
  if (qr.rank() < z.cols())
    throw ValidationError("nuisance matrix is rank deficient");
  return y - z * qr.solve(y);
}

namespace {

// magnitude of the largest root of z^p - a1 z^{p-1} - ... - ap
// (inverse characteristic roots; < 1 means stationary)
double max_inverse_root(const Vec& coeffs) {
  const int p = static_cast<int>(coeffs.size());
  if (p == 0 || coeffs.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  Mat companion = Mat::Zero(p, p);
  for (int j = 0; j < p; ++j) companion(0, j) = coeffs(j);
  for (int i = 1; i < p; ++i) companion(i, i - 1) = 1.0;
  Eigen::EigenSolver<Mat> es(companion, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace

double project_to_stationary(Vec& coeffs, double root_radius) {
  const double limit = 1.0 / root_radius;
  double factor = 1.0;
  Vec trial = coeffs;
  while (factor > 0.0 && max_inverse_root(trial) >= limit) {
    factor -= 0.02;
    if (factor < 0.0) factor = 0.0;
    trial = factor * coeffs;
  }
  coeffs = trial;
  return factor;
}

ArEntry estimate_ar_yule_walker(const Vec& resid, int order) {
  const int T = static_cast<int>(resid.size());
  if (T <= order)
    throw ValidationError("series too short for AR(" + std::to_string(order) +
                          ")");
  Vec x = resid.array() - resid.mean();
  Vec acov = Vec::Zero(order + 1);
  for (int lag = 0; lag <= order; ++lag) {
    double s = 0.0;
    for (int t = lag; t < T; ++t) s += x(t) * x(t - lag);
    acov(lag) = s / T;  // biased estimator keeps the Toeplitz system PD
  }
  if (!(acov(0) > 0.0))
    throw ValidationError("constant series: Yule-Walker system is singular");

  // Levinson-Durbin recursion
  Vec a = Vec::Zero(order);
  double v = acov(0);
  for (int m = 0; m < order; ++m) {
    double num = acov(m + 1);
    for (int j = 0; j < m; ++j) num -= a(j) * acov(m - j);
    double k = num / v;
    Vec a_new = a;
    a_new(m) = k;
    for (int j = 0; j < m; ++j) a_new(j) = a(j) - k * a(m - 1 - j);
    a = a_new;
    v *= (1.0 - k * k);
    if (!(v > 0.0)) v = 1e-12 * acov(0);
  }

  ArEntry entry;
  entry.coeffs = a;
  project_to_stationary(entry.coeffs);
  double innov = acov(0);
  for (int j = 0; j < order; ++j) innov -= entry.coeffs(j) * acov(j + 1);
  entry.innovation_var = std::max(innov, 1e-12 * acov(0));
  return entry;
}

Vec ar_autocovariance(const ArEntry& ar, int len) {
  const int p = static_cast<int>(ar.coeffs.size());
  // solve for gamma(0..p): gamma(k) - sum_i a_i gamma(|k-i|) = v * delta_k0
  Mat sys = Mat::Zero(p + 1, p + 1);
  Vec rhs = Vec::Zero(p + 1);
  rhs(0) = ar.innovation_var;
  for (int k = 0; k <= p; ++k) {
    sys(k, k) += 1.0;
    for (int i = 1; i <= p; ++i) sys(k, std::abs(k - i)) -= ar.coeffs(i - 1);
  }
  Vec head = sys.colPivHouseholderQr().solve(rhs);
  Vec gamma(std::max(len, p + 1));
  gamma.head(p + 1) = head;
  for (int k = p + 1; k < gamma.size(); ++k) {
    double s = 0.0;
    for (int i = 1; i <= p; ++i) s += ar.coeffs(i - 1) * gamma(k - i);
    gamma(k) = s;
  }
  return gamma.head(len);
}

Mat ar_covariance(const ArEntry& ar, int t_len) {
  Vec gamma = ar_autocovariance(ar, t_len);
  Mat s(t_len, t_len);
  for (int i = 0; i < t_len; ++i)
    for (int j = 0; j < t_len; ++j) s(i, j) = gamma(std::abs(i - j));
  return s;
}

Mat inverse_sqrt_spd(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  if (es.info() != Eigen::Success)
    throw NumericalError("eigendecomposition failed");
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw NumericalError("covariance matrix is not SPD (non-stationary AR?)");
  Vec inv_sqrt = es.eigenvalues().array().rsqrt();
  return es.eigenvectors() * inv_sqrt.asDiagonal() *
         es.eigenvectors().transpose();
}

void prewhiten(Vec& y_v, Mat& x_v, const ArEntry& ar) {
  const int T = static_cast<int>(y_v.size());
  if (ar.coeffs.cwiseAbs().maxCoeff() == 0.0 && ar.innovation_var == 1.0)
    return;  // D = I
  Mat d = inverse_sqrt_spd(ar_covariance(ar, T));
  y_v = (d * y_v).eval();
  x_v = (d * x_v).eval();
}

std::vector<ArEntry> smooth_ar_params(
    const Mesh& mesh, const std::vector<int>& vertex_of_location,
    const std::vector<ArEntry>& models, double fwhm_mm) {
  const int N = static_cast<int>(models.size());
  if (static_cast<int>(vertex_of_location.size()) != N)
    throw ValidationError("vertex_of_location size mismatch");
  if (!(fwhm_mm > 0.0)) return models;
  const double sd = fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const double cutoff = 3.0 * sd;

  // locations per vertex (several data locations can share one vertex)
  std::vector<std::vector<int>> locs_at(mesh.n());
  for (int v = 0; v < N; ++v) {
    if (vertex_of_location[v] < 0 || vertex_of_location[v] >= mesh.n())
      throw ValidationError("vertex_of_location entry out of range");
    locs_at[vertex_of_location[v]].push_back(v);
  }

  MeshGraph graph(mesh);
  const int p = static_cast<int>(models[0].coeffs.size());
  std::vector<ArEntry> out(N);
  for (int v = 0; v < N; ++v) {
    Vec dist = graph_geodesic_distances(graph, {vertex_of_location[v]}, cutoff);
    Vec acc = Vec::Zero(p + 1);
    double wsum = 0.0;
    for (int u = 0; u < mesh.n(); ++u) {
      if (!std::isfinite(dist(u))) continue;
      const double w = std::exp(-dist(u) * dist(u) / (2.0 * sd * sd));
      for (int loc : locs_at[u]) {
        acc.head(p) += w * models[loc].coeffs;
        acc(p) += w * models[loc].innovation_var;
        wsum += w;
      }
    }
    out[v].coeffs = acc.head(p) / wsum;
    out[v].innovation_var = acc(p) / wsum;
    project_to_stationary(out[v].coeffs);  // re-check after averaging
  }
  return out;
}

namespace {

void parallel_for(int n, int threads, const std::function<void(int, int)>& fn) {
  if (threads <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  threads = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([=, &fn] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

PreprocessedSubject run_preprocessing(const ScanData& raw, const Mat& stimulus,
                                      const Mat& nuisance, const Mesh& mesh,
                                      const std::vector<int>& vertex_of_location,
                                      const PreprocessOptions& options) {
  const int T = raw.T();
  const int N = raw.N();
  const int K = static_cast<int>(stimulus.cols());
  if (T < 2) throw ValidationError("need at least 2 time points");
  if (static_cast<int>(vertex_of_location.size()) != N)
    throw ValidationError("vertex_of_location size mismatch");
  if (stimulus.rows() != T) throw ValidationError("stimulus length mismatch");

  PreprocessedSubject out;
  out.tr = raw.tr;
  out.valid.assign(N, 1);
  out.failures.assign(N, "");

  // shared design: HRF convolution, then max-scaling and centering
  Mat conv(T, K);
  for (int k = 0; k < K; ++k) conv.col(k) = convolve_design(stimulus.col(k), raw.tr);
  out.design_shared = scale_design(conv);

  // percent signal change + nuisance regression per location
  out.y.resize(T, N);
  Mat resid(T, N);
  parallel_for(N, options.threads, [&](int lo, int hi) {
    for (int v = lo; v < hi; ++v) {
      try {
        Vec yv = scale_percent_change(raw.y.col(v));
        if (nuisance.cols() > 0) yv = nuisance_regress(yv, nuisance);
        out.y.col(v) = yv;
        // residuals for the AR fit come from OLS against the shared design
        Eigen::ColPivHouseholderQR<Mat> qr(out.design_shared);
        resid.col(v) = yv - out.design_shared * qr.solve(yv);
      } catch (const std::exception& e) {
        out.valid[v] = 0;
        out.failures[v] = e.what();
        out.y.col(v).setZero();
        resid.col(v).setZero();
      }
    }
  });

  // Yule-Walker per location, then spatial smoothing of the AR parameters
  out.ar.assign(N, ArEntry{Vec::Zero(options.ar_order), 1.0});
  if (options.do_prewhiten) {
    parallel_for(N, options.threads, [&](int lo, int hi) {
      for (int v = lo; v < hi; ++v) {
        if (!out.valid[v]) continue;
        try {
          out.ar[v] = estimate_ar_yule_walker(resid.col(v), options.ar_order);
        } catch (const std::exception& e) {
          out.valid[v] = 0;
          out.failures[v] = e.what();
        }
      }
    });
    out.ar = smooth_ar_params(mesh, vertex_of_location, out.ar,
                              options.smooth_fwhm_mm);
  }

  // location-specific whitening of response and design
  out.design.assign(N, out.design_shared);
  if (options.do_prewhiten) {
    parallel_for(N, options.threads, [&](int lo, int hi) {
      for (int v = lo; v < hi; ++v) {
        if (!out.valid[v]) continue;
        try {
          Vec yv = out.y.col(v);
          prewhiten(yv, out.design[v], out.ar[v]);
          out.y.col(v) = yv;
        } catch (const std::exception& e) {
          out.valid[v] = 0;
          out.failures[v] = e.what();
          out.y.col(v).setZero();
        }
      }
    });
  }
  for (int v = 0; v < N; ++v)
    if (!out.valid[v]) {
      out.y.col(v).setZero();
      out.design[v].setZero();
    }
  return out;
}

}  // namespace surfbayes
