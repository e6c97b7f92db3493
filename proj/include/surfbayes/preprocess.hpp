#pragma once

#include <vector>

#include "surfbayes/mesh.hpp"
#include "surfbayes/types.hpp"

namespace surfbayes {

// Canonical double-gamma HRF parameters (neuRosim defaults).
struct HrfParams {
  double a1 = 6.0;
  double a2 = 12.0;
  double b1 = 0.9;
  double b2 = 0.9;
  double c = 0.35;
};

// h(t) = (t/(a1 b1))^a1 exp(-(t-a1 b1)/b1) - c (t/(a2 b2))^a2 exp(-(t-a2 b2)/b2)
double hrf_double_gamma(double t, const HrfParams& params = HrfParams());

// Causal rectangle-rule convolution of a stimulus series with the HRF
// sampled on the TR grid, truncated to the input length.
Vec convolve_design(const Vec& stimulus, double tr,
                    const HrfParams& params = HrfParams());

// Each column divided by its maximum, then centered. Throws on zero-max or
// constant columns.
Mat scale_design(const Mat& x);

// 100 * (y - mean) / mean. Throws on (near-)zero-mean input.
Vec scale_percent_change(const Vec& y);

// Residual of OLS regression of y on Z. Throws on rank-deficient Z.
Vec nuisance_regress(const Vec& y, const Mat& z);

// AR model for one location. Coefficients are kept stationary (all roots of
// 1 - sum a_i z^i outside radius 1.01) by uniform shrinkage toward zero.
struct ArEntry {
  Vec coeffs;
  double innovation_var = 1.0;
};

ArEntry estimate_ar_yule_walker(const Vec& resid, int order = 6);

// Shrinks coeffs by the smallest factor in {1, .98, .96, ...} that places
// all AR roots outside radius 1.01; returns the factor used.
double project_to_stationary(Vec& coeffs, double root_radius = 1.01);

// Autocovariance sequence gamma(0..len-1) of the AR process (extended
// Yule-Walker recursion), and the implied Toeplitz covariance S.
Vec ar_autocovariance(const ArEntry& ar, int len);
Mat ar_covariance(const ArEntry& ar, int t_len);

// S^{-1/2} by symmetric eigendecomposition; throws if S is not SPD.
Mat inverse_sqrt_spd(const Mat& s);

// Premultiplies y and X by D = S^{-1/2}.
void prewhiten(Vec& y_v, Mat& x_v, const ArEntry& ar);

// Gaussian-kernel smoothing of per-location AR parameters over the mesh.
// sd = fwhm / (2 sqrt(2 ln 2)), truncated at 3 sd, weights from
// graph-geodesic distances. Stationarity is re-enforced afterwards.
std::vector<ArEntry> smooth_ar_params(const Mesh& mesh,
                                      const std::vector<int>& vertex_of_location,
                                      const std::vector<ArEntry>& models,
                                      double fwhm_mm = 6.0);

// Raw scan: T x N BOLD matrix plus repetition time.
struct ScanData {
  Mat y;
  double tr = 1.0;
  int T() const { return static_cast<int>(y.rows()); }
  int N() const { return static_cast<int>(y.cols()); }
};

struct PreprocessOptions {
  int ar_order = 6;
  double smooth_fwhm_mm = 6.0;
  bool do_prewhiten = true;
  int threads = 1;
};

// Model-ready data: percent-signal-change response and per-location design
// matrices, both prewhitened. Locations that failed a stage are flagged in
// `valid` and carry zeroed columns.
struct PreprocessedSubject {
  Mat y;                       // T x N
  std::vector<Mat> design;     // N matrices, each T x K
  Mat design_shared;           // T x K convolved+scaled design pre-whitening
  std::vector<ArEntry> ar;     // smoothed AR models per location
  std::vector<std::uint8_t> valid;
  std::vector<std::string> failures;
  double tr = 1.0;
  int K() const { return static_cast<int>(design_shared.cols()); }
};

// Appendix-style pipeline: HRF-convolve -> scale design -> percent change ->
// nuisance regression -> residual OLS -> Yule-Walker -> spatial smoothing ->
// prewhitening.
PreprocessedSubject run_preprocessing(const ScanData& raw, const Mat& stimulus,
                                      const Mat& nuisance, const Mesh& mesh,
                                      const std::vector<int>& vertex_of_location,
                                      const PreprocessOptions& options = {});

}  // namespace surfbayes
