#pragma once

#include <Eigen/SparseCholesky>

#include "surfbayes/types.hpp"

namespace surfbayes {

// LDL^T factorization of a sparse SPD matrix with reusable symbolic analysis:
// analyze the sparsity pattern once, refactorize values many times (all
// kappa^2 candidates share one pattern, as does the posterior precision
// across EM iterations).
class SparseCholesky {
 public:
  SparseCholesky() = default;

  void analyze(const SpMat& a) {
    solver_.analyzePattern(a);
    analyzed_ = true;
  }

  // Numeric factorization; requires the same pattern as analyze().
  // Throws NumericalError if the matrix is not SPD.
  void factorize(const SpMat& a) {
    if (!analyzed_) analyze(a);
    solver_.factorize(a);
    if (solver_.info() != Eigen::Success)
      throw NumericalError("sparse factorization failed (matrix not SPD?)");
    if (solver_.vectorD().minCoeff() <= 0.0)
      throw NumericalError("matrix is not positive definite");
    dim_ = static_cast<int>(a.rows());
  }

  void compute(const SpMat& a) {
    analyze(a);
    factorize(a);
  }

  int dim() const { return dim_; }

  Vec solve(const Vec& b) const { return solver_.solve(b); }
  Mat solve(const Mat& b) const { return solver_.solve(b); }

  // log |A| = sum log pivots of the LDL^T factorization
  double log_det() const { return solver_.vectorD().array().log().sum(); }

  // With A = P' L D L' P and M = P' L D^{1/2} (so A = M M'), returns
  // x = M^{-T} z; for z ~ N(0, I) the result has covariance A^{-1}.
  Vec solve_factor_transpose(const Vec& z) const {
    Vec y = z.array() / solver_.vectorD().array().sqrt();
    Vec w = solver_.matrixU().solve(y);
    return solver_.permutationPinv() * w;
  }

 private:
  Eigen::SimplicialLDLT<SpMat> solver_;
  bool analyzed_ = false;
  int dim_ = 0;
};

}  // namespace surfbayes
