#pragma once

#include <vector>

#include "surfbayes/mesh.hpp"
#include "surfbayes/types.hpp"

namespace surfbayes {

// Finite-element building blocks of the spatial prior on a mesh:
//   C      lumped (diagonal) mass matrix, C_ii = sum of incident areas / 3
//   G      linear-basis stiffness matrix (cotangent weights), G 1 = 0
//   GCinvG precomputed G C^-1 G
struct FemMatrices {
  Vec c_diag;
  SpMat C;
  SpMat G;
  SpMat GCinvG;
  int n() const { return static_cast<int>(c_diag.size()); }
};

FemMatrices build_fem_matrices(const Mesh& mesh);

// Sparse N x n matrix mapping mesh coefficients to data locations.
// Rows sum to 1; barycentric rows have <= 3 nonzeros, vertex rows exactly 1.
struct Projector {
  SpMat psi;
  int n_locations() const { return static_cast<int>(psi.rows()); }
  int n_vertices() const { return static_cast<int>(psi.cols()); }
  // mesh vertex carrying the largest weight of each row (used when a
  // per-location quantity has to be smoothed over the mesh)
  std::vector<int> nearest_vertex() const;
};

// Data locations given as 3-D points: rows are barycentric weights on the
// closest triangle. Points farther than snap_tol from every triangle raise
// ValidationError. Default snap_tol = 1e-6 * bounding-box diagonal.
Projector build_projector(const Mesh& mesh, const Mat& points,
                          double snap_tol = -1.0);

// Data locations given as vertex indices: 0/1 selection matrix.
Projector build_projector(const Mesh& mesh, const std::vector<int>& indices);

// Identity projector (data locations are exactly the mesh vertices).
Projector identity_projector(const Mesh& mesh);

}  // namespace surfbayes
