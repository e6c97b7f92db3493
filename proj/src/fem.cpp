#include "surfbayes/fem.hpp"

#include <algorithm>
#include <cmath>

namespace surfbayes {

FemMatrices build_fem_matrices(const Mesh& mesh) {
  validate_mesh(mesh);  // throws on degenerate triangles
  const int n = mesh.n();
  FemMatrices fem;
  fem.c_diag = Vec::Zero(n);

  std::vector<Triplet> g_trip;
  g_trip.reserve(static_cast<size_t>(mesh.n_triangles()) * 12);

  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const int i0 = mesh.triangles(t, 0);
    const int i1 = mesh.triangles(t, 1);
    const int i2 = mesh.triangles(t, 2);
    const Eigen::Vector3d p0 = mesh.vertex(i0);
    const Eigen::Vector3d p1 = mesh.vertex(i1);
    const Eigen::Vector3d p2 = mesh.vertex(i2);

    const double area = 0.5 * ((p1 - p0).cross(p2 - p0)).norm();
    const double third = area / 3.0;
    fem.c_diag(i0) += third;
    fem.c_diag(i1) += third;
    fem.c_diag(i2) += third;

    // cotangent stiffness: off-diagonal (a,b) gets -cot(angle opposite)/2,
    // diagonals pick up the balancing positive parts so each row sums to 0
    auto cot_at = [&](const Eigen::Vector3d& apex, const Eigen::Vector3d& u,
                      const Eigen::Vector3d& v) {
      Eigen::Vector3d e1 = u - apex, e2 = v - apex;
      double cross = e1.cross(e2).norm();
      return e1.dot(e2) / cross;
    };
    const double c0 = cot_at(p0, p1, p2);  // opposite edge (1,2)
    const double c1 = cot_at(p1, p2, p0);  // opposite edge (2,0)
    const double c2 = cot_at(p2, p0, p1);  // opposite edge (0,1)

    auto add_pair = [&](int a, int b, double cot) {
      g_trip.emplace_back(a, b, -0.5 * cot);
      g_trip.emplace_back(b, a, -0.5 * cot);
      g_trip.emplace_back(a, a, 0.5 * cot);
      g_trip.emplace_back(b, b, 0.5 * cot);
    };
    add_pair(i1, i2, c0);
    add_pair(i2, i0, c1);
    add_pair(i0, i1, c2);
  }

  for (int i = 0; i < n; ++i)
    if (!(fem.c_diag(i) > 0.0))
      throw ValidationError("vertex " + std::to_string(i) +
                            " has no incident triangle (C_ii = 0)");

  fem.G.resize(n, n);
  fem.G.setFromTriplets(g_trip.begin(), g_trip.end());
  fem.G.makeCompressed();

  std::vector<Triplet> c_trip;
  c_trip.reserve(n);
  for (int i = 0; i < n; ++i) c_trip.emplace_back(i, i, fem.c_diag(i));
  fem.C.resize(n, n);
  fem.C.setFromTriplets(c_trip.begin(), c_trip.end());

  SpMat cinv_g = fem.c_diag.cwiseInverse().asDiagonal() * fem.G;
  fem.GCinvG = (fem.G * cinv_g).pruned(0.0);  // drop explicit zeros
  fem.GCinvG.makeCompressed();
  // symmetrize to kill roundoff asymmetry from the sparse product
  fem.GCinvG = (0.5 * (SpMat(fem.GCinvG.transpose()) + fem.GCinvG)).eval();
  fem.GCinvG.makeCompressed();
  return fem;
}

std::vector<int> Projector::nearest_vertex() const {
  std::vector<int> out(psi.rows(), 0);
  std::vector<double> best(psi.rows(), -1.0);
  for (int col = 0; col < psi.outerSize(); ++col)
    for (SpMat::InnerIterator it(psi, col); it; ++it)
      if (it.value() > best[it.row()]) {
        best[it.row()] = it.value();
        out[it.row()] = static_cast<int>(it.col());
      }
  return out;
}

namespace {

// closest point on triangle (standard region walk), returns squared distance
// and barycentric coordinates of the closest point
double closest_point_barycentric(const Eigen::Vector3d& p,
                                 const Eigen::Vector3d& a,
                                 const Eigen::Vector3d& b,
                                 const Eigen::Vector3d& c,
                                 Eigen::Vector3d& bary) {
  Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
  double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) {
    bary << 1, 0, 0;
    return (p - a).squaredNorm();
  }
  Eigen::Vector3d bp = p - b;
  double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) {
    bary << 0, 1, 0;
    return (p - b).squaredNorm();
  }
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    double v = d1 / (d1 - d3);
    bary << 1 - v, v, 0;
    return (p - (a + v * ab)).squaredNorm();
  }
  Eigen::Vector3d cp = p - c;
  double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) {
    bary << 0, 0, 1;
    return (p - c).squaredNorm();
  }
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    double w = d2 / (d2 - d6);
    bary << 1 - w, 0, w;
    return (p - (a + w * ac)).squaredNorm();
  }
  double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    bary << 0, 1 - w, w;
    return (p - (b + w * (c - b))).squaredNorm();
  }
  double denom = 1.0 / (va + vb + vc);
  double v = vb * denom, w = vc * denom;
  bary << 1 - v - w, v, w;
  return (p - (a + ab * v + ac * w)).squaredNorm();
}

}  // namespace

Projector build_projector(const Mesh& mesh, const Mat& points,
                          double snap_tol) {
  if (points.cols() != 3) throw ValidationError("points must be N x 3");
  if (snap_tol < 0.0) snap_tol = 1e-6 * bounding_box_diagonal(mesh);
  const int N = static_cast<int>(points.rows());
  std::vector<Triplet> trip;
  trip.reserve(static_cast<size_t>(N) * 3);

  for (int v = 0; v < N; ++v) {
    const Eigen::Vector3d p = points.row(v);
    double best_d2 = std::numeric_limits<double>::infinity();
    int best_t = -1;
    Eigen::Vector3d best_bary;
    for (int t = 0; t < mesh.n_triangles(); ++t) {
      Eigen::Vector3d bary;
      double d2 = closest_point_barycentric(
          p, mesh.vertex(mesh.triangles(t, 0)),
          mesh.vertex(mesh.triangles(t, 1)), mesh.vertex(mesh.triangles(t, 2)),
          bary);
      if (d2 < best_d2) {
        best_d2 = d2;
        best_t = t;
        best_bary = bary;
      }
    }
    if (std::sqrt(best_d2) > snap_tol)
      throw ValidationError("data location " + std::to_string(v) +
                            " lies off the mesh beyond the snap tolerance");
    // clamp tiny weights to exact 0/1 so vertex hits give a single 1
    for (int j = 0; j < 3; ++j)
      if (best_bary(j) < 1e-12) best_bary(j) = 0.0;
    best_bary /= best_bary.sum();
    for (int j = 0; j < 3; ++j)
      if (best_bary(j) > 0.0)
        trip.emplace_back(v, mesh.triangles(best_t, j), best_bary(j));
  }
  Projector proj;
  proj.psi.resize(N, mesh.n());
  proj.psi.setFromTriplets(trip.begin(), trip.end());
  proj.psi.makeCompressed();
  return proj;
}

Projector build_projector(const Mesh& mesh, const std::vector<int>& indices) {
  std::vector<Triplet> trip;
  trip.reserve(indices.size());
  for (size_t v = 0; v < indices.size(); ++v) {
    if (indices[v] < 0 || indices[v] >= mesh.n())
      throw ValidationError("projector vertex index out of range");
    trip.emplace_back(static_cast<int>(v), indices[v], 1.0);
  }
  Projector proj;
  proj.psi.resize(static_cast<int>(indices.size()), mesh.n());
  proj.psi.setFromTriplets(trip.begin(), trip.end());
  proj.psi.makeCompressed();
  return proj;
}

Projector identity_projector(const Mesh& mesh) {
  std::vector<int> idx(mesh.n());
  for (int i = 0; i < mesh.n(); ++i) idx[i] = i;
  return build_projector(mesh, idx);
}

}  // namespace surfbayes
