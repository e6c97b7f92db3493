#pragma once

#include <limits>
#include <string>
#include <vector>

#include "surfbayes/types.hpp"

namespace surfbayes {

// Triangular surface mesh; coordinates in mm.
struct Mesh {
  Mat vertices;                     // n x 3
  Eigen::MatrixXi triangles;        // m x 3, 0-based
  int n() const { return static_cast<int>(vertices.rows()); }
  int n_triangles() const { return static_cast<int>(triangles.rows()); }

  Eigen::Vector3d vertex(int i) const { return vertices.row(i); }
};

double triangle_area(const Mesh& mesh, int t);
double total_area(const Mesh& mesh);
double bounding_box_diagonal(const Mesh& mesh);

// Throws ValidationError on out-of-range indices or degenerate triangles.
// Returns warnings (e.g. mesh not a single connected component).
std::vector<std::string> validate_mesh(const Mesh& mesh);

// Text format: `mesh <n> <m>` header, `v x y z` and `f i j k` lines.
Mesh load_mesh(const std::string& path);
void save_mesh(const Mesh& mesh, const std::string& path);
Mesh parse_mesh(std::istream& in);
void write_mesh(const Mesh& mesh, std::ostream& out);

// Shortest-path distance along mesh edges (Euclidean edge weights) from a
// set of source vertices. Unreachable vertices get +inf. If max_dist is
// finite the search stops expanding past it (distances beyond are +inf).
Vec graph_geodesic_distances(
    const Mesh& mesh, const std::vector<int>& sources,
    double max_dist = std::numeric_limits<double>::infinity());

// Adjacency as edge lists (built once, reused by Dijkstra-based passes).
struct MeshGraph {
  std::vector<std::vector<std::pair<int, double>>> adj;  // (neighbor, length)
  explicit MeshGraph(const Mesh& mesh);
};

Vec graph_geodesic_distances(
    const MeshGraph& graph, const std::vector<int>& sources,
    double max_dist = std::numeric_limits<double>::infinity());

}  // namespace surfbayes
