#include "surfbayes/mesh.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <queue>
#include <sstream>

namespace surfbayes {

double triangle_area(const Mesh& mesh, int t) {
  Eigen::Vector3d a = mesh.vertex(mesh.triangles(t, 0));
  Eigen::Vector3d b = mesh.vertex(mesh.triangles(t, 1));
  Eigen::Vector3d c = mesh.vertex(mesh.triangles(t, 2));
  return 0.5 * ((b - a).cross(c - a)).norm();
}

double total_area(const Mesh& mesh) {
  double s = 0.0;
  for (int t = 0; t < mesh.n_triangles(); ++t) s += triangle_area(mesh, t);
  return s;
}

double bounding_box_diagonal(const Mesh& mesh) {
  if (mesh.n() == 0) return 0.0;
  Eigen::Vector3d lo = mesh.vertices.colwise().minCoeff();
  Eigen::Vector3d hi = mesh.vertices.colwise().maxCoeff();
  return (hi - lo).norm();
}

std::vector<std::string> validate_mesh(const Mesh& mesh) {
  const int n = mesh.n();
  if (n < 3) throw ValidationError("mesh needs at least 3 vertices");
  if (mesh.n_triangles() < 1) throw ValidationError("mesh has no triangles");
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    for (int j = 0; j < 3; ++j) {
      int idx = mesh.triangles(t, j);
      if (idx < 0 || idx >= n)
        throw ValidationError("triangle " + std::to_string(t) +
                              " references vertex " + std::to_string(idx) +
                              " outside [0," + std::to_string(n) + ")");
    }
    if (mesh.triangles(t, 0) == mesh.triangles(t, 1) ||
        mesh.triangles(t, 1) == mesh.triangles(t, 2) ||
        mesh.triangles(t, 0) == mesh.triangles(t, 2))
      throw ValidationError("triangle " + std::to_string(t) +
                            " repeats a vertex");
  }
  const double diag = bounding_box_diagonal(mesh);
  const double area_floor = 1e-14 * std::max(diag * diag, 1e-300);
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    if (triangle_area(mesh, t) <= area_floor)
      throw ValidationError("triangle " + std::to_string(t) +
                            " is degenerate (zero area)");
  }

  std::vector<std::string> warnings;
  // connectivity check via BFS over triangle adjacency
  std::vector<std::vector<int>> adj(n);
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    for (int j = 0; j < 3; ++j) {
      int a = mesh.triangles(t, j), b = mesh.triangles(t, (j + 1) % 3);
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
  }
  std::vector<char> seen(n, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int reached = 1;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    for (int u : adj[v])
      if (!seen[u]) {
        seen[u] = 1;
        ++reached;
        q.push(u);
      }
  }
  if (reached != n)
    warnings.push_back("mesh is not a single connected component (" +
                       std::to_string(reached) + " of " + std::to_string(n) +
                       " vertices reachable from vertex 0)");
  return warnings;
}

Mesh parse_mesh(std::istream& in) {
  std::string tag;
  int n = 0, m = 0;
  if (!(in >> tag >> n >> m) || tag != "mesh")
    throw ParseError("expected header 'mesh <n_vertices> <n_triangles>'");
  if (n <= 0 || m <= 0) throw ParseError("nonpositive mesh counts in header");
  Mesh mesh;
  mesh.vertices.resize(n, 3);
  mesh.triangles.resize(m, 3);
  int nv = 0, nf = 0;
  while (in >> tag) {
    if (tag == "v") {
      if (nv >= n) throw ParseError("more vertices than declared");
      double x, y, z;
      if (!(in >> x >> y >> z)) throw ParseError("malformed vertex line");
      mesh.vertices.row(nv++) << x, y, z;
    } else if (tag == "f") {
      if (nf >= m) throw ParseError("more triangles than declared");
      int i, j, k;
      if (!(in >> i >> j >> k)) throw ParseError("malformed face line");
      mesh.triangles.row(nf++) << i, j, k;
    } else {
      throw ParseError("unexpected token '" + tag + "' in mesh file");
    }
  }
  if (nv != n || nf != m)
    throw ParseError("mesh file declares " + std::to_string(n) + "/" +
                     std::to_string(m) + " entries but contains " +
                     std::to_string(nv) + "/" + std::to_string(nf));
  for (const std::string& w : validate_mesh(mesh))
    std::cerr << "warning: " << w << "\n";
  return mesh;
}

Mesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mesh file: " + path);
  return parse_mesh(in);
}

void write_mesh(const Mesh& mesh, std::ostream& out) {
  out << "mesh " << mesh.n() << " " << mesh.n_triangles() << "\n";
  char buf[96];
  for (int i = 0; i < mesh.n(); ++i) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", mesh.vertices(i, 0),
                  mesh.vertices(i, 1), mesh.vertices(i, 2));
    out << buf;
  }
  for (int t = 0; t < mesh.n_triangles(); ++t)
    out << "f " << mesh.triangles(t, 0) << " " << mesh.triangles(t, 1) << " "
        << mesh.triangles(t, 2) << "\n";
}

void save_mesh(const Mesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write mesh file: " + path);
  write_mesh(mesh, out);
}

MeshGraph::MeshGraph(const Mesh& mesh) : adj(mesh.n()) {
  auto add_edge = [&](int a, int b) {
    double len = (mesh.vertex(a) - mesh.vertex(b)).norm();
    adj[a].emplace_back(b, len);
    adj[b].emplace_back(a, len);
  };
  // dedupe by inserting each undirected edge once (a < b)
  std::vector<std::vector<int>> seen(mesh.n());
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    for (int j = 0; j < 3; ++j) {
      int a = mesh.triangles(t, j), b = mesh.triangles(t, (j + 1) % 3);
      if (a > b) std::swap(a, b);
      auto& row = seen[a];
      if (std::find(row.begin(), row.end(), b) == row.end()) {
        row.push_back(b);
        add_edge(a, b);
      }
    }
  }
}

Vec graph_geodesic_distances(const MeshGraph& graph,
                             const std::vector<int>& sources,
                             double max_dist) {
  const int n = static_cast<int>(graph.adj.size());
  if (sources.empty()) throw ValidationError("geodesic source set is empty");
  Vec dist = Vec::Constant(n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
  for (int s : sources) {
    if (s < 0 || s >= n) throw ValidationError("geodesic source out of range");
    dist(s) = 0.0;
    heap.emplace(0.0, s);
  }
  while (!heap.empty()) {
    auto [d, v] = heap.top();
    heap.pop();
    if (d > dist(v)) continue;
    if (d > max_dist) break;
    for (auto [u, len] : graph.adj[v]) {
      double nd = d + len;
      if (nd < dist(u)) {
        dist(u) = nd;
        heap.emplace(nd, u);
      }
    }
  }
  if (std::isfinite(max_dist))
    for (int i = 0; i < n; ++i)
      if (dist(i) > max_dist) dist(i) = std::numeric_limits<double>::infinity();
  return dist;
}

Vec graph_geodesic_distances(const Mesh& mesh, const std::vector<int>& sources,
                             double max_dist) {
  return graph_geodesic_distances(MeshGraph(mesh), sources, max_dist);
}

}  // namespace surfbayes
