#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "mfeit/common.hpp"

namespace mfeit {

inline double wrap_angle(double t) {
  double w = std::fmod(t, two_pi);
  return w < 0 ? w + two_pi : w;
}

/// Counterclockwise angular distance from `from` to `to`.
inline double ccw_distance(double from, double to) { return wrap_angle(to - from); }

struct BoundaryEdge {
  int n0 = -1;       // ordered so the domain lies on the left
  int n1 = -1;
  int element = -1;  // owning element
};

/// Triangulation of the region x^2/a^2 + y^2/b^2 < 1 (disk when a == b).
/// Elements are counterclockwise node triples; boundary nodes lie exactly on
/// the curve. Immutable once electrodes have been placed.
struct Mesh {
  double semi_a = 1.0;
  double semi_b = 1.0;
  std::vector<Eigen::Vector2d> nodes;
  std::vector<std::array<int, 3>> elements;
  std::vector<BoundaryEdge> boundary_edges;
  std::vector<double> element_areas;
  std::vector<std::vector<int>> neighbors;  // elements sharing one edge
  std::vector<char> node_on_boundary;

  int node_count() const { return static_cast<int>(nodes.size()); }
  int element_count() const { return static_cast<int>(elements.size()); }

  Eigen::Vector2d centroid(int l) const {
    const auto& e = elements[l];
    return (nodes[e[0]] + nodes[e[1]] + nodes[e[2]]) / 3.0;
  }

  /// Parameter angle of a boundary node on the curve t -> (a cos t, b sin t).
  double boundary_param(int node) const {
    const auto& p = nodes[node];
    return wrap_angle(std::atan2(p.y() / semi_b, p.x() / semi_a));
  }

  Eigen::Vector2d boundary_point(double t) const {
    return {semi_a * std::cos(t), semi_b * std::sin(t)};
  }

  double edge_length(const BoundaryEdge& e) const { return (nodes[e.n1] - nodes[e.n0]).norm(); }

  double total_area() const {
    double s = 0;
    for (double a : element_areas) s += a;
    return s;
  }

  double boundary_length() const {
    double s = 0;
    for (const auto& e : boundary_edges) s += edge_length(e);
    return s;
  }

  double max_diameter() const {
    double d = 0;
    for (const auto& e : elements) {
      d = std::max(d, (nodes[e[0]] - nodes[e[1]]).norm());
      d = std::max(d, (nodes[e[1]] - nodes[e[2]]).norm());
      d = std::max(d, (nodes[e[2]] - nodes[e[0]]).norm());
    }
    return d;
  }
};

inline double signed_area(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                          const Eigen::Vector2d& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

/// Recomputes areas, boundary edges, adjacency and boundary flags from the
/// node and element lists. Throws on inverted elements or non-manifold edges.
inline void finalize_mesh(Mesh& m) {
  const int ne = m.element_count();
  m.element_areas.assign(ne, 0.0);
  for (int l = 0; l < ne; ++l) {
    const auto& e = m.elements[l];
    const double a = signed_area(m.nodes[e[0]], m.nodes[e[1]], m.nodes[e[2]]);
    if (!(a > 0)) throw NumericalError("mesh element " + std::to_string(l) + " has non-positive area");
    m.element_areas[l] = a;
  }

  // Directed edges of CCW triangles keep the domain on the left; an edge seen
  // once is a boundary edge.
  struct EdgeUse {
    int count = 0;
    int elem[2] = {-1, -1};
    int from = -1, to = -1;  // orientation of the first use
  };
  std::map<std::pair<int, int>, EdgeUse> edges;
  for (int l = 0; l < ne; ++l) {
    const auto& e = m.elements[l];
    for (int k = 0; k < 3; ++k) {
      const int a = e[k], b = e[(k + 1) % 3];
      auto key = std::minmax(a, b);
      auto& use = edges[{key.first, key.second}];
      if (use.count >= 2)
        throw NumericalError("mesh edge shared by more than two elements");
      use.elem[use.count] = l;
      if (use.count == 0) {
        use.from = a;
        use.to = b;
      }
      ++use.count;
    }
  }

  m.boundary_edges.clear();
  m.neighbors.assign(ne, {});
  m.node_on_boundary.assign(m.node_count(), 0);
  for (const auto& [key, use] : edges) {
    if (use.count == 1) {
      m.boundary_edges.push_back({use.from, use.to, use.elem[0]});
      m.node_on_boundary[use.from] = 1;
      m.node_on_boundary[use.to] = 1;
    } else {
      m.neighbors[use.elem[0]].push_back(use.elem[1]);
      m.neighbors[use.elem[1]].push_back(use.elem[0]);
    }
  }
  for (auto& nb : m.neighbors) std::sort(nb.begin(), nb.end());
}

/// Invariant checks, used by tests and after electrode placement.
inline void validate_mesh(const Mesh& m) {
  for (int l = 0; l < m.element_count(); ++l) {
    if (!(m.element_areas[l] > 0)) throw NumericalError("non-positive element area");
    if (m.neighbors[l].size() > 3) throw NumericalError("element with more than three neighbors");
    for (int k : m.neighbors[l]) {
      if (k == l) throw NumericalError("element adjacent to itself");
      const auto& nb = m.neighbors[k];
      if (!std::binary_search(nb.begin(), nb.end(), l))
        throw NumericalError("asymmetric element adjacency");
    }
  }
  for (const auto& be : m.boundary_edges) {
    if (be.element < 0 || be.element >= m.element_count())
      throw NumericalError("boundary edge with invalid owner");
  }
}

inline constexpr long long kMeshElementBudget = 2'000'000;

namespace detail {

inline void push_ccw(Mesh& m, int a, int b, int c) {
  if (signed_area(m.nodes[a], m.nodes[b], m.nodes[c]) < 0) std::swap(b, c);
  m.elements.push_back({a, b, c});
}

// Triangulates the annulus between an inner ring of `ni` nodes and an outer
// ring of `no` nodes, both uniformly spaced in angle, producing ni + no
// triangles. Pointers advance by comparing angular fractions exactly.
inline void zip_rings(Mesh& m, int inner_start, int ni, int outer_start, int no) {
  int p = 0, q = 0;
  while (p < ni || q < no) {
    const bool advance_outer =
        q < no && (p == ni || static_cast<long long>(q + 1) * ni <= static_cast<long long>(p + 1) * no);
    if (advance_outer) {
      push_ccw(m, outer_start + q % no, outer_start + (q + 1) % no, inner_start + p % ni);
      ++q;
    } else {
      push_ccw(m, outer_start + q % no, inner_start + (p + 1) % ni, inner_start + p % ni);
      ++p;
    }
  }
}

}  // namespace detail

/// Structured polar-ring triangulation of a disk: rings of 6*i nodes at radii
/// i*radius/R, zipped ring to ring. Quasi-uniform with max element diameter
/// close to target_h; boundary nodes lie on the circle exactly.
inline Mesh build_disk_mesh(double radius, double target_h) {
  if (!(radius > 0) || !(target_h > 0)) throw ConfigError("build_disk_mesh: radius and target_h must be positive");
  if (!(target_h < radius)) throw ConfigError("build_disk_mesh: target_h must be smaller than the radius");
  const long long rings = std::max<long long>(1, std::llround(radius / target_h));
  if (6 * rings * rings > kMeshElementBudget)
    throw ConfigError("build_disk_mesh: target_h too small for the element budget");

  Mesh m;
  m.semi_a = m.semi_b = radius;
  m.nodes.push_back({0.0, 0.0});
  std::vector<int> ring_start(rings + 1, 0);
  for (int i = 1; i <= rings; ++i) {
    ring_start[i] = m.node_count();
    const int n = 6 * i;
    const double r = radius * static_cast<double>(i) / static_cast<double>(rings);
    for (int p = 0; p < n; ++p) {
      const double t = two_pi * p / n;
      m.nodes.push_back({r * std::cos(t), r * std::sin(t)});
    }
  }
  for (int q = 0; q < 6; ++q) detail::push_ccw(m, ring_start[1] + q, ring_start[1] + (q + 1) % 6, 0);
  for (int i = 2; i <= rings; ++i)
    detail::zip_rings(m, ring_start[i - 1], 6 * (i - 1), ring_start[i], 6 * i);

  finalize_mesh(m);
  return m;
}

/// Ellipse x^2/a^2 + y^2/b^2 < 1, built by scaling a unit-disk mesh. The map
/// (x, y) -> (a x, b y) carries boundary nodes onto the ellipse exactly; for
/// a == b == 1 the result coincides with build_disk_mesh(1, target_h).
inline Mesh build_ellipse_mesh(double a, double b, double target_h) {
  if (!(a > 0) || !(b > 0)) throw ConfigError("build_ellipse_mesh: semi-axes must be positive");
  if (!(target_h < std::min(a, b)))
    throw ConfigError("build_ellipse_mesh: target_h must be smaller than min(a, b)");
  Mesh m = build_disk_mesh(1.0, target_h / std::max(a, b));
  for (auto& p : m.nodes) {
    p.x() *= a;
    p.y() *= b;
  }
  m.semi_a = a;
  m.semi_b = b;
  finalize_mesh(m);
  return m;
}

/// E disjoint boundary arcs, each an interval in the boundary parameter, with
/// the boundary edges they cover and per-electrode contact constants.
struct ElectrodeLayout {
  std::vector<std::pair<double, double>> arcs;  // (start, start + span), start in [0, 2*pi)
  std::vector<std::vector<int>> edge_map;       // boundary-edge indices per electrode
  std::vector<double> contact_constants;        // c_j > 0

  int count() const { return static_cast<int>(arcs.size()); }
  double span(int j) const { return arcs[j].second - arcs[j].first; }
  double center(int j) const { return wrap_angle(arcs[j].first + 0.5 * span(j)); }
};

namespace detail {

// Inserts a boundary node at parameter t unless one already exists within
// tolerance. Splits the chord of the owning triangle; the new node sits on
// the exact curve, slightly outside the old chord.
inline bool ensure_boundary_node(Mesh& m, double t, double tol = 1e-9) {
  for (const auto& be : m.boundary_edges) {
    const double t0 = m.boundary_param(be.n0);
    const double span = ccw_distance(t0, m.boundary_param(be.n1));
    const double u = ccw_distance(t0, t);
    if (u <= tol || std::abs(u - span) <= tol) return false;  // node already present
    if (u >= span) continue;                                  // t lies beyond this edge
    const int mid = m.node_count();
    m.nodes.push_back(m.boundary_point(t));
    auto& tri = m.elements[be.element];
    int apex = -1;
    for (int v : tri)
      if (v != be.n0 && v != be.n1) apex = v;
    tri = {be.n0, mid, apex};
    m.elements.push_back({mid, be.n1, apex});
    finalize_mesh(m);
    return true;
  }
  return false;
}

}  // namespace detail

/// Places `count` electrodes centered at 2*pi*j/count + offset_j, each
/// spanning `arc_angle` in the boundary parameter (equal to arc length on the
/// unit circle). Splits mesh boundary edges so every arc endpoint is a node.
inline ElectrodeLayout place_electrodes(Mesh& mesh, int count, double arc_angle,
                                        const std::vector<double>& angular_offsets = {}) {
  if (count < 2) throw ConfigError("place_electrodes: at least two electrodes required");
  if (!(arc_angle > 0)) throw ConfigError("place_electrodes: arc must be positive");
  if (!angular_offsets.empty() && static_cast<int>(angular_offsets.size()) != count)
    throw ConfigError("place_electrodes: offsets must match the electrode count");
  if (count * arc_angle > two_pi + 1e-12)
    throw ConfigError("place_electrodes: total electrode arc exceeds the boundary");

  ElectrodeLayout layout;
  layout.arcs.resize(count);
  for (int j = 0; j < count; ++j) {
    const double off = angular_offsets.empty() ? 0.0 : angular_offsets[j];
    const double start = wrap_angle(two_pi * j / count + off - 0.5 * arc_angle);
    layout.arcs[j] = {start, start + arc_angle};
  }

  // Closures must be pairwise disjoint: walking the circle, consecutive arcs
  // need a strictly positive gap.
  std::vector<int> order(count);
  for (int j = 0; j < count; ++j) order[j] = j;
  std::sort(order.begin(), order.end(),
            [&](int i, int j) { return layout.arcs[i].first < layout.arcs[j].first; });
  for (int r = 0; r < count; ++r) {
    const int i = order[r];
    const int k = order[(r + 1) % count];
    const double gap = ccw_distance(layout.arcs[i].first, layout.arcs[k].first) - arc_angle;
    if (!(gap > 1e-12))
      throw ConfigError("place_electrodes: electrodes " + std::to_string(std::min(i, k)) + " and " +
                        std::to_string(std::max(i, k)) + " overlap");
  }

  std::vector<double> endpoints;
  for (const auto& [s, e] : layout.arcs) {
    endpoints.push_back(wrap_angle(s));
    endpoints.push_back(wrap_angle(e));
  }
  std::sort(endpoints.begin(), endpoints.end());
  for (double t : endpoints) detail::ensure_boundary_node(mesh, t);
  validate_mesh(mesh);

  layout.edge_map.assign(count, {});
  for (int be = 0; be < static_cast<int>(mesh.boundary_edges.size()); ++be) {
    const auto& edge = mesh.boundary_edges[be];
    const double t0 = mesh.boundary_param(edge.n0);
    const double mid = t0 + 0.5 * ccw_distance(t0, mesh.boundary_param(edge.n1));
    for (int j = 0; j < count; ++j) {
      if (ccw_distance(layout.arcs[j].first, mid) < arc_angle) {
        layout.edge_map[j].push_back(be);
        break;
      }
    }
  }
  for (int j = 0; j < count; ++j) {
    if (layout.edge_map[j].empty())
      throw ConfigError("place_electrodes: electrode " + std::to_string(j) + " covers no boundary edge");
  }
  layout.contact_constants.assign(count, 1.0);
  return layout;
}

/// Electrode length: sum of covered boundary-edge lengths.
inline double electrode_length(const Mesh& mesh, const ElectrodeLayout& layout, int j) {
  double s = 0;
  for (int be : layout.edge_map[j]) s += mesh.edge_length(mesh.boundary_edges[be]);
  return s;
}

}  // namespace mfeit
