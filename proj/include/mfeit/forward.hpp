#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cmath>
#include <functional>
#include <vector>

#include "mfeit/common.hpp"
#include "mfeit/mesh.hpp"

namespace mfeit {

/// Per-element positive conductivity values.
inline void check_conductivity(const Mesh& mesh, const Eigen::VectorXd& sigma) {
  if (sigma.size() != mesh.element_count())
    throw ConfigError("conductivity field does not match the element count");
  if (!(sigma.minCoeff() > 0)) throw NumericalError("conductivity must be positive everywhere");
}

/// Gradients of the three P1 basis functions on element l (2x3, constant).
inline Eigen::Matrix<double, 2, 3> element_basis_gradients(const Mesh& mesh, int l) {
  const auto& e = mesh.elements[l];
  const Eigen::Vector2d& p0 = mesh.nodes[e[0]];
  const Eigen::Vector2d& p1 = mesh.nodes[e[1]];
  const Eigen::Vector2d& p2 = mesh.nodes[e[2]];
  const double inv2a = 1.0 / (2.0 * mesh.element_areas[l]);
  Eigen::Matrix<double, 2, 3> g;
  // grad(lambda_i) = perp(opposite edge) / (2 area)
  g.col(0) = Eigen::Vector2d(p1.y() - p2.y(), p2.x() - p1.x()) * inv2a;
  g.col(1) = Eigen::Vector2d(p2.y() - p0.y(), p0.x() - p2.x()) * inv2a;
  g.col(2) = Eigen::Vector2d(p0.y() - p1.y(), p1.x() - p0.x()) * inv2a;
  return g;
}

/// Gradient of a P1 field on element l.
inline Eigen::Vector2d element_gradient(const Mesh& mesh, int l, const Eigen::VectorXd& u) {
  const auto g = element_basis_gradients(mesh, l);
  const auto& e = mesh.elements[l];
  return g.col(0) * u(e[0]) + g.col(1) * u(e[1]) + g.col(2) * u(e[2]);
}

namespace detail {

inline void add_stiffness(const Mesh& mesh, const Eigen::VectorXd& sigma,
                          std::vector<Eigen::Triplet<double>>& trip) {
  for (int l = 0; l < mesh.element_count(); ++l) {
    const auto g = element_basis_gradients(mesh, l);
    const auto& e = mesh.elements[l];
    const double w = sigma(l) * mesh.element_areas[l];
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        trip.emplace_back(e[i], e[j], w * g.col(i).dot(g.col(j)));
      }
    }
  }
}

inline void check_residual(const Eigen::SparseMatrix<double>& A, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& rhs) {
  const double scale = std::max(rhs.norm(), 1e-300);
  const double res = (A * x - rhs).norm();
  if (!(res <= 1e-10 * scale))
    throw NumericalError("linear solve residual " + fmt17(res / scale) + " exceeds 1e-10");
}

}  // namespace detail

/// Nodal potential and electrode voltages of one CEM solve; U is grounded to
/// zero mean.
struct CemSolution {
  Eigen::VectorXd u;
  Eigen::VectorXd U;
};

/// Complete electrode model operator for fixed (mesh, sigma, z): assembles the
/// coupled nodal/electrode system with a grounding multiplier and caches the
/// sparse factorization, so repeated current patterns reuse it.
class CemOperator {
 public:
  CemOperator(const Mesh& mesh, const ElectrodeLayout& layout, const Eigen::VectorXd& sigma,
              const Eigen::VectorXd& z)
      : n_(mesh.node_count()), e_(layout.count()) {
    check_conductivity(mesh, sigma);
    if (z.size() != e_) throw ConfigError("contact impedance count does not match electrodes");
    if (!(z.minCoeff() > 0)) throw ConfigError("contact impedances must be positive");

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(9 * mesh.element_count() + 8 * e_ * 4);
    detail::add_stiffness(mesh, sigma, trip);

    for (int j = 0; j < e_; ++j) {
      const double zi = 1.0 / z(j);
      for (int be : layout.edge_map[j]) {
        const auto& edge = mesh.boundary_edges[be];
        const double len = mesh.edge_length(edge);
        // exact integration of P1 traces on the electrode edge
        trip.emplace_back(edge.n0, edge.n0, zi * len / 3.0);
        trip.emplace_back(edge.n1, edge.n1, zi * len / 3.0);
        trip.emplace_back(edge.n0, edge.n1, zi * len / 6.0);
        trip.emplace_back(edge.n1, edge.n0, zi * len / 6.0);
        trip.emplace_back(edge.n0, n_ + j, -zi * len / 2.0);
        trip.emplace_back(n_ + j, edge.n0, -zi * len / 2.0);
        trip.emplace_back(edge.n1, n_ + j, -zi * len / 2.0);
        trip.emplace_back(n_ + j, edge.n1, -zi * len / 2.0);
        trip.emplace_back(n_ + j, n_ + j, zi * len);
      }
    }
    // Lagrange multiplier grounding sum(U_j) = 0
    for (int j = 0; j < e_; ++j) {
      trip.emplace_back(n_ + j, n_ + e_, 1.0);
      trip.emplace_back(n_ + e_, n_ + j, 1.0);
    }

    matrix_.resize(n_ + e_ + 1, n_ + e_ + 1);
    matrix_.setFromTriplets(trip.begin(), trip.end());
    lu_.compute(matrix_);
    if (lu_.info() != Eigen::Success)
      throw NumericalError("CEM system factorization failed");
  }

  CemSolution solve(const Eigen::VectorXd& current) const {
    if (current.size() != e_) throw ConfigError("current pattern does not match electrode count");
    const double scale = std::max(1.0, current.cwiseAbs().maxCoeff());
    if (!(std::abs(current.sum()) <= 1e-12 * scale))
      throw ConfigError("current pattern must have zero sum");
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_ + e_ + 1);
    rhs.segment(n_, e_) = current;
    const Eigen::VectorXd x = lu_.solve(rhs);
    detail::check_residual(matrix_, x, rhs);
    return {x.head(n_), x.segment(n_, e_)};
  }

 private:
  int n_ = 0;
  int e_ = 0;
  Eigen::SparseMatrix<double> matrix_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

inline CemSolution solve_cem(const Mesh& mesh, const ElectrodeLayout& layout,
                             const Eigen::VectorXd& sigma, const Eigen::VectorXd& z,
                             const Eigen::VectorXd& current) {
  return CemOperator(mesh, layout, sigma, z).solve(current);
}

/// Current recovered from the discrete solution on electrode j,
/// z_j^{-1} * int_{e_j} (U_j - u) ds; equals the injected current up to the
/// solver residual.
inline double electrode_current(const Mesh& mesh, const ElectrodeLayout& layout,
                                const Eigen::VectorXd& z, const CemSolution& sol, int j) {
  double acc = 0;
  for (int be : layout.edge_map[j]) {
    const auto& edge = mesh.boundary_edges[be];
    const double len = mesh.edge_length(edge);
    acc += len * (sol.U(j) - 0.5 * (sol.u(edge.n0) + sol.u(edge.n1)));
  }
  return acc / z(j);
}

/// Trigonometric current basis: cos(n theta_j) for n = 1..E/2 and
/// sin(n theta_j) for n = 1..ceil(E/2)-1, with theta_j the nominal electrode
/// center 2 pi j / E; each pattern is shifted to exact zero sum. Yields E-1
/// linearly independent patterns.
inline std::vector<Eigen::VectorXd> trig_current_patterns(int electrode_count) {
  if (electrode_count < 2) throw ConfigError("trig_current_patterns: need at least two electrodes");
  const int e = electrode_count;
  std::vector<Eigen::VectorXd> patterns;
  patterns.reserve(e - 1);
  auto emit = [&](auto&& fn) {
    Eigen::VectorXd p(e);
    for (int j = 0; j < e; ++j) p(j) = fn(two_pi * j / e);
    p.array() -= p.mean();
    patterns.push_back(std::move(p));
  };
  for (int n = 1; n <= e / 2; ++n) emit([n](double t) { return std::cos(n * t); });
  for (int n = 1; n <= (e + 1) / 2 - 1; ++n) emit([n](double t) { return std::sin(n * t); });
  return patterns;
}

/// Reference CEM solutions for sigma == 1 and z == contact constants; one
/// factorization shared across all patterns.
inline std::vector<CemSolution> reference_solutions(const Mesh& mesh, const ElectrodeLayout& layout,
                                                    const Eigen::VectorXd& contact_constants,
                                                    const std::vector<Eigen::VectorXd>& patterns) {
  const CemOperator op(mesh, layout, Eigen::VectorXd::Ones(mesh.element_count()),
                       contact_constants);
  std::vector<CemSolution> out;
  out.reserve(patterns.size());
  for (const auto& p : patterns) out.push_back(op.solve(p));
  return out;
}

/// Boundary current density for the continuum model, sampled at the nodes
/// (zero elsewhere); piecewise linear along the boundary.
struct BoundaryFlux {
  Eigen::VectorXd node_values;
};

/// Samples a density given in the boundary parameter and shifts it to zero
/// integral over the polygonal boundary.
inline BoundaryFlux make_boundary_flux(const Mesh& mesh,
                                       const std::function<double(double)>& density) {
  BoundaryFlux f;
  f.node_values = Eigen::VectorXd::Zero(mesh.node_count());
  for (int i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_on_boundary[i]) f.node_values(i) = density(mesh.boundary_param(i));
  }
  double integral = 0, length = 0;
  for (const auto& be : mesh.boundary_edges) {
    const double len = mesh.edge_length(be);
    integral += 0.5 * len * (f.node_values(be.n0) + f.node_values(be.n1));
    length += len;
  }
  const double shift = integral / length;
  for (int i = 0; i < mesh.node_count(); ++i) {
    if (mesh.node_on_boundary[i]) f.node_values(i) -= shift;
  }
  return f;
}

/// int_{boundary} f g ds for two P1 nodal fields, edge-exact.
inline double boundary_pairing(const Mesh& mesh, const Eigen::VectorXd& f,
                               const Eigen::VectorXd& g) {
  double acc = 0;
  for (const auto& be : mesh.boundary_edges) {
    const double len = mesh.edge_length(be);
    const double f0 = f(be.n0), f1 = f(be.n1), g0 = g(be.n0), g1 = g(be.n1);
    acc += len / 6.0 * (2 * f0 * g0 + f0 * g1 + f1 * g0 + 2 * f1 * g1);
  }
  return acc;
}

/// Continuum Neumann operator: P1 stiffness plus one Lagrange multiplier row
/// enforcing zero boundary mean (boundary nodes weighted by edge lengths).
class ContinuumOperator {
 public:
  ContinuumOperator(const Mesh& mesh, const Eigen::VectorXd& sigma) : mesh_(&mesh), n_(mesh.node_count()) {
    check_conductivity(mesh, sigma);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(9 * mesh.element_count() + 4 * mesh.boundary_edges.size());
    detail::add_stiffness(mesh, sigma, trip);
    for (const auto& be : mesh.boundary_edges) {
      const double w = 0.5 * mesh.edge_length(be);
      trip.emplace_back(be.n0, n_, w);
      trip.emplace_back(n_, be.n0, w);
      trip.emplace_back(be.n1, n_, w);
      trip.emplace_back(n_, be.n1, w);
    }
    matrix_.resize(n_ + 1, n_ + 1);
    matrix_.setFromTriplets(trip.begin(), trip.end());
    lu_.compute(matrix_);
    if (lu_.info() != Eigen::Success)
      throw NumericalError("continuum system factorization failed (disconnected mesh?)");
  }

  Eigen::VectorXd solve(const BoundaryFlux& flux) const {
    if (flux.node_values.size() != n_) throw ConfigError("flux does not match the mesh");
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_ + 1);
    double integral = 0;
    double scale = 0;
    for (const auto& be : mesh_->boundary_edges) {
      const double len = mesh_->edge_length(be);
      const double f0 = flux.node_values(be.n0), f1 = flux.node_values(be.n1);
      rhs(be.n0) += len / 6.0 * (2 * f0 + f1);
      rhs(be.n1) += len / 6.0 * (f0 + 2 * f1);
      integral += 0.5 * len * (f0 + f1);
      scale = std::max({scale, std::abs(f0), std::abs(f1)});
    }
    if (!(std::abs(integral) <= 1e-12 * std::max(1.0, scale)))
      throw ConfigError("boundary flux must have zero integral");
    const Eigen::VectorXd x = lu_.solve(rhs);
    detail::check_residual(matrix_, x, rhs);
    return x.head(n_);
  }

 private:
  const Mesh* mesh_;
  int n_ = 0;
  Eigen::SparseMatrix<double> matrix_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

inline Eigen::VectorXd solve_continuum(const Mesh& mesh, const Eigen::VectorXd& sigma,
                                       const BoundaryFlux& flux) {
  return ContinuumOperator(mesh, sigma).solve(flux);
}

inline std::vector<Eigen::VectorXd> reference_solutions_continuum(
    const Mesh& mesh, const std::vector<BoundaryFlux>& fluxes) {
  const ContinuumOperator op(mesh, Eigen::VectorXd::Ones(mesh.element_count()));
  std::vector<Eigen::VectorXd> out;
  out.reserve(fluxes.size());
  for (const auto& f : fluxes) out.push_back(op.solve(f));
  return out;
}

}  // namespace mfeit
