#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "mfeit/common.hpp"
#include "mfeit/forward.hpp"
#include "mfeit/mesh.hpp"
#include "mfeit/spectral.hpp"

namespace mfeit {

/// Point-to-element lookup on a mesh via a uniform background grid.
class ElementLocator {
 public:
  explicit ElementLocator(const Mesh& mesh) : mesh_(&mesh) {
    lo_ = mesh.nodes[0];
    hi_ = mesh.nodes[0];
    for (const auto& p : mesh.nodes) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    const double diam = mesh.max_diameter();
    cell_ = std::max(diam, 1e-12);
    nx_ = std::max(1, static_cast<int>(std::ceil((hi_.x() - lo_.x()) / cell_)));
    ny_ = std::max(1, static_cast<int>(std::ceil((hi_.y() - lo_.y()) / cell_)));
    buckets_.assign(static_cast<size_t>(nx_) * ny_, {});
    for (int l = 0; l < mesh.element_count(); ++l) {
      const auto& e = mesh.elements[l];
      Eigen::Vector2d bl = mesh.nodes[e[0]], tr = mesh.nodes[e[0]];
      for (int k = 1; k < 3; ++k) {
        bl = bl.cwiseMin(mesh.nodes[e[k]]);
        tr = tr.cwiseMax(mesh.nodes[e[k]]);
      }
      const auto [i0, j0] = cell_of(bl);
      const auto [i1, j1] = cell_of(tr);
      for (int j = j0; j <= j1; ++j)
        for (int i = i0; i <= i1; ++i) buckets_[static_cast<size_t>(j) * nx_ + i].push_back(l);
    }
  }

  /// Index of the first element containing p in index order, or -1.
  int locate(const Eigen::Vector2d& p) const {
    if ((p.array() < lo_.array() - 1e-12).any() || (p.array() > hi_.array() + 1e-12).any())
      return -1;
    const auto [i, j] = cell_of(p);
    for (int l : buckets_[static_cast<size_t>(j) * nx_ + i]) {
      if (contains(l, p)) return l;
    }
    return -1;
  }

  /// Containing element, falling back to the element with the nearest
  /// centroid (smallest index on ties).
  int locate_or_nearest(const Eigen::Vector2d& p) const {
    const int l = locate(p);
    if (l >= 0) return l;
    int best = 0;
    double best_d = (mesh_->centroid(0) - p).squaredNorm();
    for (int k = 1; k < mesh_->element_count(); ++k) {
      const double d = (mesh_->centroid(k) - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

 private:
  std::pair<int, int> cell_of(const Eigen::Vector2d& p) const {
    int i = static_cast<int>((p.x() - lo_.x()) / cell_);
    int j = static_cast<int>((p.y() - lo_.y()) / cell_);
    return {std::clamp(i, 0, nx_ - 1), std::clamp(j, 0, ny_ - 1)};
  }

  bool contains(int l, const Eigen::Vector2d& p) const {
    const auto& e = mesh_->elements[l];
    const double eps = 1e-12 * mesh_->element_areas[l];
    const auto side = [&](int a, int b) {
      return signed_area(mesh_->nodes[a], mesh_->nodes[b], p);
    };
    return side(e[0], e[1]) >= -eps && side(e[1], e[2]) >= -eps && side(e[2], e[0]) >= -eps;
  }

  const Mesh* mesh_;
  Eigen::Vector2d lo_, hi_;
  double cell_ = 1;
  int nx_ = 1, ny_ = 1;
  std::vector<std::vector<int>> buckets_;
};

/// Row index j of the measurement pair (m, n), j = N*m + n with N patterns.
inline std::vector<std::pair<int, int>> build_index_map(int pattern_count) {
  std::vector<std::pair<int, int>> map;
  map.reserve(static_cast<size_t>(pattern_count) * pattern_count);
  for (int m = 0; m < pattern_count; ++m)
    for (int n = 0; n < pattern_count; ++n) map.emplace_back(m, n);
  return map;
}

/// Frequency-independent sensitivity matrix together with the per-frequency
/// data vectors it pairs with.
struct SensitivitySystem {
  Eigen::MatrixXd M;                           // J x L
  Eigen::MatrixXd X;                           // J x Q
  std::vector<std::pair<int, int>> index_map;  // row j -> pattern pair (m, n)
  std::vector<double> frequencies;
  std::vector<double> s0_values;
};

/// Sensitivity matrix M_{jl} = int_{element l} grad v*_n . grad v*_m dx for
/// reference potentials v* on the (finer) forward mesh. Forward-element
/// contributions are lumped into the inversion element containing their
/// centroid, with area weighting.
inline Eigen::MatrixXd assemble_sensitivity(const Mesh& inversion_mesh, const Mesh& forward_mesh,
                                            const std::vector<Eigen::VectorXd>& ref_potentials) {
  const int n_pat = static_cast<int>(ref_potentials.size());
  if (n_pat == 0) throw ConfigError("assemble_sensitivity: no reference potentials");
  const int rows = n_pat * n_pat;
  const int cols = inversion_mesh.element_count();
  const int fe = forward_mesh.element_count();

  std::vector<Eigen::Matrix2Xd> grads(n_pat, Eigen::Matrix2Xd(2, fe));
  for (int m = 0; m < n_pat; ++m) {
    if (ref_potentials[m].size() != forward_mesh.node_count())
      throw ConfigError("reference potential does not match the forward mesh");
    for (int e = 0; e < fe; ++e) grads[m].col(e) = element_gradient(forward_mesh, e, ref_potentials[m]);
  }

  const ElementLocator locator(inversion_mesh);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(rows, cols);
  double mapped_area = 0;
  for (int e = 0; e < fe; ++e) {
    const Eigen::Vector2d c = forward_mesh.centroid(e);
    int l = locator.locate(c);
    if (l >= 0)
      mapped_area += forward_mesh.element_areas[e];
    else
      l = locator.locate_or_nearest(c);
    const double w = forward_mesh.element_areas[e];
    for (int m = 0; m < n_pat; ++m) {
      for (int n = m; n < n_pat; ++n) {
        const double d = w * grads[m].col(e).dot(grads[n].col(e));
        M(n_pat * m + n, l) += d;
        if (n != m) M(n_pat * n + m, l) += d;
      }
    }
  }
  if (!(mapped_area > 0.5 * forward_mesh.total_area()))
    throw ConfigError("assemble_sensitivity: meshes cover different domains");
  return M;
}

/// CEM data vectors X_j(w_q) = s0(w_q)^2 sum_j (I_{n,j} V_{m,j} - I_{m,j} U_{n,j})
/// with the frequency-dependent reference V_m = V*_m / s0(w_q).
inline Eigen::MatrixXd assemble_data_cem(
    const std::vector<std::vector<Eigen::VectorXd>>& measured,  // [q][n], E voltages each
    const std::vector<CemSolution>& refs, const std::vector<Eigen::VectorXd>& patterns,
    const std::vector<double>& s0_values) {
  const int n_pat = static_cast<int>(patterns.size());
  const int q_count = static_cast<int>(s0_values.size());
  if (static_cast<int>(refs.size()) != n_pat)
    throw ConfigError("assemble_data_cem: reference/pattern count mismatch");
  if (static_cast<int>(measured.size()) != q_count)
    throw ConfigError("assemble_data_cem: frequency count mismatch");
  for (const auto& per_freq : measured) {
    if (static_cast<int>(per_freq.size()) != n_pat)
      throw ConfigError("assemble_data_cem: measured pattern count mismatch");
  }

  Eigen::MatrixXd X(n_pat * n_pat, q_count);
  for (int q = 0; q < q_count; ++q) {
    const double s0 = s0_values[q];
    for (int m = 0; m < n_pat; ++m) {
      for (int n = 0; n < n_pat; ++n) {
        const double ref_term = s0 * patterns[n].dot(refs[m].U);          // s0^2 * I_n . (V*/s0)
        const double meas_term = s0 * s0 * patterns[m].dot(measured[q][n]);
        X(n_pat * m + n, q) = ref_term - meas_term;
      }
    }
  }
  if (!X.allFinite()) throw NumericalError("assemble_data_cem: non-finite data entry");
  return X;
}

/// Continuum analogue with boundary-edge quadrature of the trace integrals:
/// X_j(w_q) = s0^2 int (f_n v_m - f_m u_n) ds, v_m = v*_m / s0.
inline Eigen::MatrixXd assemble_data_continuum(
    const std::vector<std::vector<Eigen::VectorXd>>& measured,  // [q][n] nodal potentials
    const std::vector<Eigen::VectorXd>& ref_potentials, const std::vector<BoundaryFlux>& fluxes,
    const std::vector<double>& s0_values, const Mesh& mesh) {
  const int n_pat = static_cast<int>(fluxes.size());
  const int q_count = static_cast<int>(s0_values.size());
  if (static_cast<int>(ref_potentials.size()) != n_pat)
    throw ConfigError("assemble_data_continuum: reference/flux count mismatch");
  if (static_cast<int>(measured.size()) != q_count)
    throw ConfigError("assemble_data_continuum: frequency count mismatch");

  Eigen::MatrixXd X(n_pat * n_pat, q_count);
  for (int q = 0; q < q_count; ++q) {
    const double s0 = s0_values[q];
    for (int m = 0; m < n_pat; ++m) {
      for (int n = 0; n < n_pat; ++n) {
        const double ref_term = s0 * boundary_pairing(mesh, fluxes[n].node_values, ref_potentials[m]);
        const double meas_term =
            s0 * s0 * boundary_pairing(mesh, fluxes[m].node_values, measured[q][n]);
        X(n_pat * m + n, q) = ref_term - meas_term;
      }
    }
  }
  if (!X.allFinite()) throw NumericalError("assemble_data_continuum: non-finite data entry");
  return X;
}

enum class SystemMode { direct, difference };

/// Right-hand sides of the decoupled linear systems M A_k = Y_k, one per
/// recoverable abundance.
struct DecoupledSystems {
  std::vector<Eigen::VectorXd> rhs;
  std::vector<int> abundance;  // which k each rhs recovers
  SystemMode mode = SystemMode::direct;
};

/// Direct mode decouples X against the sampled spectral rows (optionally a
/// subset when some abundances are known to vanish); difference mode
/// forward-differences data and profiles and decouples the active rows.
inline DecoupledSystems build_system(const Eigen::MatrixXd& X, const SpectralMatrix& S,
                                     SystemMode mode, const std::vector<int>& active = {}) {
  DecoupledSystems out;
  out.mode = mode;
  if (mode == SystemMode::direct) {
    std::vector<int> rows = active;
    if (rows.empty()) {
      rows.resize(S.S.rows());
      for (int k = 0; k < S.S.rows(); ++k) rows[k] = k;
    } else {
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      for (int k : rows) {
        if (k < 0 || k >= S.S.rows())
          throw ConfigError("active profile index " + std::to_string(k) + " out of range");
      }
    }
    if (X.cols() < static_cast<int>(rows.size()))
      throw ConfigError("direct decoupling needs at least as many frequencies as profiles (" +
                        std::to_string(X.cols()) + " < " + std::to_string(rows.size()) + ")");
    Eigen::MatrixXd sub(static_cast<int>(rows.size()), S.S.cols());
    for (size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<int>(r)) = S.S.row(rows[r]);
    const Eigen::MatrixXd Y = X * right_inverse_of(sub);
    for (size_t r = 0; r < rows.size(); ++r) {
      out.rhs.push_back(Y.col(static_cast<int>(r)));
      out.abundance.push_back(rows[r]);
    }
  } else {
    const DifferenceSystem d = difference_system(X, S, active);
    const Eigen::MatrixXd Y = d.Xp * right_inverse_of(d.S_tilde);
    for (size_t r = 0; r < d.active.size(); ++r) {
      out.rhs.push_back(Y.col(static_cast<int>(r)));
      out.abundance.push_back(d.active[r]);
    }
  }
  return out;
}

}  // namespace mfeit
