#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mfeit/common.hpp"

namespace mfeit {

/// One material spectrum s_k(omega): either polynomial coefficients
/// (a0 + a1 w + a2 w^2 + ...) or a table of values at the working frequencies.
struct Profile {
  std::vector<double> poly;
  std::vector<double> table;
  bool is_poly = true;

  static Profile polynomial(std::vector<double> coeffs) {
    Profile p;
    p.poly = std::move(coeffs);
    p.is_poly = true;
    return p;
  }
  static Profile tabulated(std::vector<double> values) {
    Profile p;
    p.table = std::move(values);
    p.is_poly = false;
    return p;
  }
};

/// K+1 spectral profiles over frequencies w_1 < ... < w_Q. Profile 0 is the
/// known background spectrum.
struct SpectralModel {
  std::vector<Profile> profiles;
  std::vector<double> frequencies;

  int profile_count() const { return static_cast<int>(profiles.size()); }
  int frequency_count() const { return static_cast<int>(frequencies.size()); }

  /// s_k(w_q); table profiles are defined only at the sampled frequencies.
  double value(int k, int q) const {
    const Profile& p = profiles[k];
    if (p.is_poly) {
      const double w = frequencies[q];
      double v = 0, wp = 1;
      for (double c : p.poly) {
        v += c * wp;
        wp *= w;
      }
      return v;
    }
    return p.table[q];
  }

  void validate() const {
    if (profiles.empty()) throw ConfigError("spectral model needs at least one profile");
    if (frequencies.empty()) throw ConfigError("spectral model needs at least one frequency");
    for (size_t q = 1; q < frequencies.size(); ++q) {
      if (!(frequencies[q] > frequencies[q - 1]))
        throw ConfigError("frequencies must be strictly increasing");
    }
    for (size_t k = 0; k < profiles.size(); ++k) {
      if (!profiles[k].is_poly && profiles[k].table.size() != frequencies.size())
        throw ConfigError("tabulated profile " + std::to_string(k) +
                          " does not match the frequency count");
    }
  }
};

inline constexpr double kRankThreshold = 1e-10;  // relative to sigma_max

/// Sampled spectral matrix S_{kq} = s_k(w_q) with its numerical rank and the
/// ratio of extreme singular values of the rank-revealing factorization.
struct SpectralMatrix {
  Eigen::MatrixXd S;  // (K+1) x Q
  std::vector<double> frequencies;
  int rank = 0;
  double condition = 0;
};

inline int numerical_rank(const Eigen::MatrixXd& A, double* condition = nullptr) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() > 0 ? sv(0) : 0.0;
  int rank = 0;
  double smin = smax;
  for (int i = 0; i < sv.size(); ++i) {
    if (sv(i) > kRankThreshold * smax) {
      rank = i + 1;
      smin = sv(i);
    }
  }
  if (condition) *condition = (rank > 0 && smin > 0) ? smax / smin : 0.0;
  return rank;
}

inline SpectralMatrix sample_spectral_matrix(const SpectralModel& model) {
  model.validate();
  const int kp1 = model.profile_count();
  const int q_count = model.frequency_count();
  SpectralMatrix out;
  out.S.resize(kp1, q_count);
  out.frequencies = model.frequencies;
  for (int k = 0; k < kp1; ++k) {
    for (int q = 0; q < q_count; ++q) {
      const double v = model.value(k, q);
      if (!std::isfinite(v))
        throw NumericalError("profile " + std::to_string(k) + " is not finite at frequency index " +
                             std::to_string(q));
      out.S(k, q) = v;
    }
  }
  out.rank = numerical_rank(out.S, &out.condition);
  return out;
}

/// Minimum-norm least-squares right inverse computed via a complete
/// orthogonal decomposition; requires full row rank. S * pinv(S) = I within
/// 1e-10.
inline Eigen::MatrixXd right_inverse_of(const Eigen::MatrixXd& S) {
  double cond = 0;
  const int rank = numerical_rank(S, &cond);
  if (rank < S.rows())
    throw NumericalError("spectral matrix is rank deficient: rank " + std::to_string(rank) + " < " +
                         std::to_string(S.rows()) + " rows (condition " + fmt17(cond) + ")");
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(S);
  Eigen::MatrixXd pinv = cod.pseudoInverse();
  const double defect =
      (S * pinv - Eigen::MatrixXd::Identity(S.rows(), S.rows())).cwiseAbs().maxCoeff();
  if (!(defect <= 1e-10))
    throw NumericalError("right inverse residual " + fmt17(defect) + " exceeds 1e-10");
  return pinv;
}

inline Eigen::MatrixXd right_inverse(const SpectralMatrix& S) { return right_inverse_of(S.S); }

/// Y = X * pinv(S): decouples the multifrequency data into one column per
/// profile. On noiseless X = M A S each column k equals M A_k.
inline std::vector<Eigen::VectorXd> decouple(const Eigen::MatrixXd& X, const SpectralMatrix& S) {
  if (X.cols() != S.S.cols())
    throw ConfigError("data has " + std::to_string(X.cols()) + " frequency columns, expected " +
                      std::to_string(S.S.cols()));
  const Eigen::MatrixXd Y = X * right_inverse(S);
  std::vector<Eigen::VectorXd> out;
  out.reserve(Y.cols());
  for (int k = 0; k < Y.cols(); ++k) out.push_back(Y.col(k));
  return out;
}

/// Weighted frequency-difference combination for the 2x2 two-frequency case:
/// (s0(w1) X2 - s0(w2) X1) / det S, the second column of [X1 X2] S^{-1}.
inline Eigen::VectorXd weighted_fd(const Eigen::VectorXd& X1, const Eigen::VectorXd& X2,
                                   const Eigen::Matrix2d& S) {
  const double det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
  const double scale = S.cwiseAbs().maxCoeff();
  if (!(std::abs(det) > 1e-14 * scale * scale))
    throw NumericalError("weighted_fd: spectral matrix is singular (det " + fmt17(det) + ")");
  return (S(0, 0) * X2 - S(0, 1) * X1) / det;
}

/// Forward-differenced system of Eq.-type data: columns of Xp are
/// (X(w_{q+1}) - X(w_q)) / (w_{q+1} - w_q); S rows restricted to the declared
/// active profiles and differenced the same way.
struct DifferenceSystem {
  Eigen::MatrixXd S_tilde;  // |P| x (Q-1)
  Eigen::MatrixXd Xp;       // J x (Q-1)
  std::vector<int> active;
};

inline DifferenceSystem difference_system(const Eigen::MatrixXd& X, const SpectralMatrix& S,
                                          const std::vector<int>& active) {
  const int q_count = static_cast<int>(S.frequencies.size());
  if (q_count < 2) throw ConfigError("difference imaging needs at least two frequencies");
  if (X.cols() != q_count) throw ConfigError("data/frequency count mismatch");
  if (active.empty()) throw ConfigError("difference imaging needs a non-empty active set");
  std::vector<int> p = active;
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end()), p.end());
  for (int k : p) {
    if (k < 0 || k >= S.S.rows())
      throw ConfigError("active profile index " + std::to_string(k) + " out of range");
  }

  DifferenceSystem out;
  out.active = p;
  out.S_tilde.resize(static_cast<int>(p.size()), q_count - 1);
  out.Xp.resize(X.rows(), q_count - 1);
  for (int q = 0; q + 1 < q_count; ++q) {
    const double dw = S.frequencies[q + 1] - S.frequencies[q];
    if (!(dw > 0)) throw ConfigError("repeated frequency at index " + std::to_string(q));
    out.Xp.col(q) = (X.col(q + 1) - X.col(q)) / dw;
    for (size_t r = 0; r < p.size(); ++r)
      out.S_tilde(static_cast<int>(r), q) = (S.S(p[r], q + 1) - S.S(p[r], q)) / dw;
  }
  return out;
}

/// Least-squares monomial moments of the data rows: B_n collects, across
/// rows, the coefficient of w^n in the fit of X_j(w) against {w^0..w^N}.
struct PolyMoments {
  std::vector<Eigen::VectorXd> B;  // N+1 vectors of length J
  double vandermonde_condition = 0;
  bool ill_conditioned = false;
};

inline constexpr double kVandermondeWarnThreshold = 1e8;

inline PolyMoments poly_moments(const Eigen::MatrixXd& X, const std::vector<double>& frequencies,
                                int degree) {
  const int q_count = static_cast<int>(frequencies.size());
  if (degree < 0) throw ConfigError("poly_moments: degree must be non-negative");
  if (q_count < degree + 1)
    throw ConfigError("poly_moments: need at least degree+1 frequencies, have " +
                      std::to_string(q_count));
  if (X.cols() != q_count) throw ConfigError("data/frequency count mismatch");
  for (int q = 1; q < q_count; ++q) {
    if (frequencies[q] == frequencies[q - 1]) throw ConfigError("poly_moments: repeated frequency");
  }

  Eigen::MatrixXd V(q_count, degree + 1);
  for (int q = 0; q < q_count; ++q) {
    double wp = 1;
    for (int n = 0; n <= degree; ++n) {
      V(q, n) = wp;
      wp *= frequencies[q];
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(V);
  const auto& sv = svd.singularValues();
  PolyMoments out;
  out.vandermonde_condition = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
  out.ill_conditioned = !(out.vandermonde_condition < kVandermondeWarnThreshold);

  // coeffs: (N+1) x J, one least-squares fit per data row
  const Eigen::MatrixXd coeffs = V.colPivHouseholderQr().solve(X.transpose());
  out.B.reserve(degree + 1);
  for (int n = 0; n <= degree; ++n) out.B.push_back(coeffs.row(n).transpose());
  return out;
}

/// Partial recovery for the two-profile case with a known background
/// polynomial: alpha0[0] * B_n - alpha0[n] * B_0 is collinear with Y_1, so
/// support and sign pattern survive up to one global constant.
inline Eigen::VectorXd partial_recover(const PolyMoments& moments,
                                       const std::vector<double>& alpha0, int n) {
  if (n <= 0) throw ConfigError("partial_recover: moment index must be positive");
  if (n >= static_cast<int>(moments.B.size()))
    throw ConfigError("partial_recover: moment index " + std::to_string(n) + " out of range");
  if (alpha0.empty()) throw ConfigError("partial_recover: background coefficients required");
  const double a00 = alpha0[0];
  const double a0n = n < static_cast<int>(alpha0.size()) ? alpha0[n] : 0.0;
  return a00 * moments.B[n] - a0n * moments.B[0];
}

}  // namespace mfeit
