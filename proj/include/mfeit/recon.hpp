#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mfeit/common.hpp"

namespace mfeit {

using Adjacency = std::vector<std::vector<int>>;

/// 1D chain neighborhoods, used for synthetic vector problems.
inline Adjacency chain_adjacency(int length) {
  Adjacency adj(length);
  for (int l = 0; l < length; ++l) {
    if (l > 0) adj[l].push_back(l - 1);
    if (l + 1 < length) adj[l].push_back(l + 1);
  }
  return adj;
}

/// S_lambda(t) = max(|t| - lambda, 0) sign(t).
inline double soft_threshold(double t, double lambda) {
  const double m = std::abs(t) - lambda;
  return m > 0 ? std::copysign(m, t) : 0.0;
}

/// Spectral norm of M by power iteration on M^T M with a fixed-seed start
/// vector; deterministic.
inline double spectral_norm_estimate(const Eigen::MatrixXd& M, int iterations = 50,
                                     uint64_t seed = 0x5eedf00d) {
  Eigen::VectorXd v(M.cols());
  uint64_t s = seed;
  for (int i = 0; i < v.size(); ++i)
    v(i) = static_cast<double>(mix64(s += 0x9E3779B97F4A7C15ull) >> 11) * 0x1.0p-53 - 0.5;
  if (v.norm() == 0) v.setOnes();
  v /= v.norm();
  Eigen::VectorXd u, w;
  for (int it = 0; it < iterations; ++it) {
    u.noalias() = M * v;
    w.noalias() = M.transpose() * u;
    const double nw = w.norm();
    if (nw == 0) return 0.0;
    v = w / nw;
  }
  return (M * v).norm();
}

struct GistConfig {
  double alpha = 1e-2;         // regularization scalar
  double beta = 0.5;           // neighbor weight; 0 disables grouping
  std::optional<double> step;  // empty = auto 1/||M||^2
  double lower = -0.9;         // box constraint on the abundances
  double upper = 10.0;
  int max_iters = 2000;
  double rel_change_tol = 1e-6;
  bool disjoint = false;
  double epsilon_disjoint = 1e-8;

  void validate() const {
    if (!(alpha >= 0)) throw ConfigError("gist: alpha must be non-negative");
    if (!(beta >= 0)) throw ConfigError("gist: beta must be non-negative");
    if (step && !(*step > 0)) throw ConfigError("gist: step must be positive");
    if (!(lower <= 0 && 0 <= upper)) throw ConfigError("gist: box must contain zero");
    if (!(rel_change_tol > 0)) throw ConfigError("gist: rel_change_tol must be positive");
    if (max_iters < 1) throw ConfigError("gist: max_iters must be at least one");
    if (!(epsilon_disjoint > 0)) throw ConfigError("gist: epsilon_disjoint must be positive");
  }
};

struct GistState {
  Eigen::VectorXd A;
  Eigen::VectorXd g;          // proxy
  Eigen::VectorXd d;          // generalized proxy
  Eigen::VectorXd d_bar;      // normalized proxy, max = 1
  Eigen::VectorXd alpha_bar;  // spatially variable regularization
  int iter = 0;
};

struct GistLogEntry {
  int iter = 0;
  double residual = 0;  // ||M A - Y|| entering the iteration
  int nnz = 0;
  double rel_change = 0;
};

struct GistResult {
  Eigen::VectorXd A;
  std::vector<GistLogEntry> log;
  int iterations = 0;
  bool converged = false;
  double final_residual = 0;
};

namespace detail {

inline Eigen::VectorXd generalized_proxy(const Eigen::VectorXd& g, const Adjacency& adj,
                                         double beta) {
  Eigen::VectorXd d(g.size());
  for (int l = 0; l < g.size(); ++l) {
    double acc = g(l) * g(l);
    for (int k : adj[l]) acc += beta * g(k) * g(k);
    d(l) = acc;
  }
  return d;
}

// Normalized grouping weights. With beta == 0 the grouping machinery is
// disabled and thresholding stays uniform (plain IST); the degenerate
// max(d) == 0 case (g == 0) also falls back to uniform weights.
inline Eigen::VectorXd normalize_proxy(const Eigen::VectorXd& d, double beta) {
  const double dmax = d.size() ? d.maxCoeff() : 0.0;
  if (beta == 0.0 || dmax == 0.0) return Eigen::VectorXd::Ones(d.size());
  return d / dmax;
}

// Proxy g = A - step * M^T (M A - Y); returns ||M A - Y||.
inline double compute_proxy(const Eigen::MatrixXd& M, const Eigen::VectorXd& Y, GistState& state,
                            double step, Eigen::VectorXd& scratch) {
  scratch.noalias() = M * state.A;
  scratch -= Y;
  const double residual = scratch.norm();
  state.g.noalias() = state.A - step * (M.transpose() * scratch);
  return residual;
}

inline void threshold_project(GistState& state, const GistConfig& cfg, double step) {
  state.alpha_bar = cfg.alpha * state.d_bar.cwiseInverse();
  for (int l = 0; l < state.A.size(); ++l) {
    const double v = soft_threshold(state.g(l), step * state.alpha_bar(l));
    state.A(l) = std::clamp(v, cfg.lower, cfg.upper);
  }
  ++state.iter;
}

// Per-element box variant used by the weighted solve path.
inline void threshold_project_box(GistState& state, double alpha, double step,
                                  const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
  state.alpha_bar = alpha * state.d_bar.cwiseInverse();
  for (int l = 0; l < state.A.size(); ++l) {
    const double v = soft_threshold(state.g(l), step * state.alpha_bar(l));
    state.A(l) = std::clamp(v, lower(l), upper(l));
  }
  ++state.iter;
}

// Reparameterized system for weighted unknowns m_l = w_l A_l: columns of M
// divided by w, box bounds multiplied by w. With element areas as weights the
// l1 penalty approximates the integral of |delta sigma| and the effective
// regularization becomes mesh-size free.
struct WeightedSystem {
  Eigen::MatrixXd M;
  Eigen::VectorXd lower, upper;
  Eigen::VectorXd weights;  // empty when no reweighting applies
};

inline WeightedSystem make_weighted(const Eigen::MatrixXd& M, const GistConfig& cfg,
                                    const Eigen::VectorXd& weights) {
  WeightedSystem sys;
  if (weights.size() == 0) {
    sys.M = M;
    sys.lower = Eigen::VectorXd::Constant(M.cols(), cfg.lower);
    sys.upper = Eigen::VectorXd::Constant(M.cols(), cfg.upper);
    return sys;
  }
  if (weights.size() != M.cols()) throw ConfigError("gist: weight count does not match unknowns");
  if (!(weights.minCoeff() > 0)) throw ConfigError("gist: weights must be positive");
  sys.weights = weights;
  sys.M = M * weights.cwiseInverse().asDiagonal();
  sys.lower = cfg.lower * weights;
  sys.upper = cfg.upper * weights;
  return sys;
}

inline int count_nonzero(const Eigen::VectorXd& v) {
  int n = 0;
  for (int i = 0; i < v.size(); ++i)
    if (v(i) != 0.0) ++n;
  return n;
}

inline double resolve_step(const Eigen::MatrixXd& M, const GistConfig& cfg) {
  if (cfg.step) return *cfg.step;
  const double norm = spectral_norm_estimate(M);
  if (!(norm > 0)) throw NumericalError("gist: zero system matrix");
  return 1.0 / (norm * norm);
}

}  // namespace detail

/// One GIST iteration: proxy, generalized proxy, normalization, adaptive
/// regularization, projected thresholding, in that order.
inline void gist_step(const Eigen::MatrixXd& M, const Eigen::VectorXd& Y, GistState& state,
                      const GistConfig& cfg, const Adjacency& adj, double step) {
  Eigen::VectorXd scratch;
  detail::compute_proxy(M, Y, state, step, scratch);
  state.d = detail::generalized_proxy(state.g, adj, cfg.beta);
  state.d_bar = detail::normalize_proxy(state.d, cfg.beta);
  detail::threshold_project(state, cfg, step);
}

/// Group iterative soft thresholding from a zero initial guess; stops when the
/// relative iterate change drops below tol or max_iters is reached. Optional
/// positive weights reparameterize the unknowns as w_l A_l (element areas make
/// the sparsity penalty mesh-consistent); the returned iterate is always A.
inline GistResult gist_solve(const Eigen::MatrixXd& M, const Eigen::VectorXd& Y,
                             const Adjacency& adj, const GistConfig& cfg,
                             const Eigen::VectorXd& weights = Eigen::VectorXd()) {
  cfg.validate();
  if (Y.size() != M.rows()) throw ConfigError("gist: rhs does not match the matrix");
  if (static_cast<int>(adj.size()) != M.cols())
    throw ConfigError("gist: adjacency does not match the unknown count");
  const detail::WeightedSystem sys = detail::make_weighted(M, cfg, weights);
  const double step = detail::resolve_step(sys.M, cfg);

  GistResult res;
  GistState state;
  state.A = Eigen::VectorXd::Zero(M.cols());
  Eigen::VectorXd prev = state.A;
  Eigen::VectorXd scratch;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    prev = state.A;
    const double residual = detail::compute_proxy(sys.M, Y, state, step, scratch);
    if (!state.g.allFinite())
      throw NumericalError("gist: non-finite iterate at iteration " + std::to_string(it));
    state.d = detail::generalized_proxy(state.g, adj, cfg.beta);
    state.d_bar = detail::normalize_proxy(state.d, cfg.beta);
    detail::threshold_project_box(state, cfg.alpha, step, sys.lower, sys.upper);
    const double rel = (state.A - prev).norm() / std::max(prev.norm(), 1e-12);
    res.log.push_back({it, residual, detail::count_nonzero(state.A), rel});
    res.iterations = it;
    if (rel < cfg.rel_change_tol) {
      res.converged = true;
      break;
    }
  }
  res.A = sys.weights.size() ? state.A.cwiseQuotient(sys.weights).eval() : state.A;
  res.final_residual = (sys.M * state.A - Y).norm();
  return res;
}

/// Disjoint-sparsity coupling: at each element only the abundance with the
/// largest normalized proxy keeps its weight, the rest drop to epsilon.
/// Ties go to the smallest abundance index.
inline std::vector<Eigen::VectorXd> disjoint_update(const std::vector<Eigen::VectorXd>& d_bars,
                                                    double epsilon) {
  std::vector<Eigen::VectorXd> out = d_bars;
  if (d_bars.size() <= 1) return out;
  const int length = static_cast<int>(d_bars[0].size());
  for (const auto& d : d_bars) {
    if (d.size() != length) throw ConfigError("disjoint_update: proxy length mismatch");
  }
  for (int l = 0; l < length; ++l) {
    int best = 0;
    for (size_t k = 1; k < d_bars.size(); ++k) {
      if (d_bars[k](l) > d_bars[best](l)) best = static_cast<int>(k);
    }
    for (size_t k = 0; k < d_bars.size(); ++k) {
      if (static_cast<int>(k) != best) out[k](l) = epsilon;
    }
  }
  return out;
}

/// Solves the decoupled systems sharing one matrix. Without disjoint mode
/// each system runs independently; with it the normalized proxies are
/// exchanged every iteration before thresholding.
inline std::vector<GistResult> gist_solve_multi(const Eigen::MatrixXd& M,
                                                const std::vector<Eigen::VectorXd>& rhs,
                                                const Adjacency& adj, const GistConfig& cfg,
                                                const Eigen::VectorXd& weights = Eigen::VectorXd()) {
  cfg.validate();
  std::vector<GistResult> results(rhs.size());
  if (!cfg.disjoint) {
    for (size_t k = 0; k < rhs.size(); ++k) results[k] = gist_solve(M, rhs[k], adj, cfg, weights);
    return results;
  }

  const detail::WeightedSystem sys = detail::make_weighted(M, cfg, weights);
  const double step = detail::resolve_step(sys.M, cfg);
  const int kp1 = static_cast<int>(rhs.size());
  std::vector<GistState> states(kp1);
  for (auto& st : states) st.A = Eigen::VectorXd::Zero(M.cols());
  std::vector<Eigen::VectorXd> prev(kp1, Eigen::VectorXd::Zero(M.cols()));
  std::vector<double> residuals(kp1, 0.0);
  Eigen::VectorXd scratch;

  for (int it = 1; it <= cfg.max_iters; ++it) {
    std::vector<Eigen::VectorXd> d_bars(kp1);
    for (int k = 0; k < kp1; ++k) {
      auto& st = states[k];
      prev[k] = st.A;
      residuals[k] = detail::compute_proxy(sys.M, rhs[k], st, step, scratch);
      if (!st.g.allFinite())
        throw NumericalError("gist: non-finite iterate at iteration " + std::to_string(it));
      st.d = detail::generalized_proxy(st.g, adj, cfg.beta);
      d_bars[k] = detail::normalize_proxy(st.d, cfg.beta);
    }
    d_bars = disjoint_update(d_bars, cfg.epsilon_disjoint);
    bool all_converged = true;
    for (int k = 0; k < kp1; ++k) {
      auto& st = states[k];
      st.d_bar = d_bars[k];
      detail::threshold_project_box(st, cfg.alpha, step, sys.lower, sys.upper);
      const double rel = (st.A - prev[k]).norm() / std::max(prev[k].norm(), 1e-12);
      results[k].log.push_back({it, residuals[k], detail::count_nonzero(st.A), rel});
      results[k].iterations = it;
      if (rel >= cfg.rel_change_tol) all_converged = false;
    }
    if (all_converged) {
      for (auto& r : results) r.converged = true;
      break;
    }
  }
  for (int k = 0; k < kp1; ++k) {
    results[k].final_residual = (sys.M * states[k].A - rhs[k]).norm();
    results[k].A =
        sys.weights.size() ? states[k].A.cwiseQuotient(sys.weights).eval() : states[k].A;
  }
  return results;
}

}  // namespace mfeit
