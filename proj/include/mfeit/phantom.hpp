#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfeit/common.hpp"
#include "mfeit/forward.hpp"
#include "mfeit/mesh.hpp"
#include "mfeit/spectral.hpp"

namespace mfeit {

/// Axis-aligned rectangular inclusion carrying one abundance.
struct Inclusion {
  double cx = 0, cy = 0;
  double half_w = 0, half_h = 0;
  int abundance = 1;   // index k of the spectral profile it follows
  double contrast = 1; // delta-sigma value inside
};

/// Ground-truth description: inclusions, truth domain, electrode
/// misplacement, and the spectral model of the materials.
struct PhantomSpec {
  std::string name;
  std::vector<Inclusion> inclusions;
  double domain_a = 1.0;
  double domain_b = 1.0;
  std::vector<double> electrode_offsets;  // empty = nominal positions
  SpectralModel spectral;

  int profile_count() const { return spectral.profile_count(); }
};

inline void validate_phantom(const PhantomSpec& spec) {
  spec.spectral.validate();
  for (size_t i = 0; i < spec.inclusions.size(); ++i) {
    const auto& inc = spec.inclusions[i];
    if (!(inc.half_w > 0) || !(inc.half_h > 0))
      throw ConfigError("inclusion " + std::to_string(i) + " has non-positive half-widths");
    if (inc.abundance < 0 || inc.abundance >= spec.profile_count())
      throw ConfigError("inclusion " + std::to_string(i) + " references an unknown profile");
    // strictly interior: the farthest corner stays inside the domain
    const double rx = (std::abs(inc.cx) + inc.half_w) / spec.domain_a;
    const double ry = (std::abs(inc.cy) + inc.half_h) / spec.domain_b;
    if (!(rx * rx + ry * ry < 1.0))
      throw ConfigError("inclusion " + std::to_string(i) + " is not strictly interior to the domain");
    for (size_t j = i + 1; j < spec.inclusions.size(); ++j) {
      const auto& other = spec.inclusions[j];
      const bool overlap_x = std::abs(inc.cx - other.cx) < inc.half_w + other.half_w;
      const bool overlap_y = std::abs(inc.cy - other.cy) < inc.half_h + other.half_h;
      if (overlap_x && overlap_y)
        throw ConfigError("inclusions " + std::to_string(i) + " and " + std::to_string(j) +
                          " overlap");
    }
  }
}

/// Linear-regime advisories, not errors.
inline std::vector<std::string> phantom_warnings(const PhantomSpec& spec) {
  std::vector<std::string> w;
  for (size_t i = 0; i < spec.inclusions.size(); ++i) {
    if (std::abs(spec.inclusions[i].contrast) > 0.5)
      w.push_back("inclusion " + std::to_string(i) + " contrast " +
                  fmt17(spec.inclusions[i].contrast) + " strains the linearized regime");
  }
  return w;
}

/// Per-abundance element vectors: element l gets the contrast of the
/// inclusion containing its centroid (half-open rectangle edges).
inline std::vector<Eigen::VectorXd> rasterize_phantom(const PhantomSpec& spec, const Mesh& mesh) {
  validate_phantom(spec);
  std::vector<Eigen::VectorXd> a(spec.profile_count(),
                                 Eigen::VectorXd::Zero(mesh.element_count()));
  for (int l = 0; l < mesh.element_count(); ++l) {
    const Eigen::Vector2d c = mesh.centroid(l);
    for (const auto& inc : spec.inclusions) {
      if (c.x() >= inc.cx - inc.half_w && c.x() < inc.cx + inc.half_w &&
          c.y() >= inc.cy - inc.half_h && c.y() < inc.cy + inc.half_h) {
        a[inc.abundance](l) = inc.contrast;
        break;  // supports are disjoint
      }
    }
  }
  return a;
}

/// Noisy voltage sweep: [q][n] grounded electrode vectors.
struct NoisySweep {
  std::vector<std::vector<Eigen::VectorXd>> voltages;
  double epsilon = 0;
  uint64_t seed = 0;
};

/// Truth-side discretization: the (possibly deformed) domain meshed at the
/// simulation resolution with electrodes on its boundary.
struct TruthSetup {
  Mesh mesh;
  ElectrodeLayout layout;
};

inline TruthSetup deformed_truth(const PhantomSpec& spec, double sim_h, int electrode_count,
                                 double electrode_arc,
                                 const std::vector<double>& contact_constants = {}) {
  if (!(spec.domain_a >= 0.7 && spec.domain_a <= 1.3 && spec.domain_b >= 0.7 &&
        spec.domain_b <= 1.3))
    throw ConfigError("deformed_truth: semi-axes must stay within [0.7, 1.3]");
  TruthSetup t;
  t.mesh = build_ellipse_mesh(spec.domain_a, spec.domain_b, sim_h);
  t.layout = place_electrodes(t.mesh, electrode_count, electrode_arc, spec.electrode_offsets);
  if (!contact_constants.empty()) {
    if (static_cast<int>(contact_constants.size()) != electrode_count)
      throw ConfigError("deformed_truth: contact constant count mismatch");
    t.layout.contact_constants = contact_constants;
  }
  return t;
}

/// Simulates the multifrequency sweep on the truth mesh: at each frequency
/// sigma(x, w) = s0(w)(1 + dsig_0) + sum_k dsig_k s_k(w) and z_j = c_j/s0(w),
/// then per-pattern Gaussian noise eps * max_e |U - U(sigma_0)| * N(0,1),
/// grounded. The generator is split per (frequency, pattern).
inline NoisySweep simulate_sweep(const PhantomSpec& spec, const Mesh& truth_mesh,
                                 const ElectrodeLayout& truth_layout,
                                 const std::vector<Eigen::VectorXd>& patterns, double epsilon,
                                 uint64_t seed) {
  validate_phantom(spec);
  if (!(epsilon >= 0)) throw ConfigError("simulate_sweep: noise level must be non-negative");
  const int q_count = spec.spectral.frequency_count();
  const int n_pat = static_cast<int>(patterns.size());
  const auto abundances = rasterize_phantom(spec, truth_mesh);

  const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(
      truth_layout.contact_constants.data(), truth_layout.count());
  // homogeneous-body solutions, reused across frequencies via the contact
  // impedance scaling law U(s0, c/s0) = U(1, c)/s0
  const auto refs = reference_solutions(truth_mesh, truth_layout, c, patterns);

  NoisySweep sweep;
  sweep.epsilon = epsilon;
  sweep.seed = seed;
  sweep.voltages.resize(q_count);
  for (int q = 0; q < q_count; ++q) {
    const double s0 = spec.spectral.value(0, q);
    if (!(s0 > 0))
      throw NumericalError("background spectrum must be positive at frequency index " +
                           std::to_string(q));
    Eigen::VectorXd sigma = s0 * (Eigen::VectorXd::Ones(truth_mesh.element_count()) + abundances[0]);
    for (int k = 1; k < spec.profile_count(); ++k) sigma += spec.spectral.value(k, q) * abundances[k];
    if (!(sigma.minCoeff() > 0))
      throw NumericalError("total conductivity is non-positive at frequency index " +
                           std::to_string(q));
    const Eigen::VectorXd z = c / s0;
    const CemOperator op(truth_mesh, truth_layout, sigma, z);

    sweep.voltages[q].reserve(n_pat);
    for (int n = 0; n < n_pat; ++n) {
      Eigen::VectorXd u_exact = op.solve(patterns[n]).U;
      if (epsilon == 0) {
        sweep.voltages[q].push_back(std::move(u_exact));
        continue;
      }
      const Eigen::VectorXd u_ref = refs[n].U / s0;
      const double scale = (u_exact - u_ref).cwiseAbs().maxCoeff();
      NormalSampler gauss(derive_stream(seed, static_cast<uint64_t>(q), static_cast<uint64_t>(n)));
      Eigen::VectorXd noise(u_exact.size());
      for (int ee = 0; ee < noise.size(); ++ee) noise(ee) = epsilon * scale * gauss.next();
      noise.array() -= noise.mean();  // keep the grounding
      sweep.voltages[q].push_back(u_exact + noise);
    }
  }
  return sweep;
}

/// Image of the phantom on the computational unit disk: the forward map
/// (x, y) -> (x/a, y/b) carries the truth domain onto the disk and keeps
/// axis-aligned rectangles axis-aligned, so the transported inclusions
/// delta-sigma composed with the inverse map are again rectangles. This is
/// the object the linearized inversion actually recovers, and the reference
/// for metrics on the inversion mesh.
inline PhantomSpec computational_truth(const PhantomSpec& spec) {
  PhantomSpec mapped = spec;
  mapped.domain_a = 1.0;
  mapped.domain_b = 1.0;
  for (auto& inc : mapped.inclusions) {
    inc.cx /= spec.domain_a;
    inc.cy /= spec.domain_b;
    inc.half_w /= spec.domain_a;
    inc.half_h /= spec.domain_b;
  }
  return mapped;
}

struct Metrics {
  double relative_error = 0;  // absolute norm when the reference is zero
  double jaccard = 0;
  double max_abs = 0;
  bool error_is_absolute = false;
};

inline std::vector<int> support_of(const Eigen::VectorXd& v, double threshold) {
  std::vector<int> s;
  if (v.size() == 0) return s;
  const double cut = threshold * v.cwiseAbs().maxCoeff();
  for (int l = 0; l < v.size(); ++l)
    if (std::abs(v(l)) > cut) s.push_back(l);
  return s;
}

inline double jaccard_index(const std::vector<int>& a, const std::vector<int>& b) {
  size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline Metrics compute_metrics(const Eigen::VectorXd& recovered, const Eigen::VectorXd& truth,
                               double support_threshold) {
  if (recovered.size() != truth.size()) throw ConfigError("metrics: vector length mismatch");
  Metrics m;
  m.max_abs = recovered.size() ? recovered.cwiseAbs().maxCoeff() : 0.0;
  m.jaccard = jaccard_index(support_of(recovered, support_threshold),
                            support_of(truth, support_threshold));
  const double ref_norm = truth.norm();
  if (ref_norm == 0) {
    m.relative_error = recovered.norm();
    m.error_is_absolute = true;
  } else {
    m.relative_error = (recovered - truth).norm() / ref_norm;
  }
  return m;
}

namespace detail {

inline SpectralModel three_freq_model(std::vector<Profile> profiles) {
  SpectralModel m;
  m.profiles = std::move(profiles);
  m.frequencies = {0.0, 0.5, 1.0};
  return m;
}

}  // namespace detail

/// Named phantoms matching the numerical studies: square/rectangular
/// inclusions at qualitative positions, unit contrasts unless noted.
inline PhantomSpec builtin_phantom(const std::string& name) {
  PhantomSpec spec;
  spec.name = name;
  const Profile s0 = Profile::polynomial({1.0});
  if (name == "exam1i" || name == "exam1ii") {
    spec.inclusions = {
        {-0.45, 0.45, 0.15, 0.15, 1, 1.0},
        {0.45, 0.45, 0.15, 0.15, 1, 1.0},
        {0.0, -0.5, 0.15, 0.15, 2, 1.0},
    };
    const Profile s1 = Profile::polynomial({0.1, 0.1});
    const Profile s2 = name == "exam1i" ? Profile::polynomial({0.0, 0.2})
                                        : Profile::polynomial({0.0, 0.02});
    spec.spectral = detail::three_freq_model({s0, s1, s2});
  } else if (name == "exam2i" || name == "exam2ii" || name == "exam2c") {
    spec.inclusions = {
        {-0.45, 0.45, 0.2, 0.125, 1, 1.0},
        {0.45, 0.45, 0.2, 0.125, 2, 1.0},
        {0.0, -0.5, 0.25, 0.125, 3, 1.0},
    };
    if (name == "exam2c") {
      spec.inclusions[0].contrast = 1.5;
      spec.inclusions[1].contrast = 1.0;
      spec.inclusions[2].contrast = 0.5;
    }
    const Profile s1 = name == "exam2ii" ? Profile::polynomial({0.02, 0.02})
                                         : Profile::polynomial({0.2, 0.2});
    const Profile s2 = Profile::polynomial({0.0, 0.0, 0.1});
    const Profile s3 = Profile::polynomial({0.1, 0.2});
    spec.spectral = detail::three_freq_model({s0, s1, s2, s3});
  } else if (name == "exam3i" || name == "exam3ii") {
    spec.domain_a = name == "exam3i" ? 1.1 : 1.2;
    spec.domain_b = name == "exam3i" ? 0.9 : 0.8;
    spec.inclusions = {
        {0.0, 0.45, 0.18, 0.18, 1, 1.0},
        {0.0, -0.45, 0.18, 0.18, 2, 1.0},
    };
    const Profile s1 = Profile::polynomial({0.2, 0.2});
    const Profile s2 = Profile::polynomial({0.0, 0.0, 0.1});
    spec.spectral = detail::three_freq_model({s0, s1, s2});
  } else if (name == "exam4") {
    spec.inclusions = {
        {0.0, 0.45, 0.2, 0.125, 1, 1.0},
        {0.0, -0.5, 0.2, 0.125, 2, 1.0},
    };
    spec.electrode_offsets.assign(16, 0.0);
    for (int j = 1; j < 16; j += 2) spec.electrode_offsets[j] = std::numbers::pi / 32.0;
    const Profile s1 = Profile::polynomial({0.2, 0.2});
    const Profile s2 = Profile::polynomial({0.0, 0.0, 0.1});
    spec.spectral = detail::three_freq_model({s0, s1, s2});
  } else {
    throw ConfigError("unknown phantom '" + name + "'");
  }
  validate_phantom(spec);
  return spec;
}

inline std::vector<std::string> builtin_phantom_names() {
  return {"exam1i", "exam1ii", "exam2i", "exam2ii", "exam2c", "exam3i", "exam3ii", "exam4"};
}

}  // namespace mfeit
