#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mfeit/linearize.hpp"
#include "mfeit/phantom.hpp"

using namespace mfeit;

namespace {

struct Pipeline {
  Mesh fwd;
  ElectrodeLayout layout;
  std::vector<Eigen::VectorXd> patterns;
  std::vector<CemSolution> refs;
  std::vector<Eigen::VectorXd> ref_potentials;
};

Pipeline make_pipeline(double sim_h, int electrodes = 8) {
  Pipeline p;
  p.fwd = build_disk_mesh(1.0, sim_h);
  p.layout = place_electrodes(p.fwd, electrodes, std::numbers::pi / electrodes);
  p.patterns = trig_current_patterns(electrodes);
  p.refs = reference_solutions(p.fwd, p.layout, Eigen::VectorXd::Ones(electrodes), p.patterns);
  for (const auto& r : p.refs) p.ref_potentials.push_back(r.u);
  return p;
}

PhantomSpec small_phantom(double contrast, const std::vector<double>& freqs,
                          std::vector<Profile> profiles) {
  PhantomSpec spec;
  spec.name = "test";
  spec.inclusions = {{0.35, 0.3, 0.15, 0.15, 1, contrast}};
  spec.spectral.profiles = std::move(profiles);
  spec.spectral.frequencies = freqs;
  return spec;
}

}  // namespace

TEST_SUITE("linearize") {
  TEST_CASE("sensitivity rows for swapped pattern pairs are identical") {
    auto p = make_pipeline(0.2, 4);
    const Mesh inv = build_disk_mesh(1.0, 0.4);
    const auto M = assemble_sensitivity(inv, p.fwd, p.ref_potentials);
    const int n_pat = static_cast<int>(p.patterns.size());
    REQUIRE_EQ(M.rows(), n_pat * n_pat);
    for (int m = 0; m < n_pat; ++m)
      for (int n = 0; n < n_pat; ++n)
        CHECK_EQ((M.row(n_pat * m + n) - M.row(n_pat * n + m)).cwiseAbs().maxCoeff(), 0.0);
  }

  TEST_CASE("diagonal-pair rows are nonnegative") {
    auto p = make_pipeline(0.2, 4);
    const Mesh inv = build_disk_mesh(1.0, 0.4);
    const auto M = assemble_sensitivity(inv, p.fwd, p.ref_potentials);
    const int n_pat = static_cast<int>(p.patterns.size());
    for (int n = 0; n < n_pat; ++n) CHECK(M.row(n_pat * n + n).minCoeff() >= 0.0);
  }

  TEST_CASE("row sums match the whole-domain gradient integrals within 1%") {
    auto p = make_pipeline(0.1, 8);
    const Mesh inv = build_disk_mesh(1.0, 0.2);
    const auto M = assemble_sensitivity(inv, p.fwd, p.ref_potentials);
    const int n_pat = static_cast<int>(p.patterns.size());
    for (int m = 0; m < n_pat; ++m) {
      for (int n = m; n < n_pat; ++n) {
        double direct = 0;
        for (int e = 0; e < p.fwd.element_count(); ++e)
          direct += p.fwd.element_areas[e] *
                    element_gradient(p.fwd, e, p.ref_potentials[m])
                        .dot(element_gradient(p.fwd, e, p.ref_potentials[n]));
        const double row_sum = M.row(n_pat * m + n).sum();
        CHECK(std::abs(row_sum - direct) <= 0.01 * std::abs(direct) + 1e-12);
      }
    }
  }

  TEST_CASE("a single covering element collects the full integrals exactly") {
    auto p = make_pipeline(0.2, 4);
    Mesh tri;
    tri.nodes = {{-3.0, -3.0}, {3.0, -3.0}, {0.0, 4.0}};
    tri.elements = {{0, 1, 2}};
    finalize_mesh(tri);
    const auto M = assemble_sensitivity(tri, p.fwd, p.ref_potentials);
    REQUIRE_EQ(M.cols(), 1);
    const int n_pat = static_cast<int>(p.patterns.size());
    for (int m = 0; m < n_pat; ++m) {
      for (int n = 0; n < n_pat; ++n) {
        double direct = 0;
        for (int e = 0; e < p.fwd.element_count(); ++e)
          direct += p.fwd.element_areas[e] *
                    element_gradient(p.fwd, e, p.ref_potentials[m])
                        .dot(element_gradient(p.fwd, e, p.ref_potentials[n]));
        CHECK_EQ(M(n_pat * m + n, 0), direct);
      }
    }
  }

  TEST_CASE("disjoint meshes are rejected") {
    auto p = make_pipeline(0.25, 4);
    Mesh far;
    far.nodes = {{10.0, 10.0}, {11.0, 10.0}, {10.0, 11.0}};
    far.elements = {{0, 1, 2}};
    finalize_mesh(far);
    CHECK_THROWS_AS(assemble_sensitivity(far, p.fwd, p.ref_potentials), ConfigError);
  }

  TEST_CASE("unperturbed body produces vanishing data at every frequency") {
    auto p = make_pipeline(0.15, 8);
    std::vector<double> s0_values = {1.0, 1.0};
    std::vector<std::vector<Eigen::VectorXd>> measured(2);
    for (int q = 0; q < 2; ++q)
      for (const auto& r : p.refs) measured[q].push_back(r.U);
    const auto X = assemble_data_cem(measured, p.refs, p.patterns, s0_values);
    double scale = 0;
    for (const auto& r : p.refs) scale = std::max(scale, r.U.cwiseAbs().maxCoeff());
    CHECK(X.cwiseAbs().maxCoeff() <= 1e-10 * scale);
  }

  TEST_CASE("small-contrast data matches the linearized model within 15 percent") {
    auto p = make_pipeline(0.07, 8);
    auto spec = small_phantom(0.1, {0.0, 1.0},
                              {Profile::polynomial({1.0}), Profile::polynomial({0.1, 0.1})});
    const auto S = sample_spectral_matrix(spec.spectral);
    const auto sweep = simulate_sweep(spec, p.fwd, p.layout, p.patterns, 0.0, 1);
    const auto X = assemble_data_cem(sweep.voltages, p.refs, p.patterns, {1.0, 1.0});
    const Mesh inv = build_disk_mesh(1.0, 0.12);
    const auto M = assemble_sensitivity(inv, p.fwd, p.ref_potentials);
    const auto A = rasterize_phantom(spec, inv);
    Eigen::MatrixXd model = Eigen::MatrixXd::Zero(X.rows(), X.cols());
    for (int q = 0; q < 2; ++q)
      for (int k = 0; k < 2; ++k) model.col(q) += S.S(k, q) * (M * A[k]);
    CHECK((X - model).norm() <= 0.15 * model.norm());
  }

  TEST_CASE("data is approximately invariant under the background/impedance rescaling") {
    auto p = make_pipeline(0.1, 8);
    std::vector<Eigen::MatrixXd> xs;
    for (double s0 : {1.0, 2.0}) {
      auto spec = small_phantom(0.05, {0.0, 1.0},
                                {Profile::polynomial({s0}), Profile::polynomial({0.1, 0.1})});
      const auto sweep = simulate_sweep(spec, p.fwd, p.layout, p.patterns, 0.0, 1);
      xs.push_back(assemble_data_cem(sweep.voltages, p.refs, p.patterns, {s0, s0}));
    }
    CHECK((xs[1] - xs[0]).norm() <= 0.05 * xs[0].norm());
  }

  TEST_CASE("doubling a small contrast approximately doubles the data") {
    auto p = make_pipeline(0.1, 8);
    std::vector<Eigen::MatrixXd> xs;
    for (double contrast : {0.025, 0.05}) {
      auto spec = small_phantom(contrast, {0.0, 1.0},
                                {Profile::polynomial({1.0}), Profile::polynomial({0.1, 0.1})});
      const auto sweep = simulate_sweep(spec, p.fwd, p.layout, p.patterns, 0.0, 1);
      xs.push_back(assemble_data_cem(sweep.voltages, p.refs, p.patterns, {1.0, 1.0}));
    }
    CHECK((xs[1] - 2.0 * xs[0]).norm() <= 0.05 * xs[1].norm());
  }

  TEST_CASE("continuum data: homogeneous body vanishes and exact data is reciprocal") {
    const Mesh mesh = build_disk_mesh(1.0, 0.1);
    std::vector<BoundaryFlux> fluxes;
    for (int n = 1; n <= 3; ++n) {
      fluxes.push_back(make_boundary_flux(mesh, [n](double t) { return std::cos(n * t); }));
      fluxes.push_back(make_boundary_flux(mesh, [n](double t) { return std::sin(n * t); }));
    }
    const auto refs = reference_solutions_continuum(mesh, fluxes);

    std::vector<std::vector<Eigen::VectorXd>> measured_hom(1, refs);
    const auto X0 = assemble_data_continuum(measured_hom, refs, fluxes, {1.0}, mesh);
    double scale = 0;
    for (const auto& r : refs) scale = std::max(scale, r.cwiseAbs().maxCoeff());
    CHECK(X0.cwiseAbs().maxCoeff() <= 1e-10 * scale);

    // perturbed body: one off-center inclusion
    Eigen::VectorXd sigma = Eigen::VectorXd::Ones(mesh.element_count());
    for (int l = 0; l < mesh.element_count(); ++l) {
      const auto c = mesh.centroid(l);
      if ((c - Eigen::Vector2d(0.3, 0.2)).norm() < 0.25) sigma(l) = 1.3;
    }
    const ContinuumOperator op(mesh, sigma);
    std::vector<std::vector<Eigen::VectorXd>> measured(1);
    for (const auto& f : fluxes) measured[0].push_back(op.solve(f));
    const auto X = assemble_data_continuum(measured, refs, fluxes, {1.0}, mesh);
    const int n_pat = static_cast<int>(fluxes.size());
    const double tol = 1e-6 * X.cwiseAbs().maxCoeff();
    for (int m = 0; m < n_pat; ++m)
      for (int n = 0; n < n_pat; ++n)
        CHECK(std::abs(X(n_pat * m + n, 0) - X(n_pat * n + m, 0)) <= tol);
  }

  TEST_CASE("continuum small-contrast data matches the linearized model within 15 percent") {
    const Mesh mesh = build_disk_mesh(1.0, 0.07);
    std::vector<BoundaryFlux> fluxes;
    for (int n = 1; n <= 3; ++n) {
      fluxes.push_back(make_boundary_flux(mesh, [n](double t) { return std::cos(n * t); }));
      fluxes.push_back(make_boundary_flux(mesh, [n](double t) { return std::sin(n * t); }));
    }
    const auto refs = reference_solutions_continuum(mesh, fluxes);
    auto spec = small_phantom(0.1, {0.0, 1.0},
                              {Profile::polynomial({1.0}), Profile::polynomial({0.1, 0.1})});
    const auto S = sample_spectral_matrix(spec.spectral);
    const auto truthA = rasterize_phantom(spec, mesh);
    std::vector<std::vector<Eigen::VectorXd>> measured(2);
    for (int q = 0; q < 2; ++q) {
      Eigen::VectorXd sigma = Eigen::VectorXd::Ones(mesh.element_count()) * S.S(0, q);
      sigma += S.S(1, q) * truthA[1];
      const ContinuumOperator op(mesh, sigma);
      for (const auto& f : fluxes) measured[q].push_back(op.solve(f));
    }
    const auto X = assemble_data_continuum(measured, refs, fluxes, {1.0, 1.0}, mesh);
    const Mesh inv = build_disk_mesh(1.0, 0.12);
    std::vector<Eigen::VectorXd> ref_potentials = refs;
    const auto M = assemble_sensitivity(inv, mesh, ref_potentials);
    const auto A = rasterize_phantom(spec, inv);
    Eigen::MatrixXd model = Eigen::MatrixXd::Zero(X.rows(), X.cols());
    for (int q = 0; q < 2; ++q)
      for (int k = 0; k < 2; ++k) model.col(q) += S.S(k, q) * (M * A[k]);
    CHECK((X - model).norm() <= 0.15 * model.norm());
  }

  TEST_CASE("two-frequency direct decoupling reproduces the weighted difference") {
    auto p = make_pipeline(0.1, 8);
    auto spec = small_phantom(0.1, {0.0, 1.0},
                              {Profile::polynomial({1.0}), Profile::polynomial({0.1, 0.1})});
    const auto S = sample_spectral_matrix(spec.spectral);
    const auto sweep = simulate_sweep(spec, p.fwd, p.layout, p.patterns, 0.0, 1);
    const auto X = assemble_data_cem(sweep.voltages, p.refs, p.patterns, {1.0, 1.0});
    const auto systems = build_system(X, S, SystemMode::direct);
    REQUIRE_EQ(systems.rhs.size(), 2);
    Eigen::Matrix2d s2 = S.S;
    const Eigen::VectorXd w = weighted_fd(X.col(0), X.col(1), s2);
    CHECK((systems.rhs[1] - w).norm() <= 1e-10 * w.norm());
  }

  TEST_CASE("difference mode with a unit-slope profile returns the differenced data") {
    SpectralModel model;
    model.profiles = {Profile::polynomial({1.0}), Profile::polynomial({0.0, 1.0})};
    model.frequencies = {0.0, 1.0};
    const auto S = sample_spectral_matrix(model);
    Eigen::MatrixXd X(3, 2);
    X << 1, 2, 0, 1, -1, 3;
    const auto systems = build_system(X, S, SystemMode::difference, {1});
    REQUIRE_EQ(systems.rhs.size(), 1);
    CHECK_EQ(systems.abundance[0], 1);
    const Eigen::VectorXd expected = X.col(1) - X.col(0);
    CHECK((systems.rhs[0] - expected).norm() <= 1e-12);
  }

  TEST_CASE("direct mode with fewer frequencies than profiles is rejected") {
    SpectralModel model;
    model.profiles = {Profile::polynomial({1.0}), Profile::polynomial({0.0, 1.0}),
                      Profile::polynomial({0.0, 0.0, 1.0})};
    model.frequencies = {0.0, 1.0};
    const auto S = sample_spectral_matrix(model);
    CHECK_THROWS_AS(build_system(Eigen::MatrixXd::Zero(4, 2), S, SystemMode::direct), ConfigError);
  }
}
