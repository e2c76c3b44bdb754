#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfeit/experiment.hpp"

using namespace mfeit;
namespace fs = std::filesystem;

namespace {

json tiny_config() {
  return json{{"phantom", "exam1i"},
              {"mode", "direct"},
              {"active_set", {1, 2}},
              {"sim_h", 0.15},
              {"inv_h", 0.3},
              {"noise", 0.01},
              {"seed", 7},
              {"gist", {{"alpha", 0.01}, {"max_iters", 300}}}};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("config validation") {
    CHECK_THROWS_AS(parse_config(json{{"mode", "direct"}}), ConfigError);
    auto bad_mode = tiny_config();
    bad_mode["mode"] = "sideways";
    CHECK_THROWS_AS(parse_config(bad_mode), ConfigError);
    auto no_active = tiny_config();
    no_active["mode"] = "difference";
    no_active.erase("active_set");
    CHECK_THROWS_AS(parse_config(no_active), ConfigError);
    auto bad_mesh = tiny_config();
    bad_mesh["inv_h"] = 0.05;
    CHECK_THROWS_AS(parse_config(bad_mesh), ConfigError);
    auto inline_no_spectral = tiny_config();
    inline_no_spectral["phantom"] = json{{"inclusions", json::array()}};
    CHECK_THROWS_AS(parse_config(inline_no_spectral), ConfigError);
    auto bad_box = tiny_config();
    bad_box["gist"] = json{{"box", {0.5, 1.0}}};
    CHECK_THROWS_AS(parse_config(bad_box), ConfigError);
  }

  TEST_CASE("unknown builtin phantom name surfaces as a config error") {
    auto cfg = tiny_config();
    cfg["phantom"] = "exam99";
    CHECK_THROWS_AS(parse_config(cfg), ConfigError);
  }

  TEST_CASE("tiny direct experiment runs end to end") {
    const auto cfg = parse_config(tiny_config());
    const auto report = run_experiment(cfg);
    REQUIRE_EQ(report.recoveries.size(), 2);
    CHECK_EQ(report.recoveries[0].k, 1);
    CHECK_EQ(report.recoveries[1].k, 2);
    for (const auto& rec : report.recoveries) {
      CHECK(rec.values.allFinite());
      CHECK(rec.metrics.jaccard >= 0.0);
      CHECK(rec.solve.iterations >= 1);
    }
    CHECK_EQ(report.system.X.cols(), 3);
    CHECK_EQ(report.system.M.rows(), 15 * 15);
    CHECK_EQ(report.system.index_map.size(), 225);
  }

  TEST_CASE("null experiment recovers nothing") {
    json j = tiny_config();
    j["phantom"] = json{{"inclusions", json::array()}};
    j["spectral"] = json{{"profiles", {{{"poly", {1.0}}}, {{"poly", {0.1, 0.1}}}}}};
    j["frequencies"] = {0.0, 1.0};
    j["active_set"] = {1};
    j["noise"] = 0.0;
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 1);
    CHECK(report.recoveries[0].values.cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("difference mode runs and recovers the active abundance") {
    // both profiles of this phantom are linear in frequency, so only one
    // differenced row can be active at a time
    json j = tiny_config();
    j["mode"] = "difference";
    j["active_set"] = {1};
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 1);
    CHECK_EQ(report.recoveries[0].k, 1);
  }

  TEST_CASE("difference mode rejects proportional differenced rows") {
    json j = tiny_config();
    j["mode"] = "difference";
    j["active_set"] = {1, 2};
    CHECK_THROWS_AS(run_experiment(parse_config(j)), NumericalError);
  }

  TEST_CASE("four-profile phantom decouples over the inclusion rows") {
    json j = tiny_config();
    j["phantom"] = "exam2i";
    j["active_set"] = {1, 2, 3};
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 3);
    CHECK_EQ(report.recoveries[0].k, 1);
    CHECK_EQ(report.recoveries[2].k, 3);
    for (const auto& rec : report.recoveries) CHECK(rec.values.allFinite());
    // too few frequencies for the full profile set
    json full = j;
    full.erase("active_set");
    CHECK_THROWS_AS(run_experiment(parse_config(full)), ConfigError);
    // with enough frequencies the full set is still linearly dependent
    full["frequencies"] = {0.0, 0.25, 0.5, 1.0};
    CHECK_THROWS_AS(run_experiment(parse_config(full)), NumericalError);
  }

  TEST_CASE("tabulated spectral profiles drive the pipeline") {
    json j = tiny_config();
    j["frequencies"] = {0.0, 0.5, 1.0};
    j["spectral"] = json{{"profiles",
                          {{{"table", {1.0, 1.0, 1.0}}},
                           {{"table", {0.1, 0.15, 0.2}}},
                           {{"table", {0.0, 0.1, 0.2}}}}}};
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 2);
    for (const auto& rec : report.recoveries) CHECK(rec.values.allFinite());
  }

  TEST_CASE("deformed-domain builtin runs end to end") {
    json j = tiny_config();
    j["phantom"] = "exam3ii";
    j["noise"] = 0.001;
    j.erase("active_set");  // full three-profile decoupling is well posed here
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 3);
    CHECK_EQ(report.recoveries[0].k, 0);
  }

  TEST_CASE("partial_poly mode recovers a scaled first abundance") {
    json j = tiny_config();
    j["mode"] = "partial_poly";
    j["poly"] = json{{"degree", 1}, {"moment", 1}};
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 1);
    CHECK_EQ(report.recoveries[0].k, 1);
    CHECK(report.recoveries[0].values.allFinite());
  }

  TEST_CASE("reports and artifacts are written, removed on failure") {
    const fs::path dir = fs::temp_directory_path() / "mfeit_test_report";
    fs::remove_all(dir);
    const auto cfg = parse_config(tiny_config());
    const auto report = run_experiment(cfg);
    write_report(report, dir.string());
    for (const char* name : {"nodes.csv", "elements.csv", "electrodes.csv", "sweep_w1.csv",
                             "sweep_w2.csv", "sweep_w3.csv", "sweep_meta.json",
                             "recovered_k1.csv", "recovered_k2.csv", "report.json"}) {
      CHECK_MESSAGE(fs::exists(dir / name), name);
    }
    const auto rep = json::parse(slurp(dir / "report.json"));
    CHECK(rep.contains("config_hash"));
    CHECK(rep.contains("metrics"));
    CHECK_EQ(rep.at("seed").get<uint64_t>(), 7);
    fs::remove_all(dir);
  }

  TEST_CASE("reruns are byte identical apart from the timing") {
    const fs::path d1 = fs::temp_directory_path() / "mfeit_det_1";
    const fs::path d2 = fs::temp_directory_path() / "mfeit_det_2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    const auto cfg = parse_config(tiny_config());
    write_report(run_experiment(cfg), d1.string());
    write_report(run_experiment(cfg), d2.string());
    for (const auto& entry : fs::directory_iterator(d1)) {
      const auto name = entry.path().filename();
      if (name == "report.json") {
        auto r1 = json::parse(slurp(d1 / name));
        auto r2 = json::parse(slurp(d2 / name));
        r1.erase("timing_ms");
        r2.erase("timing_ms");
        CHECK_EQ(r1.dump(), r2.dump());
      } else {
        CHECK_MESSAGE(slurp(d1 / name) == slurp(d2 / name), name.string());
      }
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
  }

  TEST_CASE("mini mesh study: self-reference is exact and the table is written") {
    json j = tiny_config();
    j["noise"] = 0.001;
    j["table1"] = json{{"inversion_h", {0.25, 0.125}},
                       {"noise_levels", {0.001}},
                       {"alphas", {0.01}},
                       {"sim_h", 0.06},
                       {"noise_repeats", 2}};
    const auto cfg = parse_config(j);
    const auto grid = parse_table1(j);
    const auto t = run_table1(cfg, grid);
    REQUIRE_EQ(t.cells.size(), 1);
    CHECK_EQ(t.cells[0][0][1], 0.0);        // finest vs itself
    CHECK(t.cells[0][0][0] > 0.0);
    const fs::path dir = fs::temp_directory_path() / "mfeit_table_test";
    fs::remove_all(dir);
    write_table1_csv(t, dir.string());
    CHECK(fs::exists(dir / "table1.csv"));
    fs::remove_all(dir);
  }

  TEST_CASE("contact impedance constants flow through the pipeline") {
    json j = tiny_config();
    j["electrodes"] = json{{"count", 16}, {"contact", 0.1}};
    const auto report = run_experiment(parse_config(j));
    REQUIRE_EQ(report.recoveries.size(), 2);
    for (const auto& rec : report.recoveries) CHECK(rec.values.allFinite());

    json bad = tiny_config();
    bad["electrodes"] = json{{"count", 16}, {"contact", {1.0, 1.0}}};
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    json negative = tiny_config();
    negative["electrodes"] = json{{"count", 16}, {"contact", -1.0}};
    CHECK_THROWS_AS(parse_config(negative), ConfigError);
  }

  TEST_CASE("seed override changes the hash input") {
    auto cfg = parse_config(tiny_config());
    const auto h1 = hex64(fnv1a64(cfg.echo.dump()));
    cfg.echo["seed"] = 8;
    const auto h2 = hex64(fnv1a64(cfg.echo.dump()));
    CHECK(h1 != h2);
  }
}
