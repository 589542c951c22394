#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "qivnom/error.hpp"
#include "qivnom/io.hpp"

using namespace qivnom;
namespace fs = std::filesystem;

namespace {

std::string config_error(std::string_view text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigError);
    return e.what();
  }
  FAIL("expected ConfigError");
  return {};
}

fs::path scratch_dir(const char* name) {
  const fs::path d = fs::temp_directory_path() / "qivnom_io_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count(const std::string& s, char c) { return static_cast<int>(std::count(s.begin(), s.end(), c)); }

}  // namespace

TEST_CASE("empty config yields defaults") {
  CHECK(parse_config("") == ScenarioConfig{});
  CHECK(parse_config("# only a comment\n\n   \n") == ScenarioConfig{});
  const ScenarioConfig d = parse_config("");
  CHECK(d.plans == 128);
  CHECK(d.qio_beta == 0.9);
  CHECK(d.qio_eta == 1e-2);
  CHECK(d.epsilon == 1e-2);
  CHECK(d.delta == 1e-3);
  CHECK(d.w_latency == 0.4);
  CHECK(d.w_reliability == 0.3);
  CHECK(d.w_energy == 0.2);
  CHECK(d.w_throughput == 0.1);
}

TEST_CASE("field errors name the field and constraint") {
  const std::string msg = config_error("beacon_hz = -1\n");
  CHECK(msg.find("line 1") != std::string::npos);
  CHECK(msg.find("beacon_hz") != std::string::npos);
  CHECK(msg.find("> 0") != std::string::npos);
}

TEST_CASE("all problems are collected") {
  const std::string msg = config_error(
      "vehicles = many\n"
      "seed = 4\n"
      "colour = blue\n"
      "rsu_outage_frac = 2\n"
      "seed = 5\n"
      "just words\n"
      "variant = fastest\n");
  for (const char* part : {"line 1: vehicles", "line 3: colour: unknown key", "line 4: rsu_outage_frac",
                           "line 5: seed: duplicate key", "line 6", "line 7: variant"}) {
    CAPTURE(part);
    CHECK(msg.find(part) != std::string::npos);
  }
  CHECK(msg.find("6 problems") != std::string::npos);

  // Cross-field checks run once the fields themselves parse.
  const std::string cross = config_error("rsus = 2\nfog_nodes = 3\n");
  CHECK(cross.find("fog_nodes") != std::string::npos);
}

TEST_CASE("keys override a selected preset") {
  const ScenarioConfig s4 = parse_config("scenario = S4\n");
  CHECK(s4 == scenario("S4"));
  const ScenarioConfig tweaked = parse_config("rsu_outage_frac = 0.1\nscenario = S4\n");
  CHECK(tweaked.rsu_outage_frac == 0.1);
  CHECK(tweaked.name == "S4");
  CHECK(parse_config("scenario = S1\nscale = paper\n").rsus == 40);

  ScenarioConfig base = scenario("S6");
  base.seed = 77;
  const ScenarioConfig kept = parse_config("scenario = S2\n", base, PresetKeys::Ignore);
  CHECK(kept.fog_cpu_frac == 0.5);
  CHECK(kept.demand_multiplier == 1.0);
  CHECK(kept.seed == 77);

  CHECK(config_error("scenario = S8\n").find("S6") != std::string::npos);
}

TEST_CASE("emit then parse round-trips") {
  std::vector<ScenarioConfig> configs;
  for (const auto& n : scenario_names()) configs.push_back(scenario(n));
  configs.push_back(scenario("S3", Scale::Paper));
  ScenarioConfig odd = scenario("S2");
  odd.seed = std::numeric_limits<std::uint64_t>::max();
  odd.variant = Variant::NoCvar;
  odd.closures = {{0, 1}, {5, 15}};
  odd.duration_s = 0.1 + 0.2;
  odd.w_energy = 1.0 / 3.0;
  odd.qio_eta = 1e-7;
  odd.perfect_channel = true;
  configs.push_back(odd);
  for (const auto& c : configs) {
    const std::string text = emit_config(c);
    CHECK(parse_config(text) == c);
    CHECK(parse_config(text, ScenarioConfig{}) == c);
    CHECK(emit_config(parse_config(text)) == text);
  }
}

TEST_CASE("report formats") {
  MetricsReport r;
  r.scenario = "S1";
  r.variant = "full";
  r.seed = 9;
  r.mean_latency_ms = 12.5;
  r.pdr_pct = 90.0;
  r.packets_sent = 10;
  r.packets_delivered = 9;
  r.packets_dropped = 1;
  r.series.time_s = {0.0, 1.0};
  r.series.latency_ms = {std::numeric_limits<double>::quiet_NaN(), 12.5};
  r.series.pdr_pct = {100.0, 90.0};
  r.series.reliability_pct = {100.0, 100.0};
  r.series.nci_pct = {0.0, 0.5};

  const std::string csv = series_csv(r);
  CHECK(csv.rfind("time_s,latency_ms,pdr_pct,reliability_pct,nci_pct\n", 0) == 0);
  CHECK(count(csv, '\n') == 3);
  CHECK(csv.find("\n0,,100,100,0\n") != std::string::npos);

  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["scenario"] == "S1");
  CHECK(j["seed"] == 9);
  CHECK(j["mean_latency_ms"] == 12.5);
  CHECK(j["att_min"].is_null());
  CHECK(j["counts"]["packets_sent"] == 10);
  CHECK(j["series"]["latency_ms"][0].is_null());
  CHECK(j["series"]["nci_pct"][1] == 0.5);

  const std::string head = summary_csv_header(), row = summary_csv_row(r);
  CHECK(count(head, ',') == count(row, ','));
  CHECK(head.rfind("scenario,variant,seed,mean_latency_ms", 0) == 0);
  CHECK(row.rfind("S1,full,9,12.5,90,", 0) == 0);
}

TEST_CASE("atomic writes") {
  const fs::path d = scratch_dir("atomic");
  const fs::path target = d / "out.csv";
  write_atomic(target, "first\n");
  CHECK(slurp(target) == "first\n");
  write_atomic(target, "second\n");
  CHECK(slurp(target) == "second\n");
  for (const auto& e : fs::directory_iterator(d)) CHECK(e.path().filename() == "out.csv");

  std::ofstream(d / "plain") << "x";
  const fs::path missing = d / "plain" / "x.csv";  // parent is a file
  CHECK_THROWS(write_atomic(missing, "data"));
  CHECK_FALSE(fs::exists(missing));
  CHECK_FALSE(fs::exists(missing.string() + ".tmp"));
}

TEST_CASE("config files") {
  const fs::path d = scratch_dir("files");
  {
    std::ofstream(d / "ok.cfg") << "scenario = S5\nseed = 3\n";
    std::ofstream(d / "bad.cfg") << "seed = 3\nbeacon_hz = 0\n";
  }
  const ScenarioConfig ok = load_config(d / "ok.cfg");
  CHECK(ok.beacon_hz == 20.0);
  CHECK(ok.seed == 3);
  try {
    load_config(d / "bad.cfg");
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigError);
    CHECK(std::string(e.what()).find("bad.cfg") != std::string::npos);
    CHECK(std::string(e.what()).find("line 2: beacon_hz") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config(d / "absent.cfg"), Error);
}
