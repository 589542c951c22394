#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qivnom/kernels.hpp"
#include "qivnom/qstate.hpp"

namespace qivnom {

enum class Variant { Full, NoEntangle, FixedTemp, NoProj, NoCvar, GreedyAssign };

inline constexpr Variant kAllVariants[] = {Variant::Full,     Variant::NoEntangle, Variant::FixedTemp,
                                           Variant::NoProj,   Variant::NoCvar,     Variant::GreedyAssign};

std::string_view variant_name(Variant v) noexcept;
Variant parse_variant(std::string_view name);  // throws ConfigError

enum class Scale { Desk, Paper };
Scale parse_scale(std::string_view name);

struct ScenarioConfig {
  std::string name = "S1";
  int grid_rows = 10;
  int grid_cols = 10;
  double spacing_m = 200.0;
  int vehicles = 100;
  int rsus = 8;
  int fog_nodes = 4;
  double duration_s = 600.0;
  double traffic_dt_s = 1.0;
  double net_dt_s = 0.1;
  double coord_dt_s = 1.0;
  double beacon_hz = 10.0;
  int payload_bytes = 256;
  double latency_budget_v2v_ms = 50.0;
  double latency_budget_v2i_ms = 80.0;
  double demand_multiplier = 1.0;
  double nr_fraction = 0.0;  // share of vehicles with an NR sidelink radio
  double rsu_outage_frac = 0.0;
  double incident_rate = 0.0;  // per minute
  double fog_cpu_frac = 1.0;
  std::vector<std::pair<int, int>> closures;  // node pairs, both directions closed
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;

  // Optimizer defaults.
  int plans = 128;
  double qio_beta = 0.9;
  double qio_eta = 1e-2;
  int qio_iters = 20;  // per coordination epoch, warm-started
  double epsilon = 1e-2;
  double delta = 1e-3;
  double w_latency = 0.4, w_reliability = 0.3, w_energy = 0.2, w_throughput = 0.1;

  // Infrastructure calibration.
  double rsu_service_pps = 400.0;
  double fog_service_pps = 700.0;
  double rsu_range_m = 600.0;
  double edge_capacity_veh = 4.0;
  double free_flow_mps = 13.9;

  // Every transmission succeeds instantly; isolates queueing for tests.
  bool perfect_channel = false;

  void validate() const;  // throws ConfigError
  bool operator==(const ScenarioConfig&) const = default;
};

ScenarioConfig scenario(std::string_view name, Scale scale = Scale::Desk);
std::vector<std::string> scenario_names();

struct Point {
  double x = 0.0, y = 0.0;
};

struct Edge {
  int from = 0, to = 0;
  double length_m = 0.0;
  double capacity_veh = 0.0;
  double free_speed = 0.0;
  bool closed = false;
};

struct Trip {
  int origin = 0, destination = 0;
  double depart_s = 0.0;
};

struct World {
  int rows = 0, cols = 0;
  std::vector<Point> nodes;
  std::vector<Edge> edges;
  std::vector<std::vector<int>> out_edges;  // per node
  std::vector<Point> rsus;
  std::vector<bool> rsu_up;
  std::vector<int> rsu_fog;  // owning fog per RSU
  std::vector<Point> fogs;
  Mat backhaul_ms;   // fogs x RSUs
  Mat plan_shares;   // plans x fogs
  Vec fog_energy;    // per packet
  std::vector<double> rsu_burst;  // per RSU probability of entering the bad channel state
  std::vector<Trip> trips;        // one initial trip per vehicle
  std::vector<bool> nr_capable;   // per vehicle
};

World build_world(const ScenarioConfig& cfg);
std::uint64_t world_hash(const World& w);

struct TickSeries {
  std::vector<double> time_s;
  std::vector<double> latency_ms;  // NaN when nothing was delivered in the tick
  std::vector<double> pdr_pct;
  std::vector<double> reliability_pct;
  std::vector<double> nci_pct;
};

struct MetricsReport {
  std::string scenario;
  std::string variant;
  std::uint64_t seed = 0;
  std::optional<double> mean_latency_ms;
  double pdr_pct = 100.0;
  double reliability_pct = 100.0;
  std::optional<double> att_min;
  double nci_pct = 0.0;
  std::uint64_t packets_sent = 0;
  std::uint64_t packets_delivered = 0;
  std::uint64_t packets_dropped = 0;
  std::uint64_t packets_in_flight = 0;
  std::uint64_t trips_completed = 0;
  int cloud_epochs = 0;
  int cloud_repairs = 0;
  int cloud_flagged = 0;
  int fog_overload_ticks = 0;
  int vehicle_lyapunov_violations = 0;
  double min_latency_ms = 0.0;
  TickSeries series;
};

MetricsReport run(const World& world, const ScenarioConfig& cfg);
MetricsReport run(const ScenarioConfig& cfg);

struct AblationCell {
  std::string scenario;
  Variant variant = Variant::Full;
  std::vector<MetricsReport> reps;  // replication i uses seed base + i
  double latency_mean = 0.0, latency_std = 0.0;
  double pdr_mean = 0.0, pdr_std = 0.0;
  double reliability_mean = 0.0, reliability_std = 0.0;
};

struct AblationTable {
  std::vector<std::string> scenarios;
  std::vector<Variant> variants;
  std::vector<AblationCell> cells;  // scenario-major

  const AblationCell& at(std::size_t scenario, std::size_t variant) const {
    return cells[scenario * variants.size() + variant];
  }
};

// Runs every job; results come back in job order regardless of backend.
std::vector<MetricsReport> run_all(const std::vector<ScenarioConfig>& jobs, kernels::Backend backend);

AblationTable ablate(const std::vector<ScenarioConfig>& bases, const std::vector<Variant>& variants, int replications,
                     kernels::Backend backend = kernels::Backend::OpenMP);

// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2), ties dropped.
double sign_test_p(int wins, int losses);

}  // namespace qivnom
