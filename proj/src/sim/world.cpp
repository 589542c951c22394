#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "qivnom/error.hpp"
#include "qivnom/rng.hpp"
#include "qivnom/sim.hpp"

namespace qivnom {

std::string_view variant_name(Variant v) noexcept {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoEntangle: return "no_entangle";
    case Variant::FixedTemp: return "fixed_temp";
    case Variant::NoProj: return "no_proj";
    case Variant::NoCvar: return "no_cvar";
    case Variant::GreedyAssign: return "greedy_assign";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  fail(Errc::ConfigError, "unknown variant '" + std::string(name) +
                              "' (valid: full, no_entangle, fixed_temp, no_proj, no_cvar, greedy_assign)");
}

Scale parse_scale(std::string_view name) {
  if (name == "desk") return Scale::Desk;
  if (name == "paper") return Scale::Paper;
  fail(Errc::ConfigError, "unknown scale '" + std::string(name) + "' (valid: desk, paper)");
}

void ScenarioConfig::validate() const {
  auto bad = [](const std::string& what) { fail(Errc::ConfigError, what); };
  if (grid_rows < 1 || grid_cols < 1) bad("grid dimensions must be >= 1");
  if (!(spacing_m > 0.0)) bad("spacing_m must be > 0");
  if (vehicles < 0) bad("vehicles must be >= 0");
  if (rsus < 1) bad("rsus must be >= 1");
  if (fog_nodes < 1 || fog_nodes > rsus) bad("fog_nodes must lie in [1, rsus]");
  if (!(duration_s > 0.0)) bad("duration_s must be > 0");
  if (!(traffic_dt_s > 0.0) || !(net_dt_s > 0.0) || !(coord_dt_s > 0.0)) bad("time steps must be > 0");
  if (net_dt_s > traffic_dt_s) bad("net_dt_s must not exceed traffic_dt_s");
  if (!(beacon_hz > 0.0)) bad("beacon_hz must be > 0");
  if (payload_bytes < 1) bad("payload_bytes must be >= 1");
  if (!(latency_budget_v2v_ms > 0.0) || !(latency_budget_v2i_ms > 0.0)) bad("latency budgets must be > 0");
  if (!(demand_multiplier > 0.0)) bad("demand_multiplier must be > 0");
  for (double f : {nr_fraction, rsu_outage_frac}) {
    if (!(f >= 0.0 && f <= 1.0)) bad("fractions must lie in [0, 1]");
  }
  if (!(fog_cpu_frac > 0.0 && fog_cpu_frac <= 1.0)) bad("fog_cpu_frac must lie in (0, 1]");
  if (incident_rate < 0.0) bad("incident_rate must be >= 0");
  const int n = grid_rows * grid_cols;
  for (const auto& [a, b] : closures) {
    if (a < 0 || b < 0 || a >= n || b >= n) bad("closure node out of range");
  }
  if (plans < 1) bad("plans must be >= 1");
  if (!(qio_beta >= 0.0 && qio_beta < 1.0)) bad("qio_beta must lie in [0, 1)");
  if (!(qio_eta > 0.0)) bad("qio_eta must be > 0");
  if (qio_iters < 1) bad("qio_iters must be >= 1");
  if (!(epsilon > 0.0)) bad("epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0)) bad("delta must lie in (0, 1)");
  if (w_latency < 0 || w_reliability < 0 || w_energy < 0 || w_throughput < 0 ||
      !(w_latency + w_reliability + w_energy + w_throughput > 0.0)) {
    bad("objective weights must be nonnegative with a positive sum");
  }
  if (!(rsu_service_pps > 0.0) || !(fog_service_pps > 0.0)) bad("service rates must be > 0");
  if (!(rsu_range_m > 0.0) || !(edge_capacity_veh > 0.0) || !(free_flow_mps > 0.0)) {
    bad("range, edge capacity and free-flow speed must be > 0");
  }
}

std::vector<std::string> scenario_names() { return {"S1", "S2", "S3", "S4", "S5", "S6"}; }

ScenarioConfig scenario(std::string_view name, Scale scale) {
  ScenarioConfig c;
  if (scale == Scale::Paper) {
    c.grid_rows = 25;
    c.grid_cols = 25;
    c.vehicles = 2000;
    c.rsus = 40;
    c.fog_nodes = 12;
  }
  c.name = std::string(name);
  if (name == "S1") {
  } else if (name == "S2") {
    c.demand_multiplier = 2.0;
    c.nr_fraction = 0.5;
  } else if (name == "S3") {
    c.incident_rate = 1.0;
  } else if (name == "S4") {
    c.rsu_outage_frac = 0.2;
  } else if (name == "S5") {
    c.beacon_hz = 20.0;
    c.payload_bytes = 512;
  } else if (name == "S6") {
    c.fog_cpu_frac = 0.5;
  } else {
    fail(Errc::UnknownScenario, "unknown scenario '" + std::string(name) + "' (valid: S1, S2, S3, S4, S5, S6)");
  }
  return c;
}

namespace {

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

World build_world(const ScenarioConfig& cfg) {
  cfg.validate();
  World w;
  w.rows = cfg.grid_rows;
  w.cols = cfg.grid_cols;
  const Rng root(cfg.seed, 0x30f1d);
  const int n = w.rows * w.cols;
  for (int r = 0; r < w.rows; ++r)
    for (int c = 0; c < w.cols; ++c) w.nodes.push_back({c * cfg.spacing_m, r * cfg.spacing_m});

  w.out_edges.assign(static_cast<std::size_t>(n), {});
  auto closed = [&](int a, int b) {
    return std::any_of(cfg.closures.begin(), cfg.closures.end(), [&](const auto& p) {
      return (p.first == a && p.second == b) || (p.first == b && p.second == a);
    });
  };
  auto add = [&](int a, int b) {
    Edge e{a, b, cfg.spacing_m, cfg.edge_capacity_veh, cfg.free_flow_mps, closed(a, b)};
    w.out_edges[static_cast<std::size_t>(a)].push_back(static_cast<int>(w.edges.size()));
    w.edges.push_back(e);
  };
  for (int r = 0; r < w.rows; ++r) {
    for (int c = 0; c < w.cols; ++c) {
      const int i = r * w.cols + c;
      if (c + 1 < w.cols) {
        add(i, i + 1);
        add(i + 1, i);
      }
      if (r + 1 < w.rows) {
        add(i, i + w.cols);
        add(i + w.cols, i);
      }
    }
  }

  // RSUs on a uniform lattice over the map.
  const double width = (w.cols - 1) * cfg.spacing_m, height = (w.rows - 1) * cfg.spacing_m;
  const double aspect = height > 0.0 ? width / height : 1.0;
  const int nx = std::max(1, static_cast<int>(std::ceil(std::sqrt(cfg.rsus * std::max(aspect, 1e-9)))));
  const int ny = (cfg.rsus + nx - 1) / nx;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx && static_cast<int>(w.rsus.size()) < cfg.rsus; ++i)
      w.rsus.push_back({(i + 0.5) * width / nx, (j + 0.5) * height / ny});

  w.rsu_up.assign(w.rsus.size(), true);
  const int down = std::min(static_cast<int>(std::lround(cfg.rsu_outage_frac * cfg.rsus)), cfg.rsus - 1);
  {
    std::vector<int> order(w.rsus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = root.fork(1);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (int k = 0; k < down; ++k) w.rsu_up[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = false;
  }

  // Fogs own contiguous chunks of the lattice and sit at their centroid.
  const int f = cfg.fog_nodes;
  w.rsu_fog.resize(w.rsus.size());
  w.fogs.assign(static_cast<std::size_t>(f), Point{});
  std::vector<int> members(static_cast<std::size_t>(f), 0);
  for (std::size_t r = 0; r < w.rsus.size(); ++r) {
    const int fog = static_cast<int>(r * static_cast<std::size_t>(f) / w.rsus.size());
    w.rsu_fog[r] = fog;
    w.fogs[static_cast<std::size_t>(fog)].x += w.rsus[r].x;
    w.fogs[static_cast<std::size_t>(fog)].y += w.rsus[r].y;
    ++members[static_cast<std::size_t>(fog)];
  }
  for (int j = 0; j < f; ++j) {
    w.fogs[static_cast<std::size_t>(j)].x /= members[static_cast<std::size_t>(j)];
    w.fogs[static_cast<std::size_t>(j)].y /= members[static_cast<std::size_t>(j)];
  }
  const auto nr = static_cast<Eigen::Index>(w.rsus.size());
  w.backhaul_ms = Mat(f, nr);
  for (int j = 0; j < f; ++j) {
    for (Eigen::Index r = 0; r < nr; ++r) {
      const double km = dist(w.fogs[static_cast<std::size_t>(j)], w.rsus[static_cast<std::size_t>(r)]) / 1000.0;
      w.backhaul_ms(j, r) = 0.5 + 2.0 * km + (w.rsu_fog[static_cast<std::size_t>(r)] == j ? 0.0 : 1.0);
    }
  }
  {
    Rng rng = root.fork(2);
    w.fog_energy = Vec(f);
    for (int j = 0; j < f; ++j) w.fog_energy[j] = rng.uniform(0.8, 1.2);
  }

  // Plan templates: plan 0 spreads by capacity (equal capacities), the rest
  // are random log-normal tilts of varying concentration.
  {
    Rng rng = root.fork(3);
    w.plan_shares = Mat(cfg.plans, f);
    w.plan_shares.row(0).setConstant(1.0 / f);
    for (int k = 1; k < cfg.plans; ++k) {
      const double sigma = 0.2 + 1.8 * rng.uniform();
      Vec s(f);
      for (int j = 0; j < f; ++j) s[j] = std::exp(sigma * rng.normal());
      w.plan_shares.row(k) = (s / s.sum()).transpose();
    }
  }
  {
    Rng rng = root.fork(4);
    for (std::size_t r = 0; r < w.rsus.size(); ++r) w.rsu_burst.push_back(rng.uniform(0.002, 0.06));
  }
  {
    Rng rng = root.fork(5);
    for (int v = 0; v < cfg.vehicles; ++v) {
      const int o = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      int d = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      if (n > 1 && d == o) d = (d + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)))) % n;
      w.trips.push_back({o, d, rng.uniform(0.0, 30.0)});
      w.nr_capable.push_back(rng.bernoulli(cfg.nr_fraction));
    }
  }
  return w;
}

namespace {

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ULL;
    }
  }
  template <class T>
  void pod(const T& v) {
    bytes(&v, sizeof v);
  }
  void mat(const Mat& m) {
    pod(m.rows());
    pod(m.cols());
    bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
};

}  // namespace

std::uint64_t world_hash(const World& w) {
  Fnv f;
  f.pod(w.rows);
  f.pod(w.cols);
  for (const auto& p : w.nodes) f.pod(p);
  for (const auto& e : w.edges) {
    f.pod(e.from);
    f.pod(e.to);
    f.pod(e.length_m);
    f.pod(e.capacity_veh);
    f.pod(e.free_speed);
    f.pod(e.closed);
  }
  for (const auto& p : w.rsus) f.pod(p);
  for (bool b : w.rsu_up) f.pod(b);
  for (int x : w.rsu_fog) f.pod(x);
  for (const auto& p : w.fogs) f.pod(p);
  f.mat(w.backhaul_ms);
  f.mat(w.plan_shares);
  f.mat(w.fog_energy);
  for (double b : w.rsu_burst) f.pod(b);
  for (const auto& t : w.trips) {
    f.pod(t.origin);
    f.pod(t.destination);
    f.pod(t.depart_s);
  }
  for (bool b : w.nr_capable) f.pod(b);
  return f.h;
}

}  // namespace qivnom
