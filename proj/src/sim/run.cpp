#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <unordered_map>

#include "qivnom/cloud.hpp"
#include "qivnom/error.hpp"
#include "qivnom/fog.hpp"
#include "qivnom/rng.hpp"
#include "qivnom/sim.hpp"
#include "qivnom/vehicle.hpp"

namespace qivnom {

namespace {

constexpr double kStaleS = 1.0;          // packets older than this are dropped
constexpr int kMaxRetries = 3;
constexpr double kBackoffS = 1e-3;
constexpr double kFogDeltaS = 2e-3;      // per-packet processing time before caching
constexpr double kBadStateDb = 12.0;
constexpr double kBurstExit = 0.2;
constexpr double kNeighborRadiusM = 150.0;
constexpr double kVehicleLengthM = 5.0;
constexpr double kLocalComputeS = 0.05;
constexpr double kTaskWork = 5.0;        // packets of fog work per offloaded task
constexpr double kEwma = 0.1;
constexpr double kPrivacySigma = 0.5;
constexpr double kIncidentS = 120.0;

struct Radio {
  double bandwidth_hz;
  double gamma_th_db;
};
constexpr Radio k11p{10e6, 5.0};
constexpr Radio kNr{20e6, 3.0};

// Log-distance model pinned so the SNR equals the 11p threshold at the RSU range.
double mean_snr_db(double d_m, double range_m) {
  return k11p.gamma_th_db + 27.0 * std::log10(range_m / std::max(d_m, 10.0));
}

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct Car {
  bool active = false;
  bool parked = false;  // no route to anywhere
  int trip_no = 0;
  int dest = 0;
  double depart_s = 0.0;
  double trip_start_s = 0.0;
  int node = 0;  // current node when between edges
  std::vector<int> route;
  std::size_t leg = 0;
  double pos_m = 0.0;
  Point p;

  VehicleState vs;
  VehicleOutputs out;
  Vec lat_mean, lat_var;
  std::vector<int> lat_n;
  double gen_acc = 0.0;
  int generated = 0;  // last traffic tick
  double since_delivery_s = 0.0;
  double best_prob = 0.0;
  int assoc = -1;
  bool offload = false;

  int edge() const { return leg < route.size() ? route[leg] : -1; }
};

struct Packet {
  enum class Fate { Delivered, Dropped, InFlight } fate = Fate::Dropped;
  double latency_s = 0.0;
};

std::optional<std::vector<int>> shortest_path(const World& w, int from, int to, const std::vector<double>& cost) {
  const auto n = w.nodes.size();
  std::vector<double> d(n, std::numeric_limits<double>::infinity());
  std::vector<int> via(n, -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  d[static_cast<std::size_t>(from)] = 0.0;
  pq.push({0.0, from});
  while (!pq.empty()) {
    const auto [du, u] = pq.top();
    pq.pop();
    if (du > d[static_cast<std::size_t>(u)]) continue;
    if (u == to) break;
    for (int e : w.out_edges[static_cast<std::size_t>(u)]) {
      const Edge& ed = w.edges[static_cast<std::size_t>(e)];
      if (ed.closed || !std::isfinite(cost[static_cast<std::size_t>(e)])) continue;
      const double nd = du + cost[static_cast<std::size_t>(e)];
      if (nd < d[static_cast<std::size_t>(ed.to)]) {
        d[static_cast<std::size_t>(ed.to)] = nd;
        via[static_cast<std::size_t>(ed.to)] = e;
        pq.push({nd, ed.to});
      }
    }
  }
  if (!std::isfinite(d[static_cast<std::size_t>(to)])) return std::nullopt;
  std::vector<int> path;
  for (int v = to; v != from;) {
    const int e = via[static_cast<std::size_t>(v)];
    path.push_back(e);
    v = w.edges[static_cast<std::size_t>(e)].from;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

class Engine {
 public:
  Engine(const World& w, const ScenarioConfig& cfg) : w_(w), cfg_(cfg), root_(cfg.seed, 0x51a) {
    nr_ = static_cast<Eigen::Index>(w.rsus.size());
    nf_ = static_cast<Eigen::Index>(w.fogs.size());
    if (w.trips.size() != static_cast<std::size_t>(cfg.vehicles) || nr_ != cfg.rsus || nf_ != cfg.fog_nodes) {
      fail(Errc::ConfigError, "world was built from a different configuration");
    }
    setup_vehicle_config();
    setup_cloud();
    const auto ne = w.edges.size();
    cap_factor_.assign(ne, 1.0);
    speed_factor_.assign(ne, 1.0);
    incident_until_.assign(ne, -1.0);
    edge_count_.assign(ne, 0);
    rsu_bad_.assign(static_cast<std::size_t>(nr_), false);
    rsu_backlog_ = Vec::Zero(nr_);
    rsu_rate_ = Vec::Zero(nr_);
    rsu_epoch_arrivals_ = Vec::Zero(nr_);
    fog_rate_ = Vec::Zero(nf_);
    fog_mu_ = Vec::Constant(nf_, cfg.fog_service_pps * cfg.fog_cpu_frac);
    fog_hit_ = Vec::Zero(nf_);
    fog_lat_sum_ = Vec::Zero(nf_);
    fog_lat_sq_ = Vec::Zero(nf_);
    fog_lat_n_ = Vec::Zero(nf_);
    fogs_.resize(static_cast<std::size_t>(nf_));
    for (auto& f : fogs_) {
      f.cpu_shares = Vec::Constant(2, 0.5 * cfg.fog_cpu_frac);
      f.cache_frac = Vec::Constant(2, 0.5);
      f.cpu_cap = cfg.fog_cpu_frac;
      f.mem_cap = 1.0;
    }
    routing_ = Mat::Zero(nf_, nr_);
    for (Eigen::Index r = 0; r < nr_; ++r) routing_(w.rsu_fog[static_cast<std::size_t>(r)], r) = 1.0;
    init_cars();
  }

  MetricsReport run() {
    report_.scenario = cfg_.name;
    report_.variant = std::string(variant_name(cfg_.variant));
    report_.seed = cfg_.seed;
    const auto net_per_traffic = std::max<long>(1, std::lround(cfg_.traffic_dt_s / cfg_.net_dt_s));
    const auto net_per_coord = std::max<long>(1, std::lround(cfg_.coord_dt_s / cfg_.net_dt_s));
    const auto total_net = static_cast<long>(std::ceil(cfg_.duration_s / cfg_.net_dt_s - 1e-9));
    for (long i = 0; i < total_net; ++i) {
      const double t = static_cast<double>(i) * cfg_.net_dt_s;
      if (i % net_per_traffic == 0) {
        if (i > 0) close_traffic_tick(t);
        traffic_tick(t, i / net_per_traffic);
      }
      if (i % net_per_coord == 0) coordination_epoch(i / net_per_coord);
      net_tick(t, i);
    }
    close_traffic_tick(static_cast<double>(total_net) * cfg_.net_dt_s);
    return finish();
  }

 private:
  void setup_vehicle_config() {
    vc_.dynamics = Dynamics::longitudinal(cfg_.traffic_dt_s);
    vc_.gamma_th_db = k11p.gamma_th_db;
    vc_.gamma0_db = k11p.gamma_th_db;
    vc_.d_max_m = cfg_.rsu_range_m;
    vc_.deadline_s = cfg_.latency_budget_v2i_ms / 1e3;
    vc_.n_samples = 32;
    vc_.bandwidth_hz = k11p.bandwidth_hz;
    vc_.entangle = cfg_.variant != Variant::NoEntangle;
    vc_.adaptive_temperature = cfg_.variant != Variant::FixedTemp;
    vc_.risk = cfg_.variant == Variant::NoCvar ? RiskMeasure::Mean : RiskMeasure::CVaR;
  }

  void setup_cloud() {
    cc_.qio.K = cfg_.plans;
    cc_.qio.eta = cfg_.qio_eta;
    cc_.qio.beta = cfg_.qio_beta;
    cc_.qio.max_iters = cfg_.qio_iters;
    cc_.qio.seed = cfg_.seed;
    cc_.qio.coupling = cfg_.variant != Variant::NoEntangle;
    cc_.qio.adaptive_temperature = cfg_.variant != Variant::FixedTemp;
    cc_.qio.projection = cfg_.variant != Variant::NoProj;
    cc_.weights = {{Objective::Latency, cfg_.w_latency},
                   {Objective::Reliability, cfg_.w_reliability},
                   {Objective::Energy, cfg_.w_energy},
                   {Objective::Throughput, cfg_.w_throughput}};
    double sum = 0.0;
    for (const auto& [q, v] : cc_.weights) sum += v;
    for (auto& [q, v] : cc_.weights) v /= sum;
    cc_.epsilon = cfg_.epsilon;
    cc_.delta = cfg_.delta;
    cc_.epoch_s = cfg_.coord_dt_s;
    cc_.adaptive_temperature = cfg_.variant != Variant::FixedTemp;
    cc_.greedy_assign = cfg_.variant == Variant::GreedyAssign;
    cc_.sinkhorn.max_iters = 2000;
    cloud_ = make_cloud(cc_, nr_, nf_, cfg_.plans);
  }

  void init_cars() {
    cars_.resize(w_.trips.size());
    Rng rng = root_.fork(1);
    for (std::size_t v = 0; v < cars_.size(); ++v) {
      Car& c = cars_[v];
      const Trip& tr = w_.trips[v];
      c.node = tr.origin;
      c.dest = tr.destination;
      c.depart_s = tr.depart_s;
      c.p = w_.nodes[static_cast<std::size_t>(tr.origin)];
      c.vs = make_vehicle(vc_, Vec::Zero(3), static_cast<int>(nr_));
      c.lat_mean = Vec::Zero(nr_);
      c.lat_var = Vec::Zero(nr_);
      c.lat_n.assign(static_cast<std::size_t>(nr_), 0);
      c.gen_acc = rng.uniform();
    }
  }

  double edge_speed(int e) const {
    const Edge& ed = w_.edges[static_cast<std::size_t>(e)];
    const double cap = ed.capacity_veh * cap_factor_[static_cast<std::size_t>(e)];
    const double load = std::min(1.0, edge_count_[static_cast<std::size_t>(e)] * cfg_.demand_multiplier / cap);
    return std::max(2.0, ed.free_speed * speed_factor_[static_cast<std::size_t>(e)] * (1.0 - 0.8 * load));
  }

  std::vector<double> edge_times() const {
    std::vector<double> c(w_.edges.size());
    for (std::size_t e = 0; e < c.size(); ++e) c[e] = w_.edges[e].length_m / edge_speed(static_cast<int>(e));
    return c;
  }

  void start_trip(Car& c, std::size_t v, double t, const std::vector<double>& times) {
    const auto n = static_cast<std::uint64_t>(w_.nodes.size());
    for (int attempt = 0; attempt < 4; ++attempt) {
      if (c.dest != c.node) {
        if (auto path = shortest_path(w_, c.node, c.dest, times)) {
          c.route = std::move(*path);
          c.leg = 0;
          c.pos_m = 0.0;
          c.trip_start_s = t;
          c.active = true;
          c.parked = false;
          return;
        }
      }
      if (n <= 1) break;
      Rng rng = root_.fork(2, v, static_cast<std::uint64_t>(++c.trip_no));
      c.dest = static_cast<int>(rng.below(n));
    }
    c.route.clear();
    c.leg = 0;
    c.active = true;
    c.parked = true;
  }

  void update_incidents(double t, long tick) {
    for (std::size_t e = 0; e < w_.edges.size(); ++e) {
      if (incident_until_[e] >= 0.0 && t >= incident_until_[e]) {
        incident_until_[e] = -1.0;
        cap_factor_[e] = 1.0;
        speed_factor_[e] = 1.0;
      }
    }
    if (cfg_.incident_rate <= 0.0 || w_.edges.empty()) return;
    Rng rng = root_.fork(3, static_cast<std::uint64_t>(tick));
    if (!rng.bernoulli(std::min(1.0, cfg_.incident_rate / 60.0 * cfg_.traffic_dt_s))) return;
    const auto e = static_cast<std::size_t>(rng.below(w_.edges.size()));
    if (w_.edges[e].closed) return;
    cap_factor_[e] = 0.25;
    speed_factor_[e] = 0.3;
    incident_until_[e] = t + kIncidentS;
  }

  void move_cars(double t, const std::vector<double>& times) {
    // Leaders by edge from the positions at the start of the tick.
    std::unordered_map<int, std::vector<std::size_t>> on_edge;
    for (std::size_t v = 0; v < cars_.size(); ++v) {
      if (cars_[v].active && !cars_[v].parked) on_edge[cars_[v].edge()].push_back(v);
    }
    std::vector<double> limit(cars_.size(), std::numeric_limits<double>::infinity());
    for (auto& [e, vs] : on_edge) {
      std::sort(vs.begin(), vs.end(), [&](std::size_t a, std::size_t b) {
        return cars_[a].pos_m != cars_[b].pos_m ? cars_[a].pos_m > cars_[b].pos_m : a < b;
      });
      for (std::size_t k = 1; k < vs.size(); ++k) limit[vs[k]] = cars_[vs[k - 1]].pos_m - kVehicleLengthM;
    }
    for (std::size_t v = 0; v < cars_.size(); ++v) {
      Car& c = cars_[v];
      if (!c.active) {
        if (t >= c.depart_s) start_trip(c, v, t, times);
        continue;
      }
      if (c.parked) continue;
      const double speed = std::clamp(c.vs.x[1], 0.0, edge_speed(c.edge()));
      double travel = speed * cfg_.traffic_dt_s;
      double room = limit[v] - c.pos_m;
      if (room < travel) travel = std::max(0.0, room);
      while (travel > 0.0 && c.leg < c.route.size()) {
        const Edge& ed = w_.edges[static_cast<std::size_t>(c.edge())];
        const double left = ed.length_m - c.pos_m;
        if (travel < left) {
          c.pos_m += travel;
          travel = 0.0;
        } else {
          travel -= left;
          c.node = ed.to;
          ++c.leg;
          c.pos_m = 0.0;
        }
      }
      if (c.leg >= c.route.size()) {
        ++report_.trips_completed;
        att_sum_s_ += t + cfg_.traffic_dt_s - c.trip_start_s;
        c.node = c.dest;
        Rng rng = root_.fork(2, v, static_cast<std::uint64_t>(++c.trip_no));
        c.dest = static_cast<int>(rng.below(static_cast<std::uint64_t>(w_.nodes.size())));
        start_trip(c, v, t + cfg_.traffic_dt_s, times);
      }
    }
    for (Car& c : cars_) {
      if (!c.active || c.parked || c.leg >= c.route.size()) {
        c.p = w_.nodes[static_cast<std::size_t>(c.node)];
        continue;
      }
      const Edge& ed = w_.edges[static_cast<std::size_t>(c.edge())];
      const Point& a = w_.nodes[static_cast<std::size_t>(ed.from)];
      const Point& b = w_.nodes[static_cast<std::size_t>(ed.to)];
      const double f = c.pos_m / ed.length_m;
      c.p = {a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)};
    }
  }

  void count_edges() {
    std::fill(edge_count_.begin(), edge_count_.end(), 0);
    for (const Car& c : cars_) {
      if (c.active && !c.parked && c.edge() >= 0) ++edge_count_[static_cast<std::size_t>(c.edge())];
    }
  }

  // Fog hazard on the next edges of each route; alerted vehicles take a detour
  // when one passes the gate.
  void detours(const std::vector<double>& times) {
    if (cfg_.incident_rate <= 0.0) return;
    const FogCoefs coefs;
    for (std::size_t v = 0; v < cars_.size(); ++v) {
      Car& c = cars_[v];
      if (!c.active || c.parked || c.leg + 1 >= c.route.size()) continue;
      Vec z = Vec::Zero(3);
      for (int k = 0; k < 3 && c.leg + 1 + static_cast<std::size_t>(k) < c.route.size(); ++k) {
        z[k] = 1.0 - speed_factor_[static_cast<std::size_t>(c.route[c.leg + 1 + static_cast<std::size_t>(k)])];
      }
      const double hazard = hazard_score(z, Mat(), 6.0, -2.0);
      if (hazard < coefs.alert_threshold) continue;
      const int from = w_.edges[static_cast<std::size_t>(c.edge())].to;
      std::vector<double> avoid = times;
      for (std::size_t k = c.leg + 1; k < c.route.size(); ++k) {
        if (speed_factor_[static_cast<std::size_t>(c.route[k])] < 1.0) {
          avoid[static_cast<std::size_t>(c.route[k])] = std::numeric_limits<double>::infinity();
        }
      }
      auto alt = shortest_path(w_, from, c.dest, avoid);
      if (!alt) continue;
      std::vector<int> current(c.route.begin() + static_cast<std::ptrdiff_t>(c.leg + 1), c.route.end());
      const std::vector<RouteCandidate> cands = {describe(current, times), describe(*alt, times)};
      Vec za = Vec::Zero(3);
      for (std::size_t k = 0; k < 3 && k < alt->size(); ++k) {
        za[static_cast<Eigen::Index>(k)] = 1.0 - speed_factor_[static_cast<std::size_t>((*alt)[k])];
      }
      const auto pick = pick_route(cands, {1.0, 10.0, 1.0}, hazard_score(za, Mat(), 6.0, -2.0), coefs.alert_threshold);
      if (pick && *pick == 1) {
        c.route.resize(c.leg + 1);
        c.route.insert(c.route.end(), alt->begin(), alt->end());
        ++detours_;
      }
    }
  }

  RouteCandidate describe(const std::vector<int>& path, const std::vector<double>& times) const {
    RouteCandidate rc;
    double covered = 0.0;
    for (int e : path) {
      rc.travel_time += times[static_cast<std::size_t>(e)];
      const Edge& ed = w_.edges[static_cast<std::size_t>(e)];
      rc.congestion = std::max(rc.congestion, edge_count_[static_cast<std::size_t>(e)] * cfg_.demand_multiplier /
                                                  (ed.capacity_veh * cap_factor_[static_cast<std::size_t>(e)]));
      const Point& p = w_.nodes[static_cast<std::size_t>(ed.to)];
      for (Eigen::Index r = 0; r < nr_; ++r) {
        if (w_.rsu_up[static_cast<std::size_t>(r)] && dist(p, w_.rsus[static_cast<std::size_t>(r)]) <= cfg_.rsu_range_m) {
          covered += 1.0;
          break;
        }
      }
    }
    rc.bandwidth = path.empty() ? 1.0 : std::max(covered / static_cast<double>(path.size()), 1e-3);
    return rc;
  }

  void traffic_tick(double t, long tick) {
    update_incidents(t, tick);
    count_edges();
    const std::vector<double> times = edge_times();
    if (tick > 0) move_cars(t, times);
    else {
      for (std::size_t v = 0; v < cars_.size(); ++v) {
        if (!cars_[v].active && t >= cars_[v].depart_s) start_trip(cars_[v], v, t, times);
      }
    }
    count_edges();
    detours(times);
    double congested = 0.0, open = 0.0;
    for (std::size_t e = 0; e < w_.edges.size(); ++e) {
      if (w_.edges[e].closed) continue;
      open += 1.0;
      if (edge_count_[e] * cfg_.demand_multiplier / (w_.edges[e].capacity_veh * cap_factor_[e]) >= 0.85) congested += 1.0;
    }
    tick_nci_ = open > 0.0 ? 100.0 * congested / open : 0.0;
    step_vehicles(tick);
  }

  void step_vehicles(long tick) {
    const std::size_t n = cars_.size();
    std::vector<std::size_t> live;
    for (std::size_t v = 0; v < n; ++v) {
      if (cars_[v].active) live.push_back(v);
    }
    // Neighbor graph by spatial hashing.
    std::unordered_map<std::int64_t, std::vector<std::size_t>> cells;
    auto cell_of = [](const Point& p) {
      return std::pair<std::int64_t, std::int64_t>{static_cast<std::int64_t>(std::floor(p.x / kNeighborRadiusM)),
                                                    static_cast<std::int64_t>(std::floor(p.y / kNeighborRadiusM))};
    };
    auto key = [](std::int64_t cx, std::int64_t cy) { return cx * 1000003 + cy; };
    for (std::size_t v : live) {
      const auto [cx, cy] = cell_of(cars_[v].p);
      cells[key(cx, cy)].push_back(v);
    }
    std::vector<std::vector<std::size_t>> nbrs(n);
    for (std::size_t v : live) {
      const auto [cx, cy] = cell_of(cars_[v].p);
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
          auto it = cells.find(key(cx + dx, cy + dy));
          if (it == cells.end()) continue;
          for (std::size_t u : it->second) {
            if (u != v && dist(cars_[u].p, cars_[v].p) <= kNeighborRadiusM) nbrs[v].push_back(u);
          }
        }
      }
      std::sort(nbrs[v].begin(), nbrs[v].end());
    }

    // Leader gaps from the same edge.
    std::unordered_map<int, std::vector<std::size_t>> on_edge;
    for (std::size_t v : live) {
      if (!cars_[v].parked) on_edge[cars_[v].edge()].push_back(v);
    }
    std::vector<double> gap(n, 1e9), rel(n, 0.0);
    for (auto& [e, vs] : on_edge) {
      std::sort(vs.begin(), vs.end(), [&](std::size_t a, std::size_t b) {
        return cars_[a].pos_m != cars_[b].pos_m ? cars_[a].pos_m > cars_[b].pos_m : a < b;
      });
      for (std::size_t k = 1; k < vs.size(); ++k) {
        gap[vs[k]] = std::max(0.0, cars_[vs[k - 1]].pos_m - cars_[vs[k]].pos_m - kVehicleLengthM);
        rel[vs[k]] = cars_[vs[k]].vs.x[1] - cars_[vs[k - 1]].vs.x[1];
      }
    }

    std::vector<int> sharing(static_cast<std::size_t>(nr_), 0);
    for (std::size_t v : live) {
      if (cars_[v].assoc >= 0) ++sharing[static_cast<std::size_t>(cars_[v].assoc)];
    }

    // Snapshot of last tick's shared state.
    std::vector<Amplitudes> psi(n, Amplitudes::uniform(1));
    std::vector<Vec> xi(n), msg(n);
    for (std::size_t v : live) {
      psi[v] = cars_[v].vs.psi;
      xi[v] = cars_[v].vs.consensus_xi;
      msg[v] = cars_[v].out.message;
    }

    const Rng vroot = root_.fork(4, static_cast<std::uint64_t>(tick));
    for (std::size_t v : live) {
      Car& c = cars_[v];
      VehicleEnv env;
      env.links.reserve(static_cast<std::size_t>(nr_));
      env.neighbors.reserve(nbrs[v].size());
      const double payload_bits = 8.0 * cfg_.payload_bytes;
      double best_est = std::numeric_limits<double>::infinity();
      c.best_prob = 0.0;
      double pooled_var = 0.0, pooled_n = 0.0;
      for (Eigen::Index r = 0; r < nr_; ++r) {
        if (c.lat_n[static_cast<std::size_t>(r)] == 0) continue;
        pooled_var += c.lat_var[r];
        pooled_n += 1.0;
      }
      const double pooled_std = pooled_n > 0.0 ? std::sqrt(pooled_var / pooled_n) : 0.0;
      for (Eigen::Index r = 0; r < nr_; ++r) {
        if (!w_.rsu_up[static_cast<std::size_t>(r)]) continue;
        LinkCandidate lc;
        lc.target = static_cast<int>(r);
        const double d = dist(c.p, w_.rsus[static_cast<std::size_t>(r)]);
        lc.metrics.snr_db = mean_snr_db(d, cfg_.rsu_range_m);
        lc.metrics.distance_m = d;
        lc.metrics.payload_bits = payload_bits;
        const int share = std::max(1, sharing[static_cast<std::size_t>(r)]);
        lc.metrics.phy_rate_bps = std::max(1.0, best_rate(c, v, lc.metrics.snr_db, 1.0 / share));
        lc.metrics.neighbor_queue = rsu_backlog_[r];
        lc.metrics.neighbor_service_rate = cfg_.rsu_service_pps;
        const double floor = payload_bits / lc.metrics.phy_rate_bps + rsu_backlog_[r] / cfg_.rsu_service_pps;
        lc.est_latency_s = c.vs.consensus_xi[r] > 0.0 ? std::max(c.vs.consensus_xi[r], floor) : floor;
        // A link this car has never used is taken to be as volatile as its pooled experience.
        lc.est_std_s = c.lat_n[static_cast<std::size_t>(r)] > 0 ? std::sqrt(c.lat_var[r])
                       : pooled_std > 0.0                        ? pooled_std
                                                                 : lc.est_latency_s;
        lc.sharing = share;
        const LinkDecision ld = link_admissible(lc.metrics, vc_.gamma_th_db, vc_.d_max_m, vc_.deadline_s);
        c.best_prob = std::max(c.best_prob, ld.prob);
        if (ld.admissible) best_est = std::min(best_est, lc.est_latency_s);
        env.links.push_back(lc);
      }
      for (std::size_t u : nbrs[v]) {
        NeighborView nv;
        nv.psi = &psi[u];
        nv.xi = &xi[u];
        nv.weight = 1.0 / (1.0 + static_cast<double>(std::max(nbrs[v].size(), nbrs[u].size())));
        nv.message = msg[u];
        const double d = dist(c.p, cars_[u].p);
        nv.relay_probs = {packet_success(mean_snr_db(d, kNeighborRadiusM), k11p.gamma_th_db, 0.5, 0.98),
                          cars_[u].best_prob};
        env.neighbors.push_back(std::move(nv));
      }
      env.gap_m = gap[v];
      env.rel_speed = rel[v];
      env.target_speed = c.parked || c.edge() < 0 ? 0.0 : edge_speed(c.edge());
      env.arrivals = c.generated;
      env.l_local = kLocalComputeS;
      if (std::isfinite(best_est) && c.assoc >= 0) {
        const int f = w_.rsu_fog[static_cast<std::size_t>(c.assoc)];
        const double mu = fog_mu_[f], lam = std::min(fog_rate_[f], 0.98 * mu);
        env.l_upl = best_est;
        env.l_proc = fog_delay(kTaskWork, mu, lam, kFogDeltaS);
        env.l_down = 0.5 * best_est;
      } else {
        env.l_upl = kStaleS;
      }
      env.innovation = c.vs.consensus_xi;
      for (Eigen::Index r = 0; r < nr_; ++r) {
        if (c.lat_n[static_cast<std::size_t>(r)] > 0) env.innovation[r] = c.lat_mean[r];
      }
      env.stale_s = std::min(c.since_delivery_s, kStaleS);

      Rng rng = vroot.fork(v);
      VehicleStep step = step_vehicle(c.vs, env, vc_, rng);
      if (!step.out.lyapunov_ok) ++report_.vehicle_lyapunov_violations;
      c.vs = std::move(step.state);
      c.out = std::move(step.out);
      c.offload = c.out.offload.offload;
      c.assoc = c.out.deferred ? c.out.fallback : static_cast<int>(argmax_lowest(c.out.link_probs));
      c.generated = 0;
    }
  }

  double best_rate(const Car&, std::size_t v, double snr_db, double share) const {
    Vec rates(w_.nr_capable[v] ? 2 : 1);
    rates[0] = shannon_rate(share, k11p.bandwidth_hz, std::pow(10.0, snr_db / 10.0));
    if (rates.size() > 1) rates[1] = shannon_rate(share, kNr.bandwidth_hz, std::pow(10.0, (snr_db - 2.0) / 10.0));
    return schedule_subchannel(rates).rate;
  }

  void coordination_epoch(long epoch) {
    const double span = epoch == 0 ? 1.0 : cfg_.coord_dt_s;
    const Vec rsu_demand = rsu_epoch_arrivals_ / span;
    rsu_epoch_arrivals_.setZero();

    // Fog-side aggregation and privacy, one summary per cluster.
    std::vector<FogSummary> summaries;
    for (Eigen::Index f = 0; f < nf_; ++f) {
      std::vector<Eigen::Index> members;
      for (Eigen::Index r = 0; r < nr_; ++r) {
        if (w_.rsu_fog[static_cast<std::size_t>(r)] == f) members.push_back(r);
      }
      const auto m = static_cast<Eigen::Index>(members.size());
      std::vector<AggregateInput> inputs;
      for (Eigen::Index i = 0; i < m; ++i) {
        AggregateInput in;
        in.weight = Mat::Zero(m, 1);
        in.weight(i, 0) = 1.0;
        in.y = Vec::Constant(1, rsu_demand[members[static_cast<std::size_t>(i)]]);
        inputs.push_back(std::move(in));
      }
      const Vec z = aggregate(inputs, Mat::Zero(m, 0), Vec());
      FogSummary fs;
      fs.s = privatize(z, kPrivacySigma, root_.fork(5, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(f)).next_u64());
      fs.a = Mat::Zero(nr_, m);
      for (Eigen::Index i = 0; i < m; ++i) fs.a(members[static_cast<std::size_t>(i)], i) = 1.0;
      summaries.push_back(std::move(fs));

      // Local CPU / cache allocation: beacons and offloaded tasks.
      FogState& st = fogs_[static_cast<std::size_t>(f)];
      const double load = std::max(fog_rate_[f] / fog_mu_[f], 1e-3);
      const std::array<TaskDescriptor, 2> tasks = {TaskDescriptor{1.0, load, 0.5, 1.0},
                                                   TaskDescriptor{2.0, 0.1 * load, 1.0, 0.5}};
      AllocateOptions opts;
      opts.rounds = 20;
      st = allocate(tasks, st, opts);
      fog_hit_[f] = cache_hit(st.cache_frac[0], 1.0 + load);
    }

    CloudContext ctx;
    ctx.summaries = std::move(summaries);
    ctx.fog_capacity = fog_mu_;
    ctx.fog_backlog = Vec(nf_);
    for (Eigen::Index f = 0; f < nf_; ++f) ctx.fog_backlog[f] = fogs_[static_cast<std::size_t>(f)].backlog;
    ctx.fog_latency_mean = Vec::Zero(nf_);
    ctx.fog_latency_var = Vec::Zero(nf_);
    for (Eigen::Index f = 0; f < nf_; ++f) {
      if (fog_lat_n_[f] > 0) {
        const double mean = fog_lat_sum_[f] / fog_lat_n_[f];
        ctx.fog_latency_mean[f] = mean;
        ctx.fog_latency_var[f] = std::max(0.0, fog_lat_sq_[f] / fog_lat_n_[f] - mean * mean) / 100.0;
      }
    }
    fog_lat_sum_.setZero();
    fog_lat_sq_.setZero();
    fog_lat_n_.setZero();
    ctx.fog_energy = w_.fog_energy;
    ctx.backhaul_ms = w_.backhaul_ms;
    ctx.plan_shares = w_.plan_shares;
    ctx.seed = root_.fork(6, static_cast<std::uint64_t>(epoch)).next_u64();

    try {
      Coordination co = coordinate(cloud_, ctx, cc_);
      ++report_.cloud_epochs;
      report_.cloud_repairs += co.repair_rounds;
      if (co.flagged) ++report_.cloud_flagged;
      const Mat& pi = co.dispatch.coupling;
      for (Eigen::Index r = 0; r < nr_; ++r) {
        const double col = pi.col(r).sum();
        if (col > 1e-12) {
          routing_.col(r) = pi.col(r) / col;
        } else {
          routing_.col(r).setZero();
          routing_(w_.rsu_fog[static_cast<std::size_t>(r)], r) = 1.0;
        }
      }
      cloud_ = std::move(co.state);
    } catch (const Error& e) {
      if (e.code() != Errc::NotConverged) throw;
      ++report_.cloud_flagged;
    }
  }

  void net_tick(double t, long tick) {
    const double dt = cfg_.net_dt_s;
    const Rng nroot = root_.fork(7, static_cast<std::uint64_t>(tick));
    {
      Rng rng = nroot.fork(0);
      for (Eigen::Index r = 0; r < nr_; ++r) {
        const auto i = static_cast<std::size_t>(r);
        rsu_bad_[i] = rsu_bad_[i] ? !rng.bernoulli(kBurstExit) : rng.bernoulli(w_.rsu_burst[i]);
      }
    }
    Vec rsu_arr = Vec::Zero(nr_), fog_arr = Vec::Zero(nf_);
    const double per_tick = cfg_.beacon_hz * cfg_.demand_multiplier * dt;
    for (std::size_t v = 0; v < cars_.size(); ++v) {
      Car& c = cars_[v];
      if (!c.active) continue;
      c.since_delivery_s += dt;
      c.gen_acc += per_tick;
      const int count = static_cast<int>(std::floor(c.gen_acc));
      c.gen_acc -= count;
      c.generated += count;
      for (int k = 0; k < count; ++k) {
        Rng rng = nroot.fork(1, v, static_cast<std::uint64_t>(k));
        const Packet p = send_packet(c, v, t, rng, rsu_arr, fog_arr);
        ++report_.packets_sent;
        ++tick_sent_;
        ++veh_sent_[v];
        switch (p.fate) {
          case Packet::Fate::Delivered:
            ++report_.packets_delivered;
            latency_sum_ms_ += p.latency_s * 1e3;
            min_latency_ms_ = std::min(min_latency_ms_, p.latency_s * 1e3);
            tick_lat_ms_ += p.latency_s * 1e3;
            ++tick_delivered_;
            c.since_delivery_s = 0.0;
            if (p.latency_s * 1e3 <= cfg_.latency_budget_v2i_ms) ++veh_ok_[v];
            break;
          case Packet::Fate::Dropped: ++report_.packets_dropped; break;
          case Packet::Fate::InFlight: ++report_.packets_in_flight; break;
        }
      }
      if (c.offload && count > 0 && c.assoc >= 0) {
        const auto r = static_cast<std::size_t>(c.assoc);
        const int f = w_.rsu_fog[r];
        fog_arr[f] += kTaskWork * dt;
      }
    }

    for (Eigen::Index r = 0; r < nr_; ++r) {
      rsu_backlog_[r] = std::max(0.0, rsu_backlog_[r] + rsu_arr[r] - cfg_.rsu_service_pps * dt);
      rsu_rate_[r] = (1.0 - kEwma) * rsu_rate_[r] + kEwma * rsu_arr[r] / dt;
    }
    rsu_epoch_arrivals_ += rsu_arr;
    for (Eigen::Index f = 0; f < nf_; ++f) {
      FogTickInput in;
      in.arrivals = fog_arr[f];
      in.services = fog_mu_[f] * dt;
      const FogTick ft = fog_tick(fogs_[static_cast<std::size_t>(f)], in, FogCoefs{});
      fogs_[static_cast<std::size_t>(f)] = ft.state;
      if (fog_arr[f] > fog_mu_[f] * dt) ++report_.fog_overload_ticks;
      fog_rate_[f] = (1.0 - kEwma) * fog_rate_[f] + kEwma * fog_arr[f] / dt;
    }
  }

  Packet send_packet(Car& c, std::size_t v, double t, Rng& rng, Vec& rsu_arr, Vec& fog_arr) {
    Packet p;
    double lat = 0.0;
    int link = -1;
    if (c.out.link_probs.size() == nr_ && !c.out.deferred) {
      if (c.out.committed) {
        link = *c.out.committed;
      } else {
        double u = rng.uniform(), acc = 0.0;
        for (Eigen::Index r = 0; r < nr_; ++r) {
          acc += c.out.link_probs[r];
          if (c.out.link_probs[r] > 0.0) link = static_cast<int>(r);
          if (u < acc && c.out.link_probs[r] > 0.0) break;
        }
      }
    }
    if (link < 0) {
      link = c.out.fallback;
      lat += cfg_.net_dt_s;  // deferred to the next slot
    }
    if (link < 0 || !w_.rsu_up[static_cast<std::size_t>(link)]) {
      p.fate = Packet::Fate::Dropped;
      return p;
    }
    const auto r = static_cast<std::size_t>(link);
    const double d = dist(c.p, w_.rsus[r]);
    const double snr = mean_snr_db(d, cfg_.rsu_range_m) - (rsu_bad_[r] ? kBadStateDb : 0.0);
    bool ok = false;
    if (cfg_.perfect_channel) {
      ok = true;
    } else {
      const double share = c.out.bandwidth_share > 0.0 ? std::min(c.out.bandwidth_share, 1.0) : 1.0;
      const double rate = std::max(1.0, best_rate(c, v, snr, share));
      const double tx = 8.0 * cfg_.payload_bytes / rate;
      const double gamma0 = w_.nr_capable[v] ? kNr.gamma_th_db : k11p.gamma_th_db;
      const double ps = packet_success(snr, gamma0, vc_.steepness, vc_.coding_gain);
      for (int a = 0; a <= kMaxRetries; ++a) {
        lat += tx;
        if (rng.bernoulli(ps)) {
          ok = true;
          break;
        }
        lat += kBackoffS * std::ldexp(1.0, a) * rng.uniform();
      }
    }
    if (!ok) {
      observe(c, r, vc_.deadline_s);  // a lost packet counts as one that missed its deadline
      p.fate = Packet::Fate::Dropped;
      return p;
    }
    const double mu_r = cfg_.rsu_service_pps;
    lat += rsu_backlog_[link] / mu_r + 1.0 / (mu_r - std::min(rsu_rate_[link], 0.98 * mu_r));
    rsu_arr[link] += 1.0;

    int fog = w_.rsu_fog[r];
    {
      double u = rng.uniform(), acc = 0.0;
      for (Eigen::Index f = 0; f < nf_; ++f) {
        acc += routing_(f, link);
        if (routing_(f, link) > 0.0) fog = static_cast<int>(f);
        if (u < acc && routing_(f, link) > 0.0) break;
      }
    }
    lat += w_.backhaul_ms(fog, link) / 1e3;
    const double mu_f = fog_mu_[fog];
    const double fog_part = fogs_[static_cast<std::size_t>(fog)].backlog / mu_f +
                            fog_delay(1.0, mu_f, std::min(fog_rate_[fog], 0.98 * mu_f), kFogDeltaS * (1.0 - fog_hit_[fog]));
    lat += fog_part;
    fog_arr[fog] += 1.0;
    fog_lat_sum_[fog] += fog_part * 1e3;
    fog_lat_sq_[fog] += fog_part * fog_part * 1e6;
    fog_lat_n_[fog] += 1.0;

    if (lat > kStaleS) {
      observe(c, r, vc_.deadline_s);
      p.fate = Packet::Fate::Dropped;
      return p;
    }
    observe(c, r, lat);
    p.latency_s = lat;
    p.fate = t + lat > cfg_.duration_s ? Packet::Fate::InFlight : Packet::Fate::Delivered;
    return p;
  }

  static void observe(Car& c, std::size_t r, double lat) {
    const auto i = static_cast<Eigen::Index>(r);
    if (c.lat_n[r]++ == 0) {
      c.lat_mean[i] = lat;
      c.lat_var[i] = 0.0;
      return;
    }
    const double diff = lat - c.lat_mean[i];
    c.lat_mean[i] += kEwma * diff;
    c.lat_var[i] = (1.0 - kEwma) * (c.lat_var[i] + kEwma * diff * diff);
  }

  void close_traffic_tick(double t) {
    auto& s = report_.series;
    s.time_s.push_back(t - cfg_.traffic_dt_s);
    s.latency_ms.push_back(tick_delivered_ > 0 ? tick_lat_ms_ / tick_delivered_
                                               : std::numeric_limits<double>::quiet_NaN());
    s.pdr_pct.push_back(tick_sent_ > 0 ? 100.0 * tick_delivered_ / tick_sent_ : 100.0);
    double met = 0.0, paths = 0.0;
    for (const auto& [v, sent] : veh_sent_) {
      if (sent == 0) continue;
      paths += 1.0;
      const auto it = veh_ok_.find(v);
      const double ok = it == veh_ok_.end() ? 0.0 : it->second;
      if (ok >= 0.9 * sent) met += 1.0;
    }
    s.reliability_pct.push_back(paths > 0.0 ? 100.0 * met / paths : 100.0);
    rel_met_ += met;
    rel_paths_ += paths;
    s.nci_pct.push_back(tick_nci_);
    nci_sum_ += tick_nci_;
    tick_sent_ = tick_delivered_ = 0;
    tick_lat_ms_ = 0.0;
    veh_sent_.clear();
    veh_ok_.clear();
  }

  MetricsReport finish() {
    MetricsReport& m = report_;
    if (m.packets_delivered > 0) m.mean_latency_ms = latency_sum_ms_ / static_cast<double>(m.packets_delivered);
    m.pdr_pct = m.packets_sent > 0 ? 100.0 * static_cast<double>(m.packets_delivered) / static_cast<double>(m.packets_sent)
                                   : 100.0;
    m.reliability_pct = rel_paths_ > 0.0 ? 100.0 * rel_met_ / rel_paths_ : 100.0;
    if (m.trips_completed > 0) m.att_min = att_sum_s_ / static_cast<double>(m.trips_completed) / 60.0;
    m.nci_pct = m.series.nci_pct.empty() ? 0.0 : nci_sum_ / static_cast<double>(m.series.nci_pct.size());
    m.min_latency_ms = m.packets_delivered > 0 ? min_latency_ms_ : 0.0;
    return std::move(m);
  }

  const World& w_;
  const ScenarioConfig& cfg_;
  const Rng root_;
  Eigen::Index nr_ = 0, nf_ = 0;
  VehicleConfig vc_;
  CloudConfig cc_;
  CloudState cloud_;
  std::vector<Car> cars_;
  std::vector<double> cap_factor_, speed_factor_, incident_until_;
  std::vector<int> edge_count_;
  std::vector<bool> rsu_bad_;
  Vec rsu_backlog_, rsu_rate_, rsu_epoch_arrivals_;
  std::vector<FogState> fogs_;
  Vec fog_rate_, fog_mu_, fog_hit_, fog_lat_sum_, fog_lat_sq_, fog_lat_n_;
  Mat routing_;  // F x R, columns sum to one
  int detours_ = 0;

  MetricsReport report_;
  double latency_sum_ms_ = 0.0, min_latency_ms_ = std::numeric_limits<double>::infinity();
  double att_sum_s_ = 0.0;
  double tick_lat_ms_ = 0.0, tick_nci_ = 0.0, nci_sum_ = 0.0;
  std::uint64_t tick_sent_ = 0, tick_delivered_ = 0;
  std::map<std::size_t, int> veh_sent_, veh_ok_;
  double rel_met_ = 0.0, rel_paths_ = 0.0;
};

}  // namespace

MetricsReport run(const World& world, const ScenarioConfig& cfg) {
  cfg.validate();
  Engine engine(world, cfg);
  return engine.run();
}

MetricsReport run(const ScenarioConfig& cfg) {
  const World w = build_world(cfg);
  return run(w, cfg);
}

}  // namespace qivnom
