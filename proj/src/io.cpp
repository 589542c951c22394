#include "qivnom/io.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <vector>

#include <fmt/format.h>
#include "json.hpp"

#include "qivnom/error.hpp"

namespace qivnom {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  const char* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  return v;
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

using Setter = std::function<std::optional<std::string>(ScenarioConfig&, std::string_view)>;
using Getter = std::function<std::string(const ScenarioConfig&)>;

struct Field {
  std::string key;
  Getter get;
  Setter set;
};

Field real(std::string key, double ScenarioConfig::*m, std::function<bool(double)> ok, std::string rule) {
  return {key, [m](const ScenarioConfig& c) { return fmt_double(c.*m); },
          [m, ok, rule](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
            const auto x = parse_number<double>(v);
            if (!x) return "expected a finite real number, got '" + std::string(v) + "'";
            if (!ok(*x)) return "must be " + rule + ", got " + std::string(v);
            c.*m = *x;
            return std::nullopt;
          }};
}

Field integer(std::string key, int ScenarioConfig::*m, int lo) {
  return {key, [m](const ScenarioConfig& c) { return std::to_string(c.*m); },
          [m, lo](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
            const auto x = parse_number<int>(v);
            if (!x) return "expected an integer, got '" + std::string(v) + "'";
            if (*x < lo) return "must be >= " + std::to_string(lo) + ", got " + std::string(v);
            c.*m = *x;
            return std::nullopt;
          }};
}

const auto positive = [](double x) { return x > 0.0; };
const auto nonneg = [](double x) { return x >= 0.0; };
const auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"name", [](const ScenarioConfig& c) { return c.name; },
                 [](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
                   if (v.empty()) return "must not be empty";
                   c.name = std::string(v);
                   return std::nullopt;
                 }});
    f.push_back(integer("grid_rows", &ScenarioConfig::grid_rows, 1));
    f.push_back(integer("grid_cols", &ScenarioConfig::grid_cols, 1));
    f.push_back(real("spacing_m", &ScenarioConfig::spacing_m, positive, "> 0"));
    f.push_back(integer("vehicles", &ScenarioConfig::vehicles, 0));
    f.push_back(integer("rsus", &ScenarioConfig::rsus, 1));
    f.push_back(integer("fog_nodes", &ScenarioConfig::fog_nodes, 1));
    f.push_back(real("duration_s", &ScenarioConfig::duration_s, positive, "> 0"));
    f.push_back(real("traffic_dt_s", &ScenarioConfig::traffic_dt_s, positive, "> 0"));
    f.push_back(real("net_dt_s", &ScenarioConfig::net_dt_s, positive, "> 0"));
    f.push_back(real("coord_dt_s", &ScenarioConfig::coord_dt_s, positive, "> 0"));
    f.push_back(real("beacon_hz", &ScenarioConfig::beacon_hz, positive, "> 0"));
    f.push_back(integer("payload_bytes", &ScenarioConfig::payload_bytes, 1));
    f.push_back(real("latency_budget_v2v_ms", &ScenarioConfig::latency_budget_v2v_ms, positive, "> 0"));
    f.push_back(real("latency_budget_v2i_ms", &ScenarioConfig::latency_budget_v2i_ms, positive, "> 0"));
    f.push_back(real("demand_multiplier", &ScenarioConfig::demand_multiplier, positive, "> 0"));
    f.push_back(real("nr_fraction", &ScenarioConfig::nr_fraction, unit, "in [0, 1]"));
    f.push_back(real("rsu_outage_frac", &ScenarioConfig::rsu_outage_frac, unit, "in [0, 1]"));
    f.push_back(real("incident_rate", &ScenarioConfig::incident_rate, nonneg, ">= 0"));
    f.push_back(real("fog_cpu_frac", &ScenarioConfig::fog_cpu_frac, [](double x) { return x > 0.0 && x <= 1.0; },
                     "in (0, 1]"));
    f.push_back({"closures",
                 [](const ScenarioConfig& c) {
                   std::string out;
                   for (const auto& [a, b] : c.closures) out += (out.empty() ? "" : ",") + fmt::format("{}-{}", a, b);
                   return out;
                 },
                 [](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
                   std::vector<std::pair<int, int>> out;
                   while (!trim(v).empty()) {
                     const auto comma = v.find(',');
                     const std::string_view item = trim(v.substr(0, comma));
                     v = comma == std::string_view::npos ? std::string_view() : v.substr(comma + 1);
                     const auto dash = item.find('-');
                     const auto a = dash == std::string_view::npos ? std::nullopt
                                                                   : parse_number<int>(trim(item.substr(0, dash)));
                     const auto b = dash == std::string_view::npos ? std::nullopt
                                                                   : parse_number<int>(trim(item.substr(dash + 1)));
                     if (!a || !b) return "expected node pairs like '3-4, 7-8', got '" + std::string(item) + "'";
                     out.emplace_back(*a, *b);
                   }
                   c.closures = std::move(out);
                   return std::nullopt;
                 }});
    f.push_back({"seed", [](const ScenarioConfig& c) { return std::to_string(c.seed); },
                 [](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
                   const auto x = parse_number<std::uint64_t>(v);
                   if (!x) return "expected an unsigned 64-bit integer, got '" + std::string(v) + "'";
                   c.seed = *x;
                   return std::nullopt;
                 }});
    f.push_back({"variant", [](const ScenarioConfig& c) { return std::string(variant_name(c.variant)); },
                 [](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
                   try {
                     c.variant = parse_variant(v);
                   } catch (const Error& e) {
                     return e.message();
                   }
                   return std::nullopt;
                 }});
    f.push_back(integer("plans", &ScenarioConfig::plans, 1));
    f.push_back(real("qio_beta", &ScenarioConfig::qio_beta, [](double x) { return x >= 0.0 && x < 1.0; }, "in [0, 1)"));
    f.push_back(real("qio_eta", &ScenarioConfig::qio_eta, positive, "> 0"));
    f.push_back(integer("qio_iters", &ScenarioConfig::qio_iters, 1));
    f.push_back(real("epsilon", &ScenarioConfig::epsilon, positive, "> 0"));
    f.push_back(real("delta", &ScenarioConfig::delta, [](double x) { return x > 0.0 && x < 1.0; }, "in (0, 1)"));
    f.push_back(real("w_latency", &ScenarioConfig::w_latency, nonneg, ">= 0"));
    f.push_back(real("w_reliability", &ScenarioConfig::w_reliability, nonneg, ">= 0"));
    f.push_back(real("w_energy", &ScenarioConfig::w_energy, nonneg, ">= 0"));
    f.push_back(real("w_throughput", &ScenarioConfig::w_throughput, nonneg, ">= 0"));
    f.push_back(real("rsu_service_pps", &ScenarioConfig::rsu_service_pps, positive, "> 0"));
    f.push_back(real("fog_service_pps", &ScenarioConfig::fog_service_pps, positive, "> 0"));
    f.push_back(real("rsu_range_m", &ScenarioConfig::rsu_range_m, positive, "> 0"));
    f.push_back(real("edge_capacity_veh", &ScenarioConfig::edge_capacity_veh, positive, "> 0"));
    f.push_back(real("free_flow_mps", &ScenarioConfig::free_flow_mps, positive, "> 0"));
    f.push_back({"perfect_channel", [](const ScenarioConfig& c) { return std::string(c.perfect_channel ? "true" : "false"); },
                 [](ScenarioConfig& c, std::string_view v) -> std::optional<std::string> {
                   if (v == "true") c.perfect_channel = true;
                   else if (v == "false") c.perfect_channel = false;
                   else return "expected true or false, got '" + std::string(v) + "'";
                   return std::nullopt;
                 }});
    return f;
  }();
  return table;
}

struct Line {
  int number;
  std::string key;
  std::string value;
};

}  // namespace

ScenarioConfig parse_config(std::string_view text) { return parse_config(text, ScenarioConfig{}); }

ScenarioConfig parse_config(std::string_view text, const ScenarioConfig& base, PresetKeys presets) {
  std::vector<std::string> issues;
  std::vector<Line> lines;
  {
    int number = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++number;
      std::string_view s = raw;
      if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
      s = trim(s);
      if (s.empty()) continue;
      const auto eq = s.find('=');
      if (eq == std::string_view::npos) {
        issues.push_back(fmt::format("line {}: expected 'key = value', got '{}'", number, s));
        continue;
      }
      lines.push_back({number, std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1)))});
    }
  }

  // Preset selection comes first so the other keys override it wherever they appear.
  ScenarioConfig cfg = base;
  std::optional<Line> preset, scale;
  for (const auto& l : lines) {
    if (l.key == "scenario") preset = l;
    if (l.key == "scale") scale = l;
  }
  Scale sc = Scale::Desk;
  if (scale) {
    try {
      sc = parse_scale(scale->value);
    } catch (const Error& e) {
      issues.push_back(fmt::format("line {}: scale: {}", scale->number, e.message()));
    }
  }
  if (preset && presets == PresetKeys::Apply) {
    try {
      const std::uint64_t seed = cfg.seed;
      const Variant variant = cfg.variant;
      cfg = scenario(preset->value, sc);
      cfg.seed = seed;
      cfg.variant = variant;
    } catch (const Error& e) {
      issues.push_back(fmt::format("line {}: scenario: {}", preset->number, e.message()));
    }
  } else if (scale) {
    issues.push_back(fmt::format("line {}: scale: only meaningful together with 'scenario'", scale->number));
  }

  std::map<std::string, int> seen;
  for (const auto& l : lines) {
    if (auto [it, fresh] = seen.emplace(l.key, l.number); !fresh) {
      issues.push_back(fmt::format("line {}: {}: duplicate key (first set on line {})", l.number, l.key, it->second));
      continue;
    }
    if (l.key == "scenario" || l.key == "scale") continue;
    const auto& tbl = fields();
    const auto f = std::find_if(tbl.begin(), tbl.end(), [&](const Field& x) { return x.key == l.key; });
    if (f == tbl.end()) {
      issues.push_back(fmt::format("line {}: {}: unknown key", l.number, l.key));
      continue;
    }
    if (auto err = f->set(cfg, l.value)) issues.push_back(fmt::format("line {}: {}: {}", l.number, l.key, *err));
  }
  if (issues.empty()) {
    try {
      cfg.validate();
    } catch (const Error& e) {
      issues.push_back(e.message());
    }
  }
  if (!issues.empty()) {
    std::string msg = fmt::format("{} problem{} in configuration", issues.size(), issues.size() == 1 ? "" : "s");
    for (const auto& i : issues) msg += "\n  " + i;
    fail(Errc::ConfigError, msg);
  }
  return cfg;
}

ScenarioConfig load_config(const std::filesystem::path& path) { return load_config(path, ScenarioConfig{}); }

ScenarioConfig load_config(const std::filesystem::path& path, const ScenarioConfig& base, PresetKeys presets) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::ConfigError, "cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), base, presets);
  } catch (const Error& e) {
    fail(Errc::ConfigError, path.string() + ": " + e.message());
  }
}

std::string emit_config(const ScenarioConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

namespace {

std::string cell(double v) { return std::isfinite(v) ? fmt_double(v) : std::string(); }

std::string opt_cell(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

std::string series_csv(const MetricsReport& r) {
  const auto& s = r.series;
  std::string out = "time_s,latency_ms,pdr_pct,reliability_pct,nci_pct\n";
  for (std::size_t i = 0; i < s.time_s.size(); ++i) {
    out += fmt::format("{},{},{},{},{}\n", cell(s.time_s[i]), cell(s.latency_ms[i]), cell(s.pdr_pct[i]),
                       cell(s.reliability_pct[i]), cell(s.nci_pct[i]));
  }
  return out;
}

std::string report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["variant"] = r.variant;
  j["seed"] = r.seed;
  j["mean_latency_ms"] = opt(r.mean_latency_ms);
  j["pdr_pct"] = r.pdr_pct;
  j["reliability_pct"] = r.reliability_pct;
  j["att_min"] = opt(r.att_min);
  j["nci_pct"] = r.nci_pct;
  j["counts"] = {{"packets_sent", r.packets_sent},
                 {"packets_delivered", r.packets_delivered},
                 {"packets_dropped", r.packets_dropped},
                 {"packets_in_flight", r.packets_in_flight},
                 {"trips_completed", r.trips_completed}};
  j["diagnostics"] = {{"cloud_epochs", r.cloud_epochs},
                      {"cloud_repairs", r.cloud_repairs},
                      {"cloud_flagged", r.cloud_flagged},
                      {"fog_overload_ticks", r.fog_overload_ticks},
                      {"vehicle_lyapunov_violations", r.vehicle_lyapunov_violations},
                      {"min_latency_ms", r.min_latency_ms}};
  nlohmann::ordered_json s;
  auto arr = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(num(x));
    return a;
  };
  s["time_s"] = arr(r.series.time_s);
  s["latency_ms"] = arr(r.series.latency_ms);
  s["pdr_pct"] = arr(r.series.pdr_pct);
  s["reliability_pct"] = arr(r.series.reliability_pct);
  s["nci_pct"] = arr(r.series.nci_pct);
  j["series"] = std::move(s);
  return j.dump(2) + "\n";
}

std::string summary_csv_header() {
  return "scenario,variant,seed,mean_latency_ms,pdr_pct,reliability_pct,att_min,nci_pct,packets_sent,"
         "packets_delivered,packets_dropped,packets_in_flight,trips_completed\n";
}

std::string summary_csv_row(const MetricsReport& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.scenario, r.variant, r.seed,
                     opt_cell(r.mean_latency_ms), cell(r.pdr_pct), cell(r.reliability_pct), opt_cell(r.att_min),
                     cell(r.nci_pct), r.packets_sent, r.packets_delivered, r.packets_dropped, r.packets_in_flight,
                     r.trips_completed);
}

void write_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::InvalidArgument, "cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      fail(Errc::InvalidArgument, "write to '" + tmp.string() + "' failed");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(Errc::InvalidArgument, "cannot rename onto '" + path.string() + "'");
  }
}

}  // namespace qivnom
