// qivnom command-line driver: scenario runs, ablations and the standalone solvers.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "qivnom/energy.hpp"
#include "qivnom/error.hpp"
#include "qivnom/io.hpp"
#include "qivnom/qio.hpp"
#include "qivnom/sim.hpp"
#include "qivnom/transport.hpp"

namespace fs = std::filesystem;
using namespace qivnom;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kRuntime = 3 };

struct Common {
  std::string scenario = "S1";
  std::string scale = "desk";
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = "out";
  std::string format = "csv";
};

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Preset, then config file, then flags; seed falls back to the config value, then 0.
ScenarioConfig resolve(const Common& c, const std::string& scenario_name, bool scenario_flag_given) {
  ScenarioConfig cfg = scenario(scenario_name, parse_scale(c.scale));
  if (!c.config.empty()) {
    cfg = load_config(c.config, cfg, scenario_flag_given ? PresetKeys::Ignore : PresetKeys::Apply);
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::string payload(const MetricsReport& r, const std::string& format) {
  return format == "json" ? report_json(r) : series_csv(r);
}

void print_summary(const MetricsReport& r) {
  std::printf("%s %s seed=%llu latency_ms=%s pdr=%.3f reliability=%.3f att_min=%s nci=%.3f sent=%llu delivered=%llu\n",
              r.scenario.c_str(), r.variant.c_str(), static_cast<unsigned long long>(r.seed),
              r.mean_latency_ms ? fmt::format("{:.3f}", *r.mean_latency_ms).c_str() : "NA", r.pdr_pct,
              r.reliability_pct, r.att_min ? fmt::format("{:.3f}", *r.att_min).c_str() : "NA", r.nci_pct,
              static_cast<unsigned long long>(r.packets_sent), static_cast<unsigned long long>(r.packets_delivered));
}

void add_common(CLI::App* app, Common& c, bool with_scenario = true) {
  if (with_scenario) {
    app->add_option("--scenario", c.scenario, "Scenario preset (S1..S6)")->capture_default_str();
  }
  app->add_option("--scale", c.scale, "Preset scale")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  app->add_option("--seed", c.seed, "Base seed (overrides the config file; default 0)");
  app->add_option("--config", c.config, "Key-value scenario file applied over the preset");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--format", c.format, "Per-run output format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();
}

int cmd_run(const Common& c, bool scenario_given, const std::string& variant) {
  ScenarioConfig cfg = resolve(c, c.scenario, scenario_given);
  if (!variant.empty()) cfg.variant = parse_variant(variant);
  const MetricsReport r = run(cfg);
  const fs::path dir = fs::path(c.out) / cfg.name / std::string(variant_name(cfg.variant));
  write_atomic(dir / ("rep0." + c.format), payload(r, c.format));
  write_atomic(fs::path(c.out) / "summary.csv", summary_csv_header() + summary_csv_row(r));
  print_summary(r);
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& scenarios, const std::string& variants, int reps, bool serial) {
  std::vector<std::string> names = scenarios == "all" ? scenario_names() : split(scenarios);
  std::vector<ScenarioConfig> bases;
  for (const auto& n : names) bases.push_back(resolve(c, n, true));
  std::vector<Variant> vs;
  for (const auto& v : split(variants)) vs.push_back(parse_variant(v));
  if (vs.empty()) fail(Errc::ConfigError, "--variants must name at least one variant");
  const AblationTable t = ablate(bases, vs, reps, serial ? kernels::Backend::Serial : kernels::Backend::OpenMP);

  std::string summary = summary_csv_header();
  std::string cells = "scenario,variant,reps,latency_mean_ms,latency_std_ms,pdr_mean,pdr_std,reliability_mean,reliability_std\n";
  for (std::size_t s = 0; s < t.scenarios.size(); ++s) {
    for (std::size_t v = 0; v < t.variants.size(); ++v) {
      const AblationCell& cell = t.at(s, v);
      const fs::path dir = fs::path(c.out) / cell.scenario / std::string(variant_name(cell.variant));
      for (std::size_t i = 0; i < cell.reps.size(); ++i) {
        write_atomic(dir / fmt::format("rep{}.{}", i, c.format), payload(cell.reps[i], c.format));
        summary += summary_csv_row(cell.reps[i]);
      }
      cells += fmt::format("{},{},{},{},{},{},{},{},{}\n", cell.scenario, variant_name(cell.variant), cell.reps.size(),
                           cell.latency_mean, cell.latency_std, cell.pdr_mean, cell.pdr_std, cell.reliability_mean,
                           cell.reliability_std);
      std::printf("%s %s reps=%zu latency_ms=%.3f+-%.3f pdr=%.3f+-%.3f reliability=%.3f+-%.3f\n", cell.scenario.c_str(),
                  std::string(variant_name(cell.variant)).c_str(), cell.reps.size(), cell.latency_mean,
                  cell.latency_std, cell.pdr_mean, cell.pdr_std, cell.reliability_mean, cell.reliability_std);
    }
  }
  write_atomic(fs::path(c.out) / "summary.csv", summary);
  write_atomic(fs::path(c.out) / "ablation.csv", cells);

  // Paired comparison against the first variant: per-seed means pooled over scenarios.
  if (t.variants.size() > 1) {
    std::string tests = "baseline,variant,wins,losses,ties,p_value\n";
    for (std::size_t v = 1; v < t.variants.size(); ++v) {
      int wins = 0, losses = 0, ties = 0;
      for (int i = 0; i < reps; ++i) {
        double a = 0.0, b = 0.0;
        for (std::size_t s = 0; s < t.scenarios.size(); ++s) {
          a += t.at(s, 0).reps[static_cast<std::size_t>(i)].mean_latency_ms.value_or(0.0);
          b += t.at(s, v).reps[static_cast<std::size_t>(i)].mean_latency_ms.value_or(0.0);
        }
        if (a < b) ++wins;
        else if (a > b) ++losses;
        else ++ties;
      }
      const double p = sign_test_p(wins, losses);
      tests += fmt::format("{},{},{},{},{},{}\n", variant_name(t.variants[0]), variant_name(t.variants[v]), wins, losses,
                           ties, p);
      std::printf("sign test %s < %s: wins=%d losses=%d ties=%d p=%.4g\n", std::string(variant_name(t.variants[0])).c_str(),
                  std::string(variant_name(t.variants[v])).c_str(), wins, losses, ties, p);
    }
    write_atomic(fs::path(c.out) / "sign_tests.csv", tests);
  }
  return kOk;
}

// Problems found in a user-supplied problem file are configuration errors.
template <class F>
void as_config_error(F&& check) {
  try {
    check();
  } catch (const Error& e) {
    fail(Errc::ConfigError, e.message());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::ConfigError, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Vec to_vec(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) fail(Errc::ConfigError, what + " must be an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) fail(Errc::ConfigError, what + " must be an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

nlohmann::json parse_json(const std::string& text, const std::string& path) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::ConfigError, path + ": " + e.what());
  }
}

// {"costs": {"latency": [...], ...}, "weights": {...}, "forbidden": [...], "caps": [...]}
int cmd_optimize(const std::string& problem, std::uint64_t seed, int iters, const std::string& out,
                 const std::string& trace) {
  const nlohmann::json j = parse_json(read_file(problem), problem);
  if (!j.contains("costs") || !j["costs"].is_object()) fail(Errc::ConfigError, "problem needs a 'costs' object");
  CostBundle bundle;
  const std::pair<Objective, const char*> keys[] = {{Objective::Latency, "latency"},
                                                     {Objective::Reliability, "reliability"},
                                                     {Objective::Energy, "energy"},
                                                     {Objective::Throughput, "throughput"}};
  for (const auto& [q, name] : keys) {
    const std::string key(name);
    if (j["costs"].contains(key)) {
      bundle.per_objective[q] = to_vec(j["costs"][key], "costs." + key);
      bundle.weights[q] = j.contains("weights") && j["weights"].contains(key) ? j["weights"][key].get<double>() : 1.0;
    }
  }
  if (bundle.per_objective.empty()) {
    fail(Errc::ConfigError, "costs must name at least one of latency, reliability, energy, throughput");
  }
  const Eigen::Index k = bundle.plans();
  FeasibleSet fs = FeasibleSet::unconstrained(k);
  if (j.contains("caps")) fs.prob_upper_bounds = to_vec(j["caps"], "caps");
  if (j.contains("forbidden")) {
    for (const auto& f : j["forbidden"]) fs.forbidden.push_back(f.get<Eigen::Index>());
  }
  as_config_error([&] { fs.validate(); });
  QioConfig cfg;
  cfg.K = k;
  cfg.seed = seed;
  cfg.max_iters = iters;
  auto scalar = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) fail(Errc::ConfigError, std::string(key) + " must be a number");
    field = j[key].get<double>();
  };
  scalar("eta", cfg.eta);
  scalar("beta", cfg.beta);
  scalar("rho", cfg.rho);
  scalar("initial_temperature", cfg.initial_temperature);
  as_config_error([&] { cfg.validate(); });
  const QioResult r = optimize(initial_qio_state(Vec::Ones(1), cfg), constant_costs(bundle), fs, cfg);
  nlohmann::ordered_json o;
  o["plan"] = r.plan;
  o["converged"] = r.converged;
  o["iterations"] = r.trace.size();
  o["distribution"] = std::vector<double>(r.distribution.probs().begin(), r.distribution.probs().end());
  const std::string text = o.dump(2) + "\n";
  if (out.empty()) std::fwrite(text.data(), 1, text.size(), stdout);
  else write_atomic(out, text);
  if (!trace.empty()) {
    std::string csv = "iter,energy,temperature,coupling,grad_norm,eta,rho,selected,psi_norm,accepted\n";
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      const QioRecord& t = r.trace[i];
      csv += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", i, t.energy, t.temperature, t.coupling, t.grad_norm, t.eta,
                         t.rho, t.selected, t.psi_norm, t.accepted ? 1 : 0);
    }
    write_atomic(trace, csv);
  }
  if (!r.converged) {
    std::fprintf(stderr, "optimize: not converged after %zu iterations\n", r.trace.size());
    return kRuntime;
  }
  return kOk;
}

// {"cost": [[...], ...], "mu": [...], "nu": [...], "epsilon": 0.01}
int cmd_transport(const std::string& problem, bool greedy, int max_iters, double tol, const std::string& out) {
  const nlohmann::json j = parse_json(read_file(problem), problem);
  if (!j.contains("cost") || !j["cost"].is_array() || j["cost"].empty()) fail(Errc::ConfigError, "problem needs a 'cost' matrix");
  const auto rows = j["cost"].size();
  const auto cols = j["cost"][0].size();
  TransportProblem p;
  p.cost = Mat(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    const Vec row = to_vec(j["cost"][r], "cost row");
    if (static_cast<std::size_t>(row.size()) != cols) fail(Errc::ConfigError, "cost rows differ in length");
    p.cost.row(static_cast<Eigen::Index>(r)) = row.transpose();
  }
  p.mu = to_vec(j.value("mu", nlohmann::json()), "mu");
  p.nu = to_vec(j.value("nu", nlohmann::json()), "nu");
  p.epsilon = j.value("epsilon", 1e-2);
  as_config_error([&] { p.validate(); });
  const TransportPlan plan = greedy ? assign_greedy(p) : sinkhorn(p, max_iters, tol);
  nlohmann::ordered_json o;
  nlohmann::json m = nlohmann::json::array();
  for (Eigen::Index r = 0; r < plan.coupling.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(plan.coupling.cols()));
    for (Eigen::Index c = 0; c < plan.coupling.cols(); ++c) row[static_cast<std::size_t>(c)] = plan.coupling(r, c);
    m.push_back(row);
  }
  o["coupling"] = m;
  o["iterations"] = plan.iterations;
  o["marginal_error"] = plan.marginal_error;
  o["objective"] = transport_objective(plan, p);
  const std::string text = o.dump(2) + "\n";
  if (out.empty()) std::fwrite(text.data(), 1, text.size(), stdout);
  else write_atomic(out, text);
  return kOk;
}

int cmd_scenarios(const std::string& scale) {
  std::printf("name,grid,vehicles,rsus,fog_nodes,duration_s,beacon_hz,payload_bytes,demand_multiplier,nr_fraction,"
              "rsu_outage_frac,incident_rate,fog_cpu_frac\n");
  for (const auto& n : scenario_names()) {
    const ScenarioConfig c = scenario(n, parse_scale(scale));
    std::printf("%s,%dx%d,%d,%d,%d,%g,%g,%d,%g,%g,%g,%g,%g\n", n.c_str(), c.grid_rows, c.grid_cols, c.vehicles, c.rsus,
                c.fog_nodes, c.duration_s, c.beacon_hz, c.payload_bytes, c.demand_multiplier, c.nr_fraction,
                c.rsu_outage_frac, c.incident_rate, c.fog_cpu_frac);
  }
  return kOk;
}

int exit_for(Errc code) {
  switch (code) {
    case Errc::ConfigError:
    case Errc::UnknownScenario: return kConfig;
    case Errc::NotConverged:
    case Errc::Diverged: return kRuntime;
    default: return kInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qivnom: vehicular network orchestration simulator and solvers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "0.1.0");

  Common run_c;
  std::string run_variant;
  auto* run_cmd = app.add_subcommand("run", "Run one scenario and write its metrics");
  add_common(run_cmd, run_c);
  run_cmd->add_option("--variant", run_variant, "Ablation variant (default: the config's, else full)");

  Common ab_c;
  std::string ab_scen = "all", ab_vars = "full,no_entangle,fixed_temp,no_proj,no_cvar,greedy_assign";
  int reps = 30;
  bool serial = false;
  auto* ab_cmd = app.add_subcommand("ablate", "Run the variant x scenario x replication matrix");
  add_common(ab_cmd, ab_c, false);
  ab_cmd->add_option("--scenario", ab_scen, "Comma-separated presets or 'all'")->capture_default_str();
  ab_cmd->add_option("--variants", ab_vars, "Comma-separated variants; the first is the sign-test baseline")
      ->capture_default_str();
  ab_cmd->add_option("--reps", reps, "Replications per cell (seeds seed..seed+reps-1)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  ab_cmd->add_flag("--serial", serial, "Run replications on one thread")->capture_default_str();

  std::string opt_problem, opt_out, opt_trace;
  std::uint64_t opt_seed = 0;
  int opt_iters = 5000;
  auto* opt_cmd = app.add_subcommand("optimize", "Solve a plan-selection problem from a JSON file");
  opt_cmd->add_option("problem", opt_problem, "JSON problem file")->required();
  opt_cmd->add_option("--seed", opt_seed, "Seed")->capture_default_str();
  opt_cmd->add_option("--iters", opt_iters, "Iteration cap")->check(CLI::PositiveNumber)->capture_default_str();
  opt_cmd->add_option("--out", opt_out, "Output file (default: standard output)");
  opt_cmd->add_option("--trace", opt_trace, "Write the per-iteration trace as CSV");

  std::string tr_problem, tr_out;
  bool tr_greedy = false;
  int tr_iters = 10000;
  double tr_tol = 1e-6;
  auto* tr_cmd = app.add_subcommand("transport", "Solve an entropic transport problem from a JSON file");
  tr_cmd->add_option("problem", tr_problem, "JSON problem file")->required();
  tr_cmd->add_flag("--greedy", tr_greedy, "Use the greedy assignment instead of Sinkhorn")->capture_default_str();
  tr_cmd->add_option("--max-iters", tr_iters, "Sinkhorn iteration cap")->check(CLI::PositiveNumber)->capture_default_str();
  tr_cmd->add_option("--tol", tr_tol, "Marginal L1 tolerance")->capture_default_str();
  tr_cmd->add_option("--out", tr_out, "Output file (default: standard output)");

  std::string sc_scale = "desk";
  auto* sc_cmd = app.add_subcommand("scenarios", "List the scenario presets");
  sc_cmd->add_option("--scale", sc_scale, "Preset scale")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run_c, run_cmd->count("--scenario") > 0, run_variant);
    if (*ab_cmd) return cmd_ablate(ab_c, ab_scen, ab_vars, reps, serial);
    if (*opt_cmd) return cmd_optimize(opt_problem, opt_seed, opt_iters, opt_out, opt_trace);
    if (*tr_cmd) return cmd_transport(tr_problem, tr_greedy, tr_iters, tr_tol, tr_out);
    if (*sc_cmd) return cmd_scenarios(sc_scale);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
  return kInternal;
}
