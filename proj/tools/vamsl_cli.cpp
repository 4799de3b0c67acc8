#include "vamsl/experiment.hpp"
#include "vamsl/session_http.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--seed", f.seed, "run this single seed instead of the configured list");
  cmd->add_option("--workers", f.workers, "parallel jobs")->check(CLI::PositiveNumber);
  cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
}

vamsl::ExperimentConfig load(const CommonFlags& f) {
  vamsl::ExperimentConfig cfg = vamsl::load_config(f.config);
  if (f.seed) cfg.seeds = {*f.seed};
  if (f.workers) cfg.workers = *f.workers;
  if (!f.out.empty()) cfg.output_dir = f.out;
  cfg.validate();
  return cfg;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

int cmd_run(const CommonFlags& f) {
  const vamsl::ExperimentConfig cfg = load(f);
  const vamsl::ExperimentOutcome outcome = vamsl::run_experiment(cfg);
  vamsl::write_experiment(outcome, cfg.output_dir);
  for (const auto& s : outcome.seeds) {
    std::cout << "seed " << s.report["seed"].get<std::uint64_t>() << ": " << s.report["status"].get<std::string>();
    if (s.ok && s.report["final"].contains("eshd_mean"))
      std::cout << " eshd " << fmt(s.report["final"]["eshd_mean"].get<double>());
    if (!s.ok) std::cout << " (" << s.report["error"].get<std::string>() << ")";
    std::cout << "\n";
  }
  std::cout << "wrote " << cfg.output_dir << "\n";
  return outcome.partial ? kExitRuntime : 0;
}

int cmd_compare(const CommonFlags& f, const std::vector<std::string>& names) {
  const vamsl::ExperimentConfig cfg = load(f);
  std::vector<vamsl::QueryStrategy> strategies;
  for (const auto& n : names) strategies.push_back(vamsl::parse_query_strategy(n));
  const vamsl::StrategyComparison cmp = vamsl::compare_strategies(cfg, strategies);
  vamsl::write_comparison(cmp, cfg, cfg.output_dir);
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    std::cout << vamsl::to_string(strategies[s]) << ":";
    for (const auto& r : cmp.summary[vamsl::to_string(strategies[s])])
      if (!r.is_null())
        std::cout << "  budget " << r["budget"].get<int>() << " eshd " << fmt(r["mean"].get<double>()) << " ["
                  << fmt(r["lo"].get<double>()) << ", " << fmt(r["hi"].get<double>()) << "]";
    std::cout << "\n";
  }
  std::cout << "wrote " << cfg.output_dir << "\n";
  return cmp.failed_seeds.empty() ? 0 : kExitRuntime;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const CommonFlags& f, const std::string& host, int port, const std::string& log_dir) {
  vamsl::SessionService service(log_dir, f.workers.value_or(1));
  for (const auto& id : service.restore_all()) std::cerr << "restored session " << id << "\n";
  httplib::Server server;
  vamsl::bind_routes(server, service);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cerr << "listening on " << host << ":" << port << "\n";
  if (!server.listen(host, port)) {
    std::cerr << "cannot listen on " << host << ":" << port << "\n";
    return kExitRuntime;
  }
  return 0;
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

int cmd_report(const std::string& dir) {
  const std::filesystem::path root(dir);
  bool any = false;
  if (std::filesystem::exists(root / "report.json")) {
    any = true;
    const nlohmann::json r = read_json(root / "report.json");
    std::cout << "experiment " << r["config"]["experiment"].get<std::string>() << " (config "
              << r["config_hash"].get<std::string>() << ")" << (r["partial"].get<bool>() ? " PARTIAL" : "") << "\n";
    for (const auto& s : r["seeds"])
      std::cout << "  seed " << s["seed"].get<std::uint64_t>() << ": " << s["status"].get<std::string>() << "\n";
    for (auto it = r["summary"].begin(); it != r["summary"].end(); ++it)
      std::cout << "  " << it.key() << ": " << fmt(it.value()["mean"].get<double>()) << " ["
                << fmt(it.value()["lo"].get<double>()) << ", " << fmt(it.value()["hi"].get<double>()) << "]\n";
  }
  if (std::filesystem::exists(root / "compare.json")) {
    any = true;
    const nlohmann::json c = read_json(root / "compare.json");
    std::cout << "strategy comparison (config " << c["config_hash"].get<std::string>() << ")\n";
    for (auto it = c["summary"].begin(); it != c["summary"].end(); ++it) {
      if (it.key() == "final_difference") {
        const auto& ci = it.value()["ci"];
        std::cout << "  " << it.value()["minuend"].get<std::string>() << " - "
                  << it.value()["subtrahend"].get<std::string>() << " at final budget: " << fmt(ci["mean"].get<double>())
                  << " [" << fmt(ci["lo"].get<double>()) << ", " << fmt(ci["hi"].get<double>()) << "]\n";
        continue;
      }
      std::cout << "  " << it.key() << ":";
      for (const auto& r : it.value())
        if (!r.is_null()) std::cout << "  " << r["budget"].get<int>() << "->" << fmt(r["mean"].get<double>());
      std::cout << "\n";
    }
  }
  if (!any) throw std::runtime_error("no report.json or compare.json in " + dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture structure learning with expert-in-the-loop elicitation"};
  app.require_subcommand(1);

  CommonFlags run_flags, compare_flags, serve_flags;
  auto* run = app.add_subcommand("run", "run an experiment over its seeds");
  add_common(run, run_flags, true);

  auto* compare = app.add_subcommand("compare", "paired comparison of query strategies");
  add_common(compare, compare_flags, true);
  std::vector<std::string> strategies{"bed", "random"};
  compare->add_option("--strategies", strategies, "strategies to compare")->delimiter(',');

  auto* serve = app.add_subcommand("elicit-serve", "serve live elicitation sessions over HTTP");
  add_common(serve, serve_flags, false);
  std::string host = "127.0.0.1", log_dir = "sessions";
  int port = 8080;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port")->check(CLI::Range(0, 65535));
  serve->add_option("--log-dir", log_dir, "session event logs (replayed on start)");

  auto* report = app.add_subcommand("report", "summarise an output directory");
  std::string report_dir = "out";
  report->add_option("--out", report_dir, "output directory to summarise");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*compare) return cmd_compare(compare_flags, strategies);
    if (*serve) return cmd_serve(serve_flags, host, port, log_dir);
    if (*report) return cmd_report(report_dir);
  } catch (const vamsl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
