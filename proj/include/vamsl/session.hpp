#pragma once

// Live elicitation sessions. Each session owns an ElicitationDriver; inference
// runs on a background job and request handlers only see snapshots taken at
// segment boundaries. Every accepted command is appended to an NDJSON log so a
// session can be rebuilt by replay.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "vamsl/config.hpp"
#include "vamsl/elicitation_loop.hpp"
#include "vamsl/errors.hpp"
#include "vamsl/experiment.hpp"
#include "vamsl/mixture.hpp"

namespace vamsl {

inline constexpr int kSessionSchemaVersion = 1;

struct ApiResult {
  int status = 200;
  nlohmann::json body;
  std::string location;  // set for 201 and 202
};

inline ApiResult api_error(int status, const std::string& message, const std::string& field = "") {
  nlohmann::json e = {{"code", status}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return {status, {{"schema_version", kSessionSchemaVersion}, {"error", e}}, ""};
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

/// Read-only summary of an inferred state.
inline nlohmann::json state_summary(const MixtureState& state, const VamslConfig& cfg) {
  nlohmann::json comps = nlohmann::json::array();
  const std::vector<int> labels = map_labels(state.responsibilities);
  for (int k = 0; k < state.num_components(); ++k) {
    const Eigen::MatrixXd g = mean_soft_graph(state, k, cfg);
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < g.cols(); ++j) row.push_back(round4(g(i, j)));
      rows.push_back(std::move(row));
    }
    comps.push_back({{"component", k},
                     {"mean_soft_graph", rows},
                     {"mean_responsibility", state.responsibilities.col(k).mean()},
                     {"map_rows", std::count(labels.begin(), labels.end(), k)}});
  }
  std::vector<double> alpha(state.dirichlet_alpha.data(), state.dirichlet_alpha.data() + state.dirichlet_alpha.size());
  return {{"components", comps},
          {"alpha", alpha},
          {"responsibility_entropy", responsibility_entropy(state.responsibilities)},
          {"restarts", state.restarts},
          {"converged", state.converged},
          {"state_hash", hex64(state_hash(state))}};
}

class SessionService {
 public:
  /// `log_dir` empty disables the event log.
  explicit SessionService(std::filesystem::path log_dir = {}, int workers = 1)
      : log_dir_(std::move(log_dir)), workers_(workers) {
    if (!log_dir_.empty()) std::filesystem::create_directories(log_dir_);
  }

  ~SessionService() {
    std::lock_guard lock(map_mutex_);
    for (auto& [id, s] : sessions_)
      if (s->job.joinable()) s->job.join();
  }

  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  /// POST /sessions. Body: {"config": {...}, "seed": n, "rows": [[...]] optional}.
  /// Without rows the session uses the data the config would generate for the seed.
  ApiResult create(const nlohmann::json& body) {
    if (!body.is_object() || !body.contains("config")) return api_error(422, "missing config", "config");
    std::uint64_t seed = 1;
    if (body.contains("seed")) {
      const nlohmann::json& v = body["seed"];
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        return api_error(422, "expected a nonnegative integer", "seed");
      seed = body["seed"].get<std::uint64_t>();
    }
    std::unique_ptr<Session> s;
    try {
      s = build(body["config"], seed, body.contains("rows") ? &body["rows"] : nullptr);
    } catch (const ConfigError& e) {
      return api_error(422, e.what(), e.field());
    } catch (const std::exception& e) {
      return api_error(422, e.what());
    }
    Session* raw = nullptr;
    {
      std::lock_guard lock(map_mutex_);
      s->id = "s" + std::to_string(++counter_);
      raw = s.get();
      sessions_.emplace(s->id, std::move(s));
    }
    nlohmann::json ev = {{"type", "create"}, {"id", raw->id}, {"seed", seed}, {"config", body["config"]}};
    if (body.contains("rows")) ev["rows"] = body["rows"];
    {
      std::lock_guard lock(raw->mutex);
      open_log(*raw);
      append(*raw, ev);
      launch(*raw);
    }
    return {201,
            {{"schema_version", kSessionSchemaVersion}, {"id", raw->id}, {"phase", "inferring"}},
            "/sessions/" + raw->id + "/state"};
  }

  /// GET /sessions/{id}/state
  ApiResult state(const std::string& id) {
    Session* s = find(id);
    if (!s) return api_error(404, "unknown session");
    std::lock_guard lock(s->mutex);
    nlohmann::json out = {{"schema_version", kSessionSchemaVersion},
                          {"id", id},
                          {"phase", to_string(s->phase)},
                          {"round", s->round}};
    if (!s->snapshot.is_null()) out["summary"] = s->snapshot;
    out["records"] = s->records;
    if (!s->error.empty()) out["error"] = s->error;
    return {200, out, ""};
  }

  /// GET /sessions/{id}/queries
  ApiResult queries(const std::string& id) {
    Session* s = find(id);
    if (!s) return api_error(404, "unknown session");
    std::lock_guard lock(s->mutex);
    nlohmann::json q = nlohmann::json::array();
    if (s->phase == LoopPhase::awaiting_responses)
      for (const auto& c : s->driver->pending()) q.push_back(to_json(c));
    return {200,
            {{"schema_version", kSessionSchemaVersion}, {"phase", to_string(s->phase)}, {"round", s->round}, {"queries", q}},
            ""};
  }

  /// POST /sessions/{id}/responses. Body: {"responses": [{component, edge: [i, j], psi_star}]}
  /// or the bare array. The batch is checked as a whole before anything is registered.
  ApiResult respond(const std::string& id, const nlohmann::json& body) {
    Session* s = find(id);
    if (!s) return api_error(404, "unknown session");
    const nlohmann::json& items = body.is_object() && body.contains("responses") ? body["responses"] : body;
    if (!items.is_array()) return api_error(422, "expected an array of responses", "responses");
    std::lock_guard lock(s->mutex);
    if (s->phase != LoopPhase::awaiting_responses)
      return api_error(409, "responses are accepted only while awaiting responses (phase " + to_string(s->phase) + ")");
    struct Parsed {
      int component;
      Edge edge;
      double psi;
    };
    std::vector<Parsed> parsed;
    std::set<std::tuple<int, int, int>> open;
    for (const auto& q : s->driver->pending()) open.insert({q.component, q.edge.from, q.edge.to});
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto& it = items[i];
      const std::string at = "responses[" + std::to_string(i) + "]";
      if (!it.is_object() || !it.contains("component") || !it["component"].is_number_integer())
        return api_error(422, "component must be an integer", at + ".component");
      if (!it.contains("edge") || !it["edge"].is_array() || it["edge"].size() != 2 || !it["edge"][0].is_number_integer() ||
          !it["edge"][1].is_number_integer())
        return api_error(422, "edge must be [from, to]", at + ".edge");
      if (!it.contains("psi_star") || !it["psi_star"].is_number())
        return api_error(422, "psi_star must be a number", at + ".psi_star");
      Parsed p{it["component"].get<int>(), {it["edge"][0].get<int>(), it["edge"][1].get<int>()},
               it["psi_star"].get<double>()};
      if (!(p.psi >= 0.0 && p.psi <= 1.0)) return api_error(422, "psi_star must lie in [0, 1]", at + ".psi_star");
      if (!open.erase({p.component, p.edge.from, p.edge.to}))
        return api_error(422, "edge is not a pending query for this component", at + ".edge");
      parsed.push_back(p);
    }
    nlohmann::json registered = nlohmann::json::array();
    for (const auto& p : parsed) {
      const ElicitationRecord rec = s->driver->answer(p.component, p.edge, p.psi);
      append(*s, {{"type", "response"},
                  {"component", p.component},
                  {"edge", {p.edge.from, p.edge.to}},
                  {"psi_star", p.psi},
                  {"timestamp_ms", rec.timestamp_ms}});
      registered.push_back(to_json(rec));
      s->records.push_back(to_json(rec));
    }
    return {200, {{"schema_version", kSessionSchemaVersion}, {"registered", registered}}, ""};
  }

  /// POST /sessions/{id}/advance: closes the query round and starts the next
  /// inference job. Unanswered queries are dropped.
  ApiResult advance(const std::string& id) {
    Session* s = find(id);
    if (!s) return api_error(404, "unknown session");
    std::lock_guard lock(s->mutex);
    if (s->phase != LoopPhase::awaiting_responses)
      return api_error(409, "advance is possible only while awaiting responses (phase " + to_string(s->phase) + ")");
    append(*s, {{"type", "advance"}});
    s->driver->close_round();
    ++s->round;
    launch(*s);
    return {202,
            {{"schema_version", kSessionSchemaVersion}, {"id", id}, {"phase", "inferring"}, {"round", s->round}},
            "/sessions/" + id + "/state"};
  }

  /// Blocks until the session's inference job finished. False on timeout or unknown id.
  bool wait_idle(const std::string& id, std::chrono::milliseconds timeout = std::chrono::minutes(10)) {
    Session* s = find(id);
    if (!s) return false;
    std::unique_lock lock(s->mutex);
    return s->idle.wait_for(lock, timeout, [&] { return s->phase != LoopPhase::inferring; });
  }

  /// Final state of a finished session (for parity checks).
  std::optional<MixtureState> final_state(const std::string& id) {
    Session* s = find(id);
    if (!s) return std::nullopt;
    std::lock_guard lock(s->mutex);
    if (s->phase == LoopPhase::inferring || !s->driver->has_state()) return std::nullopt;
    return s->driver->state();
  }

  /// Rebuilds a session from its event log, running every inference in the
  /// caller's thread. Returns the session id.
  std::string replay(const std::filesystem::path& log_path) {
    std::ifstream in(log_path);
    if (!in) throw std::runtime_error("cannot open " + log_path.string());
    std::string line;
    std::unique_ptr<Session> s;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json ev;
      try {
        ev = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        // a torn final line from a crash is skipped
        continue;
      }
      const std::string type = ev.value("type", "");
      if (type == "create") {
        s = build(ev["config"], ev["seed"].get<std::uint64_t>(), ev.contains("rows") ? &ev["rows"] : nullptr);
        s->id = ev["id"].get<std::string>();
        run_inference(*s);
      } else if (!s) {
        throw ParseError(line_no, "event before session creation");
      } else if (type == "response") {
        const ElicitationRecord rec =
            s->driver->answer(ev["component"].get<int>(), {ev["edge"][0].get<int>(), ev["edge"][1].get<int>()},
                              ev["psi_star"].get<double>());
        s->records.push_back(to_json(rec));
      } else if (type == "advance") {
        s->driver->close_round();
        ++s->round;
        run_inference(*s);
      } else if (type != "inferred") {
        throw ParseError(line_no, "unknown event type '" + type + "'");
      }
    }
    if (!s) throw ParseError(line_no, "log holds no session");
    const std::string id = s->id;
    std::lock_guard lock(map_mutex_);
    if (sessions_.count(id)) throw ContractError("replay: session " + id + " already exists");
    const std::size_t digits = id.find_first_of("0123456789");
    if (digits != std::string::npos) counter_ = std::max(counter_, std::stoi(id.substr(digits)));
    Session* raw = s.get();
    sessions_.emplace(id, std::move(s));
    std::lock_guard slock(raw->mutex);
    open_log(*raw);
    return id;
  }

  /// Replays every *.ndjson log in the log directory.
  std::vector<std::string> restore_all() {
    std::vector<std::string> ids;
    if (log_dir_.empty() || !std::filesystem::exists(log_dir_)) return ids;
    std::vector<std::filesystem::path> logs;
    for (const auto& e : std::filesystem::directory_iterator(log_dir_))
      if (e.path().extension() == ".ndjson") logs.push_back(e.path());
    std::sort(logs.begin(), logs.end());
    for (const auto& p : logs) ids.push_back(replay(p));
    return ids;
  }

 private:
  struct Session {
    std::string id;
    std::unique_ptr<ElicitationDriver> driver;
    std::mutex mutex;
    std::condition_variable idle;
    LoopPhase phase = LoopPhase::inferring;
    int round = 0;
    nlohmann::json snapshot;
    nlohmann::json records = nlohmann::json::array();
    std::string error;
    std::thread job;
    std::ofstream log;
  };

  std::unique_ptr<Session> build(const nlohmann::json& config, std::uint64_t seed, const nlohmann::json* rows) {
    ExperimentConfig cfg = config_from_json(config);
    cfg.workers = workers_;
    Dataset data;
    if (rows) {
      if (!rows->is_array() || rows->empty()) throw ConfigError("rows", "expected a nonempty array of rows");
      const std::size_t d = (*rows)[0].is_array() ? (*rows)[0].size() : 0;
      if (static_cast<int>(d) != cfg.d) throw ConfigError("rows", "row width must equal dims.d");
      data.rows.resize(static_cast<Eigen::Index>(rows->size()), static_cast<Eigen::Index>(d));
      for (std::size_t r = 0; r < rows->size(); ++r) {
        const auto& row = (*rows)[r];
        if (!row.is_array() || row.size() != d) throw ConfigError("rows", "ragged row " + std::to_string(r));
        for (std::size_t c = 0; c < d; ++c) {
          if (!row[c].is_number()) throw ConfigError("rows", "non-numeric cell in row " + std::to_string(r));
          data.rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c].get<double>();
        }
      }
    } else {
      data = prepare_seed(cfg, seed).data;
    }
    auto s = std::make_unique<Session>();
    s->driver = std::make_unique<ElicitationDriver>(std::move(data), cfg.vamsl_config(), cfg.loop_settings(), seed);
    return s;
  }

  Session* find(const std::string& id) {
    std::lock_guard lock(map_mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second.get();
  }

  void open_log(Session& s) {
    if (log_dir_.empty()) return;
    s.log.open(log_dir_ / (s.id + ".ndjson"), std::ios::app);
  }

  static void append(Session& s, const nlohmann::json& ev) {
    if (!s.log.is_open()) return;
    s.log << ev.dump() << "\n";
    s.log.flush();
  }

  /// Runs driver.infer() and publishes the snapshot. Caller must not hold the mutex.
  static void run_inference(Session& s) {
    std::string error;
    try {
      s.driver->infer();
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard lock(s.mutex);
    finish(s, error);
  }

  static void finish(Session& s, const std::string& error) {
    if (!error.empty()) {
      s.error = error;
      s.phase = LoopPhase::done;
    } else {
      s.phase = s.driver->phase();
      s.snapshot = state_summary(s.driver->state(), s.driver->config());
      append(s, {{"type", "inferred"}, {"round", s.round}, {"state_hash", s.snapshot["state_hash"]}});
    }
    s.idle.notify_all();
  }

  /// Starts the inference job. Caller holds the session mutex.
  static void launch(Session& s) {
    if (s.job.joinable()) s.job.join();
    s.phase = LoopPhase::inferring;
    s.job = std::thread([&s] { run_inference(s); });
  }

  std::filesystem::path log_dir_;
  int workers_ = 1;
  std::mutex map_mutex_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
  int counter_ = 0;
};

}  // namespace vamsl
