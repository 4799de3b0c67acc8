#pragma once

// HTTP+JSON binding of SessionService.

// Eigen goes first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "vamsl/session.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <string>

namespace vamsl {

namespace detail {

inline void send(httplib::Response& res, const ApiResult& r) {
  res.status = r.status;
  if (!r.location.empty()) res.set_header("Location", r.location);
  res.set_content(r.body.dump(), "application/json");
}

template <typename F>
void with_body(const httplib::Request& req, httplib::Response& res, F&& f) {
  nlohmann::json body;
  try {
    body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    send(res, api_error(400, std::string("malformed JSON: ") + e.what()));
    return;
  }
  send(res, f(body));
}

}  // namespace detail

inline void bind_routes(httplib::Server& server, SessionService& service) {
  server.Post("/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    detail::with_body(req, res, [&](const nlohmann::json& b) { return service.create(b); });
  });
  server.Get("/sessions/:id/state", [&](const httplib::Request& req, httplib::Response& res) {
    detail::send(res, service.state(req.path_params.at("id")));
  });
  server.Get("/sessions/:id/queries", [&](const httplib::Request& req, httplib::Response& res) {
    detail::send(res, service.queries(req.path_params.at("id")));
  });
  server.Post("/sessions/:id/responses", [&](const httplib::Request& req, httplib::Response& res) {
    detail::with_body(req, res, [&](const nlohmann::json& b) { return service.respond(req.path_params.at("id"), b); });
  });
  server.Post("/sessions/:id/advance", [&](const httplib::Request& req, httplib::Response& res) {
    detail::send(res, service.advance(req.path_params.at("id")));
  });
}

}  // namespace vamsl
