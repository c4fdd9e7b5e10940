#include <cstdlib>

#include "csavae/errors.hpp"
#include "csavae/steering.hpp"
#include "httplib.h"

namespace csavae {

using nlohmann::json;

namespace {

void reply(httplib::Response& res, const SteeringEngine& engine, int status, json body) {
  body["checkpoint_digest"] = engine.digest();
  res.status = status;
  res.set_header("X-Checkpoint-Digest", engine.digest());
  res.set_content(body.dump(), "application/json");
}

void error(httplib::Response& res, const SteeringEngine& engine, int status,
           const std::string& code, const std::string& message) {
  reply(res, engine, status, {{"code", code}, {"message", message}});
}

// Runs a handler, mapping library exceptions onto error envelopes.
template <class F>
void guarded(const SteeringEngine& engine, httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const NotFound& e) {
    error(res, engine, 404, "not_found", e.what());
  } catch (const DomainError& e) {
    error(res, engine, 400, "invalid_request", e.what());
  } catch (const std::invalid_argument& e) {
    error(res, engine, 400, "invalid_request", e.what());
  } catch (const json::exception& e) {
    error(res, engine, 400, "invalid_request", e.what());
  } catch (const std::exception& e) {
    error(res, engine, 500, "internal", e.what());
  }
}

std::size_t parse_k(const httplib::Request& req) {
  if (!req.has_param("k")) return 10;
  const std::string v = req.get_param_value("k");
  char* end = nullptr;
  const long long k = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || k < 1)
    throw std::invalid_argument("query parameter k must be an integer >= 1, got '" + v + "'");
  return static_cast<std::size_t>(k);
}

bool parse_confounders(const httplib::Request& req) {
  if (!req.has_param("confounders")) return true;
  const std::string v = req.get_param_value("confounders");
  if (v == "on") return true;
  if (v == "off") return false;
  throw std::invalid_argument("query parameter confounders must be 'on' or 'off', got '" + v + "'");
}

}  // namespace

void register_routes(httplib::Server& server, std::shared_ptr<const SteeringEngine> engine) {
  server.Get("/health", [engine](const httplib::Request&, httplib::Response& res) {
    reply(res, *engine, 200, {{"status", "ok"}});
  });

  server.Get("/graph", [engine](const httplib::Request&, httplib::Response& res) {
    guarded(*engine, res, [&] { reply(res, *engine, 200, engine->graph()); });
  });

  server.Get(R"(/users/([^/]+)/graph)", [engine](const httplib::Request& req, httplib::Response& res) {
    guarded(*engine, res, [&] { reply(res, *engine, 200, engine->user_graph(req.matches[1])); });
  });

  server.Get(R"(/users/([^/]+)/recommendations)",
             [engine](const httplib::Request& req, httplib::Response& res) {
               guarded(*engine, res, [&] {
                 const std::string user = req.matches[1];
                 const bool conf = parse_confounders(req);
                 json body = engine->recommend(user, parse_k(req), conf).to_json();
                 body["user"] = user;
                 body["confounders"] = conf ? "on" : "off";
                 reply(res, *engine, 200, body);
               });
             });

  server.Post(R"(/users/([^/]+)/intervene)",
              [engine](const httplib::Request& req, httplib::Response& res) {
                guarded(*engine, res, [&] {
                  const std::string user = req.matches[1];
                  const json doc = req.body.empty() ? json::object() : json::parse(req.body);
                  const auto& cfg = engine->model().config();
                  const InterventionRequest ir = parse_intervention(doc, cfg.k, cfg.d);
                  json body = engine->intervene(user, ir).to_json();
                  body["user"] = user;
                  reply(res, *engine, 200, body);
                });
              });

  server.set_error_handler([engine](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty())
      error(res, *engine, 404, "not_found", "no route for " + req.method + " " + req.path);
  });
}

bool serve(std::shared_ptr<const SteeringEngine> engine, const std::string& host, int port) {
  httplib::Server server;
  register_routes(server, std::move(engine));
  return server.listen(host, port);
}

}  // namespace csavae
