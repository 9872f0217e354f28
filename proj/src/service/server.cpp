#include <httplib.h>

#include <cmath>

#include <spdlog/spdlog.h>

#include "polyverify/rlmath.hpp"
#include "polyverify/service.hpp"

namespace polyverify::service {

using nlohmann::json;

namespace {

constexpr std::size_t kMaxRequestBytes = 256u << 20;

Server::Response error_response(int status, std::string_view code, std::string_view message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

taskset::Task task_from_request(const json& request) {
  auto it = request.find("task");
  if (it == request.end() || !it->is_object()) throw BadRequest("'task' must be an object");
  return taskset::parse_task(it->dump());
}

std::string language_from_request(const json& request) {
  auto it = request.find("language");
  if (it == request.end() || !it->is_string()) throw BadRequest("'language' must be a string");
  return it->get<std::string>();
}

verifier::Candidate candidate_from(const json& j, const std::string& language) {
  if (j.is_string()) return verifier::make_candidate(j.get<std::string>(), language);
  if (!j.is_object() || !j.contains("completion_text") || !j["completion_text"].is_string()) {
    throw BadRequest("a candidate needs a string 'completion_text'");
  }
  auto c = verifier::candidate_from_json(j);
  if (c.language.empty()) c.language = language;
  if (!c.extracted_program) c = verifier::make_candidate(c.completion_text, c.language);
  return c;
}

// Maps exceptions from a handler to an HTTP error.
template <typename Fn>
Server::Response guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const BadRequest& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const taskset::TasksetError& e) {
    return error_response(400, "invalid_task", e.what());
  } catch (const json::exception& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const sandbox::SpawnTimeout& e) {
    return error_response(503, "unavailable", e.what());
  } catch (const sandbox::PoolStopped& e) {
    return error_response(503, "shutting_down", e.what());
  } catch (const std::exception& e) {
    spdlog::error("request failed: {}", e.what());
    return error_response(500, "internal", e.what());
  }
}

// Releases admitted candidates when a request finishes.
struct Admitted {
  Admission& admission;
  std::size_t n;
  ~Admitted() { admission.release(n); }
};

}  // namespace

bool Admission::try_admit(std::size_t n) {
  auto current = in_flight_.load();
  while (true) {
    if (current + n > limit_) {
      ++rejected_;
      return false;
    }
    if (in_flight_.compare_exchange_weak(current, current + n)) return true;
  }
}

void Admission::release(std::size_t n) { in_flight_ -= n; }

Server::Server(Verifier& verifier, std::size_t queue_limit, TrainingDefaults training,
               std::size_t http_threads)
    : verifier_(verifier),
      admission_(queue_limit),
      training_(training),
      http_(std::make_unique<httplib::Server>()) {
  http_->new_task_queue = [http_threads] { return new httplib::ThreadPool(http_threads); };
  http_->set_payload_max_length(kMaxRequestBytes);
  http_->set_read_timeout(300, 0);
  http_->set_write_timeout(300, 0);
  install_routes();
}

Server::~Server() { stop(); }

void Server::install_routes() {
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
  };
  auto with_body = [this, reply](Response (Server::*handler)(const json&)) {
    return [this, reply, handler](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        reply(res, error_response(400, "bad_json", e.what()));
        return;
      }
      reply(res, (this->*handler)(body));
    };
  };
  http_->Post("/v1/verify", with_body(&Server::handle_verify));
  http_->Post("/v1/verify_group", with_body(&Server::handle_verify_group));
  http_->Post("/v1/advantages", [this, reply](const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      reply(res, error_response(400, "bad_json", e.what()));
      return;
    }
    reply(res, handle_advantages(body));
  });
  http_->Get("/v1/languages", [this, reply](const httplib::Request&, httplib::Response& res) {
    ++requests_;
    reply(res, handle_languages());
  });
  http_->Get("/v1/health", [this, reply](const httplib::Request&, httplib::Response& res) {
    ++requests_;
    reply(res, handle_health());
  });
  http_->Get("/v1/metrics", [this, reply](const httplib::Request&, httplib::Response& res) {
    ++requests_;
    reply(res, handle_metrics());
  });
}

Server::Response Server::handle_verify(const json& request) {
  return guarded([&]() -> Response {
    if (!request.is_object()) throw BadRequest("request body must be an object");
    const auto language = language_from_request(request);
    if (!verifier_.find(language)) {
      return error_response(404, "unknown_language", "no language '" + language + "'");
    }
    const auto task = task_from_request(request);
    verifier::Candidate candidate;
    if (auto it = request.find("candidate"); it != request.end()) {
      candidate = candidate_from(*it, language);
    } else if (auto text = request.find("completion_text"); text != request.end()) {
      candidate = candidate_from(*text, language);
    } else {
      throw BadRequest("request needs 'candidate' or 'completion_text'");
    }
    if (!admission_.try_admit(1)) {
      return error_response(429, "queue_full", "verification queue is full");
    }
    Admitted admitted{admission_, 1};
    auto verdict = verifier_.verify(candidate, task, language);
    ++verdicts_;
    return {200, verifier::verdict_to_json(verdict)};
  });
}

Server::Response Server::handle_verify_group(const json& request) {
  return guarded([&]() -> Response {
    if (!request.is_object()) throw BadRequest("request body must be an object");
    const auto language = language_from_request(request);
    if (!verifier_.find(language)) {
      return error_response(404, "unknown_language", "no language '" + language + "'");
    }
    const auto task = task_from_request(request);
    auto it = request.find("candidates");
    if (it == request.end() || !it->is_array() || it->empty()) {
      throw BadRequest("'candidates' must be a non-empty array");
    }
    std::vector<verifier::Candidate> candidates;
    for (const auto& c : *it) candidates.push_back(candidate_from(c, language));
    if (!admission_.try_admit(candidates.size())) {
      return error_response(429, "queue_full", "verification queue is full");
    }
    Admitted admitted{admission_, candidates.size()};
    auto verdicts = verifier_.verify_group(candidates, task, language);
    verdicts_ += verdicts.size();
    json out = json::array();
    for (const auto& v : verdicts) out.push_back(verifier::verdict_to_json(v));
    return {200, std::move(out)};
  });
}

Server::Response Server::handle_languages() const {
  json langs = json::array();
  for (const auto& name : verifier_.language_names()) {
    const auto* entry = verifier_.find(name);
    if (!entry) continue;
    langs.push_back({{"name", entry->config.name},
                     {"image_tag", entry->image_tag},
                     {"filename", entry->config.filename},
                     {"compiled", entry->config.compile.has_value()},
                     {"prompt", entry->config.prompt}});
  }
  const auto& l = verifier_.limits();
  return {200,
          {{"languages", langs},
           {"limits",
            {{"compile_timeout_ms", l.compile_timeout.count()},
             {"test_timeout_ms", l.test_timeout.count()},
             {"output_cap_bytes", l.output_cap_bytes},
             {"strict", l.strict}}},
           {"training",
            {{"group_size", training_.group_size},
             {"prompts_per_batch", training_.prompts_per_batch},
             {"temperature", training_.temperature},
             {"learning_rate", training_.learning_rate},
             {"clip_epsilon", training_.clip_epsilon}}}}};
}

Server::Response Server::handle_health() const {
  return {200, {{"status", "ok"}, {"languages", verifier_.language_names()}}};
}

Server::Response Server::handle_metrics() const {
  const auto m = verifier_.pool().metrics();
  json langs = json::array();
  for (const auto& l : m.languages) {
    langs.push_back({{"language", l.language},
                     {"image_tag", l.image_tag},
                     {"target", l.target},
                     {"warm", l.warm},
                     {"busy", l.busy},
                     {"spawning", l.spawning},
                     {"spawned", l.spawned},
                     {"retired", l.retired},
                     {"crashed", l.crashed},
                     {"spawn_failures", l.spawn_failures},
                     {"jobs_served", l.jobs_served}});
  }
  return {200,
          {{"pool", {{"languages", langs}, {"crash_count", m.crash_count}, {"jobs_served", m.jobs_served}}},
           {"queue",
            {{"in_flight", admission_.in_flight()},
             {"limit", admission_.limit()},
             {"rejected", admission_.rejected()}}},
           {"requests", requests_.load()},
           {"verdicts", verdicts_.load()}}};
}

Server::Response Server::handle_advantages(const json& request) const {
  return guarded([&]() -> Response {
    auto it = request.is_object() ? request.find("rewards") : request.end();
    if (!request.is_object() || it == request.end() || !it->is_array() || it->empty()) {
      throw BadRequest("'rewards' must be a non-empty array of numbers");
    }
    std::vector<double> rewards;
    for (const auto& r : *it) {
      if (!r.is_number()) throw BadRequest("'rewards' must contain only numbers");
      rewards.push_back(r.get<double>());
    }
    try {
      return {200, {{"advantages", rlmath::group_advantages(rewards)}}};
    } catch (const rlmath::NonFiniteInput& e) {
      throw BadRequest(e.what());
    }
  });
}

bool Server::listen(const std::string& host, int port) { return http_->listen(host, port); }

int Server::bind_any(const std::string& host) { return http_->bind_to_any_port(host); }

bool Server::serve() { return http_->listen_after_bind(); }

void Server::stop() {
  if (http_) http_->stop();
}

}  // namespace polyverify::service
