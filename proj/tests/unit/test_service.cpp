#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "paths.hpp"
#include "polyverify/rlmath.hpp"
#include "polyverify/service.hpp"
#include "sandbox_fixtures.hpp"

using namespace polyverify::service;
namespace verifier = polyverify::verifier;
namespace sandbox = polyverify::sandbox;
namespace lc = polyverify::langconfig;
namespace ts = polyverify::taskset;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

// Runs a shell command, capturing stdout and stderr together.
CommandResult run_command(const std::string& command) {
  CommandResult r;
  FILE* pipe = ::popen((command + " 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

ts::Task fig3b() {
  return ts::load_dataset((test_paths::fixtures() / "fig3b.jsonl").string()).tasks.at(0);
}

const std::string kCorrect = R"(local n = tonumber(io.read("*l"))
local composite = false
for d = 2, math.floor(math.sqrt(n)) do
  if n % d == 0 then composite = true break end
end
print(composite and "True" or "False")
)";

std::string fenced(const std::string& body) { return "```lua\n" + body + "```\n"; }

// Lua verifier on the process driver.
struct LuaService {
  fixtures::StateDir state;
  std::unique_ptr<Verifier> verifier;

  explicit LuaService(std::size_t pool_size = 2) {
    sandbox::PoolConfig pc;
    pc.target_size_per_language = pool_size;
    pc.spawn_timeout = 20s;
    pc.health_check_interval = 100ms;
    verifier::VerifyLimits limits;
    limits.test_timeout = 1s;
    verifier = std::make_unique<Verifier>(fixtures::process_driver(state.path), pc, limits);
    verifier->add_language(lc::load_config_file((test_paths::configs() / "lua.yaml").string()));
    REQUIRE(verifier->pool().wait_until_ready("lua", 20s));
  }
};

json group_request() {
  const auto task = fig3b();
  json t = json::parse(ts::task_to_json_line(task));
  return {{"language", "lua"},
          {"task", t},
          {"candidates",
           {{{"completion_text", fenced(kCorrect)}},
            {{"completion_text", fenced("print('True')\n")}},
            {{"completion_text", fenced("while true do end\n")}},
            {{"completion_text", "I am not sure."}}}}};
}

// Timing varies run to run; everything else in a verdict is deterministic.
json scrub(json j) {
  if (j.is_object()) {
    for (auto& [key, value] : j.items()) {
      if (key == "wall_time_ms") {
        value = 0;
      } else {
        value = scrub(value);
      }
    }
  } else if (j.is_array()) {
    for (auto& v : j) v = scrub(v);
  }
  return j;
}

// Compares against a golden wire fixture, or rewrites it when
// POLYVERIFY_UPDATE_GOLDEN is set.
void check_golden(const std::string& name, const json& actual) {
  const auto path = test_paths::fixtures() / "wire" / (name + ".json");
  const json scrubbed = scrub(actual);
  if (std::getenv("POLYVERIFY_UPDATE_GOLDEN") != nullptr) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary | std::ios::trunc) << scrubbed.dump(2) << "\n";
    return;
  }
  REQUIRE_MESSAGE(std::filesystem::exists(path), "missing golden fixture " << path);
  CHECK_MESSAGE(json::parse(slurp(path)) == scrubbed, name);
}

verifier::Verdict stub_verdict(bool pass) {
  verifier::Verdict v;
  v.reward = pass ? 1 : 0;
  v.failure_kind = pass ? verifier::FailureKind::none : verifier::FailureKind::wrong_output;
  v.attempts = 1;
  return v;
}

// Scores a candidate correct when its program mentions "CORRECT".
GroupVerifier keyword_verifier() {
  return [](const std::vector<verifier::Candidate>& cs, const ts::Task&) {
    std::vector<verifier::Verdict> out;
    for (const auto& c : cs) {
      auto v = stub_verdict(c.extracted_program && c.extracted_program->find("CORRECT") != std::string::npos);
      if (!c.extracted_program) v.failure_kind = verifier::FailureKind::no_code_block;
      out.push_back(v);
    }
    return out;
  };
}

}  // namespace

TEST_CASE("service configuration") {
  auto cfg = load_service_config(test_paths::configs() / "service.yaml");
  CHECK(cfg.listen_address == "127.0.0.1:8080");
  REQUIRE(cfg.languages.size() == 2);
  CHECK(cfg.languages[0] == test_paths::configs() / "lua.yaml");
  CHECK(cfg.pool.target_size_per_language == 4);
  CHECK(cfg.pool.max_jobs_per_container == 500u);
  CHECK(cfg.limits.test_timeout == 30s);
  CHECK(cfg.limits.output_cap_bytes == 5242880u);
  CHECK(cfg.eval.samples == 20);
  CHECK(cfg.eval.temperature == 0.2);
  CHECK(cfg.eval.k == 1);
  CHECK(cfg.training.group_size == 32);
  CHECK(cfg.training.prompts_per_batch == 4);
  CHECK(cfg.training.temperature == 0.7);

  auto minimal = parse_service_config("languages: [a.yaml]\n", "/base");
  CHECK(minimal.languages.at(0) == "/base/a.yaml");
  CHECK(minimal.eval.samples == 20);
  CHECK(minimal.driver.kind == DriverKind::process);

  auto unlimited = parse_service_config("languages: [a.yaml]\npool:\n  max_jobs_per_container: 0\n");
  CHECK_FALSE(unlimited.pool.max_jobs_per_container.has_value());

  CHECK_THROWS_AS(parse_service_config("languages: [a.yaml]\npool:\n  sise: 3\n"), ServiceError);
  CHECK_THROWS_AS(parse_service_config("listen: x\n"), ServiceError);
  CHECK_THROWS_AS(parse_service_config("languages: [a.yaml]\neval:\n  samples: 2\n  k: 5\n"), ServiceError);
  CHECK_THROWS_AS(parse_service_config("languages: [a.yaml]\ndriver:\n  kind: vm\n"), ServiceError);

  CHECK(split_listen_address("0.0.0.0:9000") == std::pair<std::string, int>{"0.0.0.0", 9000});
  CHECK_THROWS_AS(split_listen_address("nohost"), ServiceError);
  CHECK_THROWS_AS(split_listen_address("h:99999"), ServiceError);
}

TEST_CASE("admission bounds candidates in flight") {
  Admission a(5);
  CHECK(a.try_admit(3));
  CHECK(a.try_admit(2));
  CHECK_FALSE(a.try_admit(1));
  CHECK(a.rejected() == 1);
  a.release(2);
  CHECK(a.in_flight() == 3);
  CHECK(a.try_admit(2));
  CHECK_FALSE(a.try_admit(6));
}

TEST_CASE("advantages endpoint") {
  LuaService svc(1);
  Server server(*svc.verifier, 8);
  auto r = server.handle_advantages({{"rewards", {1, 0, 0, 1}}});
  CHECK(r.status == 200);
  CHECK(r.body["advantages"] == json({1.0, -1.0, -1.0, 1.0}));
  check_golden("advantages.request", {{"rewards", {1, 0, 0, 1}}});
  check_golden("advantages.response", r.body);

  CHECK(server.handle_advantages({{"rewards", {0, 0, 0}}}).body["advantages"] == json({0.0, 0.0, 0.0}));
  CHECK(server.handle_advantages({{"rewards", {1}}}).body["advantages"] == json({0.0}));
  CHECK(server.handle_advantages({{"rewards", json::array()}}).status == 400);
  CHECK(server.handle_advantages({{"rewards", {"x"}}}).status == 400);
  CHECK(server.handle_advantages(json::array()).status == 400);

  // Agrees with the library on random groups.
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> rewards(1 + i % 9);
    for (auto& x : rewards) x = u(rng);
    auto body = server.handle_advantages({{"rewards", rewards}}).body;
    CHECK(body["advantages"].get<std::vector<double>>() == polyverify::rlmath::group_advantages(rewards));
  }
}

TEST_CASE("verification endpoints") {
  LuaService svc(2);
  Server server(*svc.verifier, 64);

  auto health = server.handle_health();
  CHECK(health.status == 200);
  CHECK(health.body == json{{"status", "ok"}, {"languages", {"lua"}}});
  check_golden("health.response", health.body);

  auto langs = server.handle_languages();
  CHECK(langs.body["languages"][0]["name"] == "lua");
  CHECK(langs.body["languages"][0]["filename"] == "snippet.lua");
  CHECK(langs.body["training"]["group_size"] == 32);
  check_golden("languages.response", langs.body);

  const auto request = group_request();
  auto group = server.handle_verify_group(request);
  REQUIRE(group.status == 200);
  REQUIRE(group.body.size() == 4);
  check_golden("verify_group.request", request);
  check_golden("verify_group.response", group.body);

  // Oracle: one /v1/verify call per candidate.
  std::vector<int> rewards;
  for (std::size_t i = 0; i < 4; ++i) {
    json single = {{"language", "lua"}, {"task", request["task"]}, {"candidate", request["candidates"][i]}};
    auto one = server.handle_verify(single);
    REQUIRE(one.status == 200);
    CHECK(scrub(one.body) == scrub(group.body[i]));
    rewards.push_back(one.body["reward"].get<int>());
    if (i == 0) {
      check_golden("verify.request", single);
      check_golden("verify.response", one.body);
    }
  }
  CHECK(rewards == std::vector<int>{1, 0, 0, 0});
  CHECK(group.body[2]["failure_kind"] == "timeout");
  CHECK(group.body[3]["failure_kind"] == "no_code_block");

  // A bare completion_text is accepted too.
  auto bare = server.handle_verify({{"language", "LUA"}, {"task", request["task"]}, {"completion_text", fenced(kCorrect)}});
  CHECK(bare.body["reward"] == 1);

  auto unknown = server.handle_verify({{"language", "cobol"}, {"task", request["task"]}, {"completion_text", "x"}});
  CHECK(unknown.status == 404);
  CHECK(unknown.body["error"]["code"] == "unknown_language");
  check_golden("error_unknown_language.response", unknown.body);

  auto bad_task = request;
  bad_task["task"]["tests"] = json::array();
  CHECK(server.handle_verify_group(bad_task).status == 400);
  auto no_candidates = request;
  no_candidates["candidates"] = json::array();
  CHECK(server.handle_verify_group(no_candidates).status == 400);
  CHECK(server.handle_verify({{"language", "lua"}, {"task", request["task"]}}).status == 400);

  auto metrics = server.handle_metrics().body;
  CHECK(metrics["pool"]["languages"][0]["target"] == 2);
  CHECK(metrics["pool"]["jobs_served"].get<int>() >= 7);
  CHECK(metrics["queue"]["in_flight"] == 0);
  CHECK(metrics["verdicts"].get<int>() >= 9);
}

TEST_CASE("requests beyond the queue bound get 429") {
  LuaService svc(1);
  Server server(*svc.verifier, 3);
  auto request = group_request();
  auto small = request;
  small["candidates"] = json::array({request["candidates"][0], request["candidates"][1]});

  // Occupy two slots with a slow candidate, then overflow the rest.
  auto slow = request;
  slow["candidates"] = json::array({json{{"completion_text", fenced("os.execute('sleep 1')\nprint('True')\n")}},
                                    request["candidates"][0]});
  auto running = std::async(std::launch::async, [&] { return server.handle_verify_group(slow); });
  std::this_thread::sleep_for(200ms);
  auto rejected = server.handle_verify_group(small);
  CHECK(rejected.status == 429);
  CHECK(rejected.body["error"]["code"] == "queue_full");
  check_golden("error_queue_full.response", rejected.body);
  CHECK(running.get().status == 200);
  CHECK(server.handle_verify_group(small).status == 200);
  CHECK(server.handle_metrics().body["queue"]["rejected"] == 1);
}

TEST_CASE("HTTP server round trip and bounded concurrency") {
  LuaService svc(2);
  Server server(*svc.verifier, 256, {}, 16);
  const int port = server.bind_any("127.0.0.1");
  REQUIRE(port > 0);
  std::thread serving([&] { server.serve(); });

  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(60, 0);
  auto health = client.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["status"] == "ok");

  auto adv = client.Post("/v1/advantages", R"({"rewards":[1,0,0,1]})", "application/json");
  REQUIRE(adv);
  CHECK(json::parse(adv->body)["advantages"] == json({1.0, -1.0, -1.0, 1.0}));

  auto garbage = client.Post("/v1/verify", "{not json", "application/json");
  REQUIRE(garbage);
  CHECK(garbage->status == 400);

  // Many concurrent groups: never more busy containers than the pool has.
  std::atomic<bool> done{false};
  std::atomic<int> max_busy{0};
  std::thread sampler([&] {
    while (!done) {
      int busy = 0;
      for (const auto& c : svc.verifier->pool().containers("lua")) busy += c.state == sandbox::ContainerState::busy;
      if (busy > max_busy) max_busy = busy;
      std::this_thread::sleep_for(2ms);
    }
  });
  auto request = group_request();
  request["candidates"] = json::array({request["candidates"][0], request["candidates"][1]});
  const auto body = request.dump();
  std::vector<std::future<int>> calls;
  for (int i = 0; i < 8; ++i) {
    calls.push_back(std::async(std::launch::async, [&, port] {
      httplib::Client c("127.0.0.1", port);
      c.set_read_timeout(120, 0);
      auto res = c.Post("/v1/verify_group", body, "application/json");
      if (!res || res->status != 200) return -1;
      auto verdicts = json::parse(res->body);
      return verdicts[0]["reward"].get<int>() * 10 + verdicts[1]["reward"].get<int>();
    }));
  }
  for (auto& f : calls) CHECK(f.get() == 10);
  done = true;
  sampler.join();
  CHECK(max_busy <= 2);

  server.stop();
  serving.join();
}

TEST_CASE("eval over stored completions") {
  ts::Dataset ds;
  for (int i = 0; i < 3; ++i) ds.tasks.push_back({"t" + std::to_string(i), "d", "i", "o", {{"1\n", "1\n"}}, false});
  EvalOptions opts;
  opts.samples = 4;
  opts.k = 1;

  std::vector<CompletionRecord> all_ok;
  for (const auto& t : ds.tasks) {
    for (std::size_t s = 0; s < 4; ++s) all_ok.push_back({t.id, s, "```\nCORRECT\n```"});
  }
  auto report = eval_completions(ds, "lua", all_ok, opts, keyword_verifier());
  CHECK(report.pass_at_k == 1.0);
  for (const auto& t : report.tasks) CHECK(t.c == 4);

  // Half right, n=2, k=1: exactly 0.5.
  std::vector<CompletionRecord> half;
  for (const auto& t : ds.tasks) {
    half.push_back({t.id, 0, "```\nCORRECT\n```"});
    half.push_back({t.id, 1, "```\nnope\n```"});
  }
  opts.samples = 2;
  report = eval_completions(ds, "lua", half, opts, keyword_verifier());
  CHECK(report.pass_at_k == 0.5);
  CHECK(report.pass_at_k == oracle::pass_at_k_enumerated(2, 1, 1));
  CHECK(report.failure_counts.at("wrong_output") == 3);

  // Mixed counts against the enumeration oracle, k=2.
  std::vector<CompletionRecord> mixed;
  const int correct[3] = {0, 2, 5};
  for (int i = 0; i < 3; ++i) {
    for (int s = 0; s < 6; ++s) {
      mixed.push_back({ds.tasks[i].id, static_cast<std::size_t>(s), s < correct[i] ? "```\nCORRECT\n```" : "x"});
    }
  }
  opts.samples = 6;
  opts.k = 2;
  report = eval_completions(ds, "lua", mixed, opts, keyword_verifier());
  double mean = 0;
  for (int i = 0; i < 3; ++i) {
    CHECK(report.tasks[i].c == static_cast<std::size_t>(correct[i]));
    CHECK(report.tasks[i].pass_at_k == doctest::Approx(oracle::pass_at_k_enumerated(6, correct[i], 2)).epsilon(1e-12));
    mean += oracle::pass_at_k_enumerated(6, correct[i], 2) / 3;
  }
  CHECK(report.pass_at_k == doctest::Approx(mean).epsilon(1e-12));
  CHECK(report.failure_counts.at("no_code_block") == 18 - 7);

  opts.k = 1;
  opts.samples = 2;
  auto missing = half;
  missing.pop_back();
  try {
    eval_completions(ds, "lua", missing, opts, keyword_verifier());
    FAIL("expected MissingSamples");
  } catch (const MissingSamples& e) {
    CHECK(e.task_id() == "t2");
  }
  auto dup = half;
  dup.push_back(half.front());
  CHECK_THROWS_AS(eval_completions(ds, "lua", dup, opts, keyword_verifier()), ServiceError);
  opts.k = 3;
  CHECK_THROWS_AS(eval_completions(ds, "lua", half, opts, keyword_verifier()), ServiceError);
}

TEST_CASE("eval reports are deterministic") {
  ts::Dataset ds;
  ds.tasks.push_back({"b/task", "d", "i", "o", {{"1\n", "1\n"}}, false});
  ds.tasks.push_back({"a", "d", "i", "o", {{"1\n", "1\n"}}, false});
  std::vector<CompletionRecord> recs = {
      {"a", 1, "```\nCORRECT\n```"}, {"b/task", 0, "none"}, {"a", 0, "```\nwrong\n```"},
      {"b/task", 1, "```\nCORRECT\n```"}, {"a", 2, "```\nCORRECT\n```"}, {"b/task", 2, "```\nCORRECT\n```"},
  };
  EvalOptions opts;
  opts.samples = 3;
  auto r1 = eval_completions(ds, "lua", recs, opts, keyword_verifier());
  std::reverse(recs.begin(), recs.end());
  auto r2 = eval_completions(ds, "lua", recs, opts, keyword_verifier());
  CHECK(report_to_json(r1).dump(2) == report_to_json(r2).dump(2));
  CHECK(render_table(r1) == render_table(r2));
  CHECK_FALSE(report_to_json(r1).contains("wall_time_seconds"));
  CHECK(report_to_json(r1, true).contains("wall_time_seconds"));

  const std::string expected_table =
      "task       n     c   pass@1\n"
      "b/task     3     2      67%\n"
      "a          3     2      67%\n"
      "\n"
      "lua: pass@1 = 67% over 2 tasks, 3 samples each\n"
      "failures: no_code_block=1 wrong_output=1\n";
  CHECK(render_table(r1) == expected_table);

  auto j = report_to_json(r1);
  std::vector<std::string> keys;
  for (auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"language", "samples", "k", "metric", "task_count", "pass_at_k",
                                         "failure_counts", "tasks"});
  check_golden("eval_report", json::parse(j.dump()));

  CHECK(percent(0.455) == 46);
  CHECK(percent(0.455 - 1e-15) == 46);  // a few ulps short of the half
  CHECK(percent(0.4549) == 45);
  CHECK(percent(0.125) == 13);
  CHECK(percent(0.0) == 0);
  CHECK(percent(1.0) == 100);
  CHECK(percent(2.0 / 3.0) == 67);
}

TEST_CASE("eval with a generation endpoint") {
  httplib::Server stub;
  std::atomic<int> calls{0};
  json last_body;
  std::mutex mu;
  stub.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    auto body = json::parse(req.body);
    {
      std::lock_guard lock(mu);
      last_body = body;
    }
    json choices = json::array();
    for (int i = 0; i < body["n"].get<int>(); ++i) {
      choices.push_back({{"message", {{"role", "assistant"}, {"content", i % 2 ? "x" : "```\nCORRECT\n```"}}}});
    }
    res.set_content(json{{"choices", choices}}.dump(), "application/json");
  });
  const int port = stub.bind_to_any_port("127.0.0.1");
  std::thread serving([&] { stub.listen_after_bind(); });

  ts::LlmEndpoint ep;
  ep.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  ep.model = "policy";
  auto config = lc::load_config_file((test_paths::configs() / "lua.yaml").string());
  ts::Dataset ds;
  ds.tasks.push_back({"t", "Echo a number.", "one integer", "the same integer", {{"1\n", "1\n"}}, false});

  EvalOptions opts;
  opts.samples = 4;
  opts.temperature = 0.2;
  auto report = eval_generated(ds, config, endpoint_generator(ep), opts, keyword_verifier());
  CHECK(calls == 2);  // one retry after the 503
  CHECK(report.tasks.at(0).c == 2);
  CHECK(report.pass_at_k == 0.5);
  {
    std::lock_guard lock(mu);
    CHECK(last_body["n"] == 4);
    CHECK(last_body["temperature"] == 0.2);
    CHECK(last_body["model"] == "policy");
    const auto prompt = last_body["messages"][0]["content"].get<std::string>();
    CHECK(prompt.starts_with("Use Lua 5.1"));
  }

  opts.include_prefix = false;
  eval_generated(ds, config, endpoint_generator(ep), opts, keyword_verifier());
  {
    std::lock_guard lock(mu);
    CHECK(last_body["messages"][0]["content"].get<std::string>().starts_with("Echo a number."));
  }

  ts::LlmEndpoint dead;
  dead.url = "http://127.0.0.1:1/v1/chat/completions";
  dead.timeout_seconds = 1;
  CHECK_THROWS_AS(endpoint_generator(dead, 2)("p", 1, 0.2), ts::EndpointError);

  stub.stop();
  serving.join();
}

TEST_CASE("command-line interface") {
  const auto cli = test_paths::cli().string();
  const auto fixtures_dir = test_paths::fixtures();

  auto ok = run_command(cli + " validate " + (fixtures_dir / "fig3b.jsonl").string());
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("1 tasks OK (2 tests)") != std::string::npos);

  auto golden = run_command(cli + " validate --json " + (fixtures_dir / "golden" / "tasks.jsonl").string());
  CHECK(golden.exit_code == 0);
  CHECK(json::parse(golden.output)["tasks"] == 12);

  auto dup = run_command(cli + " validate " + (fixtures_dir / "duplicate_ids.jsonl").string());
  CHECK(dup.exit_code == 1);
  CHECK(dup.output.find("DuplicateId") != std::string::npos);

  auto missing = run_command(cli + " validate /nonexistent.jsonl");
  CHECK(missing.exit_code != 0);

  fixtures::StateDir state;
  const std::string driver_flags = " --agent " + test_paths::agent().string() + " --state-dir " + state.path.string();
  auto built = run_command(cli + " build-image --json " + (test_paths::configs() / "fortran.yaml").string() +
                           driver_flags);
  REQUIRE(built.exit_code == 0);
  auto built_json = json::parse(built.output.substr(built.output.find('{')));
  CHECK(built_json["image_tag"] == lc::build_plan(lc::load_config_file((test_paths::configs() / "fortran.yaml").string())).tag);

  auto half = run_command(cli + " eval --json --language " + (test_paths::configs() / "lua.yaml").string() +
                          " --dataset " + (fixtures_dir / "eval" / "tasks_half.jsonl").string() +
                          " --completions " + (fixtures_dir / "eval" / "completions_half.jsonl").string() +
                          " --samples 2 --k 1" + driver_flags);
  REQUIRE(half.exit_code == 0);
  CHECK(json::parse(half.output.substr(half.output.find("\n{") + 1))["pass_at_k"] == 0.5);

  auto short_samples = run_command(cli + " eval --language " + (test_paths::configs() / "lua.yaml").string() +
                                   " --dataset " + (fixtures_dir / "eval" / "tasks_half.jsonl").string() +
                                   " --completions " + (fixtures_dir / "eval" / "completions_missing.jsonl").string() +
                                   " --samples 2 --k 1" + driver_flags);
  CHECK(short_samples.exit_code == 1);
  CHECK(short_samples.output.find("eval/03") != std::string::npos);

  auto reform = run_command(cli + " reformulate --problem x --tests 'assert f(1) == 1' --endpoint http://127.0.0.1:1/v1 --model m");
  CHECK(reform.exit_code != 0);
}
