#include "polyverify/harness/job.hpp"

#include "polyverify/langconfig.hpp"

namespace polyverify::harness {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ProtocolError(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ProtocolError(std::string("field '") + key + "' has the wrong type");
  }
}

std::optional<int> optional_int(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_number_integer()) {
    throw ProtocolError(std::string("field '") + key + "' must be an integer");
  }
  return it->get<int>();
}

}  // namespace

void JobRequest::validate() const {
  if (tests.empty()) throw ProtocolError("job has no tests");
  if (compile_timeout.count() <= 0 || test_timeout.count() <= 0) {
    throw ProtocolError("timeouts must be positive");
  }
  if (output_cap_bytes < kMinOutputCap) {
    throw ProtocolError("output cap must be at least 1 KiB");
  }
  if (execute.empty()) throw ProtocolError("execute command is empty");
  if (!langconfig::is_safe_relative_path(filename)) {
    throw ProtocolError("unsafe program filename '" + filename + "'");
  }
}

bool JobReport::all_passed() const {
  if (container_crashed) return false;
  if (compile_status != CompileStatus::ok &&
      compile_status != CompileStatus::not_applicable) {
    return false;
  }
  if (outcomes.empty()) return false;
  for (const auto& o : outcomes) {
    if (o.status != TestStatus::passed) return false;
  }
  return true;
}

std::string_view to_string(TestStatus s) {
  switch (s) {
    case TestStatus::passed: return "passed";
    case TestStatus::wrong_output: return "wrong_output";
    case TestStatus::runtime_error: return "runtime_error";
    case TestStatus::timeout: return "timeout";
    case TestStatus::output_overflow: return "output_overflow";
  }
  return "wrong_output";
}

std::string_view to_string(CompileStatus s) {
  switch (s) {
    case CompileStatus::ok: return "ok";
    case CompileStatus::compile_error: return "compile_error";
    case CompileStatus::compile_timeout: return "compile_timeout";
    case CompileStatus::not_applicable: return "not_applicable";
  }
  return "not_applicable";
}

TestStatus test_status_from_string(std::string_view s) {
  for (auto v : {TestStatus::passed, TestStatus::wrong_output, TestStatus::runtime_error,
                 TestStatus::timeout, TestStatus::output_overflow}) {
    if (to_string(v) == s) return v;
  }
  throw ProtocolError("unknown test status '" + std::string(s) + "'");
}

CompileStatus compile_status_from_string(std::string_view s) {
  for (auto v : {CompileStatus::ok, CompileStatus::compile_error,
                 CompileStatus::compile_timeout, CompileStatus::not_applicable}) {
    if (to_string(v) == s) return v;
  }
  throw ProtocolError("unknown compile status '" + std::string(s) + "'");
}

json job_to_json(const JobRequest& job) {
  json j = {{"type", "job"}, {"program", job.program}, {"filename", job.filename}};
  if (job.compile) j["compile"] = *job.compile;
  j["execute"] = job.execute;
  j["tests"] = json::array();
  for (const auto& t : job.tests) {
    j["tests"].push_back({{"input", t.input}, {"output", t.output}});
  }
  j["compile_timeout_ms"] = job.compile_timeout.count();
  j["test_timeout_ms"] = job.test_timeout.count();
  j["output_cap_bytes"] = job.output_cap_bytes;
  j["fail_fast"] = job.fail_fast;
  return j;
}

JobRequest job_from_json(const json& frame) {
  if (!frame.is_object() || field<std::string>(frame, "type") != "job") {
    throw ProtocolError("not a job frame");
  }
  JobRequest job;
  job.program = field<std::string>(frame, "program");
  job.filename = field<std::string>(frame, "filename");
  if (auto it = frame.find("compile"); it != frame.end() && !it->is_null()) {
    job.compile = field<std::string>(frame, "compile");
  }
  job.execute = field<std::string>(frame, "execute");
  auto tests = frame.find("tests");
  if (tests == frame.end() || !tests->is_array()) {
    throw ProtocolError("field 'tests' must be an array");
  }
  for (const auto& t : *tests) {
    if (!t.is_object()) throw ProtocolError("each test must be an object");
    job.tests.push_back(
        {field<std::string>(t, "input"), field<std::string>(t, "output")});
  }
  job.compile_timeout = Millis(field<std::int64_t>(frame, "compile_timeout_ms"));
  job.test_timeout = Millis(field<std::int64_t>(frame, "test_timeout_ms"));
  job.output_cap_bytes = field<std::size_t>(frame, "output_cap_bytes");
  job.fail_fast = field<bool>(frame, "fail_fast");
  job.validate();
  return job;
}

json outcome_to_json(const TestOutcome& o) {
  json j = {{"index", o.index},
            {"status", to_string(o.status)},
            {"exit_code", o.exit_code ? json(*o.exit_code) : json(nullptr)}};
  if (o.signal) j["signal"] = *o.signal;
  j["stdout_prefix"] = o.stdout_prefix;
  j["stderr_prefix"] = o.stderr_prefix;
  j["wall_time_ms"] = o.wall_time.count();
  if (o.skipped) j["skipped"] = true;
  return j;
}

json report_to_json(const JobReport& report) {
  json j = {{"type", "report"},
            {"compile_status", to_string(report.compile_status)},
            {"compile_log_prefix", report.compile_log_prefix},
            {"outcomes", json::array()}};
  for (const auto& o : report.outcomes) j["outcomes"].push_back(outcome_to_json(o));
  if (report.container_crashed) j["container_crashed"] = true;
  return j;
}

JobReport report_from_json(const json& frame) {
  if (!frame.is_object() || field<std::string>(frame, "type") != "report") {
    throw ProtocolError("not a report frame");
  }
  JobReport r;
  r.compile_status =
      compile_status_from_string(field<std::string>(frame, "compile_status"));
  if (auto it = frame.find("compile_log_prefix"); it != frame.end()) {
    r.compile_log_prefix = field<std::string>(frame, "compile_log_prefix");
  }
  if (auto it = frame.find("container_crashed"); it != frame.end()) {
    r.container_crashed = field<bool>(frame, "container_crashed");
  }
  auto outcomes = frame.find("outcomes");
  if (outcomes == frame.end() || !outcomes->is_array()) {
    throw ProtocolError("field 'outcomes' must be an array");
  }
  for (const auto& o : *outcomes) {
    TestOutcome t;
    t.index = field<int>(o, "index");
    t.status = test_status_from_string(field<std::string>(o, "status"));
    t.exit_code = optional_int(o, "exit_code");
    t.signal = optional_int(o, "signal");
    t.stdout_prefix = field<std::string>(o, "stdout_prefix");
    t.stderr_prefix = field<std::string>(o, "stderr_prefix");
    t.wall_time = Millis(field<std::int64_t>(o, "wall_time_ms"));
    if (auto it = o.find("skipped"); it != o.end()) t.skipped = field<bool>(o, "skipped");
    r.outcomes.push_back(std::move(t));
  }
  return r;
}

}  // namespace polyverify::harness
