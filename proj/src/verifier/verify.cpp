#include <atomic>
#include <thread>

#include <spdlog/spdlog.h>

#include "polyverify/harness/host.hpp"
#include "polyverify/verifier.hpp"

namespace polyverify::verifier {

using harness::CompileStatus;
using harness::JobReport;
using harness::TestStatus;

namespace {

constexpr std::pair<FailureKind, std::string_view> kKindNames[] = {
    {FailureKind::none, "none"},
    {FailureKind::no_code_block, "no_code_block"},
    {FailureKind::compile, "compile"},
    {FailureKind::runtime, "runtime"},
    {FailureKind::wrong_output, "wrong_output"},
    {FailureKind::timeout, "timeout"},
    {FailureKind::overflow, "overflow"},
    {FailureKind::crash, "crash"},
};

bool leaves_container_dirty(FailureKind kind) {
  return kind == FailureKind::crash || kind == FailureKind::overflow ||
         kind == FailureKind::timeout;
}

// Strict mode: a test only passes if stdout matches the expected bytes.
void apply_strict(JobReport& report, const taskset::Task& task) {
  for (auto& o : report.outcomes) {
    if (o.status != TestStatus::passed) continue;
    const auto idx = static_cast<std::size_t>(o.index);
    if (idx < task.tests.size() && o.stdout_prefix != task.tests[idx].output) {
      o.status = TestStatus::wrong_output;
    }
  }
}

}  // namespace

std::string_view to_string(FailureKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "crash";
}

FailureKind failure_kind_from_string(std::string_view s) {
  for (const auto& [k, name] : kKindNames) {
    if (name == s) return k;
  }
  throw std::invalid_argument("unknown failure kind '" + std::string(s) + "'");
}

FailureKind classify(const JobReport& report) {
  if (report.container_crashed) return FailureKind::crash;
  if (report.compile_status == CompileStatus::compile_error) return FailureKind::compile;
  if (report.compile_status == CompileStatus::compile_timeout) return FailureKind::timeout;
  if (report.outcomes.empty()) return FailureKind::crash;
  for (const auto& o : report.outcomes) {
    if (o.skipped) continue;
    switch (o.status) {
      case TestStatus::passed: continue;
      case TestStatus::wrong_output: return FailureKind::wrong_output;
      case TestStatus::runtime_error: return FailureKind::runtime;
      case TestStatus::timeout: return FailureKind::timeout;
      case TestStatus::output_overflow: return FailureKind::overflow;
    }
  }
  // Only skipped outcomes can remain, which cannot happen without a failure.
  for (const auto& o : report.outcomes) {
    if (o.status != TestStatus::passed) return FailureKind::wrong_output;
  }
  return FailureKind::none;
}

harness::JobRequest build_job(const std::string& program, const taskset::Task& task,
                              const langconfig::LanguageConfig& config,
                              const VerifyLimits& limits) {
  harness::JobRequest job;
  job.program = program;
  job.filename = config.filename;
  job.compile = config.compile;
  job.execute = config.execute;
  job.tests = task.tests;
  job.compile_timeout = limits.compile_timeout;
  job.test_timeout = limits.test_timeout;
  job.output_cap_bytes = limits.output_cap_bytes;
  job.fail_fast = limits.fail_fast;
  return job;
}

Verdict verify_candidate(sandbox::ContainerPool& pool, const Candidate& candidate,
                         const taskset::Task& task, const langconfig::LanguageConfig& config,
                         const VerifyLimits& limits) {
  Verdict verdict;
  std::optional<std::string> program = candidate.extracted_program;
  if (!program) {
    try {
      program = extract_code(candidate.completion_text,
                             candidate.language.empty() ? config.name : candidate.language);
    } catch (const NoCodeBlock&) {
      verdict.failure_kind = FailureKind::no_code_block;
      return verdict;
    }
  }
  const auto job = build_job(*program, task, config, limits);

  for (int attempt = 1; attempt <= 2; ++attempt) {
    verdict.attempts = attempt;
    auto handle = pool.checkout(config.name);
    JobReport report;
    try {
      report = harness::run_job(handle, job);
    } catch (const harness::ProtocolError& e) {
      spdlog::error("container {} rejected a job: {}", handle.id, e.what());
      handle.slot->mark_crashed();
      report = JobReport{};
      report.container_crashed = true;
    } catch (...) {
      pool.give_back(handle, sandbox::ReturnVerdict::dirty);
      throw;
    }
    if (limits.strict) apply_strict(report, task);
    verdict.report = std::move(report);
    verdict.failure_kind = classify(verdict.report);
    pool.give_back(handle, leaves_container_dirty(verdict.failure_kind)
                               ? sandbox::ReturnVerdict::dirty
                               : sandbox::ReturnVerdict::clean);
    if (verdict.failure_kind != FailureKind::crash) break;
  }
  verdict.reward = (verdict.failure_kind == FailureKind::none && verdict.report.all_passed()) ? 1 : 0;
  if (verdict.reward == 0 && verdict.failure_kind == FailureKind::none) {
    verdict.failure_kind = FailureKind::wrong_output;
  }
  return verdict;
}

std::vector<Verdict> verify_group(sandbox::ContainerPool& pool,
                                  const std::vector<Candidate>& candidates,
                                  const taskset::Task& task,
                                  const langconfig::LanguageConfig& config,
                                  const VerifyLimits& limits) {
  std::vector<Verdict> verdicts(candidates.size());
  if (candidates.empty()) return verdicts;
  const std::size_t workers =
      std::max<std::size_t>(1, std::min(candidates.size(), pool.capacity(config.name)));
  if (workers == 1) {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      verdicts[i] = verify_candidate(pool, candidates[i], task, config, limits);
    }
    return verdicts;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mu;
  std::exception_ptr error;
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        while (true) {
          const std::size_t i = next++;
          if (i >= candidates.size()) return;
          try {
            verdicts[i] = verify_candidate(pool, candidates[i], task, config, limits);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
            next = candidates.size();
            return;
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
  return verdicts;
}

nlohmann::json verdict_to_json(const Verdict& verdict) {
  auto report = harness::report_to_json(verdict.report);
  report.erase("type");
  return {{"reward", verdict.reward},
          {"failure_kind", to_string(verdict.failure_kind)},
          {"attempts", verdict.attempts},
          {"report", std::move(report)}};
}

Verdict verdict_from_json(const nlohmann::json& j) {
  Verdict v;
  v.reward = j.at("reward").get<int>();
  if (v.reward != 0 && v.reward != 1) throw std::invalid_argument("reward must be 0 or 1");
  v.failure_kind = failure_kind_from_string(j.at("failure_kind").get<std::string>());
  v.attempts = j.value("attempts", 0);
  auto report = j.at("report");
  report["type"] = "report";
  v.report = harness::report_from_json(report);
  return v;
}

nlohmann::json candidate_to_json(const Candidate& candidate) {
  nlohmann::json j = {{"completion_text", candidate.completion_text},
                      {"language", candidate.language}};
  j["extracted_program"] = candidate.extracted_program ? nlohmann::json(*candidate.extracted_program)
                                                       : nlohmann::json(nullptr);
  return j;
}

Candidate candidate_from_json(const nlohmann::json& j) {
  Candidate c;
  c.completion_text = j.at("completion_text").get<std::string>();
  c.language = j.value("language", "");
  if (auto it = j.find("extracted_program"); it != j.end() && !it->is_null()) {
    c.extracted_program = it->get<std::string>();
  }
  return c;
}

}  // namespace polyverify::verifier
