#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyverify/harness/job.hpp"
#include "polyverify/langconfig.hpp"
#include "polyverify/sandbox.hpp"
#include "polyverify/taskset.hpp"
#include "polyverify/text.hpp"

namespace polyverify::verifier {

class NoCodeBlock : public std::runtime_error {
 public:
  NoCodeBlock() : std::runtime_error("completion contains no fenced code block") {}
};

/// Canonical language key for a fence info string or config name:
/// lower-cased, with aliases such as f90 -> fortran and ml -> ocaml folded.
std::string canonical_language(std::string_view name);

/// Contents of the last fenced block tagged with `language` (after alias
/// folding), else of the last fenced block of any kind. An unterminated
/// final fence runs to the end of the text. Throws NoCodeBlock.
std::string extract_code(std::string_view completion, std::string_view language);

struct Candidate {
  std::string completion_text;
  std::optional<std::string> extracted_program;
  std::string language;
};

/// Fills in extracted_program when extraction succeeds.
Candidate make_candidate(std::string completion_text, std::string language);

enum class FailureKind { none, no_code_block, compile, runtime, wrong_output, timeout, overflow, crash };

std::string_view to_string(FailureKind kind);
FailureKind failure_kind_from_string(std::string_view s);

struct Verdict {
  int reward = 0;
  harness::JobReport report;
  FailureKind failure_kind = FailureKind::none;
  // Containers used; 2 when the first one crashed and the job was retried.
  int attempts = 0;
};

struct VerifyLimits {
  harness::Millis compile_timeout = harness::kDefaultCompileTimeout;
  harness::Millis test_timeout = harness::kDefaultTestTimeout;
  std::size_t output_cap_bytes = harness::kDefaultOutputCap;
  // Stop at the first failing test; the reward is 0 either way.
  bool fail_fast = true;
  // Compare raw stdout bytes instead of normalized text.
  bool strict = false;
};

/// The failure that decides a report's verdict, in test order.
FailureKind classify(const harness::JobReport& report);

harness::JobRequest build_job(const std::string& program, const taskset::Task& task,
                              const langconfig::LanguageConfig& config, const VerifyLimits& limits);

/// Verifies one candidate on a container of `pool` registered under
/// config.name. Never throws for candidate behaviour; pool failures
/// (SpawnTimeout, PoolStopped) propagate.
Verdict verify_candidate(sandbox::ContainerPool& pool, const Candidate& candidate,
                         const taskset::Task& task, const langconfig::LanguageConfig& config,
                         const VerifyLimits& limits = {});

/// Verifies a group concurrently, at most pool capacity at a time. Verdicts
/// come back in candidate order.
std::vector<Verdict> verify_group(sandbox::ContainerPool& pool,
                                  const std::vector<Candidate>& candidates,
                                  const taskset::Task& task,
                                  const langconfig::LanguageConfig& config,
                                  const VerifyLimits& limits = {});

nlohmann::json verdict_to_json(const Verdict& verdict);
Verdict verdict_from_json(const nlohmann::json& j);
nlohmann::json candidate_to_json(const Candidate& candidate);
Candidate candidate_from_json(const nlohmann::json& j);

}  // namespace polyverify::verifier
