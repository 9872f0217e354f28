#pragma once

#include <chrono>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyverify/taskset.hpp"

namespace polyverify::harness {

using Millis = std::chrono::milliseconds;

inline constexpr std::size_t kDefaultOutputCap = 5'242'880;
inline constexpr std::size_t kMinOutputCap = 1024;
// Compile logs and stderr are diagnostics only; keep a bounded excerpt.
inline constexpr std::size_t kLogExcerptBytes = 64 * 1024;
inline constexpr Millis kDefaultCompileTimeout{60'000};
inline constexpr Millis kDefaultTestTimeout{30'000};
inline constexpr Millis kKillGrace{2'000};
inline constexpr Millis kHeartbeatInterval{5'000};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JobRequest {
  std::string program;
  std::string filename;
  std::optional<std::string> compile;
  std::string execute;
  std::vector<taskset::IoExample> tests;
  Millis compile_timeout = kDefaultCompileTimeout;
  Millis test_timeout = kDefaultTestTimeout;
  std::size_t output_cap_bytes = kDefaultOutputCap;
  bool fail_fast = true;

  // Throws ProtocolError when an invariant is violated.
  void validate() const;
  bool operator==(const JobRequest&) const = default;
};

enum class TestStatus { passed, wrong_output, runtime_error, timeout, output_overflow };
enum class CompileStatus { ok, compile_error, compile_timeout, not_applicable };

struct TestOutcome {
  int index = 0;
  TestStatus status = TestStatus::wrong_output;
  std::optional<int> exit_code;
  // Set when the process was ended by a signal.
  std::optional<int> signal;
  std::string stdout_prefix;
  std::string stderr_prefix;
  Millis wall_time{0};
  // Not executed because an earlier test failed under fail_fast.
  bool skipped = false;

  bool operator==(const TestOutcome&) const = default;
};

struct JobReport {
  CompileStatus compile_status = CompileStatus::not_applicable;
  std::string compile_log_prefix;
  std::vector<TestOutcome> outcomes;
  bool container_crashed = false;

  bool all_passed() const;
  bool operator==(const JobReport&) const = default;
};

std::string_view to_string(TestStatus s);
std::string_view to_string(CompileStatus s);
TestStatus test_status_from_string(std::string_view s);
CompileStatus compile_status_from_string(std::string_view s);

// Wire encodings (job / report frames).
nlohmann::json job_to_json(const JobRequest& job);
JobRequest job_from_json(const nlohmann::json& frame);
nlohmann::json report_to_json(const JobReport& report);
JobReport report_from_json(const nlohmann::json& frame);
nlohmann::json outcome_to_json(const TestOutcome& outcome);

}  // namespace polyverify::harness
