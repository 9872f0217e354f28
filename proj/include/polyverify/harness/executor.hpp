#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "polyverify/harness/job.hpp"

namespace polyverify::harness {

// Limits applied to every process the executor starts (compile and tests).
// Zero means "leave the inherited limit alone".
struct ProcessLimits {
  std::uint64_t address_space_bytes = 0;
  std::uint64_t max_processes = 0;
  std::uint64_t file_size_bytes = 0;
  std::optional<unsigned> uid;
  std::optional<unsigned> gid;
};

struct RunSpec {
  std::string command;  // run as /bin/sh -c <command>
  std::string stdin_data;
  Millis timeout{30'000};
  std::size_t stdout_cap = kDefaultOutputCap;
  std::size_t stderr_cap = kLogExcerptBytes;
  // Kill the process group as soon as stdout exceeds its cap. Otherwise
  // extra output is discarded and the process keeps running.
  bool kill_on_overflow = true;
  Millis kill_grace = kKillGrace;
  std::filesystem::path workdir;
  std::vector<std::string> env;  // KEY=VALUE
  ProcessLimits limits;
};

struct RunResult {
  std::string stdout_data;  // at most stdout_cap bytes
  std::string stderr_data;  // at most stderr_cap bytes
  bool timed_out = false;
  bool overflowed = false;
  std::optional<int> exit_code;
  std::optional<int> signal;
  Millis wall_time{0};
  bool spawn_failed = false;
};

/// Runs one command in its own process group, feeding stdin and capturing
/// stdout/stderr concurrently with bounded buffers. On timeout the group gets
/// SIGTERM and, after `kill_grace`, SIGKILL. Stragglers left in the group
/// after the main process exits are killed.
RunResult run_process(const RunSpec& spec);

struct ExecutorOptions {
  std::filesystem::path workdir;
  ProcessLimits limits;
  Millis kill_grace = kKillGrace;
  // Extra environment for candidate processes; HOME and TMPDIR always point
  // at the working directory.
  std::vector<std::string> env;
};

/// Removes everything inside `dir` (but not `dir` itself).
void wipe_directory(const std::filesystem::path& dir);

/// Executes a job in `options.workdir`: writes the program, compiles it if
/// needed, then runs every test. The working directory is wiped before and
/// after the job.
JobReport execute_job(const JobRequest& job, const ExecutorOptions& options);

}  // namespace polyverify::harness
