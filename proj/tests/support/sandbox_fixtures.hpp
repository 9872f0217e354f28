#pragma once

// Helpers shared by the tests that need real containers.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>

#include "paths.hpp"
#include "polyverify/harness/job.hpp"
#include "polyverify/langconfig.hpp"
#include "polyverify/sandbox.hpp"

namespace fixtures {

inline std::filesystem::path unique_state_dir(const std::string& stem) {
  static std::atomic<int> counter{0};
  return std::filesystem::path("/dev/shm") /
         (stem + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
}

struct StateDir {
  std::filesystem::path path;
  explicit StateDir(const std::string& stem = "pv-test") : path(unique_state_dir(stem)) {
    std::filesystem::create_directories(path);
    std::filesystem::permissions(path, std::filesystem::perms::owner_all |
                                           std::filesystem::perms::group_read |
                                           std::filesystem::perms::group_exec |
                                           std::filesystem::perms::others_read |
                                           std::filesystem::perms::others_exec);
  }
  ~StateDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline std::shared_ptr<polyverify::sandbox::ProcessDriver> process_driver(
    const std::filesystem::path& state_dir, bool run_build_steps = false) {
  polyverify::sandbox::ProcessDriverOptions o;
  o.agent_path = test_paths::agent();
  o.state_dir = state_dir;
  o.run_build_steps = run_build_steps;
  return std::make_shared<polyverify::sandbox::ProcessDriver>(o);
}

inline polyverify::langconfig::LanguageConfig sh_config() {
  polyverify::langconfig::LanguageConfig c;
  c.name = "sh";
  c.filename = "main.sh";
  c.execute = "sh main.sh";
  return c;
}

inline polyverify::harness::JobRequest sh_job(std::string program, std::string expected = "ok\n") {
  polyverify::harness::JobRequest job;
  job.program = std::move(program);
  job.filename = "main.sh";
  job.execute = "sh main.sh";
  job.tests = {{"", std::move(expected)}};
  job.test_timeout = std::chrono::seconds(5);
  return job;
}

}  // namespace fixtures
