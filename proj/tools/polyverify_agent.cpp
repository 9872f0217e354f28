// In-container harness agent: serves job frames on stdin/stdout.

#include <unistd.h>

#include <CLI11.hpp>

#include "polyverify/harness/agent.hpp"

extern char** environ;

int main(int argc, char** argv) {
  CLI::App app{"polyverify sandbox agent"};
  std::string workdir = "/sandbox";
  std::uint64_t rlimit_as = 0;
  std::uint64_t rlimit_nproc = 0;
  std::uint64_t rlimit_fsize = 0;
  std::optional<unsigned> uid;
  std::optional<unsigned> gid;
  long heartbeat_ms = polyverify::harness::kHeartbeatInterval.count();
  long kill_grace_ms = polyverify::harness::kKillGrace.count();
  app.add_option("--workdir", workdir, "Directory candidate programs run in");
  app.add_option("--rlimit-as", rlimit_as, "Address-space limit for candidate processes (bytes)");
  app.add_option("--rlimit-nproc", rlimit_nproc, "Process limit for candidate processes");
  app.add_option("--rlimit-fsize", rlimit_fsize, "Largest file a candidate may write (bytes)");
  app.add_option("--uid", uid, "Run candidates as this uid (needs root)");
  app.add_option("--gid", gid, "Run candidates as this gid (needs root)");
  app.add_option("--heartbeat-ms", heartbeat_ms, "Idle heartbeat interval")->check(CLI::PositiveNumber);
  app.add_option("--kill-grace-ms", kill_grace_ms, "SIGTERM to SIGKILL grace period")
      ->check(CLI::NonNegativeNumber);
  CLI11_PARSE(app, argc, argv);

  polyverify::harness::AgentOptions options;
  options.executor.workdir = workdir;
  options.executor.limits.address_space_bytes = rlimit_as;
  options.executor.limits.max_processes = rlimit_nproc;
  options.executor.limits.file_size_bytes = rlimit_fsize;
  if (::geteuid() == 0) {
    options.executor.limits.uid = uid;
    options.executor.limits.gid = gid;
  }
  options.executor.kill_grace = polyverify::harness::Millis(kill_grace_ms);
  for (char** e = environ; *e != nullptr; ++e) options.executor.env.emplace_back(*e);
  options.heartbeat_interval = polyverify::harness::Millis(heartbeat_ms);
  return polyverify::harness::run_agent_loop(STDIN_FILENO, STDOUT_FILENO, options);
}
