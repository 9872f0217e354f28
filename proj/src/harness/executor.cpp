#include "polyverify/harness/executor.hpp"

#include <fcntl.h>
#include <grp.h>
#include <poll.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <fstream>

#include "polyverify/harness/frame.hpp"
#include "polyverify/text.hpp"

namespace polyverify::harness {

using Clock = std::chrono::steady_clock;

namespace {

constexpr std::string_view kDefaultPath =
    "PATH=/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

struct Pipe {
  int read = -1;
  int write = -1;
};

Pipe make_pipe() {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0) return {};
  return {fds[0], fds[1]};
}

void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

void set_nonblocking(int fd) {
  int flags = ::fcntl(fd, F_GETFL);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

int open_pidfd(pid_t pid) {
#ifdef SYS_pidfd_open
  return static_cast<int>(::syscall(SYS_pidfd_open, pid, 0));
#else
  (void)pid;
  return -1;
#endif
}

void apply_limit(int resource, std::uint64_t value) {
  if (value == 0) return;
  rlimit rl{static_cast<rlim_t>(value), static_cast<rlim_t>(value)};
  ::setrlimit(resource, &rl);
}

// Everything below runs in the forked child: async-signal-safe calls only.
[[noreturn]] void exec_child(const RunSpec& spec, int in_fd, int out_fd, int err_fd,
                             char* const argv[], char* const envp[]) {
  ::setpgid(0, 0);
  sigset_t none;
  sigemptyset(&none);
  ::sigprocmask(SIG_SETMASK, &none, nullptr);
  for (int sig : {SIGPIPE, SIGINT, SIGTERM, SIGQUIT, SIGHUP, SIGCHLD}) {
    ::signal(sig, SIG_DFL);
  }
  ::dup2(in_fd, 0);
  ::dup2(out_fd, 1);
  ::dup2(err_fd, 2);
  ::close_range(3, ~0U, 0);
  if (!spec.workdir.empty() && ::chdir(spec.workdir.c_str()) != 0) ::_exit(126);
  apply_limit(RLIMIT_AS, spec.limits.address_space_bytes);
  apply_limit(RLIMIT_NPROC, spec.limits.max_processes);
  apply_limit(RLIMIT_FSIZE, spec.limits.file_size_bytes);
  apply_limit(RLIMIT_CORE, 0);
  if (spec.limits.gid) {
    ::setgroups(0, nullptr);
    if (::setgid(*spec.limits.gid) != 0) ::_exit(126);
  }
  if (spec.limits.uid && ::setuid(*spec.limits.uid) != 0) ::_exit(126);
  ::execve("/bin/sh", argv, envp);
  ::_exit(127);
}

std::string log_excerpt(const std::string& a, const std::string& b) {
  std::string merged = a;
  if (!merged.empty() && !b.empty() && merged.back() != '\n') merged += '\n';
  merged += b;
  return sanitize_utf8(utf8_prefix(merged, kLogExcerptBytes));
}

std::vector<std::string> child_env(const ExecutorOptions& options) {
  std::vector<std::string> env;
  bool has_path = false;
  for (const auto& kv : options.env) {
    if (kv.starts_with("HOME=") || kv.starts_with("TMPDIR=")) continue;
    has_path = has_path || kv.starts_with("PATH=");
    env.push_back(kv);
  }
  if (!has_path) env.emplace_back(kDefaultPath);
  env.push_back("HOME=" + options.workdir.string());
  env.push_back("TMPDIR=" + options.workdir.string());
  return env;
}

}  // namespace

RunResult run_process(const RunSpec& spec) {
  ignore_sigpipe();
  RunResult result;
  const auto start = Clock::now();

  // argv/envp are built before fork; the child must not allocate.
  std::string sh = "sh";
  std::string dash_c = "-c";
  std::string command = spec.command;
  std::array<char*, 4> argv{sh.data(), dash_c.data(), command.data(), nullptr};
  std::vector<std::string> env_storage = spec.env;
  std::vector<char*> envp;
  for (auto& kv : env_storage) envp.push_back(kv.data());
  envp.push_back(nullptr);

  Pipe in = make_pipe(), out = make_pipe(), err = make_pipe();
  if (in.read < 0 || out.read < 0 || err.read < 0) {
    for (int* fd : {&in.read, &in.write, &out.read, &out.write, &err.read, &err.write}) {
      close_fd(*fd);
    }
    result.spawn_failed = true;
    return result;
  }

  pid_t pid = ::fork();
  if (pid < 0) {
    for (int* fd : {&in.read, &in.write, &out.read, &out.write, &err.read, &err.write}) {
      close_fd(*fd);
    }
    result.spawn_failed = true;
    return result;
  }
  if (pid == 0) exec_child(spec, in.read, out.write, err.write, argv.data(), envp.data());

  // Both sides race to put the child in its own group so that killing
  // -pid is valid immediately.
  ::setpgid(pid, pid);
  close_fd(in.read);
  close_fd(out.write);
  close_fd(err.write);
  set_nonblocking(in.write);
  set_nonblocking(out.read);
  set_nonblocking(err.read);

  int pidfd = open_pidfd(pid);
  std::size_t stdin_offset = 0;
  if (spec.stdin_data.empty()) close_fd(in.write);

  const auto deadline = start + spec.timeout;
  std::optional<Clock::time_point> hard_kill_at;
  std::optional<Clock::time_point> drain_until;
  bool exited = false;
  int wait_status = 0;
  std::array<char, 64 * 1024> chunk{};

  auto kill_group = [&](int sig) { ::kill(-pid, sig); };

  auto consume = [&](int& fd, std::string& sink, std::size_t cap, bool is_stdout) {
    while (true) {
      ssize_t n = ::read(fd, chunk.data(), chunk.size());
      if (n > 0) {
        const auto room = cap > sink.size() ? cap - sink.size() : 0;
        const auto take = std::min<std::size_t>(room, static_cast<std::size_t>(n));
        sink.append(chunk.data(), take);
        if (take < static_cast<std::size_t>(n) && is_stdout && !result.overflowed) {
          result.overflowed = true;
          if (spec.kill_on_overflow) kill_group(SIGKILL);
        }
        continue;
      }
      if (n == 0) close_fd(fd);
      else if (errno != EAGAIN && errno != EINTR) close_fd(fd);
      return;
    }
  };

  while (true) {
    const auto now = Clock::now();
    if (exited && out.read < 0 && err.read < 0) break;
    if (exited && !drain_until) {
      close_fd(in.write);
      drain_until = now + std::chrono::milliseconds(500);
    }
    if (drain_until && now >= *drain_until) break;
    if (!exited && !result.timed_out && now >= deadline) {
      result.timed_out = true;
      kill_group(SIGTERM);
      hard_kill_at = now + spec.kill_grace;
    }
    if (!exited && hard_kill_at && now >= *hard_kill_at) {
      kill_group(SIGKILL);
      hard_kill_at.reset();
    }

    std::array<pollfd, 4> fds{};
    nfds_t nfds = 0;
    int idx_in = -1, idx_out = -1, idx_err = -1, idx_pid = -1;
    if (in.write >= 0) { idx_in = nfds; fds[nfds++] = {in.write, POLLOUT, 0}; }
    if (out.read >= 0) { idx_out = nfds; fds[nfds++] = {out.read, POLLIN, 0}; }
    if (err.read >= 0) { idx_err = nfds; fds[nfds++] = {err.read, POLLIN, 0}; }
    if (!exited && pidfd >= 0) { idx_pid = nfds; fds[nfds++] = {pidfd, POLLIN, 0}; }

    auto next = now + std::chrono::milliseconds(pidfd < 0 && !exited ? 10 : 100);
    if (!result.timed_out) next = std::min(next, deadline);
    if (hard_kill_at) next = std::min(next, *hard_kill_at);
    if (drain_until) next = std::min(next, *drain_until);
    auto wait_ms = std::max<long long>(
        0, std::chrono::duration_cast<std::chrono::milliseconds>(next - now).count());
    int rc = ::poll(fds.data(), nfds, static_cast<int>(wait_ms));
    if (rc < 0 && errno != EINTR) break;

    if (rc > 0) {
      if (idx_in >= 0 && fds[idx_in].revents != 0) {
        if (fds[idx_in].revents & (POLLERR | POLLHUP)) {
          close_fd(in.write);
        } else {
          std::string_view rest(spec.stdin_data);
          rest.remove_prefix(stdin_offset);
          ssize_t n = ::write(in.write, rest.data(), std::min<std::size_t>(rest.size(), 64 * 1024));
          if (n > 0) stdin_offset += static_cast<std::size_t>(n);
          else if (n < 0 && errno != EAGAIN && errno != EINTR) close_fd(in.write);
          if (stdin_offset >= spec.stdin_data.size()) close_fd(in.write);
        }
      }
      if (idx_out >= 0 && fds[idx_out].revents != 0) consume(out.read, result.stdout_data, spec.stdout_cap, true);
      if (idx_err >= 0 && fds[idx_err].revents != 0) consume(err.read, result.stderr_data, spec.stderr_cap, false);
    }
    if (!exited && (pidfd < 0 || (idx_pid >= 0 && rc > 0 && fds[idx_pid].revents != 0))) {
      siginfo_t info{};
      if (::waitid(P_PID, pid, &info, WEXITED | WNOHANG | WNOWAIT) == 0 &&
          info.si_pid == pid) {
        // Kill leftovers while the group id still cannot be recycled.
        kill_group(SIGKILL);
        ::waitpid(pid, &wait_status, 0);
        exited = true;
      }
    }
  }

  if (!exited) {
    kill_group(SIGKILL);
    ::waitpid(pid, &wait_status, 0);
  }
  for (int* fd : {&in.write, &out.read, &err.read, &pidfd}) close_fd(*fd);

  if (WIFEXITED(wait_status)) {
    result.exit_code = WEXITSTATUS(wait_status);
  } else if (WIFSIGNALED(wait_status)) {
    result.signal = WTERMSIG(wait_status);
  }
  result.wall_time = std::chrono::duration_cast<Millis>(Clock::now() - start);
  return result;
}

void wipe_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  for (auto it = std::filesystem::directory_iterator(dir, ec);
       !ec && it != std::filesystem::directory_iterator(); it.increment(ec)) {
    std::error_code ignored;
    std::filesystem::remove_all(it->path(), ignored);
  }
}

JobReport execute_job(const JobRequest& job, const ExecutorOptions& options) {
  JobReport report;
  wipe_directory(options.workdir);

  const auto program_path = options.workdir / job.filename;
  {
    std::error_code ec;
    std::filesystem::create_directories(program_path.parent_path(), ec);
    std::ofstream out(program_path, std::ios::binary | std::ios::trunc);
    out << job.program;
  }
  std::filesystem::permissions(program_path, std::filesystem::perms(0755),
                               std::filesystem::perm_options::replace);

  RunSpec base;
  base.workdir = options.workdir;
  base.env = child_env(options);
  base.limits = options.limits;
  base.kill_grace = options.kill_grace;

  if (job.compile) {
    RunSpec spec = base;
    spec.command = *job.compile;
    spec.timeout = job.compile_timeout;
    spec.stdout_cap = kLogExcerptBytes;
    spec.kill_on_overflow = false;
    RunResult r = run_process(spec);
    report.compile_log_prefix = log_excerpt(r.stderr_data, r.stdout_data);
    if (r.timed_out) {
      report.compile_status = CompileStatus::compile_timeout;
    } else if (r.spawn_failed || r.exit_code != 0) {
      report.compile_status = CompileStatus::compile_error;
    } else {
      report.compile_status = CompileStatus::ok;
    }
    if (report.compile_status != CompileStatus::ok) {
      wipe_directory(options.workdir);
      return report;
    }
  }

  bool failed = false;
  for (std::size_t i = 0; i < job.tests.size(); ++i) {
    TestOutcome outcome;
    outcome.index = static_cast<int>(i);
    if (failed && job.fail_fast) {
      outcome.status = TestStatus::wrong_output;
      outcome.skipped = true;
      report.outcomes.push_back(std::move(outcome));
      continue;
    }
    RunSpec spec = base;
    spec.command = job.execute;
    spec.stdin_data = job.tests[i].input;
    spec.timeout = job.test_timeout;
    spec.stdout_cap = job.output_cap_bytes;
    spec.stderr_cap = std::min(job.output_cap_bytes, kLogExcerptBytes);
    RunResult r = run_process(spec);

    outcome.exit_code = r.exit_code;
    outcome.signal = r.signal;
    outcome.wall_time = r.wall_time;
    if (r.overflowed) {
      outcome.status = TestStatus::output_overflow;
    } else if (r.timed_out) {
      outcome.status = TestStatus::timeout;
    } else if (r.spawn_failed || r.exit_code != 0) {
      outcome.status = TestStatus::runtime_error;
    } else if (normalize_output(r.stdout_data) == normalize_output(job.tests[i].output)) {
      outcome.status = TestStatus::passed;
    } else {
      outcome.status = TestStatus::wrong_output;
    }
    // A passing output is kept whole so the host can re-compare it byte for
    // byte; anything else only needs an excerpt for diagnostics.
    outcome.stdout_prefix = outcome.status == TestStatus::passed
                                ? sanitize_utf8(r.stdout_data)
                                : sanitize_utf8(utf8_prefix(r.stdout_data, kLogExcerptBytes));
    outcome.stderr_prefix = sanitize_utf8(utf8_prefix(r.stderr_data, kLogExcerptBytes));
    failed = failed || outcome.status != TestStatus::passed;
    report.outcomes.push_back(std::move(outcome));
  }

  wipe_directory(options.workdir);
  return report;
}

}  // namespace polyverify::harness
