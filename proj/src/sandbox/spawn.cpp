#include "spawn.hpp"

#include <fcntl.h>
#include <sched.h>
#include <signal.h>
#include <sys/mount.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>

#include "polyverify/sandbox.hpp"

namespace polyverify::sandbox::detail {

namespace {

std::vector<char*> c_strings(const std::vector<std::string>& items) {
  std::vector<char*> out;
  out.reserve(items.size() + 1);
  for (const auto& s : items) out.push_back(const_cast<char*>(s.c_str()));
  out.push_back(nullptr);
  return out;
}

struct ChildPlan {
  const char* program;
  char* const* argv;
  char* const* envp;
  int stdin_fd;
  int stdout_fd;
  int stderr_fd;
  const char* workdir;
  bool new_session;
  bool private_mounts;
  const char* tmpfs_options;
};

// Runs between clone/fork and exec; async-signal-safe calls only.
[[noreturn]] void child_main(const ChildPlan& p) {
  ::dup2(p.stdin_fd, 0);
  ::dup2(p.stdout_fd, 1);
  ::dup2(p.stderr_fd, 2);
  ::close_range(3, ~0U, 0);
  sigset_t none;
  sigemptyset(&none);
  ::sigprocmask(SIG_SETMASK, &none, nullptr);
  ::signal(SIGPIPE, SIG_DFL);
  if (p.new_session) ::setsid();
  if (p.private_mounts) {
    ::mount(nullptr, "/", nullptr, MS_REC | MS_PRIVATE, nullptr);
    if (p.tmpfs_options != nullptr && p.workdir != nullptr) {
      ::mount("tmpfs", p.workdir, "tmpfs", MS_NOSUID | MS_NODEV, p.tmpfs_options);
    }
    // A fresh /proc so the agent and its children only see their own pid
    // namespace.
    ::mount("proc", "/proc", "proc", MS_NOSUID | MS_NODEV | MS_NOEXEC, nullptr);
  }
  if (p.workdir != nullptr && ::chdir(p.workdir) != 0) ::_exit(126);
  ::execve(p.program, p.argv, p.envp);
  ::_exit(127);
}

}  // namespace

std::string find_executable(const std::string& name) {
  if (name.find('/') != std::string::npos) {
    return ::access(name.c_str(), X_OK) == 0 ? name : std::string();
  }
  const char* path = std::getenv("PATH");
  std::string dirs = path ? path : "/usr/local/bin:/usr/bin:/bin";
  std::size_t start = 0;
  while (start <= dirs.size()) {
    auto end = dirs.find(':', start);
    if (end == std::string::npos) end = dirs.size();
    std::string dir = dirs.substr(start, end - start);
    if (dir.empty()) dir = ".";
    std::string candidate = dir + "/" + name;
    if (::access(candidate.c_str(), X_OK) == 0) return candidate;
    start = end + 1;
  }
  return {};
}

std::string tail(const std::string& text, std::size_t max) {
  return text.size() <= max ? text : text.substr(text.size() - max);
}

Attached spawn_attached(const SpawnRequest& request) {
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw SandboxError("pipe: " + std::string(std::strerror(errno)));
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw SandboxError("pipe: " + std::string(std::strerror(errno)));
  }
  const std::string err_path =
      request.stderr_path.empty() ? std::string("/dev/null") : request.stderr_path.string();
  int err_fd = ::open(err_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (err_fd < 0) err_fd = ::open("/dev/null", O_WRONLY | O_CLOEXEC);

  auto argv = c_strings(request.argv);
  auto envp = c_strings(request.env);
  const std::string workdir = request.workdir.string();
  const std::string tmpfs = request.tmpfs_options.value_or("");

  ChildPlan plan{request.program.c_str(),
                 argv.data(),
                 envp.data(),
                 in_pipe[0],
                 out_pipe[1],
                 err_fd,
                 workdir.empty() ? nullptr : workdir.c_str(),
                 request.new_session,
                 false,
                 request.tmpfs_options ? tmpfs.c_str() : nullptr};

  Attached attached;
  pid_t pid = -1;
  if (request.namespaces) {
    unsigned long flags = CLONE_NEWNS | CLONE_NEWPID | SIGCHLD;
    if (request.isolate_network) flags |= CLONE_NEWNET;
    plan.private_mounts = true;
    pid = static_cast<pid_t>(::syscall(SYS_clone, flags, nullptr, nullptr, nullptr, nullptr));
    if (pid == 0) child_main(plan);
    if (pid > 0) attached.in_namespaces = true;
  }
  if (pid < 0) {
    plan.private_mounts = false;
    pid = ::fork();
    if (pid == 0) child_main(plan);
  }
  const int spawn_errno = errno;
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  if (err_fd >= 0) ::close(err_fd);
  if (pid < 0) {
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    throw SandboxError("cannot start process: " + std::string(std::strerror(spawn_errno)));
  }
  attached.pid = pid;
  attached.to_child = in_pipe[1];
  attached.from_child = out_pipe[0];
  return attached;
}

}  // namespace polyverify::sandbox::detail
