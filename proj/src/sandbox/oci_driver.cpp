#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <mutex>
#include <random>

#include "polyverify/harness/executor.hpp"
#include "polyverify/sandbox.hpp"
#include "spawn.hpp"

namespace fs = std::filesystem;

namespace polyverify::sandbox {

namespace {

std::string join_command(const std::vector<std::string>& argv) {
  std::string out;
  for (const auto& a : argv) {
    if (!out.empty()) out += ' ';
    out += shell_quote(a);
  }
  return out;
}

// Variables the runtime CLI needs to find its daemon. FAKE_OCI_STATE is
// for the fake runtime used in tests.
std::vector<std::string> cli_env() {
  std::vector<std::string> env;
  for (const char* name :
       {"PATH", "HOME", "DOCKER_HOST", "CONTAINER_HOST", "XDG_RUNTIME_DIR", "FAKE_OCI_STATE"}) {
    if (const char* v = std::getenv(name)) env.push_back(std::string(name) + "=" + v);
  }
  return env;
}

std::string format_cpus(double cores) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", cores);
  return buf;
}

class OciContainer final : public ContainerProcess {
 public:
  OciContainer(std::string id, detail::Attached attached, std::string runtime, Millis command_timeout)
      : id_(std::move(id)), a_(attached), runtime_(std::move(runtime)), timeout_(command_timeout) {}
  ~OciContainer() override {
    kill();
    // Closed only here: another thread may still be polling them.
    ::close(a_.to_child);
    ::close(a_.from_child);
  }

  const std::string& id() const override { return id_; }
  int input_fd() const override { return a_.to_child; }
  int output_fd() const override { return a_.from_child; }

  bool alive() override {
    std::lock_guard lock(mu_);
    if (reaped_) return false;
    siginfo_t info{};
    if (::waitid(P_PID, static_cast<id_t>(a_.pid), &info, WEXITED | WNOHANG | WNOWAIT) != 0) {
      return false;
    }
    return info.si_pid == 0;
  }

  void kill() override {
    std::lock_guard lock(mu_);
    if (reaped_) return;
    harness::RunSpec spec;
    spec.timeout = timeout_;
    spec.env = cli_env();
    spec.command = join_command({runtime_, "kill", id_}) + " >/dev/null 2>&1; " +
                   join_command({runtime_, "rm", "-f", id_}) + " >/dev/null 2>&1";
    harness::run_process(spec);
    ::kill(a_.pid, SIGKILL);
    while (::waitpid(a_.pid, nullptr, 0) < 0 && errno == EINTR) {
    }
    reaped_ = true;
  }

  std::optional<int> host_pid() const override { return a_.pid; }
  std::string ram_disk_path() const override { return std::string(langconfig::kWorkdir); }

 private:
  std::string id_;
  detail::Attached a_;
  std::string runtime_;
  Millis timeout_;
  std::mutex mu_;
  bool reaped_ = false;
};

}  // namespace

OciDriver::OciDriver(OciDriverOptions options) : options_(std::move(options)) {}

namespace {

harness::RunResult run_cli(const std::string& command, Millis timeout, std::size_t cap) {
  harness::RunSpec spec;
  spec.command = command;
  spec.timeout = timeout;
  spec.stdout_cap = cap;
  spec.stderr_cap = cap;
  spec.kill_on_overflow = false;
  spec.env = cli_env();
  return harness::run_process(spec);
}

}  // namespace

bool OciDriver::image_exists(const std::string& tag) {
  if (detail::find_executable(options_.runtime).empty()) {
    throw RuntimeUnavailable("container runtime '" + options_.runtime + "' not found");
  }
  auto r = run_cli(join_command({options_.runtime, "image", "inspect", tag}) + " >/dev/null 2>&1",
                   options_.command_timeout, 4096);
  if (r.exit_code == 127) {
    throw RuntimeUnavailable("container runtime '" + options_.runtime + "' not found");
  }
  return r.exit_code == 0;
}

void OciDriver::build_image(const langconfig::ImageBuildPlan& plan) {
  if (detail::find_executable(options_.runtime).empty()) {
    throw RuntimeUnavailable("container runtime '" + options_.runtime + "' not found");
  }
  std::random_device rd;
  const fs::path ctx = options_.build_root / ("polyverify-build-" + std::to_string(::getpid()) + "-" +
                                              std::to_string(rd()));
  std::error_code ec;
  fs::create_directories(ctx, ec);
  if (ec) throw BuildError("cannot create build context " + ctx.string(), ec.message());
  struct Cleanup {
    fs::path dir;
    ~Cleanup() {
      std::error_code ignored;
      fs::remove_all(dir, ignored);
    }
  } cleanup{ctx};

  {
    std::ofstream out(ctx / "Containerfile", std::ios::binary | std::ios::trunc);
    out << langconfig::to_containerfile(plan);
  }
  fs::copy_file(options_.agent_path, ctx / "polyverify-agent", fs::copy_options::overwrite_existing, ec);
  if (ec) throw BuildError("cannot stage agent binary " + options_.agent_path.string(), ec.message());

  auto r = run_cli(join_command({options_.runtime, "build", "-t", plan.tag, "-f",
                                 (ctx / "Containerfile").string(), ctx.string()}),
                   options_.build_timeout, 8 * kMiB);
  if (r.exit_code == 127) {
    throw RuntimeUnavailable("container runtime '" + options_.runtime + "' not found");
  }
  if (r.timed_out || r.exit_code.value_or(1) != 0) {
    throw BuildError("image build failed for " + plan.tag,
                     detail::tail(r.stdout_data + r.stderr_data, 4096));
  }
}

std::vector<std::string> OciDriver::run_arguments(const ContainerSpec& spec) const {
  const auto& l = spec.limits;
  std::vector<std::string> args = {
      options_.runtime, "run", "-i", "--rm", "--name", spec.id,
      "--network", l.network == Network::disabled ? "none" : "bridge",
      "--cpus", format_cpus(l.cpu_cores),
      "--memory", std::to_string(l.memory_bytes),
      "--memory-swap", std::to_string(l.memory_bytes),
      "--pids-limit", std::to_string(l.max_processes),
      "--tmpfs", std::string(langconfig::kWorkdir) + ":rw,exec,size=" +
                     std::to_string(l.writable_fs_bytes) + ",mode=0777",
      "--cap-drop", "ALL",
      "--cap-add", "SETUID", "--cap-add", "SETGID", "--cap-add", "KILL",
      "--cap-add", "DAC_OVERRIDE", "--cap-add", "FOWNER",
      "--security-opt", "no-new-privileges",
      "--label", "polyverify.language=" + spec.language};
  args.insert(args.end(), options_.extra_run_args.begin(), options_.extra_run_args.end());
  args.push_back(spec.image_tag);
  // Arguments after the image go to the agent entrypoint.
  args.insert(args.end(), {"--workdir", std::string(langconfig::kWorkdir), "--uid", "65534", "--gid",
                           "65534", "--heartbeat-ms",
                           std::to_string(options_.heartbeat_interval.count())});
  return args;
}

std::unique_ptr<ContainerProcess> OciDriver::start(const ContainerSpec& spec) {
  spec.limits.validate();
  const std::string program = detail::find_executable(options_.runtime);
  if (program.empty()) {
    throw RuntimeUnavailable("container runtime '" + options_.runtime + "' not found");
  }
  ContainerSpec named = spec;
  if (named.id.empty()) {
    std::random_device rd;
    named.id = "pv-" + std::to_string(::getpid()) + "-" + std::to_string(rd());
  }
  detail::SpawnRequest req;
  req.program = program;
  req.argv = run_arguments(named);
  req.env = cli_env();
  auto attached = detail::spawn_attached(req);
  return std::make_unique<OciContainer>(named.id, attached, options_.runtime, options_.command_timeout);
}

}  // namespace polyverify::sandbox
