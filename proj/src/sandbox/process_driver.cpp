#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cctype>
#include <chrono>
#include <fstream>
#include <map>
#include <mutex>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "polyverify/harness/executor.hpp"
#include "polyverify/sandbox.hpp"
#include "spawn.hpp"

namespace fs = std::filesystem;

namespace polyverify::sandbox {

namespace {

constexpr std::string_view kDefaultPath =
    "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

std::string tag_directory_name(const std::string& tag) {
  std::string out;
  for (char c : tag) {
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  }
  return out;
}

std::string unquote(std::string value) {
  if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') &&
      value.back() == value.front()) {
    return value.substr(1, value.size() - 2);
  }
  return value;
}

// Expands $NAME and ${NAME} against the variables defined so far.
std::string expand(const std::string& value, const std::map<std::string, std::string>& env) {
  std::string out;
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (value[i] != '$' || i + 1 == value.size()) {
      out += value[i];
      continue;
    }
    std::size_t start = i + 1;
    std::size_t end = start;
    bool braced = value[start] == '{';
    if (braced) {
      end = value.find('}', start);
      if (end == std::string::npos) {
        out += value.substr(i);
        break;
      }
      auto name = value.substr(start + 1, end - start - 1);
      auto it = env.find(name);
      if (it != env.end()) out += it->second;
      i = end;
      continue;
    }
    while (end < value.size() &&
           (std::isalnum(static_cast<unsigned char>(value[end])) || value[end] == '_')) {
      ++end;
    }
    if (end == start) {
      out += '$';
      continue;
    }
    auto it = env.find(value.substr(start, end - start));
    if (it != env.end()) out += it->second;
    i = end - 1;
  }
  return out;
}

// Applies an ENV directive ("KEY=VALUE ..." or "KEY VALUE").
void apply_env(std::string_view args, std::map<std::string, std::string>& env) {
  std::string rest(args);
  auto first_space = rest.find_first_of(" \t");
  auto first_eq = rest.find('=');
  if (first_eq == std::string::npos || (first_space != std::string::npos && first_space < first_eq)) {
    if (first_space == std::string::npos) return;
    auto key = rest.substr(0, first_space);
    auto value = rest.substr(rest.find_first_not_of(" \t", first_space));
    env[key] = expand(unquote(value), env);
    return;
  }
  std::size_t i = 0;
  while (i < rest.size()) {
    while (i < rest.size() && (rest[i] == ' ' || rest[i] == '\t')) ++i;
    auto eq = rest.find('=', i);
    if (eq == std::string::npos) break;
    auto key = rest.substr(i, eq - i);
    std::string value;
    std::size_t j = eq + 1;
    char quote = 0;
    for (; j < rest.size(); ++j) {
      char c = rest[j];
      if (quote) {
        if (c == quote) {
          quote = 0;
        } else {
          value += c;
        }
      } else if (c == '"' || c == '\'') {
        quote = c;
      } else if (c == ' ' || c == '\t') {
        break;
      } else {
        value += c;
      }
    }
    env[key] = expand(value, env);
    i = j;
  }
}

std::string random_suffix() {
  static std::atomic<std::uint64_t> counter{0};
  std::random_device rd;
  return std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
         std::to_string(rd() % 100000);
}

class ProcessContainer final : public ContainerProcess {
 public:
  ProcessContainer(std::string id, detail::Attached attached, fs::path root, fs::path workdir)
      : id_(std::move(id)), a_(attached), root_(std::move(root)), workdir_(std::move(workdir)) {}
  ~ProcessContainer() override {
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
    ::kill(a_.pid, SIGKILL);
    if (!a_.in_namespaces) ::kill(-a_.pid, SIGKILL);
    while (::waitpid(a_.pid, nullptr, 0) < 0 && errno == EINTR) {
    }
    reaped_ = true;
    std::error_code ec;
    fs::remove_all(root_, ec);
  }

  std::optional<int> host_pid() const override { return a_.pid; }
  std::string ram_disk_path() const override { return workdir_.string(); }

 private:
  std::string id_;
  detail::Attached a_;
  fs::path root_;
  fs::path workdir_;
  std::mutex mu_;
  bool reaped_ = false;
};

}  // namespace

ProcessDriver::ProcessDriver(ProcessDriverOptions options) : options_(std::move(options)) {
  namespaces_ok_ = options_.use_namespaces;
}

fs::path ProcessDriver::image_dir(const std::string& tag) const {
  return options_.state_dir / "images" / tag_directory_name(tag);
}

bool ProcessDriver::image_exists(const std::string& tag) {
  return fs::exists(image_dir(tag) / "manifest.json");
}

void ProcessDriver::build_image(const langconfig::ImageBuildPlan& plan) {
  const fs::path dir = image_dir(plan.tag);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw BuildError("cannot create image directory " + dir.string(), ec.message());
  {
    std::ofstream out(dir / "Containerfile", std::ios::binary | std::ios::trunc);
    out << langconfig::to_containerfile(plan);
  }

  std::map<std::string, std::string> env{{"PATH", std::string(kDefaultPath)},
                                         {"LANG", "C.UTF-8"}};
  nlohmann::json skipped = nlohmann::json::array();
  std::ofstream log(dir / "build.log", std::ios::binary | std::ios::trunc);
  for (const auto& step : plan.build_steps) {
    const auto space = step.find(' ');
    const std::string directive = step.substr(0, space);
    const std::string args = space == std::string::npos ? "" : step.substr(space + 1);
    if (directive == "ENV") {
      apply_env(args, env);
    } else if (directive == "RUN") {
      if (!options_.run_build_steps) {
        skipped.push_back(step);
        continue;
      }
      harness::RunSpec spec;
      spec.command = args;
      spec.timeout = options_.build_step_timeout;
      spec.stdout_cap = 4 * kMiB;
      spec.stderr_cap = 4 * kMiB;
      spec.kill_on_overflow = false;
      spec.workdir = dir;
      for (const auto& [k, v] : env) spec.env.push_back(k + "=" + v);
      auto result = harness::run_process(spec);
      log << "$ " << args << "\n" << result.stdout_data << result.stderr_data;
      if (result.timed_out || result.spawn_failed || result.exit_code.value_or(1) != 0) {
        throw BuildError("build step failed: " + step,
                         detail::tail(result.stdout_data + result.stderr_data, 4096));
      }
    }
    // COPY/WORKDIR/ENTRYPOINT describe the agent layout, which the process
    // driver provides directly.
  }

  nlohmann::json manifest{{"tag", plan.tag},
                          {"base_image", plan.base_image},
                          {"build_steps", plan.build_steps},
                          {"skipped_steps", skipped},
                          {"env", env}};
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << "\n";
  }
  fs::rename(tmp, dir / "manifest.json", ec);
  if (ec) throw BuildError("cannot write image manifest", ec.message());
  if (!skipped.empty()) {
    spdlog::info("image {}: {} RUN step(s) not executed by the process driver", plan.tag,
                 skipped.size());
  }
}

std::unique_ptr<ContainerProcess> ProcessDriver::start(const ContainerSpec& spec) {
  spec.limits.validate();
  const fs::path manifest_path = image_dir(spec.image_tag) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw SandboxError("image " + spec.image_tag + " is not built");
  const auto manifest = nlohmann::json::parse(in);

  if (::access(options_.agent_path.c_str(), X_OK) != 0) {
    throw RuntimeUnavailable("agent binary not found at " + options_.agent_path.string());
  }

  const std::string id = spec.id.empty() ? "pv-" + random_suffix() : spec.id;
  const fs::path root = options_.state_dir / "containers" / id;
  const fs::path workdir = root / "work";
  std::error_code ec;
  fs::create_directories(workdir, ec);
  if (ec) throw SandboxError("cannot create " + workdir.string() + ": " + ec.message());
  fs::permissions(workdir, fs::perms::all, ec);

  detail::SpawnRequest req;
  req.program = options_.agent_path.string();
  req.argv = {"polyverify-agent",
              "--workdir", workdir.string(),
              "--rlimit-as", std::to_string(spec.limits.memory_bytes),
              "--rlimit-nproc", std::to_string(spec.limits.max_processes),
              "--rlimit-fsize", std::to_string(spec.limits.writable_fs_bytes),
              "--heartbeat-ms", std::to_string(options_.heartbeat_interval.count()),
              "--kill-grace-ms", std::to_string(options_.kill_grace.count())};
  if (::geteuid() == 0) {
    req.argv.insert(req.argv.end(), {"--uid", std::to_string(options_.sandbox_uid), "--gid",
                                     std::to_string(options_.sandbox_gid)});
  }
  for (const auto& [k, v] : manifest.at("env").items()) {
    req.env.push_back(k + "=" + v.get<std::string>());
  }
  req.stderr_path = root / "agent.log";
  req.workdir = workdir;
  req.namespaces = options_.use_namespaces && namespaces_ok_.load();
  req.isolate_network = spec.limits.network == Network::disabled;
  req.tmpfs_options = "size=" + std::to_string(spec.limits.writable_fs_bytes) + ",mode=0777";

  detail::Attached attached = detail::spawn_attached(req);
  if (req.namespaces && !attached.in_namespaces) {
    spdlog::warn("namespaces unavailable; process sandbox runs without them");
    namespaces_ok_ = false;
  }
  return std::make_unique<ProcessContainer>(id, attached, root, workdir);
}

}  // namespace polyverify::sandbox
