#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "polyverify/harness/frame.hpp"
#include "polyverify/harness/job.hpp"
#include "polyverify/langconfig.hpp"

namespace polyverify::sandbox {

using Millis = std::chrono::milliseconds;

inline constexpr std::uint64_t kMiB = 1024ull * 1024ull;
inline constexpr std::uint64_t kGiB = 1024ull * kMiB;

class SandboxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BuildError : public SandboxError {
 public:
  BuildError(const std::string& what, std::string log_tail)
      : SandboxError(what + (log_tail.empty() ? "" : "\n" + log_tail)),
        log_tail_(std::move(log_tail)) {}
  const std::string& log_tail() const noexcept { return log_tail_; }

 private:
  std::string log_tail_;
};

class RuntimeUnavailable : public SandboxError {
 public:
  using SandboxError::SandboxError;
};

class PoolStopped : public SandboxError {
 public:
  PoolStopped() : SandboxError("container pool is stopped") {}
};

class SpawnTimeout : public SandboxError {
 public:
  using SandboxError::SandboxError;
};

enum class Network { disabled, enabled };

struct ResourceLimits {
  double cpu_cores = 2.0;
  std::uint64_t memory_bytes = 2 * kGiB;
  std::uint64_t max_processes = 256;
  Network network = Network::disabled;
  // Size of the RAM disk mounted at the working directory.
  std::uint64_t writable_fs_bytes = 256 * kMiB;

  void validate() const;
};

enum class ContainerState { building, warm, busy, crashed, retired };
std::string_view to_string(ContainerState state);

enum class ReturnVerdict { clean, dirty };

struct PoolConfig {
  std::size_t target_size_per_language = 4;
  // nullopt means a container is never retired for age.
  std::optional<std::uint64_t> max_jobs_per_container = 500;
  Millis spawn_timeout{60'000};
  ResourceLimits limits;
  // false: every checkout starts a fresh container and give_back destroys
  // it. Exists to measure what warm reuse buys.
  bool reuse_containers = true;
  Millis health_check_interval{500};
  // A warm container that has not sent a heartbeat for this long is treated
  // as crashed (twice the default per-test timeout).
  Millis heartbeat_miss_limit{60'000};

  void validate() const;
};

// ---------------------------------------------------------------------------
// Drivers

struct ContainerSpec {
  std::string id;
  std::string language;
  std::string image_tag;
  ResourceLimits limits;
};

// A started container whose harness agent is attached over stdio.
class ContainerProcess {
 public:
  virtual ~ContainerProcess() = default;
  virtual const std::string& id() const = 0;
  // Host side of the agent's stdin / stdout.
  virtual int input_fd() const = 0;
  virtual int output_fd() const = 0;
  // False once the runtime reports the container as exited.
  virtual bool alive() = 0;
  // Hard stop and cleanup. Idempotent.
  virtual void kill() = 0;
  // Host pid of the process that anchors the container, if there is one.
  virtual std::optional<int> host_pid() const = 0;
  virtual std::string ram_disk_path() const = 0;
};

class ContainerDriver {
 public:
  virtual ~ContainerDriver() = default;
  virtual std::string name() const = 0;
  virtual bool image_exists(const std::string& tag) = 0;
  // Throws BuildError / RuntimeUnavailable.
  virtual void build_image(const langconfig::ImageBuildPlan& plan) = 0;
  virtual std::unique_ptr<ContainerProcess> start(const ContainerSpec& spec) = 0;
};

struct ProcessDriverOptions {
  std::filesystem::path agent_path;
  // Image manifests and container working directories live here. /dev/shm
  // is RAM-backed, which keeps the fallback working dir on a RAM disk even
  // when a tmpfs cannot be mounted.
  std::filesystem::path state_dir = "/dev/shm/polyverify";
  // Execute RUN steps of a build plan on the host. Off by default: the host
  // is shared, so provisioning it is left to the operator.
  bool run_build_steps = false;
  Millis build_step_timeout{30 * 60 * 1000};
  // Start each container in fresh mount/pid(/net) namespaces with a tmpfs
  // working directory when the host permits it.
  bool use_namespaces = true;
  // Candidate processes drop to this uid/gid when the agent runs as root.
  unsigned sandbox_uid = 65534;
  unsigned sandbox_gid = 65534;
  Millis heartbeat_interval = harness::kHeartbeatInterval;
  Millis kill_grace = harness::kKillGrace;
};

// Containers without a container runtime: the agent runs as a host process
// with namespaces, a tmpfs working directory and rlimits. The host's own
// toolchains stand in for the image contents.
class ProcessDriver final : public ContainerDriver {
 public:
  explicit ProcessDriver(ProcessDriverOptions options);
  std::string name() const override { return "process"; }
  bool image_exists(const std::string& tag) override;
  void build_image(const langconfig::ImageBuildPlan& plan) override;
  std::unique_ptr<ContainerProcess> start(const ContainerSpec& spec) override;

  // Whether the last start() could enter new namespaces.
  bool namespaces_active() const noexcept { return namespaces_ok_.load(); }
  const ProcessDriverOptions& options() const noexcept { return options_; }

 private:
  std::filesystem::path image_dir(const std::string& tag) const;

  ProcessDriverOptions options_;
  std::atomic<bool> namespaces_ok_{true};
};

struct OciDriverOptions {
  // docker, podman, or anything with the same CLI.
  std::string runtime = "docker";
  std::filesystem::path agent_path;
  std::filesystem::path build_root = std::filesystem::temp_directory_path();
  Millis build_timeout{60 * 60 * 1000};
  Millis command_timeout{60'000};
  Millis heartbeat_interval = harness::kHeartbeatInterval;
  std::vector<std::string> extra_run_args;
};

// Drives an OCI runtime through its command-line interface.
class OciDriver final : public ContainerDriver {
 public:
  explicit OciDriver(OciDriverOptions options);
  std::string name() const override { return "oci:" + options_.runtime; }
  bool image_exists(const std::string& tag) override;
  void build_image(const langconfig::ImageBuildPlan& plan) override;
  std::unique_ptr<ContainerProcess> start(const ContainerSpec& spec) override;

  // The argv used by start(); exposed for inspection.
  std::vector<std::string> run_arguments(const ContainerSpec& spec) const;

 private:
  OciDriverOptions options_;
};

// Quotes a word for /bin/sh.
std::string shell_quote(std::string_view word);

// ---------------------------------------------------------------------------
// Image cache

// Builds each image tag at most once, even under concurrent requests.
class ImageCache {
 public:
  explicit ImageCache(std::shared_ptr<ContainerDriver> driver);

  // Returns plan.tag once the image exists locally.
  std::string ensure_image(const langconfig::ImageBuildPlan& plan);
  std::size_t builds_started() const;

 private:
  std::shared_ptr<ContainerDriver> driver_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_future<void>> images_;
  std::size_t builds_ = 0;
};

// ---------------------------------------------------------------------------
// Pool

class ContainerPool;

// Pool-internal record of one container. Exposed so the harness driver can
// talk to a checked-out container; all mutation goes through the pool.
class ContainerSlot {
 public:
  ContainerSlot(std::unique_ptr<ContainerProcess> process, std::string language);
  ~ContainerSlot();

  const std::string& id() const { return process_->id(); }
  const std::string& language() const { return language_; }
  int input_fd() const { return process_->input_fd(); }
  harness::FrameReader& reader() { return reader_; }
  std::mutex& io_mutex() { return io_mu_; }
  bool alive() { return process_->alive(); }
  std::optional<int> host_pid() const { return process_->host_pid(); }
  std::string ram_disk_path() const { return process_->ram_disk_path(); }
  ContainerState state() const { return state_.load(); }
  std::uint64_t jobs_served() const { return jobs_served_.load(); }

  void mark_crashed() { crashed_.store(true); }
  bool crashed() const { return crashed_.load(); }

  // Job tagging: claims the container for one job id. Returns false if
  // another job already holds it.
  bool begin_job(std::uint64_t job_id);
  void end_job(std::uint64_t job_id);

  void note_heartbeat() { last_heartbeat_ = std::chrono::steady_clock::now(); }
  std::chrono::steady_clock::time_point last_heartbeat() const { return last_heartbeat_; }

 private:
  friend class ContainerPool;
  std::unique_ptr<ContainerProcess> process_;
  std::string language_;
  harness::FrameReader reader_;
  std::mutex io_mu_;
  std::atomic<ContainerState> state_{ContainerState::building};
  std::atomic<std::uint64_t> jobs_served_{0};
  std::atomic<bool> crashed_{false};
  std::atomic<std::uint64_t> current_job_{0};
  std::chrono::steady_clock::time_point last_heartbeat_;
};

struct ContainerHandle {
  std::string id;
  std::string language;
  ContainerState state = ContainerState::busy;
  std::uint64_t jobs_served = 0;
  std::string ram_disk_path;
  std::shared_ptr<ContainerSlot> slot;
};

struct LanguagePoolMetrics {
  std::string language;
  std::string image_tag;
  std::size_t target = 0;
  std::size_t warm = 0;
  std::size_t busy = 0;
  std::size_t spawning = 0;
  std::uint64_t spawned = 0;
  std::uint64_t retired = 0;
  std::uint64_t crashed = 0;
  std::uint64_t spawn_failures = 0;
  std::uint64_t jobs_served = 0;
  std::string last_spawn_error;
};

struct PoolMetrics {
  std::vector<LanguagePoolMetrics> languages;
  std::uint64_t crash_count = 0;
  std::uint64_t jobs_served = 0;
};

struct ContainerInfo {
  std::string id;
  std::string language;
  ContainerState state;
  std::uint64_t jobs_served;
  std::optional<int> host_pid;
};

class ContainerPool {
 public:
  ContainerPool(std::shared_ptr<ContainerDriver> driver, PoolConfig config);
  ~ContainerPool();
  ContainerPool(const ContainerPool&) = delete;
  ContainerPool& operator=(const ContainerPool&) = delete;

  // Starts keeping target_size warm containers of `image_tag` for `language`.
  void start_language(const std::string& language, const std::string& image_tag);

  // Blocks until the language has its target number of warm containers or
  // the timeout passes. Returns whether the target was reached.
  bool wait_until_ready(const std::string& language, Millis timeout);

  // Returns a warm container marked busy, waiting for one if necessary.
  ContainerHandle checkout(const std::string& language);
  void give_back(ContainerHandle& handle, ReturnVerdict verdict);

  void stop();
  bool stopped() const;

  PoolMetrics metrics() const;
  std::vector<ContainerInfo> containers(const std::string& language) const;
  std::size_t capacity(const std::string& language) const;
  const PoolConfig& config() const noexcept { return config_; }
  ContainerDriver& driver() noexcept { return *driver_; }

 private:
  struct LanguagePool {
    std::string language;
    std::string image_tag;
    std::vector<std::shared_ptr<ContainerSlot>> live;
    std::deque<std::shared_ptr<ContainerSlot>> warm;
    std::size_t spawning = 0;
    LanguagePoolMetrics counters;
  };

  std::shared_ptr<ContainerSlot> spawn_container(const std::string& language,
                                                 const std::string& image_tag);
  void request_spawns_locked(LanguagePool& lp);
  void spawn_async(const std::string& language);
  void retire_locked(LanguagePool& lp, const std::shared_ptr<ContainerSlot>& slot,
                     bool crashed);
  void run_background(std::function<void()> task);
  void monitor_loop(std::stop_token stop);
  void background_loop(std::stop_token stop);
  LanguagePool& pool_for_locked(const std::string& language);

  std::shared_ptr<ContainerDriver> driver_;
  PoolConfig config_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, LanguagePool> languages_;
  bool stopped_ = false;
  std::uint64_t next_id_ = 1;
  std::uint64_t crash_count_ = 0;

  std::mutex task_mu_;
  std::condition_variable_any task_cv_;
  std::deque<std::function<void()>> tasks_;
  std::size_t tasks_running_ = 0;
  std::vector<std::jthread> workers_;
  std::jthread monitor_;
};

}  // namespace polyverify::sandbox
