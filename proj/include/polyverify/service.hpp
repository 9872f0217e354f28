#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyverify/langconfig.hpp"
#include "polyverify/sandbox.hpp"
#include "polyverify/taskset.hpp"
#include "polyverify/verifier.hpp"

namespace httplib {
class Server;
}

namespace polyverify::service {

class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingSamples : public ServiceError {
 public:
  MissingSamples(std::string task_id, std::size_t have, std::size_t need)
      : ServiceError("task '" + task_id + "' has " + std::to_string(have) + " of " +
                     std::to_string(need) + " samples"),
        task_id_(std::move(task_id)) {}
  const std::string& task_id() const noexcept { return task_id_; }

 private:
  std::string task_id_;
};

// ---------------------------------------------------------------------------
// Configuration

enum class DriverKind { process, oci };

struct DriverConfig {
  DriverKind kind = DriverKind::process;
  // OCI runtime command (docker, podman, ...).
  std::string runtime = "docker";
  // Empty: POLYVERIFY_AGENT, then polyverify-agent next to this executable.
  std::filesystem::path agent_path;
  std::filesystem::path state_dir = "/dev/shm/polyverify";
  bool run_build_steps = false;
  bool use_namespaces = true;
};

struct EvalDefaults {
  std::size_t samples = 20;
  double temperature = 0.2;
  std::size_t k = 1;
};

// Training-side defaults, served to trainers through /v1/languages so a
// client can pick them up; the service itself does not train.
struct TrainingDefaults {
  std::size_t group_size = 32;
  std::size_t prompts_per_batch = 4;
  double temperature = 0.7;
  double learning_rate = 5e-6;
  double clip_epsilon = 0.2;
};

struct ServiceConfig {
  std::string listen_address = "127.0.0.1:8080";
  std::vector<std::filesystem::path> languages;
  DriverConfig driver;
  sandbox::PoolConfig pool;
  verifier::VerifyLimits limits;
  // Candidates admitted (queued or running) before requests get HTTP 429.
  std::size_t queue_limit = 1024;
  std::size_t http_threads = 32;
  EvalDefaults eval;
  TrainingDefaults training;
  std::optional<taskset::LlmEndpoint> generation;

  void validate() const;
};

/// Parses the YAML service configuration. Relative language paths resolve
/// against `base_dir`.
ServiceConfig parse_service_config(std::string_view yaml,
                                   const std::filesystem::path& base_dir = ".");
ServiceConfig load_service_config(const std::filesystem::path& path);

/// Where the agent binary lives when not configured explicitly.
std::filesystem::path locate_agent(const std::filesystem::path& configured = {});

std::shared_ptr<sandbox::ContainerDriver> make_driver(const DriverConfig& config);

// ---------------------------------------------------------------------------
// Verification runtime shared by the server and the CLI

struct LanguageEntry {
  langconfig::LanguageConfig config;
  std::string image_tag;
};

// Owns the driver, image cache and pool for a set of languages.
class Verifier {
 public:
  Verifier(std::shared_ptr<sandbox::ContainerDriver> driver, sandbox::PoolConfig pool_config,
           verifier::VerifyLimits limits = {});
  ~Verifier();

  // Ensures the image and starts warm containers for `config`.
  const LanguageEntry& add_language(const langconfig::LanguageConfig& config);
  // Looks up by name, case-insensitively, after alias folding.
  const LanguageEntry* find(std::string_view language) const;
  std::vector<std::string> language_names() const;

  verifier::Verdict verify(const verifier::Candidate& candidate, const taskset::Task& task,
                           const std::string& language);
  std::vector<verifier::Verdict> verify_group(const std::vector<verifier::Candidate>& candidates,
                                              const taskset::Task& task,
                                              const std::string& language);

  sandbox::ContainerPool& pool() noexcept { return *pool_; }
  const sandbox::ContainerPool& pool() const noexcept { return *pool_; }
  sandbox::ImageCache& images() noexcept { return images_; }
  const verifier::VerifyLimits& limits() const noexcept { return limits_; }
  verifier::VerifyLimits& limits() noexcept { return limits_; }

 private:
  std::shared_ptr<sandbox::ContainerDriver> driver_;
  sandbox::ImageCache images_;
  std::unique_ptr<sandbox::ContainerPool> pool_;
  verifier::VerifyLimits limits_;
  mutable std::mutex mu_;
  std::map<std::string, LanguageEntry> languages_;
};

// ---------------------------------------------------------------------------
// HTTP server

// Bounds the candidates admitted at once; the pool bounds what runs.
class Admission {
 public:
  explicit Admission(std::size_t limit) : limit_(limit) {}
  bool try_admit(std::size_t n);
  void release(std::size_t n);
  std::size_t in_flight() const { return in_flight_.load(); }
  std::size_t limit() const noexcept { return limit_; }
  std::uint64_t rejected() const { return rejected_.load(); }

 private:
  std::size_t limit_;
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::uint64_t> rejected_{0};
};

class Server {
 public:
  Server(Verifier& verifier, std::size_t queue_limit, TrainingDefaults training = {},
         std::size_t http_threads = 32);
  ~Server();

  // Binds and serves until stop(). Returns false if binding fails.
  bool listen(const std::string& host, int port);
  // Binds to an ephemeral port and returns it; call serve() next.
  int bind_any(const std::string& host);
  bool serve();
  void stop();

  // Handlers, exposed for in-process use and tests. Each returns an HTTP
  // status and a JSON body.
  struct Response {
    int status = 200;
    nlohmann::json body;
  };
  Response handle_verify(const nlohmann::json& request);
  Response handle_verify_group(const nlohmann::json& request);
  Response handle_languages() const;
  Response handle_health() const;
  Response handle_metrics() const;
  Response handle_advantages(const nlohmann::json& request) const;

 private:
  void install_routes();

  Verifier& verifier_;
  Admission admission_;
  TrainingDefaults training_;
  std::unique_ptr<httplib::Server> http_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> verdicts_{0};
};

std::pair<std::string, int> split_listen_address(const std::string& address);

// ---------------------------------------------------------------------------
// Evaluation

struct CompletionRecord {
  std::string task_id;
  std::size_t sample_index = 0;
  std::string completion_text;
};

/// Reads a JSONL completions file of {task_id, sample_index, completion_text}.
std::vector<CompletionRecord> load_completions(const std::filesystem::path& path);
std::vector<CompletionRecord> parse_completions(std::string_view jsonl);

// Produces n completions for a prompt at a temperature.
using Generator =
    std::function<std::vector<std::string>(const std::string& prompt, std::size_t n, double temperature)>;

/// Chat-completions client asking for `n` choices per request, with bounded
/// retries when a request fails or returns a non-200 status.
Generator endpoint_generator(taskset::LlmEndpoint endpoint, int max_attempts = 3);

struct EvalOptions {
  std::size_t samples = 20;
  std::size_t k = 1;
  double temperature = 0.2;
  // Prepend the language's prompt prefix to generated prompts.
  bool include_prefix = true;
};

struct TaskEval {
  std::string task_id;
  std::size_t n = 0;
  std::size_t c = 0;
  double pass_at_k = 0.0;
  std::map<std::string, std::size_t> failures;
};

struct EvalReport {
  std::string language;
  std::size_t samples = 0;
  std::size_t k = 1;
  std::vector<TaskEval> tasks;
  double pass_at_k = 0.0;
  std::map<std::string, std::size_t> failure_counts;
  double wall_time_seconds = 0.0;
};

// Verifies a batch of candidates for one task; the verifier or a test double.
using GroupVerifier = std::function<std::vector<verifier::Verdict>(
    const std::vector<verifier::Candidate>&, const taskset::Task&)>;

/// Evaluates stored completions. Samples 0..n-1 must exist for every task.
EvalReport eval_completions(const taskset::Dataset& dataset, const std::string& language,
                            const std::vector<CompletionRecord>& completions,
                            const EvalOptions& options, const GroupVerifier& verify);

/// Evaluates fresh samples from `generate`.
EvalReport eval_generated(const taskset::Dataset& dataset,
                          const langconfig::LanguageConfig& config, const Generator& generate,
                          const EvalOptions& options, const GroupVerifier& verify);

/// Deterministic JSON (no wall time unless asked for).
nlohmann::ordered_json report_to_json(const EvalReport& report, bool include_timing = false);

/// Human-readable pass@k table with whole-number percentages; deterministic.
std::string render_table(const EvalReport& report);

/// Percentage rounded half up to an integer, as printed in tables.
int percent(double rate);

}  // namespace polyverify::service
