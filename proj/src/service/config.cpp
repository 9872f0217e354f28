#include <unistd.h>

#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "polyverify/service.hpp"

namespace fs = std::filesystem;

namespace polyverify::service {

namespace {

void check_keys(const YAML::Node& node, const std::string& where,
                const std::set<std::string>& allowed) {
  if (!node.IsMap()) throw ServiceError(where + " must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      throw ServiceError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  const auto v = node[key];
  if (!v || v.IsNull()) return;
  try {
    out = v.as<T>();
  } catch (const YAML::Exception&) {
    throw ServiceError(where + "." + key + " has the wrong type");
  }
}

void read_ms(const YAML::Node& node, const char* key, std::chrono::milliseconds& out,
             const std::string& where) {
  long long ms = out.count();
  read(node, key, ms, where);
  out = std::chrono::milliseconds(ms);
}

}  // namespace

void ServiceConfig::validate() const {
  if (languages.empty()) throw ServiceError("at least one language is required");
  if (eval.k < 1 || eval.samples < eval.k) {
    throw ServiceError("eval needs 1 <= k <= samples");
  }
  if (queue_limit < 1) throw ServiceError("queue_limit must be at least 1");
  if (http_threads < 1) throw ServiceError("http_threads must be at least 1");
  try {
    pool.validate();
  } catch (const std::invalid_argument& e) {
    throw ServiceError(std::string("pool: ") + e.what());
  }
  split_listen_address(listen_address);
}

std::pair<std::string, int> split_listen_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0) {
    throw ServiceError("listen address must be host:port, got '" + address + "'");
  }
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(address.substr(colon + 1), &used);
    if (used != address.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ServiceError("bad port in listen address '" + address + "'");
  }
  if (port < 0 || port > 65535) throw ServiceError("port out of range in '" + address + "'");
  return {address.substr(0, colon), port};
}

ServiceConfig parse_service_config(std::string_view yaml, const fs::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml));
  } catch (const YAML::Exception& e) {
    throw ServiceError(std::string("invalid YAML: ") + e.what());
  }
  ServiceConfig cfg;
  if (!root || root.IsNull()) {
    cfg.validate();
    return cfg;
  }
  check_keys(root, "service config",
             {"listen", "languages", "driver", "pool", "limits", "queue_limit", "http_threads",
              "eval", "training", "generation"});
  read(root, "listen", cfg.listen_address, "service");
  read(root, "queue_limit", cfg.queue_limit, "service");
  read(root, "http_threads", cfg.http_threads, "service");

  if (auto langs = root["languages"]; langs && !langs.IsNull()) {
    if (!langs.IsSequence()) throw ServiceError("languages must be a list of config paths");
    for (const auto& item : langs) {
      fs::path p = item.as<std::string>();
      cfg.languages.push_back(p.is_absolute() ? p : base_dir / p);
    }
  }

  if (auto d = root["driver"]; d && !d.IsNull()) {
    check_keys(d, "driver",
               {"kind", "runtime", "agent", "state_dir", "run_build_steps", "namespaces"});
    std::string kind = "process";
    read(d, "kind", kind, "driver");
    if (kind == "process") {
      cfg.driver.kind = DriverKind::process;
    } else if (kind == "oci") {
      cfg.driver.kind = DriverKind::oci;
    } else {
      throw ServiceError("driver.kind must be 'process' or 'oci'");
    }
    read(d, "runtime", cfg.driver.runtime, "driver");
    std::string agent;
    read(d, "agent", agent, "driver");
    if (!agent.empty()) cfg.driver.agent_path = fs::path(agent).is_absolute() ? fs::path(agent) : base_dir / agent;
    std::string state;
    read(d, "state_dir", state, "driver");
    if (!state.empty()) cfg.driver.state_dir = state;
    read(d, "run_build_steps", cfg.driver.run_build_steps, "driver");
    read(d, "namespaces", cfg.driver.use_namespaces, "driver");
  }

  if (auto p = root["pool"]; p && !p.IsNull()) {
    check_keys(p, "pool",
               {"size", "max_jobs_per_container", "spawn_timeout_ms", "reuse", "cpu_cores",
                "memory_bytes", "max_processes", "network", "ram_disk_bytes",
                "health_check_interval_ms", "heartbeat_miss_limit_ms"});
    read(p, "size", cfg.pool.target_size_per_language, "pool");
    if (auto m = p["max_jobs_per_container"]; m) {
      if (m.IsNull()) {
        cfg.pool.max_jobs_per_container.reset();
      } else {
        std::uint64_t jobs = 0;
        read(p, "max_jobs_per_container", jobs, "pool");
        if (jobs == 0) {
          cfg.pool.max_jobs_per_container.reset();
        } else {
          cfg.pool.max_jobs_per_container = jobs;
        }
      }
    }
    read_ms(p, "spawn_timeout_ms", cfg.pool.spawn_timeout, "pool");
    read_ms(p, "health_check_interval_ms", cfg.pool.health_check_interval, "pool");
    read_ms(p, "heartbeat_miss_limit_ms", cfg.pool.heartbeat_miss_limit, "pool");
    read(p, "reuse", cfg.pool.reuse_containers, "pool");
    read(p, "cpu_cores", cfg.pool.limits.cpu_cores, "pool");
    read(p, "memory_bytes", cfg.pool.limits.memory_bytes, "pool");
    read(p, "max_processes", cfg.pool.limits.max_processes, "pool");
    bool network = false;
    read(p, "network", network, "pool");
    cfg.pool.limits.network = network ? sandbox::Network::enabled : sandbox::Network::disabled;
    read(p, "ram_disk_bytes", cfg.pool.limits.writable_fs_bytes, "pool");
  }

  if (auto l = root["limits"]; l && !l.IsNull()) {
    check_keys(l, "limits",
               {"compile_timeout_ms", "test_timeout_ms", "output_cap_bytes", "fail_fast", "strict"});
    read_ms(l, "compile_timeout_ms", cfg.limits.compile_timeout, "limits");
    read_ms(l, "test_timeout_ms", cfg.limits.test_timeout, "limits");
    read(l, "output_cap_bytes", cfg.limits.output_cap_bytes, "limits");
    read(l, "fail_fast", cfg.limits.fail_fast, "limits");
    read(l, "strict", cfg.limits.strict, "limits");
  }

  if (auto e = root["eval"]; e && !e.IsNull()) {
    check_keys(e, "eval", {"samples", "temperature", "k"});
    read(e, "samples", cfg.eval.samples, "eval");
    read(e, "temperature", cfg.eval.temperature, "eval");
    read(e, "k", cfg.eval.k, "eval");
  }

  if (auto t = root["training"]; t && !t.IsNull()) {
    check_keys(t, "training",
               {"group_size", "prompts_per_batch", "temperature", "learning_rate", "clip_epsilon"});
    read(t, "group_size", cfg.training.group_size, "training");
    read(t, "prompts_per_batch", cfg.training.prompts_per_batch, "training");
    read(t, "temperature", cfg.training.temperature, "training");
    read(t, "learning_rate", cfg.training.learning_rate, "training");
    read(t, "clip_epsilon", cfg.training.clip_epsilon, "training");
  }

  if (auto g = root["generation"]; g && !g.IsNull()) {
    check_keys(g, "generation", {"url", "model", "token_env", "timeout_seconds"});
    taskset::LlmEndpoint ep;
    read(g, "url", ep.url, "generation");
    read(g, "model", ep.model, "generation");
    read(g, "token_env", ep.token_env, "generation");
    read(g, "timeout_seconds", ep.timeout_seconds, "generation");
    if (ep.url.empty()) throw ServiceError("generation.url is required");
    cfg.generation = ep;
  }

  cfg.validate();
  return cfg;
}

ServiceConfig load_service_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ServiceError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_service_config(ss.str(), path.parent_path().empty() ? "." : path.parent_path());
}

fs::path locate_agent(const fs::path& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("POLYVERIFY_AGENT"); env != nullptr && *env != '\0') {
    return env;
  }
  std::error_code ec;
  auto self = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    auto sibling = self.parent_path() / "polyverify-agent";
    if (fs::exists(sibling)) return sibling;
  }
  return "polyverify-agent";
}

std::shared_ptr<sandbox::ContainerDriver> make_driver(const DriverConfig& config) {
  const auto agent = locate_agent(config.agent_path);
  if (config.kind == DriverKind::oci) {
    sandbox::OciDriverOptions o;
    o.runtime = config.runtime;
    o.agent_path = agent;
    return std::make_shared<sandbox::OciDriver>(o);
  }
  sandbox::ProcessDriverOptions o;
  o.agent_path = agent;
  o.state_dir = config.state_dir;
  o.run_build_steps = config.run_build_steps;
  o.use_namespaces = config.use_namespaces;
  return std::make_shared<sandbox::ProcessDriver>(o);
}

}  // namespace polyverify::service
