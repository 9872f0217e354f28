#include <cmath>

#include "polyverify/sandbox.hpp"

namespace polyverify::sandbox {

void ResourceLimits::validate() const {
  if (!(cpu_cores > 0.0) || !std::isfinite(cpu_cores)) {
    throw std::invalid_argument("cpu_cores must be positive");
  }
  if (memory_bytes < 16 * kMiB) throw std::invalid_argument("memory_bytes must be at least 16 MiB");
  if (max_processes < 1) throw std::invalid_argument("max_processes must be at least 1");
  if (writable_fs_bytes < kMiB) throw std::invalid_argument("writable_fs_bytes must be at least 1 MiB");
}

void PoolConfig::validate() const {
  limits.validate();
  if (target_size_per_language < 1) {
    throw std::invalid_argument("target_size_per_language must be at least 1");
  }
  if (max_jobs_per_container && *max_jobs_per_container < 1) {
    throw std::invalid_argument("max_jobs_per_container must be at least 1");
  }
  if (spawn_timeout.count() <= 0) throw std::invalid_argument("spawn_timeout must be positive");
  if (health_check_interval.count() <= 0) {
    throw std::invalid_argument("health_check_interval must be positive");
  }
}

std::string_view to_string(ContainerState state) {
  switch (state) {
    case ContainerState::building: return "building";
    case ContainerState::warm: return "warm";
    case ContainerState::busy: return "busy";
    case ContainerState::crashed: return "crashed";
    case ContainerState::retired: return "retired";
  }
  return "unknown";
}

std::string shell_quote(std::string_view word) {
  if (!word.empty() &&
      word.find_first_not_of("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
                             "0123456789_-./:=@+,%") == std::string_view::npos) {
    return std::string(word);
  }
  std::string out = "'";
  for (char c : word) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  out += "'";
  return out;
}

}  // namespace polyverify::sandbox
