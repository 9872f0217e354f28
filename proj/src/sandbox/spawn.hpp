#pragma once

// Process spawning shared by the drivers. Not part of the public API.

#include <sys/types.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace polyverify::sandbox::detail {

struct SpawnRequest {
  std::string program;  // absolute path, resolved before forking
  std::vector<std::string> argv;
  std::vector<std::string> env;
  std::filesystem::path stderr_path;  // empty: /dev/null
  std::filesystem::path workdir;      // empty: inherit
  bool new_session = true;
  // Namespace isolation; only honoured when the kernel allows it.
  bool namespaces = false;
  bool isolate_network = true;
  std::optional<std::string> tmpfs_options;  // mount a tmpfs on workdir
};

struct Attached {
  pid_t pid = -1;
  int to_child = -1;    // child's stdin
  int from_child = -1;  // child's stdout
  bool in_namespaces = false;
};

// Starts the process with both stdio pipes attached. Throws SandboxError if
// the process cannot be created.
Attached spawn_attached(const SpawnRequest& request);

// Locates an executable the way execvp would. Empty when absent.
std::string find_executable(const std::string& name);

// The trailing `max` bytes of `text`.
std::string tail(const std::string& text, std::size_t max);

}  // namespace polyverify::sandbox::detail
