#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace polyverify::langconfig {

// Base image used when a configuration does not name one. The stock
// configurations install packages with apt-get, so this is Debian stable.
inline constexpr std::string_view kDefaultBaseImage = "debian:bookworm-slim";

// Bumped whenever the embedded agent or its build steps change, so image
// tags derived from older harness builds are not reused.
inline constexpr std::string_view kHarnessVersion = "polyverify-agent/3";

inline constexpr std::string_view kAgentImagePath =
    "/usr/local/bin/polyverify-agent";
inline constexpr std::string_view kWorkdir = "/sandbox";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class YamlError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class MissingField : public ConfigError {
 public:
  explicit MissingField(std::string field)
      : ConfigError("missing required field '" + field + "'"),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class UnknownKey : public ConfigError {
 public:
  explicit UnknownKey(std::string key)
      : ConfigError("unknown configuration key '" + key + "'"),
        key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class UnsafePath : public ConfigError {
 public:
  explicit UnsafePath(std::string path)
      : ConfigError("filename '" + path +
                    "' must be a relative path inside the working directory"),
        path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// How to install, compile, run and prompt for one target language.
struct LanguageConfig {
  std::string name;
  std::string prompt;
  std::optional<std::string> install;
  std::optional<std::string> container_base_image;
  // Parsed and kept for round-tripping; has no effect on the build.
  std::optional<std::string> container_type;
  std::optional<std::string> container_instructions;
  std::string filename;
  std::optional<std::string> compile;
  std::string execute;

  bool operator==(const LanguageConfig&) const = default;
};

struct ImageBuildPlan {
  std::string base_image;
  // Container build-file directives after the FROM line, in order.
  std::vector<std::string> build_steps;
  std::string harness_entrypoint;
  std::string tag;

  bool operator==(const ImageBuildPlan&) const = default;
};

/// Parses a YAML language configuration. Unknown keys are rejected.
/// `name_hint` becomes the config name when the document has no `name` key
/// (callers pass the file stem).
LanguageConfig parse_config(std::string_view source,
                            std::string_view name_hint = "");

LanguageConfig load_config_file(const std::string& path);

/// Emits YAML that parse_config reads back to an equal LanguageConfig.
std::string serialize_config(const LanguageConfig& config);

/// True when `filename` is a non-empty relative path whose components never
/// leave the working directory.
bool is_safe_relative_path(std::string_view filename);

/// Strips the implicit docker.io registry (and its library/ namespace) so
/// that equivalent references compare and hash equal.
std::string normalize_image_reference(std::string_view reference);

ImageBuildPlan build_plan(const LanguageConfig& config);

/// Renders the plan as a container build file (FROM line plus steps).
std::string to_containerfile(const ImageBuildPlan& plan);

}  // namespace polyverify::langconfig
