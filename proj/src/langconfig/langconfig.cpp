#include "polyverify/langconfig.hpp"

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace polyverify::langconfig {

namespace {

std::optional<std::string> scalar_field(const YAML::Node& node,
                                        const std::string& key) {
  if (!node.IsDefined() || node.IsNull()) return std::nullopt;
  if (!node.IsScalar()) {
    throw YamlError("key '" + key + "' must be a string");
  }
  return node.as<std::string>();
}

std::string required_field(const YAML::Node& node, const std::string& key) {
  auto value = scalar_field(node, key);
  if (!value || value->empty()) throw MissingField(key);
  return *value;
}

void reject_unknown_keys(const YAML::Node& map,
                         std::initializer_list<std::string_view> allowed,
                         std::string_view prefix) {
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw UnknownKey(std::string(prefix) + key);
  }
}

std::string trim_right(std::string_view s) {
  auto end = s.find_last_not_of(" \t\r\n");
  return end == std::string_view::npos ? std::string()
                                       : std::string(s.substr(0, end + 1));
}

std::vector<std::string> nonblank_lines(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    auto trimmed = trim_right(line);
    if (!trimmed.empty()) out.push_back(std::move(trimmed));
  }
  return out;
}

bool starts_with_apt(std::string_view cmd) {
  return cmd.starts_with("apt-get ") || cmd.starts_with("apt ");
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(),
             nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

// Literal block style only where yaml-cpp reproduces the value exactly:
// a single trailing newline and no leading indentation on the first line.
bool literal_safe(const std::string& s) {
  if (s.find('\n') == std::string::npos) return false;
  if (!s.ends_with("\n") || s.ends_with("\n\n")) return false;
  if (s.front() == ' ' || s.front() == '\t' || s.front() == '\n') return false;
  for (char c : s) {
    if (c == '\t' || c == '\r') return false;
  }
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && (line.back() == ' ')) return false;
  }
  return true;
}

void emit_string(YAML::Emitter& out, const std::string& value) {
  if (literal_safe(value)) {
    out << YAML::Literal << value;
  } else {
    out << YAML::DoubleQuoted << value;
  }
}

}  // namespace

std::string normalize_image_reference(std::string_view reference) {
  std::string_view ref = reference;
  for (std::string_view registry : {"docker.io/", "index.docker.io/"}) {
    if (ref.starts_with(registry)) {
      ref.remove_prefix(registry.size());
      if (ref.starts_with("library/")) ref.remove_prefix(8);
      break;
    }
  }
  return std::string(ref);
}

LanguageConfig parse_config(std::string_view source,
                            std::string_view name_hint) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(source));
  } catch (const YAML::Exception& e) {
    throw YamlError(std::string("invalid YAML: ") + e.what());
  }
  if (!root.IsMap()) throw YamlError("configuration must be a YAML mapping");

  try {
    reject_unknown_keys(root, {"name", "prompt", "install", "container",
                               "filename", "compile", "execute"},
                        "");
    LanguageConfig cfg;
    cfg.name = scalar_field(root["name"], "name").value_or(std::string(name_hint));
    cfg.prompt = scalar_field(root["prompt"], "prompt").value_or("");

    if (auto install = root["install"]; install.IsDefined() && !install.IsNull()) {
      if (install.IsMap()) {
        reject_unknown_keys(install, {"command", "container-instructions"},
                            "install.");
        cfg.install = scalar_field(install["command"], "install.command");
        cfg.container_instructions = scalar_field(
            install["container-instructions"], "install.container-instructions");
      } else {
        cfg.install = scalar_field(install, "install");
      }
    }

    if (auto container = root["container"];
        container.IsDefined() && !container.IsNull()) {
      if (!container.IsMap()) throw YamlError("'container' must be a mapping");
      reject_unknown_keys(container, {"base-image", "type"}, "container.");
      cfg.container_base_image =
          scalar_field(container["base-image"], "container.base-image");
      cfg.container_type = scalar_field(container["type"], "container.type");
    }

    cfg.filename = required_field(root["filename"], "filename");
    cfg.compile = scalar_field(root["compile"], "compile");
    cfg.execute = required_field(root["execute"], "execute");

    if (!is_safe_relative_path(cfg.filename)) throw UnsafePath(cfg.filename);
    return cfg;
  } catch (const YAML::Exception& e) {
    throw YamlError(std::string("invalid configuration: ") + e.what());
  }
}

LanguageConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open language config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::filesystem::path(path).stem().string());
}

std::string serialize_config(const LanguageConfig& config) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  if (!config.name.empty()) {
    out << YAML::Key << "name" << YAML::Value;
    emit_string(out, config.name);
  }
  if (!config.prompt.empty()) {
    out << YAML::Key << "prompt" << YAML::Value;
    emit_string(out, config.prompt);
  }
  if (config.container_base_image || config.container_type) {
    out << YAML::Key << "container" << YAML::Value << YAML::BeginMap;
    if (config.container_base_image) {
      out << YAML::Key << "base-image" << YAML::Value;
      emit_string(out, *config.container_base_image);
    }
    if (config.container_type) {
      out << YAML::Key << "type" << YAML::Value;
      emit_string(out, *config.container_type);
    }
    out << YAML::EndMap;
  }
  if (config.container_instructions) {
    out << YAML::Key << "install" << YAML::Value << YAML::BeginMap;
    if (config.install) {
      out << YAML::Key << "command" << YAML::Value;
      emit_string(out, *config.install);
    }
    out << YAML::Key << "container-instructions" << YAML::Value;
    emit_string(out, *config.container_instructions);
    out << YAML::EndMap;
  } else if (config.install) {
    out << YAML::Key << "install" << YAML::Value;
    emit_string(out, *config.install);
  }
  out << YAML::Key << "filename" << YAML::Value;
  emit_string(out, config.filename);
  if (config.compile) {
    out << YAML::Key << "compile" << YAML::Value;
    emit_string(out, *config.compile);
  }
  out << YAML::Key << "execute" << YAML::Value;
  emit_string(out, config.execute);
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

ImageBuildPlan build_plan(const LanguageConfig& config) {
  ImageBuildPlan plan;
  plan.base_image = normalize_image_reference(
      config.container_base_image.value_or(std::string(kDefaultBaseImage)));

  if (config.install) {
    auto lines = nonblank_lines(*config.install);
    if (!lines.empty()) {
      std::string step = "RUN ";
      // Fresh Debian images ship without package lists.
      if (starts_with_apt(lines.front())) step += "apt-get update && ";
      for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i > 0) step += " && ";
        step += lines[i];
      }
      plan.build_steps.push_back(std::move(step));
    }
  }
  if (config.container_instructions) {
    for (auto& line : nonblank_lines(*config.container_instructions)) {
      plan.build_steps.push_back(std::move(line));
    }
  }

  plan.harness_entrypoint = std::string(kAgentImagePath);
  plan.build_steps.push_back("COPY polyverify-agent " +
                             std::string(kAgentImagePath));
  plan.build_steps.push_back("WORKDIR " + std::string(kWorkdir));
  plan.build_steps.push_back("ENTRYPOINT [\"" + std::string(kAgentImagePath) +
                             "\"]");

  std::string material = plan.base_image;
  material += '\n';
  for (const auto& step : plan.build_steps) {
    material += step;
    material += '\n';
  }
  material += kHarnessVersion;
  plan.tag = "polyverify-img:" + sha256_hex(material).substr(0, 16);
  return plan;
}

std::string to_containerfile(const ImageBuildPlan& plan) {
  std::string out = "FROM " + plan.base_image + "\n";
  for (const auto& step : plan.build_steps) {
    out += step;
    out += '\n';
  }
  return out;
}

}  // namespace polyverify::langconfig
