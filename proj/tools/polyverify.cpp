// polyverify command-line interface: serve, eval, build-image, validate,
// reformulate.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "polyverify/harness/host.hpp"
#include "polyverify/service.hpp"

namespace fs = std::filesystem;
using namespace polyverify;
using nlohmann::json;

namespace {

struct DriverFlags {
  std::string driver = "process";
  std::string agent;
  std::string state_dir;
  bool run_build_steps = false;
  bool no_namespaces = false;

  void add_to(CLI::App* app) {
    app->add_option("--driver", driver,
                    "Sandbox driver: process, or an OCI runtime command such as docker/podman");
    app->add_option("--agent", agent, "Path of the polyverify-agent binary");
    app->add_option("--state-dir", state_dir, "Process driver state directory");
    app->add_flag("--run-build-steps", run_build_steps,
                  "Process driver: execute RUN steps of image builds on this host");
    app->add_flag("--no-namespaces", no_namespaces, "Process driver: do not use namespaces");
  }

  // Flags override whatever the service config says.
  void apply(service::DriverConfig& cfg, bool explicit_driver) const {
    if (explicit_driver) {
      if (driver == "process") {
        cfg.kind = service::DriverKind::process;
      } else {
        cfg.kind = service::DriverKind::oci;
        cfg.runtime = driver;
      }
    }
    if (!agent.empty()) cfg.agent_path = agent;
    if (!state_dir.empty()) cfg.state_dir = state_dir;
    if (run_build_steps) cfg.run_build_steps = true;
    if (no_namespaces) cfg.use_namespaces = false;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

service::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

int cmd_serve(const std::string& config_path, const std::string& listen, const DriverFlags& flags,
              bool explicit_driver) {
  auto cfg = service::load_service_config(config_path);
  flags.apply(cfg.driver, explicit_driver);
  if (!listen.empty()) cfg.listen_address = listen;
  const auto [host, port] = service::split_listen_address(cfg.listen_address);

  service::Verifier verifier(service::make_driver(cfg.driver), cfg.pool, cfg.limits);
  for (const auto& path : cfg.languages) {
    auto lang = langconfig::load_config_file(path.string());
    const auto& entry = verifier.add_language(lang);
    spdlog::info("language {}: image {}", entry.config.name, entry.image_tag);
  }
  service::Server server(verifier, cfg.queue_limit, cfg.training, cfg.http_threads);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  spdlog::info("listening on {}:{}", host, port);
  if (!server.listen(host, port)) {
    spdlog::error("cannot listen on {}", cfg.listen_address);
    return 1;
  }
  g_server = nullptr;
  return 0;
}

struct EvalFlags {
  std::string config;
  std::string dataset;
  std::string language;
  std::string completions;
  std::string endpoint;
  std::string model;
  std::string output;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> k;
  std::optional<double> temperature;
  bool no_prefix = false;
  bool json = false;
  bool timing = false;
};

langconfig::LanguageConfig resolve_language(const std::string& language,
                                            const service::ServiceConfig* cfg) {
  if (fs::exists(language)) return langconfig::load_config_file(language);
  if (cfg != nullptr) {
    for (const auto& path : cfg->languages) {
      auto lc = langconfig::load_config_file(path.string());
      if (verifier::canonical_language(lc.name) == verifier::canonical_language(language)) {
        return lc;
      }
    }
  }
  throw std::runtime_error("language '" + language +
                           "' is neither a config file nor listed in the service config");
}

int cmd_eval(const EvalFlags& f, const DriverFlags& flags, bool explicit_driver) {
  service::ServiceConfig cfg;
  const bool have_config = !f.config.empty();
  if (have_config) cfg = service::load_service_config(f.config);
  flags.apply(cfg.driver, explicit_driver);

  const auto dataset = taskset::load_dataset(f.dataset);
  const auto lang = resolve_language(f.language, have_config ? &cfg : nullptr);

  service::EvalOptions options;
  options.samples = f.samples.value_or(cfg.eval.samples);
  options.k = f.k.value_or(cfg.eval.k);
  options.temperature = f.temperature.value_or(cfg.eval.temperature);
  options.include_prefix = !f.no_prefix;

  // Evaluation reports every test verdict, so no early exit.
  cfg.limits.fail_fast = false;
  service::Verifier verifier(service::make_driver(cfg.driver), cfg.pool, cfg.limits);
  verifier.add_language(lang);
  auto verify = [&](const std::vector<verifier::Candidate>& candidates, const taskset::Task& task) {
    return verifier.verify_group(candidates, task, lang.name);
  };

  service::EvalReport report;
  if (!f.completions.empty()) {
    report = service::eval_completions(dataset, lang.name, service::load_completions(f.completions),
                                       options, verify);
  } else {
    auto endpoint = cfg.generation.value_or(taskset::LlmEndpoint{});
    if (!f.endpoint.empty()) endpoint.url = f.endpoint;
    if (!f.model.empty()) endpoint.model = f.model;
    if (endpoint.url.empty()) {
      throw std::runtime_error("eval needs --completions or a generation endpoint");
    }
    report = service::eval_generated(dataset, lang, service::endpoint_generator(endpoint), options,
                                     verify);
  }

  const std::string rendered = f.json ? service::report_to_json(report, f.timing).dump(2) + "\n"
                                      : service::render_table(report);
  if (!f.output.empty()) {
    std::ofstream out(f.output, std::ios::binary | std::ios::trunc);
    out << rendered;
  } else {
    std::cout << rendered;
  }
  spdlog::info("evaluated {} tasks in {:.1f}s", report.tasks.size(), report.wall_time_seconds);
  return 0;
}

int cmd_build_image(const std::string& config_path, const std::string& probe, bool as_json,
                    const DriverFlags& flags) {
  service::DriverConfig dc;
  flags.apply(dc, true);
  const auto lang = langconfig::load_config_file(config_path);
  const auto plan = langconfig::build_plan(lang);
  auto driver = service::make_driver(dc);
  sandbox::ImageCache cache(driver);
  const auto tag = cache.ensure_image(plan);

  json out = {{"language", lang.name}, {"image_tag", tag}, {"driver", driver->name()}};
  if (!probe.empty()) {
    auto outcome = harness::probe_command(*driver, tag, sandbox::ResourceLimits{}, probe);
    out["probe"] = {{"command", probe},
                    {"exit_code", outcome.exit_code ? json(*outcome.exit_code) : json(nullptr)},
                    {"stdout", outcome.stdout_prefix},
                    {"stderr", outcome.stderr_prefix}};
    if (outcome.exit_code != 0) {
      if (as_json) {
        std::cout << out.dump(2) << "\n";
      } else {
        std::cerr << "probe failed: " << outcome.stderr_prefix << outcome.stdout_prefix;
      }
      return 1;
    }
  }
  if (as_json) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::cout << tag << "\n";
    if (out.contains("probe")) {
      std::cout << out["probe"]["stdout"].get<std::string>() << out["probe"]["stderr"].get<std::string>();
    }
  }
  return 0;
}

int cmd_validate(const std::string& path, bool as_json) {
  try {
    const auto dataset = taskset::load_dataset(path);
    std::size_t tests = 0;
    for (const auto& t : dataset.tasks) tests += t.tests.size();
    if (as_json) {
      std::cout << json{{"ok", true}, {"tasks", dataset.tasks.size()}, {"tests", tests}}.dump() << "\n";
    } else {
      std::cout << path << ": " << dataset.tasks.size() << " tasks OK (" << tests << " tests)\n";
    }
    return 0;
  } catch (const taskset::DuplicateId& e) {
    if (as_json) {
      std::cout << json{{"ok", false}, {"error", "DuplicateId"}, {"id", e.id()}, {"message", e.what()}}.dump()
                << "\n";
    } else {
      std::cerr << "DuplicateId: " << e.what() << "\n";
    }
    return 1;
  } catch (const taskset::TasksetError& e) {
    if (as_json) {
      std::cout << json{{"ok", false}, {"error", "TasksetError"}, {"message", e.what()}}.dump() << "\n";
    } else {
      std::cerr << "invalid dataset: " << e.what() << "\n";
    }
    return 1;
  }
}

int cmd_reformulate(const std::string& problem, const std::string& tests, const std::string& id,
                    const std::string& url, const std::string& model, bool as_json) {
  taskset::LlmEndpoint endpoint;
  endpoint.url = url;
  endpoint.model = model;
  taskset::ReformulateRequest req{id, read_file(problem), read_file(tests)};
  const auto task = taskset::reformulate_task(req, endpoint);
  if (as_json) {
    std::cout << json::parse(taskset::task_to_json_line(task)).dump(2) << "\n";
  } else {
    std::cout << taskset::task_to_json_line(task) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyverify: language-agnostic code verification service"};
  app.require_subcommand(1);
  spdlog::set_default_logger(spdlog::stderr_color_mt("polyverify"));

  DriverFlags flags;

  auto* serve = app.add_subcommand("serve", "Run the HTTP verification service");
  std::string serve_config;
  std::string listen;
  serve->add_option("--config", serve_config, "Service configuration (YAML)")->required();
  serve->add_option("--listen", listen, "host:port, overriding the config");
  flags.add_to(serve);

  auto* eval = app.add_subcommand("eval", "Score completions with pass@k");
  EvalFlags ef;
  eval->add_option("--config", ef.config, "Service configuration (YAML)");
  eval->add_option("--dataset", ef.dataset, "Task dataset (JSONL)")->required();
  eval->add_option("--language", ef.language, "Language config file, or a language name from --config")
      ->required();
  eval->add_option("--completions", ef.completions, "Stored completions (JSONL)");
  eval->add_option("--endpoint", ef.endpoint, "Chat-completions URL to sample from");
  eval->add_option("--model", ef.model, "Model name for --endpoint");
  eval->add_option("--samples", ef.samples, "Samples per task (n)");
  eval->add_option("--k", ef.k, "k of pass@k");
  eval->add_option("--temperature", ef.temperature, "Sampling temperature");
  eval->add_flag("--no-prefix", ef.no_prefix, "Do not prepend the language prompt prefix");
  eval->add_flag("--json", ef.json, "Emit the JSON report instead of the table");
  eval->add_flag("--timing", ef.timing, "Include wall time in the JSON report");
  eval->add_option("--output", ef.output, "Write the report to this file");
  flags.add_to(eval);

  auto* build = app.add_subcommand("build-image", "Build (or reuse) the image for a language config");
  std::string build_config;
  std::string probe;
  bool build_json = false;
  build->add_option("config", build_config, "Language config (YAML)")->required();
  build->add_option("--probe", probe, "Command to run once inside the image, e.g. 'luajit -v'");
  build->add_flag("--json", build_json, "Machine-readable output");
  flags.add_to(build);

  auto* validate = app.add_subcommand("validate", "Check a task dataset");
  std::string dataset_path;
  bool validate_json = false;
  validate->add_option("dataset", dataset_path, "Task dataset (JSONL)")->required();
  validate->add_flag("--json", validate_json, "Machine-readable output");

  auto* reform = app.add_subcommand("reformulate", "Turn a unit-test problem into an I/O task");
  std::string problem;
  std::string tests;
  std::string task_id;
  std::string url;
  std::string model;
  bool reform_json = false;
  reform->add_option("--problem", problem, "File with the source problem text")->required();
  reform->add_option("--tests", tests, "File with the source test cases")->required();
  reform->add_option("--id", task_id, "Id of the produced task");
  reform->add_option("--endpoint", url, "Chat-completions URL")->required();
  reform->add_option("--model", model, "Model name")->required();
  reform->add_flag("--json", reform_json, "Pretty-printed JSON output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) return cmd_serve(serve_config, listen, flags, serve->count("--driver") > 0);
    if (*eval) return cmd_eval(ef, flags, eval->count("--driver") > 0);
    if (*build) return cmd_build_image(build_config, probe, build_json, flags);
    if (*validate) return cmd_validate(dataset_path, validate_json);
    if (*reform) return cmd_reformulate(problem, tests, task_id, url, model, reform_json);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
