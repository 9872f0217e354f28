#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "polyverify/rlmath.hpp"
#include "polyverify/service.hpp"

namespace polyverify::service {

using nlohmann::json;

std::vector<CompletionRecord> parse_completions(std::string_view jsonl) {
  std::vector<CompletionRecord> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      auto j = json::parse(line);
      CompletionRecord r;
      r.task_id = j.at("task_id").get<std::string>();
      const auto idx = j.at("sample_index").get<long long>();
      if (idx < 0) throw ServiceError("sample_index must be non-negative");
      r.sample_index = static_cast<std::size_t>(idx);
      r.completion_text = j.at("completion_text").get<std::string>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ServiceError("completions line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ServiceError& e) {
      throw ServiceError("completions line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<CompletionRecord> load_completions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ServiceError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_completions(ss.str());
}

Generator endpoint_generator(taskset::LlmEndpoint endpoint, int max_attempts) {
  return [endpoint, max_attempts](const std::string& prompt, std::size_t n, double temperature) {
    json body = {{"model", endpoint.model},
                 {"temperature", temperature},
                 {"n", n},
                 {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
    std::string last_error;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
      try {
        auto reply = json::parse(taskset::post_endpoint_json(endpoint, body.dump()));
        std::vector<std::string> texts;
        for (const auto& choice : reply.at("choices")) {
          texts.push_back(choice.at("message").at("content").get<std::string>());
        }
        if (texts.size() < n) {
          throw taskset::EndpointError("endpoint returned " + std::to_string(texts.size()) +
                                       " of " + std::to_string(n) + " choices");
        }
        texts.resize(n);
        return texts;
      } catch (const json::exception& e) {
        throw taskset::EndpointError(std::string("malformed completion response: ") + e.what());
      } catch (const taskset::EndpointError& e) {
        last_error = e.what();
        if (attempt == max_attempts) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(500 << (attempt - 1)));
      }
    }
    throw taskset::EndpointError("generation failed after " + std::to_string(max_attempts) +
                                 " attempts: " + last_error);
  };
}

namespace {

TaskEval score_task(const taskset::Task& task, const std::vector<verifier::Verdict>& verdicts,
                    std::size_t k) {
  TaskEval t;
  t.task_id = task.id;
  t.n = verdicts.size();
  for (const auto& v : verdicts) {
    if (v.reward == 1) {
      ++t.c;
    } else {
      ++t.failures[std::string(verifier::to_string(v.failure_kind))];
    }
  }
  t.pass_at_k = rlmath::pass_at_k(static_cast<std::int64_t>(t.n), static_cast<std::int64_t>(t.c),
                                  static_cast<std::int64_t>(k));
  return t;
}

void check_options(const EvalOptions& options) {
  if (options.k < 1 || options.samples < options.k) {
    throw ServiceError("eval needs 1 <= k <= samples");
  }
}

void finish(EvalReport& report) {
  double sum = 0.0;
  for (const auto& t : report.tasks) {
    sum += t.pass_at_k;
    for (const auto& [kind, count] : t.failures) report.failure_counts[kind] += count;
  }
  report.pass_at_k = report.tasks.empty() ? 0.0 : sum / static_cast<double>(report.tasks.size());
}

}  // namespace

EvalReport eval_completions(const taskset::Dataset& dataset, const std::string& language,
                            const std::vector<CompletionRecord>& completions,
                            const EvalOptions& options, const GroupVerifier& verify) {
  check_options(options);
  const auto started = std::chrono::steady_clock::now();
  std::map<std::string, std::map<std::size_t, const std::string*>> by_task;
  for (const auto& r : completions) {
    auto& slot = by_task[r.task_id][r.sample_index];
    if (slot != nullptr) {
      throw ServiceError("duplicate sample " + std::to_string(r.sample_index) + " for task '" +
                         r.task_id + "'");
    }
    slot = &r.completion_text;
  }

  // Check every task before running anything.
  for (const auto& task : dataset.tasks) {
    const auto it = by_task.find(task.id);
    std::size_t have = 0;
    if (it != by_task.end()) {
      for (std::size_t i = 0; i < options.samples; ++i) have += it->second.count(i);
    }
    if (have < options.samples) throw MissingSamples(task.id, have, options.samples);
  }

  EvalReport report;
  report.language = language;
  report.samples = options.samples;
  report.k = options.k;
  for (const auto& task : dataset.tasks) {
    const auto& samples = by_task.at(task.id);
    std::vector<verifier::Candidate> candidates;
    for (std::size_t i = 0; i < options.samples; ++i) {
      candidates.push_back(verifier::make_candidate(*samples.at(i), language));
    }
    report.tasks.push_back(score_task(task, verify(candidates, task), options.k));
  }
  finish(report);
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

EvalReport eval_generated(const taskset::Dataset& dataset,
                          const langconfig::LanguageConfig& config, const Generator& generate,
                          const EvalOptions& options, const GroupVerifier& verify) {
  check_options(options);
  const auto started = std::chrono::steady_clock::now();
  auto prompt_config = config;
  if (!options.include_prefix) prompt_config.prompt.clear();

  EvalReport report;
  report.language = config.name;
  report.samples = options.samples;
  report.k = options.k;
  for (const auto& task : dataset.tasks) {
    const auto prompt = taskset::render_prompt(task, prompt_config);
    auto texts = generate(prompt, options.samples, options.temperature);
    if (texts.size() < options.samples) {
      throw MissingSamples(task.id, texts.size(), options.samples);
    }
    std::vector<verifier::Candidate> candidates;
    for (std::size_t i = 0; i < options.samples; ++i) {
      candidates.push_back(verifier::make_candidate(std::move(texts[i]), config.name));
    }
    report.tasks.push_back(score_task(task, verify(candidates, task), options.k));
  }
  finish(report);
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

nlohmann::ordered_json report_to_json(const EvalReport& report, bool include_timing) {
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& t : report.tasks) {
    nlohmann::ordered_json failures = nlohmann::ordered_json::object();
    for (const auto& [kind, count] : t.failures) failures[kind] = count;
    tasks.push_back({{"task_id", t.task_id},
                     {"n", t.n},
                     {"c", t.c},
                     {"pass_at_k", t.pass_at_k},
                     {"failures", failures}});
  }
  nlohmann::ordered_json failure_counts = nlohmann::ordered_json::object();
  for (const auto& [kind, count] : report.failure_counts) failure_counts[kind] = count;
  const std::string metric = "pass@" + std::to_string(report.k);
  nlohmann::ordered_json out = {{"language", report.language},
                                {"samples", report.samples},
                                {"k", report.k},
                                {"metric", metric},
                                {"task_count", report.tasks.size()},
                                {"pass_at_k", report.pass_at_k},
                                {"failure_counts", failure_counts},
                                {"tasks", tasks}};
  if (include_timing) out["wall_time_seconds"] = report.wall_time_seconds;
  return out;
}

// The epsilon absorbs summation error: a mean that is exactly x.5% in exact arithmetic
// can come out a few ulps below it.
int percent(double rate) { return static_cast<int>(std::floor(rate * 100.0 + 0.5 + 1e-9)); }

std::string render_table(const EvalReport& report) {
  const std::string metric = "pass@" + std::to_string(report.k);
  std::size_t width = 4;
  for (const auto& t : report.tasks) width = std::max(width, t.task_id.size());

  std::ostringstream out;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  auto rpad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  out << pad("task", width) << "  " << rpad("n", 4) << "  " << rpad("c", 4) << "  "
      << rpad(metric, 7) << "\n";
  for (const auto& t : report.tasks) {
    out << pad(t.task_id, width) << "  " << rpad(std::to_string(t.n), 4) << "  "
        << rpad(std::to_string(t.c), 4) << "  " << rpad(std::to_string(percent(t.pass_at_k)) + "%", 7)
        << "\n";
  }
  out << "\n"
      << report.language << ": " << metric << " = " << percent(report.pass_at_k) << "% over "
      << report.tasks.size() << " tasks, " << report.samples << " samples each\n";
  if (!report.failure_counts.empty()) {
    out << "failures:";
    for (const auto& [kind, count] : report.failure_counts) out << " " << kind << "=" << count;
    out << "\n";
  }
  return out.str();
}

}  // namespace polyverify::service
