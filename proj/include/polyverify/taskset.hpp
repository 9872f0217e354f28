#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "polyverify/langconfig.hpp"

namespace polyverify::taskset {

// One stdin/stdout sample of the behaviour a task asks for.
struct IoExample {
  std::string input;
  std::string output;

  bool operator==(const IoExample&) const = default;
};

struct Task {
  std::string id;
  std::string description;
  std::string input_format;
  std::string output_format;
  std::vector<IoExample> tests;
  // Off by default: empty expected output would reward empty programs.
  bool allow_empty_output = false;

  bool operator==(const Task&) const = default;
};

struct Dataset {
  std::vector<Task> tasks;
  std::string source_name;

  bool operator==(const Dataset&) const = default;
  const Task* find(std::string_view id) const;
};

class TasksetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public TasksetError {
 public:
  ParseError(std::size_t line, std::string reason)
      : TasksetError("line " + std::to_string(line) + ": " + reason),
        line_(line),
        reason_(std::move(reason)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::string reason_;
};

class DuplicateId : public TasksetError {
 public:
  DuplicateId(std::string id, std::size_t line)
      : TasksetError("line " + std::to_string(line) + ": duplicate task id '" +
                     id + "'"),
        id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class EmptyTests : public TasksetError {
 public:
  EmptyTests(std::string id, std::size_t line)
      : TasksetError("line " + std::to_string(line) + ": task '" + id +
                     "' has no tests"),
        id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

// ---------------------------------------------------------------------------
// JSON-Lines datasets

/// Parses and validates one task object (the JSON text of one line).
/// `line` is only used for error messages.
Task parse_task(std::string_view json_text, std::size_t line = 1);

/// Checks the Task invariants (non-empty id and tests, UTF-8 text, non-empty
/// normalized outputs unless allowed). Throws the matching TasksetError.
void validate_task(const Task& task, std::size_t line = 1);

Dataset parse_dataset(std::string_view jsonl, std::string source_name = "");
Dataset load_dataset(const std::string& path);

/// Canonical single-line JSON for a task (fixed key order).
std::string task_to_json_line(const Task& task);
std::string save_dataset(const Dataset& dataset);
void save_dataset(const Dataset& dataset, const std::string& path);

// ---------------------------------------------------------------------------
// Prompts

struct PromptOptions {
  bool include_sample = true;
};

/// Language prefix, a blank line, then the task description, formats and
/// (optionally) the first test as a worked sample. Pure and byte-stable.
std::string render_prompt(const Task& task,
                          const langconfig::LanguageConfig& config,
                          const PromptOptions& options = {});

// ---------------------------------------------------------------------------
// Reformulation through an external chat-completions endpoint

struct ChatMessage {
  std::string role;
  std::string content;
};

struct LlmEndpoint {
  // Full URL of the chat-completions route, e.g.
  // http://localhost:8000/v1/chat/completions
  std::string url;
  std::string model;
  // Name of the environment variable holding the bearer token; empty or
  // unset means no Authorization header.
  std::string token_env = "POLYVERIFY_LLM_TOKEN";
  double temperature = 0.0;
  int timeout_seconds = 300;
};

class EndpointError : public TasksetError {
 public:
  using TasksetError::TasksetError;
};

class NoJsonBlock : public TasksetError {
 public:
  using TasksetError::TasksetError;
};

class SchemaError : public TasksetError {
 public:
  SchemaError(std::string field, const std::string& why)
      : TasksetError("field '" + field + "': " + why), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class TestCountMismatch : public TasksetError {
 public:
  TestCountMismatch(std::size_t expected, std::size_t got)
      : TasksetError("expected " + std::to_string(expected) +
                     " reformulated tests, got " + std::to_string(got)),
        expected_(expected),
        got_(got) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t got() const noexcept { return got_; }

 private:
  std::size_t expected_;
  std::size_t got_;
};

// Transport seam: returns the first choice's text for a list of messages.
using ChatTransport =
    std::function<std::string(const LlmEndpoint&, const std::vector<ChatMessage>&)>;

/// POSTs a JSON body to endpoint.url (with the bearer token, if any) and
/// returns the body of a 200 response. Throws EndpointError otherwise.
std::string post_endpoint_json(const LlmEndpoint& endpoint, const std::string& body);

/// POSTs {model, messages, temperature} to endpoint.url and returns
/// choices[0].message.content. Throws EndpointError on any failure.
std::string http_chat_completion(const LlmEndpoint& endpoint,
                                 const std::vector<ChatMessage>& messages);

/// The reformulation instruction with both placeholders substituted.
std::string reformulation_prompt(std::string_view source_problem,
                                 std::string_view source_tests);

/// Number of test cases in a unit-test listing: lines starting with
/// `assert`, or every non-blank line when there are none.
std::size_t count_source_tests(std::string_view source_tests);

/// Returns the body of the single ```json fenced block in `response`.
std::string extract_json_block(std::string_view response);

struct ReformulateRequest {
  std::string id;
  std::string source_problem;
  std::string source_tests;
};

Task reformulate_task(const ReformulateRequest& request,
                      const LlmEndpoint& endpoint,
                      const ChatTransport& transport = http_chat_completion);

}  // namespace polyverify::taskset
