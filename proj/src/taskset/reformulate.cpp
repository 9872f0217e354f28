#include <cstdlib>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "polyverify/taskset.hpp"

namespace polyverify::taskset {

using nlohmann::json;

namespace {

constexpr std::string_view kDescriptionSlot = "{original mbpp problem description}";
constexpr std::string_view kTestsSlot = "{original mbpp test cases}";

// Used verbatim, typos included; models were prompted with exactly this.
constexpr std::string_view kReformulationTemplate =
    R"(You are a competitive programming expert.
You are given a problem that asks you to implement a function.
Your task is to translate the description of the problem into a form that accepts one set of function arguments as inputs and return the function return value as output.

Use programming competition style input and outputs -- that is, priorize the use of spaces and newlines to separate inputs and outputs over using commas and parentheses (or other delimiters). Specifically, for 2d lists, you should print them as a list of lists, where the outer lists elements are separated by newlines and the elements of the inner lists are separated by spaces.
For example, a 2d list like [[1, 2], [3, 4]] should be printed as:
1 2
3 4
Do not use any other delimiters.

If there are multiple 2d lists, you should use 2 newlines to separate them.
for example, a 2d list like [[1, 2], [3, 4]] and [[5, 6], [7, 8]] should be printed as:
1 2
3 4

5 6
7 8


If the problem requires outputing decimal numbers, make sure the output format specifies to round all decimal numbers to 4 decimal places. In this case, you should also round all the numbers in the output to 4 decimal places.

Do not forget to specify the input and output format in the description.

Here is the problem description:
{original mbpp problem description}

Here are the test cases:
{original mbpp test cases}

You should return a json object with the following fields:
- "description": the description of the problem
- "input_format": a string describing the input format
- "output_format": a string describing the output format
- "tests": a list of test cases, each test case is a json object with the following fields:
  - "input": a string that represents the input of the test case, in the same format as the input format in the description
  - "output": a string that represents the output of the test case, in the same format as the output format in the description

Place your response in a single ```json ``` block. Do not include any other text in your response.)";

std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool iequals(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(a[i])) !=
        std::tolower(static_cast<unsigned char>(b[i]))) {
      return false;
    }
  }
  return true;
}

std::string required_string(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(key, "missing");
  if (!it->is_string()) throw SchemaError(key, "must be a string");
  return it->get<std::string>();
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw EndpointError("endpoint URL must include a scheme: " + url);
  }
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::string reformulation_prompt(std::string_view source_problem,
                                 std::string_view source_tests) {
  std::string out(kReformulationTemplate);
  out.replace(out.find(kDescriptionSlot), kDescriptionSlot.size(), source_problem);
  out.replace(out.find(kTestsSlot), kTestsSlot.size(), source_tests);
  return out;
}

std::size_t count_source_tests(std::string_view source_tests) {
  std::size_t asserts = 0;
  std::size_t nonblank = 0;
  std::size_t pos = 0;
  while (pos <= source_tests.size()) {
    auto nl = source_tests.find('\n', pos);
    auto line = trim(source_tests.substr(
        pos, nl == std::string_view::npos ? source_tests.npos : nl - pos));
    if (!line.empty()) ++nonblank;
    if (line.starts_with("assert")) ++asserts;
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return asserts > 0 ? asserts : nonblank;
}

std::string extract_json_block(std::string_view response) {
  std::vector<std::string> blocks;
  std::optional<std::string> current;
  std::size_t pos = 0;
  while (pos < response.size()) {
    auto nl = response.find('\n', pos);
    auto raw = response.substr(pos, nl == std::string_view::npos ? response.npos
                                                                 : nl - pos + 1);
    pos = nl == std::string_view::npos ? response.size() : nl + 1;
    auto line = trim(raw.substr(0, raw.find('\n')));
    if (!current) {
      if (line.starts_with("```") && iequals(trim(line.substr(3)), "json")) {
        current.emplace();
      }
    } else if (line == "```") {
      blocks.push_back(std::move(*current));
      current.reset();
    } else {
      current->append(raw);
    }
  }
  if (blocks.empty()) throw NoJsonBlock("response contains no ```json block");
  if (blocks.size() > 1) {
    throw NoJsonBlock("response contains " + std::to_string(blocks.size()) +
                      " ```json blocks, expected exactly one");
  }
  return blocks.front();
}

std::string post_endpoint_json(const LlmEndpoint& endpoint, const std::string& body) {
  auto [origin, path] = split_url(endpoint.url);
  httplib::Client client(origin);
  client.set_read_timeout(endpoint.timeout_seconds, 0);
  client.set_write_timeout(endpoint.timeout_seconds, 0);

  httplib::Headers headers;
  if (!endpoint.token_env.empty()) {
    if (const char* token = std::getenv(endpoint.token_env.c_str());
        token != nullptr && *token != '\0') {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
  }

  auto res = client.Post(path, headers, body, "application/json");
  if (!res) {
    throw EndpointError("request to " + endpoint.url + " failed: " +
                        httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw EndpointError("endpoint returned HTTP " + std::to_string(res->status) +
                        ": " + res->body.substr(0, 512));
  }
  return res->body;
}

std::string http_chat_completion(const LlmEndpoint& endpoint,
                                 const std::vector<ChatMessage>& messages) {
  json body = {{"model", endpoint.model},
               {"temperature", endpoint.temperature},
               {"messages", json::array()}};
  for (const auto& m : messages) {
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }
  const std::string reply_text = post_endpoint_json(endpoint, body.dump());
  try {
    auto reply = json::parse(reply_text);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw EndpointError(std::string("malformed completion response: ") + e.what());
  }
}

Task reformulate_task(const ReformulateRequest& request,
                      const LlmEndpoint& endpoint,
                      const ChatTransport& transport) {
  if (trim(request.source_problem).empty() || trim(request.source_tests).empty()) {
    throw TasksetError("source problem and tests must be non-empty");
  }
  const std::size_t expected = count_source_tests(request.source_tests);
  const std::string reply = transport(
      endpoint,
      {{"user", reformulation_prompt(request.source_problem, request.source_tests)}});

  json obj;
  try {
    obj = json::parse(extract_json_block(reply));
  } catch (const json::parse_error& e) {
    throw SchemaError("<root>", std::string("invalid JSON: ") + e.what());
  }
  if (!obj.is_object()) throw SchemaError("<root>", "expected a JSON object");

  Task task;
  task.id = request.id.empty() ? "reformulated" : request.id;
  task.description = required_string(obj, "description");
  task.input_format = required_string(obj, "input_format");
  task.output_format = required_string(obj, "output_format");
  auto tests = obj.find("tests");
  if (tests == obj.end() || !tests->is_array()) {
    throw SchemaError("tests", "must be an array");
  }
  for (std::size_t i = 0; i < tests->size(); ++i) {
    const auto& t = (*tests)[i];
    const auto field = "tests[" + std::to_string(i) + "]";
    if (!t.is_object()) throw SchemaError(field, "must be an object");
    task.tests.push_back({required_string(t, "input"), required_string(t, "output")});
  }
  if (task.tests.size() != expected) {
    throw TestCountMismatch(expected, task.tests.size());
  }
  validate_task(task);
  return task;
}

}  // namespace polyverify::taskset
