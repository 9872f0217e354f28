#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_set>

#include "polyverify/taskset.hpp"
#include "polyverify/text.hpp"

namespace polyverify::taskset {

using nlohmann::ordered_json;

namespace {

std::string string_field(const ordered_json& obj, const char* key,
                         std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError(line, std::string("missing field '") + key + "'");
  }
  if (!it->is_string()) {
    throw ParseError(line, std::string("field '") + key + "' must be a string");
  }
  return it->get<std::string>();
}

bool is_blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

}  // namespace

const Task* Dataset::find(std::string_view id) const {
  for (const auto& t : tasks) {
    if (t.id == id) return &t;
  }
  return nullptr;
}

void validate_task(const Task& task, std::size_t line) {
  if (task.id.empty()) throw ParseError(line, "task id must be non-empty");
  if (task.tests.empty()) throw EmptyTests(task.id, line);
  for (const auto* field :
       {&task.id, &task.description, &task.input_format, &task.output_format}) {
    if (!is_valid_utf8(*field)) throw ParseError(line, "text is not valid UTF-8");
  }
  for (std::size_t i = 0; i < task.tests.size(); ++i) {
    const auto& ex = task.tests[i];
    if (!is_valid_utf8(ex.input) || !is_valid_utf8(ex.output)) {
      throw ParseError(line, "test " + std::to_string(i) + " is not valid UTF-8");
    }
    if (!task.allow_empty_output && normalize_output(ex.output).empty()) {
      throw ParseError(line, "test " + std::to_string(i) +
                                 " has empty expected output (set "
                                 "allow_empty_output to permit this)");
    }
  }
}

Task parse_task(std::string_view json_text, std::size_t line) {
  ordered_json obj;
  try {
    obj = ordered_json::parse(json_text);
  } catch (const ordered_json::parse_error& e) {
    throw ParseError(line, e.what());
  }
  if (!obj.is_object()) throw ParseError(line, "expected a JSON object");

  Task task;
  task.id = string_field(obj, "id", line);
  task.description = string_field(obj, "description", line);
  task.input_format = string_field(obj, "input_format", line);
  task.output_format = string_field(obj, "output_format", line);
  if (auto it = obj.find("allow_empty_output"); it != obj.end()) {
    if (!it->is_boolean()) {
      throw ParseError(line, "field 'allow_empty_output' must be a boolean");
    }
    task.allow_empty_output = it->get<bool>();
  }

  auto tests = obj.find("tests");
  if (tests == obj.end() || !tests->is_array()) {
    throw ParseError(line, "field 'tests' must be an array");
  }
  for (const auto& t : *tests) {
    if (!t.is_object()) throw ParseError(line, "each test must be an object");
    task.tests.push_back(
        {string_field(t, "input", line), string_field(t, "output", line)});
  }
  for (const auto& [key, _] : obj.items()) {
    if (key != "id" && key != "description" && key != "input_format" &&
        key != "output_format" && key != "tests" && key != "allow_empty_output") {
      throw ParseError(line, "unknown field '" + key + "'");
    }
  }
  validate_task(task, line);
  return task;
}

Dataset parse_dataset(std::string_view jsonl, std::string source_name) {
  Dataset ds;
  ds.source_name = std::move(source_name);
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    auto nl = jsonl.find('\n', pos);
    auto line = jsonl.substr(pos, nl == std::string_view::npos ? jsonl.npos : nl - pos);
    pos = nl == std::string_view::npos ? jsonl.size() : nl + 1;
    ++line_no;
    if (is_blank(line)) continue;
    Task task = parse_task(line, line_no);
    if (!seen.insert(task.id).second) throw DuplicateId(task.id, line_no);
    ds.tasks.push_back(std::move(task));
  }
  return ds;
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TasksetError("cannot open dataset '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str(), path);
}

std::string task_to_json_line(const Task& task) {
  ordered_json obj;
  obj["id"] = task.id;
  obj["description"] = task.description;
  obj["input_format"] = task.input_format;
  obj["output_format"] = task.output_format;
  obj["tests"] = ordered_json::array();
  for (const auto& t : task.tests) {
    obj["tests"].push_back({{"input", t.input}, {"output", t.output}});
  }
  if (task.allow_empty_output) obj["allow_empty_output"] = true;
  return obj.dump();
}

std::string save_dataset(const Dataset& dataset) {
  std::string out;
  for (const auto& t : dataset.tasks) {
    out += task_to_json_line(t);
    out += '\n';
  }
  return out;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TasksetError("cannot write dataset '" + path + "'");
  out << save_dataset(dataset);
}

std::string render_prompt(const Task& task,
                          const langconfig::LanguageConfig& config,
                          const PromptOptions& options) {
  std::string out;
  std::string_view prefix = config.prompt;
  while (!prefix.empty() && (prefix.back() == '\n' || prefix.back() == ' ')) {
    prefix.remove_suffix(1);
  }
  if (!prefix.empty()) {
    out.append(prefix);
    out += "\n\n";
  }
  out += task.description;
  out += "\n\nInput format: ";
  out += task.input_format;
  out += "\n\nOutput format: ";
  out += task.output_format;
  out += '\n';
  if (options.include_sample && !task.tests.empty()) {
    auto fenced = [](const std::string& body) {
      std::string s = "```\n" + body;
      if (!body.empty() && body.back() != '\n') s += '\n';
      return s + "```\n";
    };
    out += "\nSample input:\n";
    out += fenced(task.tests.front().input);
    out += "\nSample output:\n";
    out += fenced(task.tests.front().output);
  }
  return out;
}

}  // namespace polyverify::taskset
