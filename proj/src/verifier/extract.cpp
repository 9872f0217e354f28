#include <algorithm>
#include <cctype>
#include <map>

#include "polyverify/verifier.hpp"

namespace polyverify::verifier {

namespace {

const std::map<std::string, std::string, std::less<>>& aliases() {
  static const std::map<std::string, std::string, std::less<>> table = {
      {"luajit", "lua"},     {"jl", "julia"},      {"rscript", "r"},
      {"ml", "ocaml"},       {"f", "fortran"},     {"f77", "fortran"},
      {"f90", "fortran"},    {"f95", "fortran"},   {"f03", "fortran"},
      {"f08", "fortran"},    {"fortran90", "fortran"},
      {"py", "python"},      {"python3", "python"}, {"sh", "bash"},
      {"shell", "bash"},     {"c++", "cpp"},        {"cxx", "cpp"},
      {"js", "javascript"},  {"node", "javascript"}, {"rs", "rust"},
  };
  return table;
}

struct Block {
  std::string info;
  std::string body;
};

// Splits into lines, each keeping its terminating newline.
std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start + 1));
    start = nl + 1;
  }
  return lines;
}

std::string_view strip_newline(std::string_view line) {
  if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

struct Fence {
  char ch = 0;
  std::size_t len = 0;
  std::string_view rest;
};

// Recognizes a fence line: up to three spaces, then three or more backticks
// or tildes.
std::optional<Fence> parse_fence(std::string_view line) {
  line = strip_newline(line);
  std::size_t indent = 0;
  while (indent < line.size() && indent < 4 && line[indent] == ' ') ++indent;
  if (indent > 3) return std::nullopt;
  line.remove_prefix(indent);
  if (line.empty() || (line[0] != '`' && line[0] != '~')) return std::nullopt;
  Fence f;
  f.ch = line[0];
  while (f.len < line.size() && line[f.len] == f.ch) ++f.len;
  if (f.len < 3) return std::nullopt;
  f.rest = line.substr(f.len);
  // Backtick fences cannot carry backticks in the info string.
  if (f.ch == '`' && f.rest.find('`') != std::string_view::npos) return std::nullopt;
  return f;
}

std::string info_language(std::string_view rest) {
  auto begin = rest.find_first_not_of(" \t{.");
  if (begin == std::string_view::npos) return {};
  rest.remove_prefix(begin);
  auto end = rest.find_first_of(" \t,}");
  return std::string(rest.substr(0, end));
}

std::vector<Block> fenced_blocks(std::string_view text) {
  std::vector<Block> blocks;
  auto lines = split_lines(text);
  std::size_t i = 0;
  while (i < lines.size()) {
    auto open = parse_fence(lines[i]);
    if (!open) {
      ++i;
      continue;
    }
    Block block{info_language(open->rest), {}};
    ++i;
    while (i < lines.size()) {
      auto close = parse_fence(lines[i]);
      if (close && close->ch == open->ch && close->len >= open->len &&
          close->rest.find_first_not_of(" \t") == std::string_view::npos) {
        ++i;
        break;
      }
      block.body.append(lines[i]);
      ++i;
    }
    blocks.push_back(std::move(block));
  }
  return blocks;
}

}  // namespace

std::string canonical_language(std::string_view name) {
  std::string key;
  for (char c : name) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  auto it = aliases().find(key);
  return it == aliases().end() ? key : it->second;
}

std::string extract_code(std::string_view completion, std::string_view language) {
  auto blocks = fenced_blocks(completion);
  if (blocks.empty()) throw NoCodeBlock();
  const auto want = canonical_language(language);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    if (!it->info.empty() && canonical_language(it->info) == want) return it->body;
  }
  return blocks.back().body;
}

Candidate make_candidate(std::string completion_text, std::string language) {
  Candidate c{std::move(completion_text), std::nullopt, std::move(language)};
  try {
    c.extracted_program = extract_code(c.completion_text, c.language);
  } catch (const NoCodeBlock&) {
  }
  return c;
}

}  // namespace polyverify::verifier
