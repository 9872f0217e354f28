#include "polyverify/langconfig.hpp"

namespace polyverify::langconfig {

bool is_safe_relative_path(std::string_view filename) {
  if (filename.empty() || filename.front() == '/' || filename.front() == '~') {
    return false;
  }
  bool has_name = false;
  std::string_view rest = filename;
  while (true) {
    auto slash = rest.find('/');
    auto part = rest.substr(0, slash);
    if (part == "..") return false;
    for (char c : part) {
      if (c == '\0' || c == '\n' || c == '\r') return false;
    }
    has_name = has_name || (!part.empty() && part != ".");
    if (slash == std::string_view::npos) {
      // The last component must name a file.
      return has_name && !part.empty() && part != ".";
    }
    rest = rest.substr(slash + 1);
  }
}

}  // namespace polyverify::langconfig
