#pragma once

#include <string>
#include <string_view>

namespace polyverify {

/// Canonical form used for output comparison: CRLF becomes LF, trailing
/// whitespace is stripped from every line, trailing blank lines are dropped
/// and a non-empty result ends with exactly one LF. Idempotent.
std::string normalize_output(std::string_view raw);

bool is_valid_utf8(std::string_view bytes);

/// Longest prefix of `bytes` that is at most `max_bytes` long and does not
/// end inside a multi-byte UTF-8 sequence.
std::string_view utf8_prefix(std::string_view bytes, std::size_t max_bytes);

/// Replaces invalid UTF-8 sequences with U+FFFD so the text can travel in
/// JSON. Valid input is returned unchanged.
std::string sanitize_utf8(std::string_view bytes);

}  // namespace polyverify
