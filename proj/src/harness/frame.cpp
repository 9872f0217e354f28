#include "polyverify/harness/frame.hpp"

#include <poll.h>
#include <signal.h>
#include <unistd.h>

#include <array>
#include <cerrno>

namespace polyverify::harness {

using Clock = std::chrono::steady_clock;

namespace {

int millis_until(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  if (left.count() <= 0) return 0;
  return static_cast<int>(std::min<std::int64_t>(left.count(), 1 << 30));
}

}  // namespace

std::string encode_frame_bytes(std::string_view body) {
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(body.size() + 4);
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out.append(body);
  return out;
}

std::string encode_frame(const nlohmann::json& body) {
  return encode_frame_bytes(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace));
}

void ignore_sigpipe() {
  static const bool once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

bool write_all(int fd, std::string_view bytes) {
  ignore_sigpipe();
  while (!bytes.empty()) {
    ssize_t n = ::write(fd, bytes.data(), bytes.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN) {
        pollfd p{fd, POLLOUT, 0};
        ::poll(&p, 1, 100);
        continue;
      }
      return false;
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

bool write_frame(int fd, const nlohmann::json& body) {
  return write_all(fd, encode_frame(body));
}

FrameReader::FrameReader(int fd, std::chrono::milliseconds stall_timeout)
    : fd_(fd), stall_timeout_(stall_timeout) {}

FrameReader::Fill FrameReader::fill(std::size_t want, Clock::time_point deadline) {
  std::array<char, 256 * 1024> chunk{};
  auto last_progress = Clock::now();
  while (buffer_.size() < want) {
    const bool started = !buffer_.empty();
    const auto until = started ? last_progress + stall_timeout_ : deadline;
    pollfd p{fd_, POLLIN, 0};
    int rc = ::poll(&p, 1, millis_until(until));
    if (rc < 0) {
      if (errno == EINTR) continue;
      return Fill::eof;
    }
    if (rc == 0) {
      if (Clock::now() < until) continue;
      return started ? Fill::stalled : Fill::timeout;
    }
    ssize_t n = ::read(fd_, chunk.data(), chunk.size());
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return Fill::eof;
    }
    if (n == 0) return Fill::eof;
    buffer_.append(chunk.data(), static_cast<std::size_t>(n));
    last_progress = Clock::now();
  }
  return Fill::complete;
}

void FrameReader::drain_available() {
  buffer_.clear();
  std::array<char, 64 * 1024> chunk{};
  auto quiet_since = Clock::now();
  while (Clock::now() - quiet_since < stall_timeout_) {
    pollfd p{fd_, POLLIN, 0};
    int rc = ::poll(&p, 1, 50);
    if (rc <= 0) continue;
    ssize_t n = ::read(fd_, chunk.data(), chunk.size());
    if (n <= 0) return;
    quiet_since = Clock::now();
  }
}

ReadResult FrameReader::read(Clock::time_point deadline) {
  ReadResult result;
  switch (fill(1, deadline)) {
    case Fill::complete: break;
    case Fill::timeout: result.status = ReadStatus::timeout; return result;
    default: result.status = ReadStatus::eof; return result;
  }
  if (fill(4, deadline) != Fill::complete) {
    buffer_.clear();
    result.status = ReadStatus::truncated;
    result.detail = "stream ended inside a frame header";
    return result;
  }
  const auto* b = reinterpret_cast<const unsigned char*>(buffer_.data());
  const std::uint32_t len = (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
                            (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
  if (len > kMaxFrameBytes) {
    drain_available();
    result.status = ReadStatus::oversized;
    result.detail = "frame length " + std::to_string(len) + " exceeds limit";
    return result;
  }
  if (fill(4 + std::size_t{len}, deadline) != Fill::complete) {
    buffer_.clear();
    result.status = ReadStatus::truncated;
    result.detail = "frame body shorter than its declared length";
    return result;
  }
  std::string_view body(buffer_.data() + 4, len);
  try {
    result.body = nlohmann::json::parse(body);
    result.status = ReadStatus::ok;
  } catch (const nlohmann::json::parse_error& e) {
    result.status = ReadStatus::bad_json;
    result.detail = e.what();
  }
  buffer_.erase(0, 4 + std::size_t{len});
  return result;
}

}  // namespace polyverify::harness
