#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

// Length-prefixed JSON frames: a 4-byte big-endian body length followed by
// the UTF-8 JSON body.
namespace polyverify::harness {

inline constexpr std::uint32_t kMaxFrameBytes = 256u << 20;

std::string encode_frame(const nlohmann::json& body);
std::string encode_frame_bytes(std::string_view body);

enum class ReadStatus {
  ok,
  eof,          // clean end of stream at a frame boundary
  timeout,      // no frame started before the deadline
  truncated,    // a frame started but stalled or the stream ended inside it
  oversized,    // declared length exceeds kMaxFrameBytes
  bad_json,     // body is not valid JSON
};

struct ReadResult {
  ReadStatus status = ReadStatus::eof;
  nlohmann::json body;
  std::string detail;
};

// Reads frames from a file descriptor. Partial frames that stall for longer
// than `stall_timeout` are discarded and reported as truncated, so a writer
// that dies mid-frame cannot wedge the reader.
class FrameReader {
 public:
  explicit FrameReader(int fd,
                       std::chrono::milliseconds stall_timeout = std::chrono::seconds(1));

  // Waits until `deadline` for the first byte of a frame.
  ReadResult read(std::chrono::steady_clock::time_point deadline);

  // Discards whatever is readable right now; used to resynchronize after an
  // oversized header.
  void drain_available();

  int fd() const noexcept { return fd_; }

 private:
  enum class Fill { complete, eof, stalled, timeout };
  Fill fill(std::size_t want, std::chrono::steady_clock::time_point deadline);

  int fd_;
  std::chrono::milliseconds stall_timeout_;
  std::string buffer_;
};

// Broken pipes surface as EPIPE instead of killing the process.
void ignore_sigpipe();

// Writes a whole frame, retrying on EINTR/EAGAIN. Returns false if the peer
// has gone away.
bool write_frame(int fd, const nlohmann::json& body);
bool write_all(int fd, std::string_view bytes);

}  // namespace polyverify::harness
