#include "polyverify/harness/agent.hpp"

#include <sys/wait.h>

#include "polyverify/harness/frame.hpp"

namespace polyverify::harness {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

namespace {

json error_frame(std::string_view code, std::string_view message) {
  return {{"type", "error"}, {"code", code}, {"message", message}};
}

void reap_orphans() {
  while (::waitpid(-1, nullptr, WNOHANG) > 0) {
  }
}

}  // namespace

int run_agent_loop(int in_fd, int out_fd, const AgentOptions& options) {
  ignore_sigpipe();
  const json heartbeat = {{"type", "hb"}};
  if (!write_frame(out_fd, heartbeat)) return 1;

  FrameReader reader(in_fd, options.frame_stall_timeout);
  auto next_heartbeat = Clock::now() + options.heartbeat_interval;
  while (true) {
    ReadResult frame = reader.read(next_heartbeat);
    json reply;
    switch (frame.status) {
      case ReadStatus::eof:
        return 0;
      case ReadStatus::timeout:
        if (!write_frame(out_fd, heartbeat)) return 1;
        next_heartbeat = Clock::now() + options.heartbeat_interval;
        continue;
      case ReadStatus::truncated:
      case ReadStatus::oversized:
      case ReadStatus::bad_json:
        reply = error_frame("bad_frame", frame.detail);
        break;
      case ReadStatus::ok: {
        const auto type = frame.body.is_object() ? frame.body.value("type", "") : "";
        if (type != "job") {
          reply = error_frame("unknown_type", "expected a job frame");
          break;
        }
        try {
          JobRequest job = job_from_json(frame.body);
          reply = report_to_json(execute_job(job, options.executor));
        } catch (const ProtocolError& e) {
          reply = error_frame("bad_job", e.what());
        } catch (const std::exception& e) {
          reply = error_frame("internal", e.what());
        }
        reap_orphans();
        break;
      }
    }
    if (!write_frame(out_fd, reply)) return 1;
    next_heartbeat = Clock::now() + options.heartbeat_interval;
  }
}

}  // namespace polyverify::harness
