#pragma once

#include "polyverify/harness/executor.hpp"

namespace polyverify::harness {

struct AgentOptions {
  ExecutorOptions executor;
  Millis heartbeat_interval = kHeartbeatInterval;
  // A frame that stops arriving midway for this long is dropped as bad_frame.
  Millis frame_stall_timeout{1'000};
};

/// The in-container loop: announces itself with a heartbeat, then serves
/// job frames from `in_fd` and answers on `out_fd` with report, error or
/// idle heartbeat frames. Returns when the input stream closes.
int run_agent_loop(int in_fd, int out_fd, const AgentOptions& options);

}  // namespace polyverify::harness
