#pragma once

#include "polyverify/harness/job.hpp"
#include "polyverify/sandbox.hpp"

namespace polyverify::harness {

// Allowance on top of the job's own time budget for frame transfer and
// process startup.
inline constexpr Millis kHostSlack{10'000};

/// Longest a job may take before the host gives up on its container.
Millis job_budget(const JobRequest& job, Millis kill_grace = kKillGrace, Millis slack = kHostSlack);

/// Sends `job` to a checked-out container and waits for the report. A
/// container that dies, hangs past the budget or sends garbage yields a report
/// with container_crashed set, and the slot is marked crashed. An error frame
/// from the agent throws ProtocolError.
JobReport run_job(sandbox::ContainerHandle& handle, const JobRequest& job,
                  Millis slack = kHostSlack);

/// Starts a throwaway container from `image_tag`, runs `command` once with
/// empty input and returns what it printed. Used to check that an image
/// provides a toolchain.
TestOutcome probe_command(sandbox::ContainerDriver& driver, const std::string& image_tag,
                          const sandbox::ResourceLimits& limits, const std::string& command,
                          Millis timeout = Millis(30'000));

}  // namespace polyverify::harness
