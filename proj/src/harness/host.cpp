#include "polyverify/harness/host.hpp"

#include <atomic>

#include "polyverify/harness/frame.hpp"

namespace polyverify::harness {

using Clock = std::chrono::steady_clock;

namespace {

std::atomic<std::uint64_t> next_job_id{1};

JobReport crashed_report() {
  JobReport report;
  report.container_crashed = true;
  return report;
}

}  // namespace

Millis job_budget(const JobRequest& job, Millis kill_grace, Millis slack) {
  Millis total = slack;
  if (job.compile) total += job.compile_timeout + kill_grace;
  total += static_cast<Millis::rep>(job.tests.size()) * (job.test_timeout + kill_grace);
  return total;
}

JobReport run_job(sandbox::ContainerHandle& handle, const JobRequest& job, Millis slack) {
  job.validate();
  if (!handle.slot) throw std::logic_error("run_job on a handle that was given back");
  auto& slot = *handle.slot;
  std::lock_guard io(slot.io_mutex());
  const std::uint64_t job_id = next_job_id++;
  if (!slot.begin_job(job_id)) {
    throw std::logic_error("container " + slot.id() + " is already running a job");
  }
  struct EndJob {
    sandbox::ContainerSlot& slot;
    std::uint64_t id;
    ~EndJob() { slot.end_job(id); }
  } end_job{slot, job_id};

  // Heartbeats that arrived while the container sat idle.
  while (true) {
    auto frame = slot.reader().read(Clock::now());
    if (frame.status == ReadStatus::timeout) break;
    if (frame.status != ReadStatus::ok) {
      slot.mark_crashed();
      return crashed_report();
    }
  }

  if (!write_frame(slot.input_fd(), job_to_json(job))) {
    slot.mark_crashed();
    return crashed_report();
  }
  const auto deadline = Clock::now() + job_budget(job, kKillGrace, slack);
  while (true) {
    auto frame = slot.reader().read(deadline);
    if (frame.status != ReadStatus::ok || !frame.body.is_object()) {
      slot.mark_crashed();
      return crashed_report();
    }
    const auto type = frame.body.value("type", "");
    if (type == "hb") {
      slot.note_heartbeat();
      continue;
    }
    if (type == "error") {
      throw ProtocolError("agent rejected job (" + frame.body.value("code", "") +
                          "): " + frame.body.value("message", ""));
    }
    if (type != "report") {
      slot.mark_crashed();
      return crashed_report();
    }
    try {
      JobReport report = report_from_json(frame.body);
      slot.note_heartbeat();
      return report;
    } catch (const ProtocolError&) {
      slot.mark_crashed();
      return crashed_report();
    }
  }
}

TestOutcome probe_command(sandbox::ContainerDriver& driver, const std::string& image_tag,
                          const sandbox::ResourceLimits& limits, const std::string& command,
                          Millis timeout) {
  sandbox::ContainerSpec spec;
  spec.image_tag = image_tag;
  spec.language = "probe";
  spec.limits = limits;
  auto slot = std::make_shared<sandbox::ContainerSlot>(driver.start(spec), "probe");
  auto ready = slot->reader().read(Clock::now() + timeout);
  if (ready.status != ReadStatus::ok || ready.body.value("type", "") != "hb") {
    throw sandbox::SandboxError("probe container did not start");
  }
  sandbox::ContainerHandle handle{slot->id(), "probe", sandbox::ContainerState::busy, 0,
                                  slot->ram_disk_path(), slot};
  JobRequest job;
  job.filename = "probe.txt";
  job.execute = command;
  job.tests = {{"", "-"}};
  job.test_timeout = timeout;
  job.fail_fast = false;
  auto report = run_job(handle, job);
  if (report.container_crashed || report.outcomes.empty()) {
    throw sandbox::SandboxError("probe container crashed");
  }
  return report.outcomes.front();
}

}  // namespace polyverify::harness
