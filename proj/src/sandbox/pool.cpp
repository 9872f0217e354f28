#include <unistd.h>

#include <algorithm>

#include <spdlog/spdlog.h>

#include "polyverify/sandbox.hpp"

namespace polyverify::sandbox {

using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kBackgroundThreads = 4;
constexpr Millis kSpawnRetryBackoff{200};
// A partial frame from an idle agent that stalls this long is discarded.
constexpr Millis kHostFrameStall{10'000};

std::string id_fragment(const std::string& language) {
  std::string out;
  for (char c : language) {
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(c));
  }
  return out.empty() ? "lang" : out;
}

}  // namespace

ContainerSlot::ContainerSlot(std::unique_ptr<ContainerProcess> process, std::string language)
    : process_(std::move(process)),
      language_(std::move(language)),
      reader_(process_->output_fd(), kHostFrameStall),
      last_heartbeat_(Clock::now()) {}

ContainerSlot::~ContainerSlot() {
  if (process_) process_->kill();
}

bool ContainerSlot::begin_job(std::uint64_t job_id) {
  std::uint64_t expected = 0;
  return current_job_.compare_exchange_strong(expected, job_id);
}

void ContainerSlot::end_job(std::uint64_t job_id) {
  std::uint64_t expected = job_id;
  current_job_.compare_exchange_strong(expected, 0);
}

ContainerPool::ContainerPool(std::shared_ptr<ContainerDriver> driver, PoolConfig config)
    : driver_(std::move(driver)), config_(std::move(config)) {
  config_.validate();
  for (std::size_t i = 0; i < kBackgroundThreads; ++i) {
    workers_.emplace_back([this](std::stop_token st) { background_loop(st); });
  }
  monitor_ = std::jthread([this](std::stop_token st) { monitor_loop(st); });
}

ContainerPool::~ContainerPool() { stop(); }

ContainerPool::LanguagePool& ContainerPool::pool_for_locked(const std::string& language) {
  auto it = languages_.find(language);
  if (it == languages_.end()) {
    throw std::invalid_argument("pool has no language '" + language + "'");
  }
  return it->second;
}

void ContainerPool::start_language(const std::string& language, const std::string& image_tag) {
  std::lock_guard lock(mu_);
  if (stopped_) throw PoolStopped();
  auto& lp = languages_[language];
  lp.language = language;
  lp.image_tag = image_tag;
  lp.counters.language = language;
  lp.counters.image_tag = image_tag;
  lp.counters.target = config_.target_size_per_language;
  request_spawns_locked(lp);
}

bool ContainerPool::wait_until_ready(const std::string& language, Millis timeout) {
  std::unique_lock lock(mu_);
  const auto deadline = Clock::now() + timeout;
  return cv_.wait_until(lock, deadline, [&] {
    if (stopped_) return true;
    const auto& lp = pool_for_locked(language);
    return !config_.reuse_containers || lp.warm.size() >= config_.target_size_per_language;
  }) && !stopped_;
}

std::shared_ptr<ContainerSlot> ContainerPool::spawn_container(const std::string& language,
                                                              const std::string& image_tag) {
  ContainerSpec spec;
  spec.language = language;
  spec.image_tag = image_tag;
  spec.limits = config_.limits;
  {
    std::lock_guard lock(mu_);
    spec.id = "pv-" + id_fragment(language) + "-" + std::to_string(::getpid()) + "-" +
              std::to_string(next_id_++);
  }
  auto slot = std::make_shared<ContainerSlot>(driver_->start(spec), language);
  // The agent announces readiness with a heartbeat.
  auto frame = slot->reader().read(Clock::now() + config_.spawn_timeout);
  if (frame.status != harness::ReadStatus::ok || !frame.body.is_object() ||
      frame.body.value("type", "") != "hb") {
    std::string why = frame.status == harness::ReadStatus::timeout ? "timed out"
                      : frame.status == harness::ReadStatus::ok    ? "unexpected frame"
                                                                   : "agent exited";
    throw SandboxError("container " + spec.id + " did not become ready: " + why);
  }
  slot->note_heartbeat();
  return slot;
}

void ContainerPool::request_spawns_locked(LanguagePool& lp) {
  if (stopped_ || !config_.reuse_containers) return;
  while (lp.live.size() + lp.spawning < config_.target_size_per_language) {
    ++lp.spawning;
    run_background([this, language = lp.language] { spawn_async(language); });
  }
}

void ContainerPool::spawn_async(const std::string& language) {
  std::string tag;
  {
    std::lock_guard lock(mu_);
    tag = pool_for_locked(language).image_tag;
  }
  std::shared_ptr<ContainerSlot> slot;
  std::string error;
  try {
    slot = spawn_container(language, tag);
  } catch (const std::exception& e) {
    error = e.what();
  }
  std::unique_lock lock(mu_);
  auto& lp = pool_for_locked(language);
  --lp.spawning;
  if (!slot) {
    ++lp.counters.spawn_failures;
    lp.counters.last_spawn_error = error;
    cv_.notify_all();
    lock.unlock();
    spdlog::warn("spawning {} container failed: {}", language, error);
    // The monitor re-requests missing containers; back off a little so a
    // broken image does not spin.
    std::this_thread::sleep_for(kSpawnRetryBackoff);
    return;
  }
  if (stopped_) {
    lock.unlock();
    slot.reset();
    return;
  }
  slot->state_ = ContainerState::warm;
  lp.live.push_back(slot);
  lp.warm.push_back(slot);
  ++lp.counters.spawned;
  cv_.notify_all();
}

ContainerHandle ContainerPool::checkout(const std::string& language) {
  std::unique_lock lock(mu_);
  const auto started = Clock::now();
  while (true) {
    if (stopped_) throw PoolStopped();
    auto& lp = pool_for_locked(language);

    if (!config_.reuse_containers) {
      if (lp.live.size() + lp.spawning < config_.target_size_per_language) {
        ++lp.spawning;
        const std::string tag = lp.image_tag;
        lock.unlock();
        std::shared_ptr<ContainerSlot> slot;
        try {
          slot = spawn_container(language, tag);
        } catch (const std::exception& e) {
          lock.lock();
          --lp.spawning;
          ++lp.counters.spawn_failures;
          lp.counters.last_spawn_error = e.what();
          cv_.notify_all();
          throw;
        }
        lock.lock();
        --lp.spawning;
        if (stopped_) {
          lock.unlock();
          slot.reset();
          throw PoolStopped();
        }
        slot->state_ = ContainerState::busy;
        lp.live.push_back(slot);
        ++lp.counters.spawned;
        return ContainerHandle{slot->id(), language, ContainerState::busy, slot->jobs_served(),
                               slot->ram_disk_path(), slot};
      }
    } else {
      while (!lp.warm.empty()) {
        auto slot = lp.warm.front();
        lp.warm.pop_front();
        if (!slot->alive()) {
          retire_locked(lp, slot, true);
          continue;
        }
        slot->state_ = ContainerState::busy;
        return ContainerHandle{slot->id(), language, ContainerState::busy, slot->jobs_served(),
                               slot->ram_disk_path(), slot};
      }
      request_spawns_locked(lp);
    }

    const bool any_busy = std::any_of(lp.live.begin(), lp.live.end(), [](const auto& s) {
      return s->state() == ContainerState::busy;
    });
    if (!any_busy && Clock::now() - started > config_.spawn_timeout) {
      std::string why = lp.counters.last_spawn_error.empty()
                            ? std::string()
                            : ": " + lp.counters.last_spawn_error;
      throw SpawnTimeout("no " + language + " container became available within " +
                         std::to_string(config_.spawn_timeout.count()) + " ms" + why);
    }
    cv_.wait_for(lock, Millis(100));
  }
}

void ContainerPool::give_back(ContainerHandle& handle, ReturnVerdict verdict) {
  auto slot = std::move(handle.slot);
  if (!slot) return;
  std::lock_guard lock(mu_);
  auto& lp = pool_for_locked(slot->language());
  const auto served = ++slot->jobs_served_;
  ++lp.counters.jobs_served;
  handle.jobs_served = served;
  const bool crashed = slot->crashed() || !slot->alive();
  const bool worn_out = config_.max_jobs_per_container && served >= *config_.max_jobs_per_container;
  if (stopped_ || crashed || verdict == ReturnVerdict::dirty || !config_.reuse_containers ||
      worn_out) {
    retire_locked(lp, slot, crashed);
    request_spawns_locked(lp);
  } else {
    slot->state_ = ContainerState::warm;
    lp.warm.push_back(slot);
  }
  handle.state = slot->state();
  cv_.notify_all();
}

void ContainerPool::retire_locked(LanguagePool& lp, const std::shared_ptr<ContainerSlot>& slot,
                                  bool crashed) {
  slot->state_ = crashed ? ContainerState::crashed : ContainerState::retired;
  std::erase(lp.live, slot);
  std::erase(lp.warm, slot);
  if (crashed) {
    ++lp.counters.crashed;
    ++crash_count_;
    spdlog::warn("container {} ({}) crashed", slot->id(), lp.language);
  } else {
    ++lp.counters.retired;
  }
  run_background([slot] { slot->process_->kill(); });
}

void ContainerPool::run_background(std::function<void()> task) {
  {
    std::lock_guard lock(task_mu_);
    tasks_.push_back(std::move(task));
  }
  task_cv_.notify_one();
}

void ContainerPool::background_loop(std::stop_token stop) {
  while (true) {
    std::function<void()> task;
    {
      std::unique_lock lock(task_mu_);
      task_cv_.wait(lock, stop, [&] { return !tasks_.empty(); });
      if (tasks_.empty()) return;
      task = std::move(tasks_.front());
      tasks_.pop_front();
    }
    try {
      task();
    } catch (const std::exception& e) {
      spdlog::error("pool background task failed: {}", e.what());
    }
  }
}

void ContainerPool::monitor_loop(std::stop_token stop) {
  std::mutex sleep_mu;
  std::condition_variable_any sleeper;
  while (!stop.stop_requested()) {
    {
      std::unique_lock lock(sleep_mu);
      sleeper.wait_for(lock, stop, config_.health_check_interval, [] { return false; });
    }
    if (stop.stop_requested()) return;

    std::vector<std::shared_ptr<ContainerSlot>> warm;
    {
      std::lock_guard lock(mu_);
      if (stopped_) return;
      for (auto& [name, lp] : languages_) {
        request_spawns_locked(lp);
        warm.insert(warm.end(), lp.warm.begin(), lp.warm.end());
      }
    }
    for (auto& slot : warm) {
      std::unique_lock io(slot->io_mutex(), std::try_to_lock);
      if (!io || slot->state() != ContainerState::warm) continue;
      bool healthy = slot->alive();
      while (healthy) {
        auto frame = slot->reader().read(Clock::now());
        if (frame.status == harness::ReadStatus::timeout) break;
        if (frame.status != harness::ReadStatus::ok) {
          healthy = false;
          break;
        }
        if (frame.body.is_object() && frame.body.value("type", "") == "hb") slot->note_heartbeat();
      }
      if (healthy && Clock::now() - slot->last_heartbeat() > config_.heartbeat_miss_limit) {
        healthy = false;
      }
      io.unlock();
      if (!healthy) {
        std::lock_guard lock(mu_);
        if (slot->state() == ContainerState::warm) {
          slot->mark_crashed();
          retire_locked(languages_.at(slot->language()), slot, true);
          request_spawns_locked(languages_.at(slot->language()));
          cv_.notify_all();
        }
      }
    }
  }
}

void ContainerPool::stop() {
  std::vector<std::shared_ptr<ContainerSlot>> doomed;
  {
    std::lock_guard lock(mu_);
    if (!stopped_) {
      stopped_ = true;
      for (auto& [name, lp] : languages_) {
        doomed.insert(doomed.end(), lp.live.begin(), lp.live.end());
        lp.live.clear();
        lp.warm.clear();
      }
    }
    cv_.notify_all();
  }
  for (auto& slot : doomed) {
    slot->state_ = ContainerState::retired;
    slot->process_->kill();
  }
  if (monitor_.joinable()) {
    monitor_.request_stop();
    monitor_.join();
  }
  for (auto& w : workers_) w.request_stop();
  task_cv_.notify_all();
  for (auto& w : workers_) {
    if (w.joinable()) w.join();
  }
}

bool ContainerPool::stopped() const {
  std::lock_guard lock(mu_);
  return stopped_;
}

PoolMetrics ContainerPool::metrics() const {
  std::lock_guard lock(mu_);
  PoolMetrics m;
  m.crash_count = crash_count_;
  for (const auto& [name, lp] : languages_) {
    auto c = lp.counters;
    c.warm = lp.warm.size();
    c.busy = static_cast<std::size_t>(std::count_if(
        lp.live.begin(), lp.live.end(),
        [](const auto& s) { return s->state() == ContainerState::busy; }));
    c.spawning = lp.spawning;
    m.jobs_served += c.jobs_served;
    m.languages.push_back(std::move(c));
  }
  return m;
}

std::vector<ContainerInfo> ContainerPool::containers(const std::string& language) const {
  std::lock_guard lock(mu_);
  std::vector<ContainerInfo> out;
  auto it = languages_.find(language);
  if (it == languages_.end()) return out;
  for (const auto& s : it->second.live) {
    out.push_back({s->id(), s->language(), s->state(), s->jobs_served(), s->host_pid()});
  }
  return out;
}

std::size_t ContainerPool::capacity(const std::string&) const {
  return config_.target_size_per_language;
}

}  // namespace polyverify::sandbox
