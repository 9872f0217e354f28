#include <doctest.h>

#include <signal.h>

#include <chrono>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <thread>

#include "polyverify/harness/frame.hpp"
#include "polyverify/harness/host.hpp"
#include "sandbox_fixtures.hpp"

using namespace polyverify::sandbox;
namespace harness = polyverify::harness;
namespace lc = polyverify::langconfig;
using Clock = std::chrono::steady_clock;
using namespace std::chrono_literals;

namespace {

// Counts builds and can hold them open to widen race windows.
class CountingDriver final : public ContainerDriver {
 public:
  explicit CountingDriver(std::shared_ptr<ContainerDriver> inner) : inner_(std::move(inner)) {}
  std::string name() const override { return "counting"; }
  bool image_exists(const std::string& tag) override { return inner_->image_exists(tag); }
  void build_image(const lc::ImageBuildPlan& plan) override {
    ++builds;
    std::this_thread::sleep_for(100ms);
    inner_->build_image(plan);
  }
  std::unique_ptr<ContainerProcess> start(const ContainerSpec& spec) override {
    ++starts;
    return inner_->start(spec);
  }
  std::atomic<int> builds{0};
  std::atomic<int> starts{0};

 private:
  std::shared_ptr<ContainerDriver> inner_;
};

// A container whose agent never says hello.
class SilentProcess final : public ContainerProcess {
 public:
  SilentProcess() {
    int a[2], b[2];
    REQUIRE(::pipe(a) == 0);
    REQUIRE(::pipe(b) == 0);
    in_r_ = a[0], in_w_ = a[1], out_r_ = b[0], out_w_ = b[1];
  }
  ~SilentProcess() override {
    for (int fd : {in_r_, in_w_, out_r_, out_w_}) ::close(fd);
  }
  const std::string& id() const override { return id_; }
  int input_fd() const override { return in_w_; }
  int output_fd() const override { return out_r_; }
  bool alive() override { return true; }
  void kill() override {}
  std::optional<int> host_pid() const override { return std::nullopt; }
  std::string ram_disk_path() const override { return "/sandbox"; }

 private:
  std::string id_ = "silent";
  int in_r_, in_w_, out_r_, out_w_;
};

class SilentDriver final : public ContainerDriver {
 public:
  std::string name() const override { return "silent"; }
  bool image_exists(const std::string&) override { return true; }
  void build_image(const lc::ImageBuildPlan&) override {}
  std::unique_ptr<ContainerProcess> start(const ContainerSpec&) override {
    return std::make_unique<SilentProcess>();
  }
};

struct Harness {
  fixtures::StateDir state;
  std::shared_ptr<ProcessDriver> driver = fixtures::process_driver(state.path);
  ImageCache images{driver};
  std::string tag = images.ensure_image(lc::build_plan(fixtures::sh_config()));
};

PoolConfig small_pool(std::size_t size) {
  PoolConfig c;
  c.target_size_per_language = size;
  c.spawn_timeout = 20s;
  c.health_check_interval = 100ms;
  return c;
}

bool wait_for(const std::function<bool()>& pred, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (Clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(20ms);
  }
  return pred();
}

// Dead or a zombie.
bool process_gone(int pid) {
  std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
  std::string line;
  if (!std::getline(stat, line)) return true;
  auto close = line.rfind(')');
  return close != std::string::npos && close + 2 < line.size() && line[close + 2] == 'Z';
}

std::size_t live_count(const ContainerPool& pool, const std::string& lang) {
  std::size_t n = 0;
  for (const auto& c : pool.containers(lang)) {
    if (c.state == ContainerState::warm || c.state == ContainerState::busy) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("resource limit validation") {
  ResourceLimits l;
  CHECK(l.network == Network::disabled);
  CHECK(l.writable_fs_bytes == 256 * kMiB);
  CHECK_NOTHROW(l.validate());
  l.cpu_cores = 0;
  CHECK_THROWS(l.validate());
  l = {};
  l.memory_bytes = 0;
  CHECK_THROWS(l.validate());
  PoolConfig p;
  CHECK(p.max_jobs_per_container == 500u);
  p.target_size_per_language = 0;
  CHECK_THROWS(p.validate());
  CHECK(shell_quote("it's") == "'it'\\''s'");
}

TEST_CASE("process driver builds manifests and runs isolated agents") {
  fixtures::StateDir state;
  auto driver = fixtures::process_driver(state.path);
  auto plan = lc::build_plan(fixtures::sh_config());
  CHECK_FALSE(driver->image_exists(plan.tag));
  driver->build_image(plan);
  CHECK(driver->image_exists(plan.tag));

  auto proc = driver->start({"t1", "sh", plan.tag, {}});
  harness::FrameReader reader(proc->output_fd(), 5s);
  auto hello = reader.read(Clock::now() + 10s);
  REQUIRE(hello.status == harness::ReadStatus::ok);
  CHECK(hello.body["type"] == "hb");
  CHECK(proc->alive());

  auto job = fixtures::sh_job("id -u\n", ::geteuid() == 0 ? "65534\n" : std::to_string(::geteuid()) + "\n");
  REQUIRE(harness::write_frame(proc->input_fd(), harness::job_to_json(job)));
  harness::ReadResult r;
  do {
    r = reader.read(Clock::now() + 10s);
  } while (r.status == harness::ReadStatus::ok && r.body["type"] == "hb");
  REQUIRE(r.status == harness::ReadStatus::ok);
  CHECK(harness::report_from_json(r.body).all_passed());

  if (driver->namespaces_active()) {
    auto net = fixtures::sh_job("cat /proc/net/dev | grep -c : \n", "1\n");  // loopback only
    REQUIRE(harness::write_frame(proc->input_fd(), harness::job_to_json(net)));
    do {
      r = reader.read(Clock::now() + 10s);
    } while (r.status == harness::ReadStatus::ok && r.body["type"] == "hb");
    CHECK(harness::report_from_json(r.body).all_passed());
  }

  proc->kill();
  CHECK_FALSE(proc->alive());
  proc->kill();  // idempotent
}

TEST_CASE("image builds are deduplicated per tag") {
  fixtures::StateDir state;
  auto counting = std::make_shared<CountingDriver>(fixtures::process_driver(state.path));
  ImageCache cache(counting);
  auto plan = lc::build_plan(fixtures::sh_config());

  std::vector<std::future<std::string>> futures;
  for (int i = 0; i < 8; ++i) {
    futures.push_back(std::async(std::launch::async, [&] { return cache.ensure_image(plan); }));
  }
  for (auto& f : futures) CHECK(f.get() == plan.tag);
  CHECK(counting->builds == 1);
  CHECK(cache.ensure_image(plan) == plan.tag);
  CHECK(counting->builds == 1);

  // A fresh cache over the same state finds the image without building.
  ImageCache again(counting);
  CHECK(again.ensure_image(plan) == plan.tag);
  CHECK(counting->builds == 1);
}

TEST_CASE("a failing build step raises BuildError with the log tail") {
  fixtures::StateDir state;
  auto counting = std::make_shared<CountingDriver>(fixtures::process_driver(state.path, true));
  ImageCache cache(counting);
  auto cfg = fixtures::sh_config();
  cfg.install = "echo installing-things; exit 3";
  auto plan = lc::build_plan(cfg);
  try {
    cache.ensure_image(plan);
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(e.log_tail().find("installing-things") != std::string::npos);
  }
  // Failures are not cached.
  CHECK_THROWS_AS(cache.ensure_image(plan), BuildError);
  CHECK(counting->builds == 2);
}

TEST_CASE("pool checkout semantics") {
  Harness h;
  ContainerPool pool(h.driver, small_pool(2));
  pool.start_language("sh", h.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));
  CHECK(pool.capacity("sh") == 2);

  auto a = pool.checkout("sh");
  auto b = pool.checkout("sh");
  CHECK(a.id != b.id);
  CHECK(a.state == ContainerState::busy);
  CHECK(b.state == ContainerState::busy);
  CHECK(a.slot->state() == ContainerState::busy);

  auto third = std::async(std::launch::async, [&] { return pool.checkout("sh"); });
  CHECK(third.wait_for(500ms) == std::future_status::timeout);
  const auto a_id = a.id;
  pool.give_back(a, ReturnVerdict::clean);
  REQUIRE(third.wait_for(5s) == std::future_status::ready);
  auto c = third.get();
  CHECK(c.id == a_id);
  CHECK(c.jobs_served == 1);

  pool.give_back(b, ReturnVerdict::clean);
  pool.give_back(c, ReturnVerdict::clean);
  pool.stop();
  CHECK(pool.stopped());
  CHECK_THROWS_AS(pool.checkout("sh"), PoolStopped);
}

TEST_CASE("clean returns keep the container, dirty returns replace it") {
  Harness h;
  ContainerPool pool(h.driver, small_pool(1));
  pool.start_language("sh", h.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));

  auto h1 = pool.checkout("sh");
  auto r = harness::run_job(h1, fixtures::sh_job("echo junk > leftover.txt; echo ok\n"));
  CHECK(r.all_passed());
  const auto first = h1.id;
  pool.give_back(h1, ReturnVerdict::clean);

  auto h2 = pool.checkout("sh");
  CHECK(h2.id == first);
  // The working directory holds only the new program.
  r = harness::run_job(h2, fixtures::sh_job("ls -A\n", "main.sh\n"));
  CHECK(r.all_passed());
  pool.give_back(h2, ReturnVerdict::dirty);

  std::set<std::string> later;
  for (int i = 0; i < 5; ++i) {
    auto h3 = pool.checkout("sh");
    later.insert(h3.id);
    pool.give_back(h3, ReturnVerdict::clean);
  }
  CHECK(later.count(first) == 0);
}

TEST_CASE("containers retire after max_jobs_per_container") {
  Harness h;
  auto cfg = small_pool(1);
  cfg.max_jobs_per_container = 100;
  ContainerPool pool(h.driver, cfg);
  pool.start_language("sh", h.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));

  std::set<std::string> ids;
  std::map<std::string, int> uses;
  for (int i = 0; i < 1000; ++i) {
    auto handle = pool.checkout("sh");
    ids.insert(handle.id);
    ++uses[handle.id];
    pool.give_back(handle, ReturnVerdict::clean);
  }
  CHECK(ids.size() >= 10);
  for (const auto& [id, n] : uses) CHECK(n <= 100);
  CHECK(pool.metrics().languages.at(0).retired >= 9);
}

TEST_CASE("crashed containers are replaced") {
  Harness h;
  ContainerPool pool(h.driver, small_pool(2));
  pool.start_language("sh", h.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));

  auto before = pool.containers("sh");
  REQUIRE(before.size() == 2);
  std::set<std::string> killed;
  for (const auto& c : before) {
    REQUIRE(c.host_pid);
    ::kill(*c.host_pid, SIGKILL);
    killed.insert(c.id);
  }
  // SIGKILL is asynchronous; let the kernel finish the job.
  for (const auto& c : before) {
    CHECK(wait_for([&] { return process_gone(*c.host_pid); }, 5s));
  }

  // Checkout still succeeds, with a fresh container.
  auto handle = pool.checkout("sh");
  CHECK(killed.count(handle.id) == 0);
  CHECK(harness::run_job(handle, fixtures::sh_job("echo ok\n")).all_passed());
  pool.give_back(handle, ReturnVerdict::clean);

  CHECK(wait_for([&] { return live_count(pool, "sh") == 2; }, 20s));
  CHECK(pool.metrics().crash_count >= 2);

  // A container killed mid-job yields a crashed report and is not reused.
  auto victim = pool.checkout("sh");
  auto pid = victim.slot->host_pid();
  REQUIRE(pid);
  std::thread killer([p = *pid] {
    std::this_thread::sleep_for(300ms);
    ::kill(p, SIGKILL);
  });
  auto rep = harness::run_job(victim, fixtures::sh_job("sleep 4; echo ok\n"));
  killer.join();
  CHECK(rep.container_crashed);
  const auto victim_id = victim.id;
  pool.give_back(victim, ReturnVerdict::dirty);
  for (const auto& c : pool.containers("sh")) CHECK(c.id != victim_id);
}

TEST_CASE("one job per container under concurrent load") {
  Harness h;
  ContainerPool pool(h.driver, small_pool(2));
  pool.start_language("sh", h.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));

  std::atomic<int> passed{0};
  std::atomic<int> max_busy{0};
  std::vector<std::thread> workers;
  for (int w = 0; w < 6; ++w) {
    workers.emplace_back([&] {
      for (int i = 0; i < 5; ++i) {
        auto handle = pool.checkout("sh");
        int busy = 0;
        for (const auto& c : pool.containers("sh")) busy += c.state == ContainerState::busy;
        int seen = max_busy.load();
        while (busy > seen && !max_busy.compare_exchange_weak(seen, busy)) {
        }
        if (harness::run_job(handle, fixtures::sh_job("echo ok\n")).all_passed()) ++passed;
        pool.give_back(handle, ReturnVerdict::clean);
      }
    });
  }
  for (auto& t : workers) t.join();
  CHECK(passed == 30);
  CHECK(max_busy <= 2);

  // Tagging refuses a second job on a claimed container.
  auto handle = pool.checkout("sh");
  CHECK(handle.slot->begin_job(1001));
  CHECK_FALSE(handle.slot->begin_job(1002));
  handle.slot->end_job(1001);
  CHECK(handle.slot->begin_job(1002));
  handle.slot->end_job(1002);
  pool.give_back(handle, ReturnVerdict::clean);
}

TEST_CASE("fresh mode spawns per checkout") {
  Harness h;
  auto cfg = small_pool(2);
  cfg.reuse_containers = false;
  ContainerPool pool(h.driver, cfg);
  pool.start_language("sh", h.tag);
  std::set<std::string> ids;
  for (int i = 0; i < 3; ++i) {
    auto handle = pool.checkout("sh");
    ids.insert(handle.id);
    CHECK(harness::run_job(handle, fixtures::sh_job("echo ok\n")).all_passed());
    pool.give_back(handle, ReturnVerdict::clean);
  }
  CHECK(ids.size() == 3);
}

TEST_CASE("checkout gives up when nothing ever becomes ready") {
  auto cfg = small_pool(1);
  cfg.spawn_timeout = 400ms;
  ContainerPool pool(std::make_shared<SilentDriver>(), cfg);
  pool.start_language("x", "silent:tag");
  const auto start = Clock::now();
  CHECK_THROWS_AS(pool.checkout("x"), SpawnTimeout);
  CHECK(Clock::now() - start < 5s);
}

TEST_CASE("OCI driver against a fake runtime") {
  fixtures::StateDir state("pv-fake-oci");
  ::setenv("FAKE_OCI_STATE", state.path.c_str(), 1);
  OciDriverOptions o;
  o.runtime = test_paths::fake_oci().string();
  o.agent_path = test_paths::agent();
  auto driver = std::make_shared<OciDriver>(o);

  auto args = driver->run_arguments({"c1", "sh", "img:1", {}});
  auto has = [&](const std::string& flag, const std::string& value) {
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == flag && args[i + 1] == value) return true;
    }
    return false;
  };
  CHECK(has("--network", "none"));
  CHECK(has("--memory", std::to_string(2 * kGiB)));
  CHECK(has("--pids-limit", "256"));
  CHECK(has("--cpus", "2"));
  CHECK(has("--tmpfs", "/sandbox:rw,exec,size=268435456,mode=0777"));
  CHECK(has("--cap-drop", "ALL"));

  auto cfg = fixtures::sh_config();
  cfg.install = "echo provisioning";
  auto plan = lc::build_plan(cfg);
  ImageCache images(driver);
  CHECK(images.ensure_image(plan) == plan.tag);
  CHECK(driver->image_exists(plan.tag));

  auto bad = fixtures::sh_config();
  bad.install = "echo about-to-fail; exit 3";
  try {
    images.ensure_image(lc::build_plan(bad));
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(e.log_tail().find("about-to-fail") != std::string::npos);
  }

  ContainerPool pool(driver, small_pool(1));
  pool.start_language("sh", plan.tag);
  REQUIRE(pool.wait_until_ready("sh", 20s));
  auto handle = pool.checkout("sh");
  CHECK(handle.ram_disk_path == "/sandbox");
  CHECK(harness::run_job(handle, fixtures::sh_job("echo ok\n")).all_passed());
  const auto id = handle.id;
  pool.give_back(handle, ReturnVerdict::dirty);
  pool.stop();

  std::ifstream calls(state.path / "calls.log");
  std::stringstream ss;
  ss << calls.rdbuf();
  CHECK(ss.str().find("[\"kill\", \"" + id + "\"]") != std::string::npos);
  CHECK(ss.str().find("[\"rm\", \"-f\", \"" + id + "\"]") != std::string::npos);

  OciDriverOptions missing;
  missing.runtime = "no-such-runtime-binary";
  CHECK_THROWS_AS(OciDriver(missing).image_exists("x"), RuntimeUnavailable);
  ::unsetenv("FAKE_OCI_STATE");
}
