#include <doctest.h>

#include <signal.h>

#include <random>
#include <thread>

#include "paths.hpp"
#include "polyverify/harness/host.hpp"
#include "polyverify/verifier.hpp"
#include "sandbox_fixtures.hpp"

using namespace polyverify::verifier;
namespace sandbox = polyverify::sandbox;
namespace harness = polyverify::harness;
namespace lc = polyverify::langconfig;
namespace ts = polyverify::taskset;
using namespace std::chrono_literals;

namespace {

const std::string kCorrect = R"(local n = tonumber(io.read("*l"))
local composite = false
for d = 2, math.floor(math.sqrt(n)) do
  if n % d == 0 then composite = true break end
end
print(composite and "True" or "False")
)";
// Right on 2, wrong on 10.
const std::string kHalfRight = "io.read('*l')\nprint('False')\n";
const std::string kWrong = "print('True')\n";
const std::string kLoop = "while true do end\n";
const std::string kBomb = "local s = string.rep('x', 65536)\nwhile true do io.write(s) end\n";

std::string fenced(const std::string& body, const std::string& info = "lua") {
  return "Here is my solution.\n```" + info + "\n" + body + "```\n";
}

ts::Task fig3b() {
  return ts::load_dataset((test_paths::fixtures() / "fig3b.jsonl").string()).tasks.at(0);
}

struct LuaPool {
  fixtures::StateDir state;
  std::shared_ptr<sandbox::ProcessDriver> driver = fixtures::process_driver(state.path);
  lc::LanguageConfig config = lc::load_config_file((test_paths::configs() / "lua.yaml").string());
  sandbox::ImageCache images{driver};
  std::unique_ptr<sandbox::ContainerPool> pool;

  explicit LuaPool(std::size_t size = 4) {
    sandbox::PoolConfig pc;
    pc.target_size_per_language = size;
    pc.spawn_timeout = 20s;
    pc.health_check_interval = 100ms;
    pool = std::make_unique<sandbox::ContainerPool>(driver, pc);
    pool->start_language(config.name, images.ensure_image(lc::build_plan(config)));
    REQUIRE(pool->wait_until_ready(config.name, 20s));
  }
};

VerifyLimits quick() {
  VerifyLimits l;
  l.test_timeout = 1s;
  l.output_cap_bytes = 1 << 20;
  return l;
}

}  // namespace

TEST_CASE("extract_code") {
  CHECK(extract_code("Here:\n```lua\nprint('x')\n```", "lua") == "print('x')\n");
  CHECK(extract_code("draft\n```r\ncat(1)\n```\nfinal\n```r\ncat(2)\n```\n", "r") == "cat(2)\n");
  CHECK_THROWS_AS(extract_code("no fences at all", "lua"), NoCodeBlock);
  CHECK_THROWS_AS(extract_code("", "lua"), NoCodeBlock);

  // Matching language wins over a later block of another language.
  CHECK(extract_code("```lua\na\n```\n```text\nb\n```\n", "lua") == "a\n");
  // No match: last block of any kind.
  CHECK(extract_code("```\na\n```\n```python\nb\n```\n", "lua") == "b\n");
  // Aliases and case.
  CHECK(extract_code("```F90\nx\n```\n```bash\ny\n```", "fortran") == "x\n");
  CHECK(extract_code("```ml\nlet () = ()\n```\n```txt\nz\n```", "OCaml") == "let () = ()\n");
  CHECK(extract_code("```luajit\nq\n```\n```\nw\n```", "lua") == "q\n");
  // Unterminated final fence runs to the end.
  CHECK(extract_code("```lua\nprint(1)\nprint(2)", "lua") == "print(1)\nprint(2)");
  // Body kept verbatim.
  CHECK(extract_code("```lua\n  indented  \n\n```", "lua") == "  indented  \n\n");

  CHECK(canonical_language("F90") == "fortran");
  CHECK(canonical_language("ml") == "ocaml");
  CHECK(canonical_language("Rscript") == "r");
  CHECK(canonical_language("Lua") == "lua");
}

TEST_CASE("extraction succeeds on any text with a fenced block") {
  std::mt19937 rng(3);
  const std::vector<std::string> pieces = {"text ", "\n", "```", "```lua", "```r\n", "x = 1\n", "`", "~~~"};
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  for (int i = 0; i < 3000; ++i) {
    std::string s;
    for (int j = 0; j < 12; ++j) s += pieces[pick(rng)];
    s += "\n```\nbody\n```\n";
    CAPTURE(s);
    CHECK_NOTHROW(extract_code(s, "lua"));
  }
}

TEST_CASE("make_candidate and wire encodings") {
  auto c = make_candidate(fenced(kWrong), "lua");
  REQUIRE(c.extracted_program);
  CHECK(*c.extracted_program == kWrong);
  CHECK_FALSE(make_candidate("nothing", "lua").extracted_program);
  CHECK(candidate_from_json(candidate_to_json(c)).extracted_program == c.extracted_program);

  Verdict v;
  v.reward = 1;
  v.attempts = 1;
  v.report.compile_status = harness::CompileStatus::not_applicable;
  harness::TestOutcome o;
  o.status = harness::TestStatus::passed;
  o.exit_code = 0;
  o.stdout_prefix = "False\n";
  v.report.outcomes = {o};
  auto j = verdict_to_json(v);
  CHECK(j["reward"] == 1);
  CHECK(j["failure_kind"] == "none");
  CHECK_FALSE(j["report"].contains("type"));
  auto back = verdict_from_json(j);
  CHECK(back.reward == 1);
  CHECK(back.report == v.report);

  for (auto k : {FailureKind::none, FailureKind::no_code_block, FailureKind::compile, FailureKind::runtime,
                 FailureKind::wrong_output, FailureKind::timeout, FailureKind::overflow, FailureKind::crash}) {
    CHECK(failure_kind_from_string(to_string(k)) == k);
  }
}

TEST_CASE("classify picks the first failure in test order") {
  harness::JobReport r;
  r.compile_status = harness::CompileStatus::ok;
  harness::TestOutcome pass, wrong, slow;
  pass.status = harness::TestStatus::passed;
  wrong.status = harness::TestStatus::wrong_output;
  slow.status = harness::TestStatus::timeout;
  r.outcomes = {pass, slow, wrong};
  CHECK(classify(r) == FailureKind::timeout);
  r.outcomes = {pass, pass};
  CHECK(classify(r) == FailureKind::none);
  r.compile_status = harness::CompileStatus::compile_error;
  r.outcomes.clear();
  CHECK(classify(r) == FailureKind::compile);
  r.compile_status = harness::CompileStatus::compile_timeout;
  CHECK(classify(r) == FailureKind::timeout);
  r.container_crashed = true;
  CHECK(classify(r) == FailureKind::crash);
}

TEST_CASE("verify_candidate on the non-prime task") {
  LuaPool lp;
  const auto task = fig3b();
  auto& pool = *lp.pool;

  auto good = verify_candidate(pool, make_candidate(fenced(kCorrect), "lua"), task, lp.config);
  CHECK(good.reward == 1);
  CHECK(good.failure_kind == FailureKind::none);
  CHECK(good.attempts == 1);

  auto wrong = verify_candidate(pool, make_candidate(fenced(kWrong), "lua"), task, lp.config);
  CHECK(wrong.reward == 0);
  CHECK(wrong.failure_kind == FailureKind::wrong_output);

  // K-1 of K passing is still zero.
  auto limits = quick();
  limits.fail_fast = false;
  auto half = verify_candidate(pool, make_candidate(fenced(kHalfRight), "lua"), task, lp.config, limits);
  CHECK(half.reward == 0);
  REQUIRE(half.report.outcomes.size() == 2);
  CHECK(half.report.outcomes[0].status == harness::TestStatus::passed);
  CHECK(half.report.outcomes[1].status == harness::TestStatus::wrong_output);

  const auto served = pool.metrics().jobs_served;
  auto none = verify_candidate(pool, {"I think the answer is True.", std::nullopt, "lua"}, task, lp.config);
  CHECK(none.reward == 0);
  CHECK(none.failure_kind == FailureKind::no_code_block);
  CHECK(none.attempts == 0);
  CHECK(pool.metrics().jobs_served == served);

  auto runtime = verify_candidate(pool, make_candidate(fenced("error('x')\n"), "lua"), task, lp.config);
  CHECK(runtime.failure_kind == FailureKind::runtime);

  auto loop = verify_candidate(pool, make_candidate(fenced(kLoop), "lua"), task, lp.config, quick());
  CHECK(loop.failure_kind == FailureKind::timeout);
  CHECK(loop.reward == 0);
}

TEST_CASE("overflowing candidates retire their container") {
  LuaPool lp(1);
  auto& pool = *lp.pool;
  const auto before = pool.containers("lua").at(0).id;
  auto v = verify_candidate(pool, make_candidate(fenced(kBomb), "lua"), fig3b(), lp.config, quick());
  CHECK(v.failure_kind == FailureKind::overflow);
  CHECK(v.report.outcomes.at(0).status == harness::TestStatus::output_overflow);
  auto h = pool.checkout("lua");
  CHECK(h.id != before);
  pool.give_back(h, sandbox::ReturnVerdict::clean);
}

TEST_CASE("strict mode compares raw bytes") {
  LuaPool lp(1);
  const auto task = fig3b();
  const std::string sloppy = "local n = tonumber(io.read('*l'))\nio.write(n == 2 and 'False  \\r\\n' or 'True')\n";
  auto limits = quick();
  CHECK(verify_candidate(*lp.pool, make_candidate(fenced(sloppy), "lua"), task, lp.config, limits).reward == 1);
  limits.strict = true;
  auto strict = verify_candidate(*lp.pool, make_candidate(fenced(sloppy), "lua"), task, lp.config, limits);
  CHECK(strict.reward == 0);
  CHECK(strict.failure_kind == FailureKind::wrong_output);
  CHECK(verify_candidate(*lp.pool, make_candidate(fenced(kCorrect), "lua"), task, lp.config, limits).reward == 1);
}

TEST_CASE("verify_group") {
  LuaPool lp;
  const auto task = fig3b();
  auto& pool = *lp.pool;
  const auto limits = quick();

  SUBCASE("mixed group matches per-candidate verification") {
    std::vector<Candidate> group = {
        make_candidate(fenced(kCorrect), "lua"),
        make_candidate(fenced(kWrong), "lua"),
        make_candidate(fenced(kLoop), "lua"),
        make_candidate("no code here", "lua"),
    };
    auto batch = verify_group(pool, group, task, lp.config, limits);
    REQUIRE(batch.size() == 4);
    std::vector<int> rewards;
    for (std::size_t i = 0; i < group.size(); ++i) {
      auto serial = verify_candidate(pool, group[i], task, lp.config, limits);
      CHECK(batch[i].reward == serial.reward);
      CHECK(batch[i].failure_kind == serial.failure_kind);
      rewards.push_back(batch[i].reward);
    }
    CHECK(rewards == std::vector<int>{1, 0, 0, 0});
  }
  SUBCASE("32 copies of a correct program") {
    std::vector<Candidate> group(32, make_candidate(fenced(kCorrect), "lua"));
    for (const auto& v : verify_group(pool, group, task, lp.config, limits)) CHECK(v.reward == 1);
  }
  SUBCASE("singleton group") {
    auto c = make_candidate(fenced(kWrong), "lua");
    auto g = verify_group(pool, {c}, task, lp.config, limits);
    REQUIRE(g.size() == 1);
    auto s = verify_candidate(pool, c, task, lp.config, limits);
    CHECK(g[0].reward == s.reward);
    CHECK(g[0].failure_kind == s.failure_kind);
    CHECK(g[0].report == s.report);
  }
  SUBCASE("empty group") {
    CHECK(verify_group(pool, {}, task, lp.config, limits).empty());
  }
}

TEST_CASE("a crashed container is retried once on a fresh one") {
  LuaPool lp(1);
  auto& pool = *lp.pool;
  const std::string slow = "os.execute('sleep 1')\n" + kCorrect;
  std::atomic<bool> done{false};
  std::thread killer([&] {
    while (!done) {
      for (const auto& c : pool.containers("lua")) {
        if (c.state == sandbox::ContainerState::busy && c.host_pid) {
          ::kill(*c.host_pid, SIGKILL);
          return;
        }
      }
      std::this_thread::sleep_for(10ms);
    }
  });
  auto v = verify_candidate(pool, make_candidate(fenced(slow), "lua"), fig3b(), lp.config);
  done = true;
  killer.join();
  CHECK(v.attempts == 2);
  CHECK(v.reward == 1);
  CHECK(pool.metrics().crash_count >= 1);
}
