#include <doctest.h>

#include <sstream>

#include "dithc/autotune.h"

using namespace dithc;

TEST_SUITE("autotune") {
  TEST_CASE("single-candidate space returns that candidate") {
    TileConfig c;
    c.kc = 32;
    c.mc = 16;
    c.nc = 64;
    c.clusters = 2;
    auto r = autotune({{20, 30, 40, ""}}, SearchSpace::single(c), 2);
    CHECK(r.best == c);
    CHECK(r.log.size() == 1);
    CHECK(r.log[0].seconds.size() == 2);
  }

  TEST_CASE("replay returns the argmin of a recorded table") {
    TileConfig a, b, c;
    a.kc = 64;
    b.kc = 128;
    c.kc = 256;
    GemmShape s1{8, 8, 8, "x"}, s2{16, 16, 16, "y"};
    std::vector<TimingRecord> log{
        {a, s1, {3, 1, 2}}, {a, s2, {5}}, {b, s1, {1, 1, 1}}, {b, s2, {4}}, {c, s1, {9}}, {c, s2, {0.5}},
    };
    auto r = autotune_replay(log);
    CHECK(r.best == b);  // a: 2+5, b: 1+4, c: 9+0.5
    CHECK(r.best_score == 5.0);
    std::stringstream ss;
    write_timing_log(ss, log);
    auto back = read_timing_log(ss);
    REQUIRE(back.size() == log.size());
    CHECK(autotune_replay(back).best == b);
    CHECK(back[5].seconds == std::vector<double>{0.5});
  }

  TEST_CASE("ties keep the first candidate") {
    TileConfig a, b;
    a.kc = 64;
    b.kc = 128;
    GemmShape s{8, 8, 8, ""};
    CHECK(autotune_replay({{a, s, {1}}, {b, s, {1}}}).best == a);
  }

  TEST_CASE("search space enumerates the full grid") {
    SearchSpace sp;
    sp.kc = {64, 128};
    sp.mc = {64};
    sp.nc = {128, 256, 512};
    sp.buffering_depth = {1, 2};
    CHECK(sp.candidates().size() == 12);
    sp.kc.clear();
    CHECK_THROWS_AS(autotune({{8, 8, 8, ""}}, sp, 1), ArgumentError);
  }

  TEST_CASE("shape file parsing") {
    std::istringstream ok("# qkv\n1152 1152 3456 qkv_proj\n\n 4 5 6\n");
    auto v = parse_shapes(ok);
    REQUIRE(v.size() == 2);
    CHECK(v[0].name == "qkv_proj");
    CHECK(v[1].N == 6);
    std::istringstream bad("1 2 3\n1 x 3\n");
    try {
      parse_shapes(bad);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
}
