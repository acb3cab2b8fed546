#include "doctest.h"

#include "hexsynth/gradcheck.hpp"

using namespace hexsynth;

TEST_CASE("relative error") {
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1.0, 0.999) == doctest::Approx(1e-3));
  CHECK(relative_error(-1.0, 1.0) == doctest::Approx(2.0));
}

TEST_CASE("short synthesis gradient check") {
  GradcheckConfig cfg;
  cfg.clip_s = 0.05;
  cfg.coordinates = 3;
  const auto r = gradcheck_synthesis(cfg);
  CHECK(r.entries.size() == 12);
  CHECK(r.passed());
  const auto j = r.to_json();
  CHECK(j["groups"]["ir"]["coordinates"] == 3);
  CHECK(j["passed"] == true);
}

TEST_CASE("audio gradient check") {
  const auto r = gradcheck_audio({});
  CHECK(r.entries.size() == 20);
  CHECK(r.max_error("audio") < 1e-3);
}
