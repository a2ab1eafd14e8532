#include <fstream>

#include "blindpaint/error.hpp"
#include "blindpaint/run_config.hpp"
#include "test_helpers.hpp"

using namespace blindpaint;
using blindpaint::testing::TempDir;

TEST_CASE("defaults mirror the training defaults") {
  RunConfig rc;
  rc.set("image_size", "64");
  const auto tc = rc.train_config();
  CHECK(tc.batch_size == 4);
  CHECK(tc.learning_rate == 1e-4);
  CHECK(tc.weights.rec == 10);
  CHECK(tc.weights.per == 1);
  CHECK(tc.weights.adv == doctest::Approx(0.1));
  CHECK(tc.disc == DiscriminatorKind::detector);
  CHECK(tc.branches == BranchMode::two_branch);
  CHECK(rc.validation_errors().empty());
  CHECK(!rc.is_explicit("batch_size"));
  CHECK(rc.is_explicit("image_size"));
}

TEST_CASE("config files") {
  TempDir dir("cfg");
  SUBCASE("values, comments and blank lines") {
    std::ofstream(dir / "a.cfg") << "# comment\n\nbatch_size = 2\n  max_steps=7  \ndisc = patch\n";
    RunConfig rc;
    rc.load_file(dir / "a.cfg");
    const auto tc = rc.train_config();
    CHECK(tc.batch_size == 2);
    CHECK(tc.max_steps == 7);
    CHECK(tc.disc == DiscriminatorKind::patch);
  }
  SUBCASE("unknown key names file and line") {
    std::ofstream(dir / "b.cfg") << "batch_size = 2\nbogus = 1\n";
    RunConfig rc;
    CHECK_THROWS_WITH_AS(rc.load_file(dir / "b.cfg"), doctest::Contains("b.cfg:2"), ConfigError);
  }
  SUBCASE("malformed line") {
    std::ofstream(dir / "c.cfg") << "batch_size 2\n";
    RunConfig rc;
    CHECK_THROWS_AS(rc.load_file(dir / "c.cfg"), ConfigError);
  }
  SUBCASE("echo reloads to the same configuration") {
    RunConfig rc;
    rc.set("seed", "9");
    rc.set("branches", "1");
    std::ofstream(dir / "echo.cfg") << rc.echo();
    RunConfig back;
    back.load_file(dir / "echo.cfg");
    CHECK(back.echo() == rc.echo());
    CHECK(back.train_config().hash() == rc.train_config().hash());
  }
}

TEST_CASE("validation lists every problem") {
  RunConfig rc;
  rc.set("batch_size", "four");
  rc.set("learning_rate", "fast");
  rc.set("disc", "huge");
  const auto errors = rc.validation_errors();
  CHECK(errors.size() == 3);
  CHECK_THROWS_AS(rc.set("nope", "1"), ConfigError);

  RunConfig constraints;
  constraints.set("learning_rate", "0");
  constraints.set("image_size", "60");
  constraints.set("conf_threshold", "1.5");
  CHECK(constraints.validation_errors().size() >= 3);
}

TEST_CASE("marker policy scales with image size unless overridden") {
  RunConfig rc;
  rc.set("image_size", "128");
  const auto p = rc.marker_policy();
  CHECK(p.arm_length.min == MarkerPolicy::for_image_size(128).arm_length.min);
  rc.set("arm_min", "4");
  rc.set("arm_max", "5");
  CHECK(rc.marker_policy().arm_length.min == 4);
  CHECK(rc.marker_policy().arm_length.max == 5);
}
