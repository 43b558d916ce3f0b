// Self-check module: the bundled checks pass on the shipped code, report
// enough detail to act on, and actually fail when given impossible bars.
#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "forgetlab/checks.hpp"

using namespace forgetlab;

TEST_CASE("bundled self-checks all pass on the shipped library") {
    std::vector<CheckResult> results = run_all_checks();
    REQUIRE(results.size() == 3);
    for (const CheckResult& r : results) {
        INFO(r.name << ": " << r.detail);
        CHECK(r.pass);
        CHECK_FALSE(r.detail.empty());
    }
    REQUIRE(results[0].name == "gradients");
    REQUIRE(results[1].name == "metric oracles");
    REQUIRE(results[2].name == "trivial cases");
}

TEST_CASE("gradient check names the worst offender and its error") {
    CheckResult r = check_gradients();
    REQUIRE(r.pass);
    REQUIRE(r.detail.find("worst rel err") != std::string::npos);
    REQUIRE(r.detail.find("8 methods") != std::string::npos);
}

TEST_CASE("metric oracle check covers a hundred instances") {
    CheckResult r = check_metric_oracles();
    REQUIRE(r.pass);
    REQUIRE(r.detail.find("100 instances") != std::string::npos);
}

TEST_CASE("an impossible tolerance flips the gradient check to failure") {
    // The FD comparison can never be exact, so a sub-roundoff bar must fail.
    CheckResult r = check_gradients(1e-18);
    REQUIRE_FALSE(r.pass);
    REQUIRE(r.detail.find("worst rel err") != std::string::npos);
}

TEST_CASE("result printer formats one line per check plus a verdict") {
    std::vector<CheckResult> fake{
        {"alpha", true, "fine"},
        {"beta", false, "broken"},
    };
    std::ostringstream out;
    bool ok = print_check_results(out, fake);
    REQUIRE_FALSE(ok);
    REQUIRE(out.str() == "[PASS] alpha: fine\n[FAIL] beta: broken\nCHECKS FAILED\n");

    std::ostringstream out2;
    REQUIRE(print_check_results(out2, {{"alpha", true, "fine"}}));
    REQUIRE(out2.str() == "[PASS] alpha: fine\nall checks passed\n");
}
