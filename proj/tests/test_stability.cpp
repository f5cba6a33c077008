#include <cmath>
#include <sstream>

#include "doctest.h"
#include "imnet/rng.hpp"
#include "imnet/stability.hpp"

using namespace imnet;

TEST_CASE("model parameters reject sign violations") {
  ModelEqParams p;
  CHECK_NOTHROW(p.validate());
  p.lambda = 0.0;
  CHECK_THROWS_AS(p.validate(), usage_error);
  p.lambda = 2.0;
  CHECK_THROWS_AS(p.validate(), usage_error);
  p.lambda = -1.0;
  p.gamma = 0.0;
  CHECK_THROWS_AS(p.validate(), usage_error);
  p.gamma = 0.1;
  p.steps = 0;
  CHECK_THROWS_AS(p.validate(), usage_error);
}

TEST_CASE("error recurrences match their closed forms on random parameters") {
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    ModelEqParams p;
    p.lambda = -std::exp(rng.uniform() * 3.0 - 1.0);   // -e^-1 .. -e^2
    p.gamma = std::exp(rng.uniform() * 3.0 - 2.0);     // e^-2 .. e^1
    p.eta = rng.uniform() * 4.0 - 2.0;
    if (p.eta == 0.0) p.eta = 0.5;
    p.steps = 1 + rng.uniform_int(0, 120);

    ErrorTrajectory ex = simulate_error_explicit(p);
    ErrorTrajectory im = simulate_error_implicit(p);
    REQUIRE(ex.errors.size() >= 1);
    CHECK(ex.errors[0] == p.eta);
    CHECK(im.errors[0] == p.eta);
    for (size_t k = 0; k < ex.errors.size(); ++k) {
      double want = std::pow(1.0 + p.gamma * p.lambda, static_cast<double>(k)) * p.eta;
      CHECK(std::fabs(ex.errors[k] - want) <= 1e-9 * std::max(1.0, std::fabs(want)));
    }
    for (size_t k = 0; k < im.errors.size(); ++k) {
      double want = p.eta / std::pow(1.0 - p.gamma * p.lambda, static_cast<double>(k));
      CHECK(std::fabs(im.errors[k] - want) <= 1e-9 * std::max(1.0, std::fabs(want)));
    }
    CHECK_FALSE(im.diverged);  // implicit never blows up for lambda < 0
    CHECK(im.errors.size() == static_cast<size_t>(p.steps) + 1);
  }
}

TEST_CASE("explicit trajectories truncate at the divergence cutoff") {
  ModelEqParams p;
  p.lambda = -30.0;
  p.gamma = 1.0;  // factor 1 + gamma*lambda = -29: explodes fast
  p.steps = 500;
  ErrorTrajectory t = simulate_error_explicit(p);
  CHECK(t.diverged);
  CHECK(t.diverged_at > 0);
  CHECK(t.errors.size() == static_cast<size_t>(t.diverged_at) + 1);
  CHECK(std::fabs(t.errors.back()) > kDivergenceCutoff);
  // every retained value before the cutoff is finite
  for (size_t k = 0; k + 1 < t.errors.size(); ++k)
    CHECK(std::fabs(t.errors[k]) <= kDivergenceCutoff);
  // 29^k crosses 1e300 at k = ceil(300 / log10(29)) = 206
  CHECK(t.diverged_at == 206);
}

TEST_CASE("absolute stability predicates implement the textbook conditions") {
  // explicit: |1 + gamma lambda| < 1, strict
  CHECK(is_absolutely_stable(EulerMethod::explicit_euler, -1.0, 0.5));
  CHECK(is_absolutely_stable(EulerMethod::explicit_euler, -1.0, 1.999));
  CHECK_FALSE(is_absolutely_stable(EulerMethod::explicit_euler, -1.0, 2.0));  // boundary
  CHECK_FALSE(is_absolutely_stable(EulerMethod::explicit_euler, -1.0, 2.5));
  CHECK_FALSE(is_absolutely_stable(EulerMethod::explicit_euler, -4.0, 0.6));
  // implicit: unconditional on the stable half-line
  for (double lambda : {-0.01, -1.0, -100.0})
    for (double gamma : {0.01, 1.0, 100.0})
      CHECK(is_absolutely_stable(EulerMethod::implicit_euler, lambda, gamma));
}

TEST_CASE("grid constructor spaces axes geometrically with exact endpoints") {
  StabilityGrid g = StabilityGrid::geometric(-0.5, -4.0, 50, 0.3, 2.4, 50, 200, 1e-6);
  REQUIRE(g.lambdas.size() == 50);
  REQUIRE(g.gammas.size() == 50);
  CHECK(g.lambdas.front() == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(g.lambdas.back() == doctest::Approx(-4.0).epsilon(1e-15));
  CHECK(g.gammas.front() == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(g.gammas.back() == doctest::Approx(2.4).epsilon(1e-15));
  // constant ratio between neighbours
  double r0 = g.gammas[1] / g.gammas[0];
  for (size_t j = 2; j < g.gammas.size(); ++j)
    CHECK(g.gammas[j] / g.gammas[j - 1] == doctest::Approx(r0).epsilon(1e-12));
  CHECK_NOTHROW(g.validate());
}

TEST_CASE("grid validation rejects malformed axes") {
  StabilityGrid g = StabilityGrid::geometric(-0.5, -4.0, 5, 0.3, 2.4, 5, 100, 1e-6);
  StabilityGrid bad = g;
  bad.lambdas.clear();
  CHECK_THROWS_AS(bad.validate(), usage_error);
  bad = g;
  bad.lambdas[2] = 0.5;  // wrong sign
  CHECK_THROWS_AS(bad.validate(), usage_error);
  bad = g;
  bad.gammas[0] = -0.1;
  CHECK_THROWS_AS(bad.validate(), usage_error);
  bad = g;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), usage_error);
  bad = g;
  bad.threshold = 0.0;
  CHECK_THROWS_AS(bad.validate(), usage_error);
  CHECK_THROWS_AS(StabilityGrid::geometric(-0.5, 4.0, 5, 0.3, 2.4, 5, 100, 1e-6), usage_error);
  CHECK_THROWS_AS(StabilityGrid::geometric(-0.5, -4.0, 1, 0.3, 2.4, 5, 100, 1e-6), usage_error);
}

TEST_CASE("region scans agree with the analytic predicate away from the boundary") {
  StabilityGrid g = StabilityGrid::geometric(-0.5, -4.0, 30, 0.3, 2.4, 30, 200, 1e-6);
  RegionScan ex = stability_region_scan(EulerMethod::explicit_euler, g);
  RegionScan im = stability_region_scan(EulerMethod::implicit_euler, g);
  CHECK(scan_mismatches(ex).empty());
  CHECK(scan_mismatches(im).empty());

  // the implicit scheme converges on every cell, even where explicit blows up
  int explicit_unstable = 0;
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) {
      CHECK(im.converged_at(i, j));
      if (!ex.converged_at(i, j)) ++explicit_unstable;
    }
  CHECK(explicit_unstable > 0);
}

TEST_CASE("mismatch detection reports cells where empirical and analytic split") {
  // gamma=0.12: factor 0.88, analytic-stable, but 0.88^50 = 1.7e-3 stays above
  // the threshold, so the empirical verdict disagrees
  StabilityGrid g;
  g.lambdas = {-1.0};
  g.gammas = {0.5, 0.12};
  g.steps = 50;
  g.threshold = 1e-6;
  RegionScan scan = stability_region_scan(EulerMethod::explicit_euler, g);
  CHECK(scan.converged_at(0, 0));  // factor 0.5 dives below threshold fast
  CHECK_FALSE(scan.converged_at(0, 1));
  // band = 10/50 = 0.2 excuses factors in (0.8, 1.2), and 0.88 sits inside
  CHECK(scan_mismatches(scan).empty());

  g.steps = 100;  // band shrinks to 0.1; 0.88^100 = 2.8e-6 still misses threshold
  scan = stability_region_scan(EulerMethod::explicit_euler, g);
  auto mm = scan_mismatches(scan);
  REQUIRE(mm.size() == 1);
  CHECK(mm[0].j == 1);
  CHECK(mm[0].analytic);
  CHECK_FALSE(mm[0].empirical);
  CHECK(mm[0].gamma == 0.12);
}

TEST_CASE("forced trajectories follow the discrete update rules") {
  ModelEqParams p;
  p.lambda = -2.0;
  p.gamma = 0.2;
  p.steps = 40;
  p.forcing = [](double t) { return std::sin(t); };

  auto ex = simulate_trajectory(EulerMethod::explicit_euler, p, 1.5);
  auto im = simulate_trajectory(EulerMethod::implicit_euler, p, 1.5);
  REQUIRE(ex.size() == 41);
  REQUIRE(im.size() == 41);
  double xe = 1.5, xi = 1.5;
  for (int k = 0; k < 40; ++k) {
    double t = k * p.gamma;
    xe = xe + p.gamma * (p.lambda * xe + std::sin(t));
    CHECK(ex[static_cast<size_t>(k) + 1] == doctest::Approx(xe).epsilon(1e-14));
    xi = (xi + p.gamma * std::sin(t + p.gamma)) / (1.0 - p.gamma * p.lambda);
    CHECK(im[static_cast<size_t>(k) + 1] == doctest::Approx(xi).epsilon(1e-14));
  }
}

TEST_CASE("perturbing the start of a forced run reproduces the error recurrence") {
  // two forced trajectories whose starts differ by eta: the forcing cancels
  // in the difference, leaving exactly the homogeneous error propagation
  ModelEqParams p;
  p.lambda = -1.5;
  p.gamma = 0.4;
  p.eta = 0.25;
  p.steps = 30;
  p.forcing = [](double t) { return std::cos(3.0 * t) + 0.5; };

  for (EulerMethod m : {EulerMethod::explicit_euler, EulerMethod::implicit_euler}) {
    auto base = simulate_trajectory(m, p, 2.0);
    auto bumped = simulate_trajectory(m, p, 2.0 + p.eta);
    ErrorTrajectory err = m == EulerMethod::explicit_euler ? simulate_error_explicit(p)
                                                           : simulate_error_implicit(p);
    for (size_t k = 0; k < base.size(); ++k)
      CHECK(bumped[k] - base[k] == doctest::Approx(err.errors[k]).epsilon(1e-10));
  }
}

TEST_CASE("csv writers emit one row per datum with stable headers") {
  ModelEqParams p;
  p.steps = 3;
  std::ostringstream traj;
  write_trajectory_csv(traj, {simulate_error_explicit(p), simulate_error_implicit(p)});
  std::istringstream lines(traj.str());
  std::string line;
  std::getline(lines, line);
  CHECK(line == "method,lambda,gamma,eta,step,error,diverged");
  int rows = 0;
  while (std::getline(lines, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 8);  // two trajectories, e_0..e_3 each

  StabilityGrid g;
  g.lambdas = {-1.0};
  g.gammas = {0.5};
  g.steps = 50;  // (2/3)^50 is comfortably below the threshold
  g.threshold = 1e-6;
  std::ostringstream region;
  write_region_csv(region, stability_region_scan(EulerMethod::implicit_euler, g));
  std::istringstream rl(region.str());
  std::getline(rl, line);
  CHECK(line == "method,lambda,gamma,converged,diverged,analytic");
  std::getline(rl, line);
  CHECK(line == "implicit,-1,0.5,1,0,1");

  std::ostringstream mm;
  write_mismatch_csv(mm, {});
  CHECK(mm.str() == "lambda_index,gamma_index,lambda,gamma,empirical,analytic\n");
}
