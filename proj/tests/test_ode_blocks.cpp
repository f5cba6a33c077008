#include <cmath>
#include <vector>

#include "doctest.h"
#include "imnet/ode_blocks.hpp"
#include "test_util.hpp"

using namespace imnet;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

// the scalar contraction model: f(h) = lambda * h
LayerFn scale_layer(double lambda) {
  return [lambda](const Tensor& h) { return scalar_mul(h, lambda); };
}

EulerConfig implicit_cfg(double gamma, int t, double lr = -1.0) {
  EulerConfig cfg;
  cfg.mode = ConnectionMode::implicit_euler;
  cfg.step_size = gamma;
  cfg.inner_iterations = t;
  cfg.inner_lr = lr;
  return cfg;
}

}  // namespace

TEST_CASE("connection mode names round-trip") {
  for (auto m : {ConnectionMode::monotone, ConnectionMode::explicit_euler,
                 ConnectionMode::implicit_euler})
    CHECK(connection_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(connection_mode_from_string("midpoint"), config_error);
}

TEST_CASE("config validation rejects bad step sizes and iteration counts") {
  EulerConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.step_size = -0.5;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.step_size = 0.1;
  cfg.inner_iterations = -1;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.inner_iterations = 5;
  cfg.inner_lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg.inner_lr = -1.0;  // sentinel: fall back to step_size
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.effective_inner_lr() == 0.1);
  cfg.inner_lr = 0.05;
  CHECK(cfg.effective_inner_lr() == 0.05);
}

TEST_CASE("monotone and explicit steps compute their defining formulas") {
  Rng rng(31);
  Tensor h = random_tensor(rng, {2, 3});
  auto layer = scale_layer(-0.7);
  CHECK(bit_equal(monotone_step(h, layer), scalar_mul(h, -0.7)));
  // h + gamma * f(h), assembled element by element
  Tensor e = explicit_step(h, layer, 0.25);
  for (int64_t i = 0; i < h.size(); ++i)
    CHECK(e.at(i) == h.at(i) + 0.25 * (-0.7 * h.at(i)));
}

TEST_CASE("implicit residual is the squared norm of h - h_prev - gamma f(h)") {
  Tensor h_prev({2}, {1.0, 2.0});
  Tensor h({2}, {1.5, 1.0});
  auto layer = scale_layer(-1.0);
  // r = h - h_prev - gamma*(-h); gamma = 0.1
  // r0 = 1.5 - 1.0 + 0.15 = 0.65 ; r1 = 1.0 - 2.0 + 0.1 = -0.9
  double want = 0.65 * 0.65 + 0.9 * 0.9;
  CHECK(implicit_residual(h, h_prev, layer, 0.1).value() == doctest::Approx(want).epsilon(1e-15));
  // without the gamma factor inside the norm: r = h - h_prev - f(h)
  double want_ng = (1.5 - 1.0 + 1.5) * (1.5 - 1.0 + 1.5) + (1.0 - 2.0 + 1.0) * (1.0 - 2.0 + 1.0);
  CHECK(implicit_residual(h, h_prev, layer, 0.1, true).value() ==
        doctest::Approx(want_ng).epsilon(1e-15));
}

TEST_CASE("zero inner iterations return the unit explicit initializer bitwise") {
  Rng rng(32);
  Tensor h = random_tensor(rng, {3, 4});
  auto layer = [](const Tensor& x) { return imnet::tanh(x); };
  Tensor init = add(h, imnet::tanh(h));
  CHECK(bit_equal(im_connection(h, layer, implicit_cfg(0.1, 0)), init));
  CHECK(bit_equal(im_connection(h, layer, implicit_cfg(2.0, 0)), init));  // gamma-independent
}

TEST_CASE("inner descent on the contraction model matches hand-rolled iterations") {
  // f(h) = -h, gamma = 0.1: objective g(x) = (x - h0 + 0.1 x)^2 per coordinate,
  // gradient 2*(1.1 x - h0)*1.1, descent with lr = gamma
  const double gamma = 0.1, h0 = 2.0;
  double x = h0 + (-h0);  // unit explicit initializer: h0 + f(h0) = 0
  EulerConfig cfg = implicit_cfg(gamma, 7);
  Tensor out = im_connection(Tensor({1}, {h0}), scale_layer(-1.0), cfg);
  for (int t = 0; t < 7; ++t) x -= gamma * 2.0 * (1.1 * x - h0) * 1.1;
  CHECK(out.at(0) == doctest::Approx(x).epsilon(1e-15));

  // trace reports the pre-update objective value at every iteration
  auto trace = inner_loop_trace(Tensor({1}, {h0}), scale_layer(-1.0), cfg);
  REQUIRE(trace.size() == 7);
  double y = 0.0;
  for (int t = 0; t < 7; ++t) {
    double r = 1.1 * y - h0;
    CHECK(trace[static_cast<size_t>(t)].first == t);
    CHECK(trace[static_cast<size_t>(t)].second == doctest::Approx(r * r).epsilon(1e-12));
    y -= gamma * 2.0 * r * 1.1;
  }
}

TEST_CASE("inner objective decreases monotonically on the contraction model") {
  EulerConfig cfg = implicit_cfg(0.1, 15);
  Tensor h0({1}, {1.0});
  auto trace = inner_loop_trace(h0, scale_layer(-1.0), cfg);
  REQUIRE(trace.size() == 15);
  for (size_t t = 1; t < trace.size(); ++t) CHECK(trace[t].second < trace[t - 1].second);

  // and the iterate approaches the true backward-Euler point h0 / (1 + 0.1)
  // at the linear rate 1 - 2*lr*(1+gamma)^2 = 0.758 per iteration
  const double target = 1.0 / 1.1;
  const double rate = 1.0 - 2.0 * 0.1 * 1.1 * 1.1;
  double prev_dist = std::fabs(0.0 - target);  // T=0 initializer is 0 here
  for (int t = 1; t <= 15; ++t) {
    cfg.inner_iterations = t;
    double dist = std::fabs(im_connection(h0, scale_layer(-1.0), cfg).at(0) - target);
    CHECK(dist < prev_dist);
    CHECK(dist == doctest::Approx(std::pow(rate, t) / 1.1).epsilon(1e-9));
    prev_dist = dist;
  }
}

TEST_CASE("the exact backward-Euler point is a fixed point of the inner loop") {
  // the solution of h = h_prev + gamma*(-h) with h_prev = 1.1 is h* = 1
  const double gamma = 0.1;
  auto layer = scale_layer(-1.0);
  Tensor hstar({1}, {1.0});
  Tensor hprev({1}, {1.1});
  CHECK(implicit_residual(hstar, hprev, layer, gamma).value() < 1e-20);

  // the descent direction vanishes at the solution, so a step cannot move it
  Tape tape;
  Tensor h = tape.leaf(hstar);
  tape.backward(implicit_residual(h, hprev, layer, gamma));
  CHECK(std::fabs(tape.gradient(h).at(0)) < 1e-14);

  // a long run closes in on h* at the analytic linear rate and is repeatable
  EulerConfig cfg = implicit_cfg(gamma, 60);
  Tensor out = im_connection(hprev, layer, cfg);
  const double rate = 1.0 - 2.0 * gamma * 1.1 * 1.1;
  CHECK(std::fabs(out.at(0) - 1.0) == doctest::Approx(std::pow(rate, 60)).epsilon(1e-6));
  CHECK(std::fabs(out.at(0) - 1.0) < 1e-7);
  Tensor again = im_connection(hprev, layer, cfg);
  CHECK(bit_equal(out, again));  // fully deterministic
}

TEST_CASE("diverging inner loops raise with the failing iteration index") {
  // lr far too large: the quadratic objective explodes geometrically
  EulerConfig cfg = implicit_cfg(0.1, 400, 50.0);
  Tensor h0({1}, {1.0});
  bool threw = false;
  try {
    im_connection(h0, scale_layer(-1.0), cfg);
  } catch (const numeric_divergence_error& e) {
    threw = true;
    CHECK(e.step() > 0);
    CHECK(e.step() <= 400);
  }
  CHECK(threw);
}

TEST_CASE("im_connection applies to batched tensors coordinatewise") {
  // the scale layer acts per coordinate, so each entry follows the scalar model
  Rng rng(33);
  Tensor h = random_tensor(rng, {4, 3});
  EulerConfig cfg = implicit_cfg(0.1, 9);
  Tensor out = im_connection(h, scale_layer(-1.0), cfg);
  for (int64_t i = 0; i < h.size(); ++i) {
    Tensor single = im_connection(Tensor({1}, {h.at(i)}), scale_layer(-1.0), cfg);
    CHECK(out.at(i) == doctest::Approx(single.at(0)).epsilon(1e-15));
  }
}

TEST_CASE("gradients flow through the unrolled inner loop") {
  // d out / d h_prev on the scalar model, T = 1, lr = gamma = 0.1:
  //   x0 = h0 + f(h0) = 0 for lambda = -1... use lambda = -0.5 so x0 = 0.5 h0
  //   x1 = x0 - lr * 2 * ((1+0.1*0.5) x0 - h0) * (1+0.05)
  // analytic d x1 / d h0 with lambda=-0.5:
  //   dx0 = 0.5 ; c = 1.05
  //   x1 = x0 - 0.2*1.05*(c x0 - h0)  => dx1 = dx0 - 0.21*(c*dx0 - 1)
  const double h0 = 2.0;
  EulerConfig cfg = implicit_cfg(0.1, 1);
  Tape tape;
  Tensor hp = tape.leaf(Tensor({1}, {h0}));
  Tensor out = im_connection(hp, scale_layer(-0.5), cfg);
  tape.backward(sum_all(out));
  double dx0 = 0.5;
  double want = dx0 - 0.2 * 1.05 * (1.05 * dx0 - 1.0);
  CHECK(tape.gradient(hp).at(0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("evaluation without a recording tape produces the same values") {
  Rng rng(34);
  Tensor h = random_tensor(rng, {2, 5});
  auto layer = [](const Tensor& x) { return imnet::tanh(x); };
  EulerConfig cfg = implicit_cfg(0.1, 6);
  Tensor plain = im_connection(h, layer, cfg);

  Tape tape;
  Tensor hr = tape.leaf(h);
  Tensor recorded = im_connection(hr, layer, cfg);
  CHECK(max_abs_diff(plain, recorded) == 0.0);
}
