#include "imnet/ode_blocks.hpp"

#include <cmath>

namespace imnet {

const char* to_string(ConnectionMode m) {
  switch (m) {
    case ConnectionMode::monotone: return "monotone";
    case ConnectionMode::explicit_euler: return "explicit";
    case ConnectionMode::implicit_euler: return "implicit";
  }
  return "?";
}

ConnectionMode connection_mode_from_string(const std::string& s) {
  if (s == "monotone") return ConnectionMode::monotone;
  if (s == "explicit") return ConnectionMode::explicit_euler;
  if (s == "implicit") return ConnectionMode::implicit_euler;
  throw config_error("unknown connection mode '" + s + "'");
}

void EulerConfig::validate() const {
  if (!(step_size > 0.0)) throw config_error("step_size must be positive");
  if (inner_iterations < 0) throw config_error("inner_iterations must be >= 0");
  if (!(effective_inner_lr() > 0.0))
    throw config_error("inner_lr must be positive (or negative to fall back to step_size)");
}

Tensor monotone_step(const Tensor& h_prev, const LayerFn& layer) {
  return layer(h_prev);
}

Tensor explicit_step(const Tensor& h_prev, const LayerFn& layer, double gamma) {
  if (!(gamma > 0.0)) throw config_error("step_size must be positive");
  return add(h_prev, scalar_mul(layer(h_prev), gamma));
}

Tensor implicit_residual(const Tensor& h, const Tensor& h_prev, const LayerFn& layer,
                         double gamma, bool loss_without_gamma) {
  if (!(gamma > 0.0)) throw config_error("step_size must be positive");
  Tensor fh = layer(h);
  Tensor r = sub(sub(h, h_prev), loss_without_gamma ? fh : scalar_mul(fh, gamma));
  return sum_of_squares(r);
}

namespace {

Tensor im_connect_impl(const Tensor& h_prev, const LayerFn& layer, const EulerConfig& cfg,
                       std::vector<std::pair<int, double>>* trace) {
  cfg.validate();
  if (cfg.mode != ConnectionMode::implicit_euler)
    throw usage_error("im_connection: config mode is not implicit");

  // unit-step initializer: h^0 = h_prev + f(h_prev)
  Tensor h = add(h_prev, layer(h_prev));
  if (!h.all_finite()) throw numeric_divergence_error("im_connection: non-finite initializer", 0);
  const int iters = cfg.inner_iterations;
  if (iters == 0) return h;

  const double lr = cfg.effective_inner_lr();
  Tape* tape = h.recorded() && h.tape()->recording() ? h.tape() : nullptr;

  for (int i = 0; i < iters; ++i) {
    Tensor loss, grad;
    if (tape) {
      // gradient built as tape nodes, so an outer backward sees through it
      loss = implicit_residual(h, h_prev, layer, cfg.step_size, cfg.loss_without_gamma);
      grad = tape->grad_of(loss, h);
    } else {
      // recording is off: take numeric gradients on a throwaway tape so the
      // memory footprint stays one iteration deep
      Tape scratch;
      Tensor hr = scratch.leaf(h);
      Tensor l = implicit_residual(hr, h_prev, layer, cfg.step_size, cfg.loss_without_gamma);
      Tensor g = scratch.grad_of(l, hr);
      loss = Tensor(l.shape(), std::vector<double>(l.data().begin(), l.data().end()));
      grad = Tensor(g.shape(), std::vector<double>(g.data().begin(), g.data().end()));
    }
    double lv = loss.value();
    if (!std::isfinite(lv))
      throw numeric_divergence_error("im_connection: non-finite inner objective at iteration " +
                                         std::to_string(i), i);
    if (trace) trace->emplace_back(i, lv);
    h = sub(h, scalar_mul(grad, lr));
    if (!h.all_finite())
      throw numeric_divergence_error("im_connection: non-finite iterate at iteration " +
                                         std::to_string(i), i);
  }
  return h;
}

}  // namespace

Tensor im_connection(const Tensor& h_prev, const LayerFn& layer, const EulerConfig& cfg) {
  return im_connect_impl(h_prev, layer, cfg, nullptr);
}

std::vector<std::pair<int, double>> inner_loop_trace(const Tensor& h_prev, const LayerFn& layer,
                                                     const EulerConfig& cfg) {
  std::vector<std::pair<int, double>> trace;
  im_connect_impl(h_prev, layer, cfg, &trace);
  return trace;
}

}  // namespace imnet
