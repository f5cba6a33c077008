#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "imnet/tensor.hpp"

namespace imnet {

enum class ConnectionMode { monotone, explicit_euler, implicit_euler };

const char* to_string(ConnectionMode m);
ConnectionMode connection_mode_from_string(const std::string& s);

// step rule for one inter-layer connection
struct EulerConfig {
  ConnectionMode mode = ConnectionMode::implicit_euler;
  double step_size = 0.1;     // gamma, also the inner descent rate by default
  int inner_iterations = 5;   // T
  double inner_lr = -1.0;     // < 0 means "use step_size"
  bool loss_without_gamma = false;  // drop gamma inside the inner objective

  double effective_inner_lr() const { return inner_lr < 0 ? step_size : inner_lr; }
  void validate() const;  // config_error on gamma <= 0 or T < 0
};

using LayerFn = std::function<Tensor(const Tensor&)>;

// h_next = f(h_prev): the plain stacked connection
Tensor monotone_step(const Tensor& h_prev, const LayerFn& layer);

// h_next = h_prev + gamma * f(h_prev): forward Euler
Tensor explicit_step(const Tensor& h_prev, const LayerFn& layer, double gamma);

// || h - h_prev - gamma * f(h) ||^2, the objective the inner loop descends
// (with loss_without_gamma, the gamma factor inside the norm is dropped)
Tensor implicit_residual(const Tensor& h, const Tensor& h_prev, const LayerFn& layer,
                         double gamma, bool loss_without_gamma = false);

// backward-Euler connection solved approximately: initialize with a unit
// explicit step, then T gradient-descent iterations on implicit_residual.
// iterates and losses are checked for finiteness (numeric_divergence_error).
Tensor im_connection(const Tensor& h_prev, const LayerFn& layer, const EulerConfig& cfg);

// same computation, reporting the inner objective value per iteration
std::vector<std::pair<int, double>> inner_loop_trace(const Tensor& h_prev,
                                                     const LayerFn& layer,
                                                     const EulerConfig& cfg);

}  // namespace imnet
