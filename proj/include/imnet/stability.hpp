#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "imnet/errors.hpp"

namespace imnet {

enum class EulerMethod { explicit_euler, implicit_euler };
const char* to_string(EulerMethod m);

inline constexpr double kDivergenceCutoff = 1e300;

// scalar model problem dh/dt = lambda h + psi(t), lambda < 0
struct ModelEqParams {
  double lambda = -1.0;
  double gamma = 0.1;   // step size, > 0
  double eta = 1.0;     // initial error
  int steps = 200;
  std::function<double(double)> forcing;  // psi(t); empty = unforced

  void validate() const;  // usage_error on sign violations
};

struct ErrorTrajectory {
  EulerMethod method;
  double lambda = 0, gamma = 0, eta = 0;
  std::vector<double> errors;  // e_0 .. e_n, truncated on divergence
  bool diverged = false;
  int diverged_at = -1;  // first k with |e_k| > kDivergenceCutoff
};

// error propagation under a perturbed start: e_{k+1} = (1 + gamma lambda) e_k
ErrorTrajectory simulate_error_explicit(const ModelEqParams& p);
// e_{k+1} = e_k / (1 - gamma lambda)
ErrorTrajectory simulate_error_implicit(const ModelEqParams& p);

// h-trajectory of the (optionally forced) discretized equation from h0
std::vector<double> simulate_trajectory(EulerMethod m, const ModelEqParams& p, double h0);

// analytic absolute-stability predicate; explicit: |1 + gamma lambda| < 1
// (strict), implicit: always true for lambda < 0, gamma > 0
bool is_absolutely_stable(EulerMethod m, double lambda, double gamma);

struct StabilityGrid {
  std::vector<double> lambdas;  // all < 0
  std::vector<double> gammas;   // all > 0
  int steps = 200;
  double threshold = 1e-6;

  // log-spaced axes from lo to hi (inclusive endpoints)
  static StabilityGrid geometric(double lambda_lo, double lambda_hi, int n_lambda,
                                 double gamma_lo, double gamma_hi, int n_gamma,
                                 int steps, double threshold);
  void validate() const;  // usage_error: empty axes, wrong signs, bad steps/threshold
};

struct RegionScan {
  EulerMethod method;
  StabilityGrid grid;
  std::vector<char> converged;  // row-major [lambda][gamma]
  std::vector<char> diverged;   // passed the 1e300 cutoff before finishing

  char converged_at(int i, int j) const {
    return converged[static_cast<size_t>(i) * grid.gammas.size() + static_cast<size_t>(j)];
  }
  char diverged_at(int i, int j) const {
    return diverged[static_cast<size_t>(i) * grid.gammas.size() + static_cast<size_t>(j)];
  }
};

// classify every (lambda, gamma) cell by running the error recurrence:
// converged iff |e_n| < threshold * |eta| (eta = 1)
RegionScan stability_region_scan(EulerMethod m, const StabilityGrid& grid);

struct ScanMismatch {
  int i = 0, j = 0;
  double lambda = 0, gamma = 0;
  bool empirical = false, analytic = false;
};

// empirical-vs-analytic disagreements outside the boundary band
// |1 + gamma lambda| in (1 - band, 1 + band), band = 10 / steps
std::vector<ScanMismatch> scan_mismatches(const RegionScan& scan);

void write_trajectory_csv(std::ostream& out, const std::vector<ErrorTrajectory>& trajectories);
void write_region_csv(std::ostream& out, const RegionScan& scan);
void write_mismatch_csv(std::ostream& out, const std::vector<ScanMismatch>& mismatches);

}  // namespace imnet
