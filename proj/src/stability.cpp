#include "imnet/stability.hpp"

#include <cmath>
#include <ostream>

#include "imnet/csv.hpp"

namespace imnet {

const char* to_string(EulerMethod m) {
  return m == EulerMethod::explicit_euler ? "explicit" : "implicit";
}

void ModelEqParams::validate() const {
  if (!(lambda < 0.0)) throw usage_error("lambda must be negative, got " + fmt_double(lambda));
  if (!(gamma > 0.0)) throw usage_error("gamma must be positive, got " + fmt_double(gamma));
  if (steps < 1) throw usage_error("steps must be >= 1");
}

namespace {

ErrorTrajectory run_error(EulerMethod m, const ModelEqParams& p) {
  p.validate();
  ErrorTrajectory t;
  t.method = m;
  t.lambda = p.lambda;
  t.gamma = p.gamma;
  t.eta = p.eta;
  t.errors.reserve(static_cast<size_t>(p.steps) + 1);
  double e = p.eta;
  t.errors.push_back(e);
  const double factor = m == EulerMethod::explicit_euler
                            ? 1.0 + p.gamma * p.lambda
                            : 1.0 / (1.0 - p.gamma * p.lambda);
  for (int k = 0; k < p.steps; ++k) {
    e *= factor;
    t.errors.push_back(e);
    if (std::fabs(e) > kDivergenceCutoff) {
      t.diverged = true;
      t.diverged_at = k + 1;
      break;
    }
  }
  return t;
}

}  // namespace

ErrorTrajectory simulate_error_explicit(const ModelEqParams& p) {
  return run_error(EulerMethod::explicit_euler, p);
}

ErrorTrajectory simulate_error_implicit(const ModelEqParams& p) {
  return run_error(EulerMethod::implicit_euler, p);
}

std::vector<double> simulate_trajectory(EulerMethod m, const ModelEqParams& p, double h0) {
  p.validate();
  std::vector<double> h;
  h.reserve(static_cast<size_t>(p.steps) + 1);
  double x = h0;
  h.push_back(x);
  for (int k = 0; k < p.steps; ++k) {
    double t = k * p.gamma;
    if (m == EulerMethod::explicit_euler) {
      double f = p.lambda * x + (p.forcing ? p.forcing(t) : 0.0);
      x = x + p.gamma * f;
    } else {
      // backward step solved in closed form for the linear model
      double psi = p.forcing ? p.forcing(t + p.gamma) : 0.0;
      x = (x + p.gamma * psi) / (1.0 - p.gamma * p.lambda);
    }
    h.push_back(x);
    if (std::fabs(x) > kDivergenceCutoff) break;
  }
  return h;
}

bool is_absolutely_stable(EulerMethod m, double lambda, double gamma) {
  if (!(lambda < 0.0)) throw usage_error("lambda must be negative, got " + fmt_double(lambda));
  if (!(gamma > 0.0)) throw usage_error("gamma must be positive, got " + fmt_double(gamma));
  if (m == EulerMethod::implicit_euler) return true;
  return std::fabs(1.0 + gamma * lambda) < 1.0;
}

StabilityGrid StabilityGrid::geometric(double lambda_lo, double lambda_hi, int n_lambda,
                                       double gamma_lo, double gamma_hi, int n_gamma,
                                       int steps, double threshold) {
  if (n_lambda < 2 || n_gamma < 2)
    throw usage_error("grid axes need at least two points to span lo..hi");
  if (!(lambda_lo < 0.0 && lambda_hi < 0.0)) throw usage_error("lambda axis must be negative");
  if (!(gamma_lo > 0.0 && gamma_hi > 0.0)) throw usage_error("gamma axis must be positive");
  StabilityGrid g;
  g.steps = steps;
  g.threshold = threshold;
  auto logspace = [](double lo, double hi, int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      double t = static_cast<double>(i) / (n - 1);
      v[static_cast<size_t>(i)] = lo * std::pow(hi / lo, t);
    }
    return v;
  };
  g.lambdas = logspace(lambda_lo, lambda_hi, n_lambda);
  g.gammas = logspace(gamma_lo, gamma_hi, n_gamma);
  g.validate();
  return g;
}

void StabilityGrid::validate() const {
  if (lambdas.empty() || gammas.empty()) throw usage_error("stability grid is empty");
  for (double l : lambdas)
    if (!(l < 0.0)) throw usage_error("grid lambda must be negative, got " + fmt_double(l));
  for (double g : gammas)
    if (!(g > 0.0)) throw usage_error("grid gamma must be positive, got " + fmt_double(g));
  if (steps < 1) throw usage_error("grid steps must be >= 1");
  if (!(threshold > 0.0)) throw usage_error("grid threshold must be positive");
}

RegionScan stability_region_scan(EulerMethod m, const StabilityGrid& grid) {
  grid.validate();
  RegionScan scan;
  scan.method = m;
  scan.grid = grid;
  size_t cells = grid.lambdas.size() * grid.gammas.size();
  scan.converged.assign(cells, 0);
  scan.diverged.assign(cells, 0);
  for (size_t i = 0; i < grid.lambdas.size(); ++i) {
    for (size_t j = 0; j < grid.gammas.size(); ++j) {
      ModelEqParams p;
      p.lambda = grid.lambdas[i];
      p.gamma = grid.gammas[j];
      p.eta = 1.0;
      p.steps = grid.steps;
      ErrorTrajectory t = run_error(m, p);
      size_t c = i * grid.gammas.size() + j;
      scan.diverged[c] = t.diverged ? 1 : 0;
      scan.converged[c] =
          (!t.diverged && std::fabs(t.errors.back()) < grid.threshold * std::fabs(p.eta)) ? 1 : 0;
    }
  }
  return scan;
}

std::vector<ScanMismatch> scan_mismatches(const RegionScan& scan) {
  const double band = 10.0 / scan.grid.steps;
  std::vector<ScanMismatch> out;
  for (size_t i = 0; i < scan.grid.lambdas.size(); ++i) {
    for (size_t j = 0; j < scan.grid.gammas.size(); ++j) {
      double l = scan.grid.lambdas[i], g = scan.grid.gammas[j];
      double growth = std::fabs(1.0 + g * l);
      if (scan.method == EulerMethod::explicit_euler && growth > 1.0 - band &&
          growth < 1.0 + band)
        continue;  // boundary cells are excused
      bool empirical = scan.converged_at(static_cast<int>(i), static_cast<int>(j)) != 0;
      bool analytic = is_absolutely_stable(scan.method, l, g);
      if (empirical != analytic)
        out.push_back({static_cast<int>(i), static_cast<int>(j), l, g, empirical, analytic});
    }
  }
  return out;
}

void write_trajectory_csv(std::ostream& out, const std::vector<ErrorTrajectory>& trajectories) {
  out << "method,lambda,gamma,eta,step,error,diverged\n";
  for (const auto& t : trajectories) {
    for (size_t k = 0; k < t.errors.size(); ++k) {
      out << to_string(t.method) << ',' << fmt_double(t.lambda) << ',' << fmt_double(t.gamma)
          << ',' << fmt_double(t.eta) << ',' << k << ',' << fmt_double(t.errors[k]) << ','
          << (t.diverged && static_cast<int>(k) == t.diverged_at ? 1 : 0) << '\n';
    }
  }
}

void write_region_csv(std::ostream& out, const RegionScan& scan) {
  out << "method,lambda,gamma,converged,diverged,analytic\n";
  for (size_t i = 0; i < scan.grid.lambdas.size(); ++i)
    for (size_t j = 0; j < scan.grid.gammas.size(); ++j) {
      double l = scan.grid.lambdas[i], g = scan.grid.gammas[j];
      out << to_string(scan.method) << ',' << fmt_double(l) << ',' << fmt_double(g) << ','
          << int(scan.converged_at(static_cast<int>(i), static_cast<int>(j))) << ','
          << int(scan.diverged_at(static_cast<int>(i), static_cast<int>(j))) << ','
          << (is_absolutely_stable(scan.method, l, g) ? 1 : 0) << '\n';
    }
}

void write_mismatch_csv(std::ostream& out, const std::vector<ScanMismatch>& mismatches) {
  out << "lambda_index,gamma_index,lambda,gamma,empirical,analytic\n";
  for (const auto& m : mismatches)
    out << m.i << ',' << m.j << ',' << fmt_double(m.lambda) << ',' << fmt_double(m.gamma) << ','
        << (m.empirical ? 1 : 0) << ',' << (m.analytic ? 1 : 0) << '\n';
}

}  // namespace imnet
