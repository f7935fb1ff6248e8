#include "imf/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "imf/tensor.hpp"

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

Point axpy(const Point& z, double a, const Point& k) {
  Point out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] + a * k[i];
  return out;
}

VectorField marginal_field(const GaussianSpec& spec) {
  return [spec](const Point& z, double tau) { return marginal_v(z, tau, spec); };
}

}  // namespace

void GaussianSpec::validate() const {
  require(!mu.empty(), "gaussian.mu must be non-empty");
  require(sigma_x >= 0.0, "gaussian.sigma_x must be >= 0");
}

void TrajectoryConfig::validate() const {
  require(steps >= 16, "trajectory.steps must be >= 16");
  require(fd_step > 0.0, "trajectory.fd_step must be > 0");
}

Point marginal_v(const Point& z, double t, const GaussianSpec& spec) {
  spec.validate();
  require(z.size() == spec.dim(), "marginal_v: z has the wrong dimension");
  const double s2 = spec.sigma_x * spec.sigma_x;
  const double var = (1.0 - t) * (1.0 - t) * s2 + t * t;
  require(var > 0.0, "marginal_v: z_t is degenerate at t = " + std::to_string(t));
  const double gain = (t - (1.0 - t) * s2) / var;
  Point v(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) v[i] = -spec.mu[i] + gain * (z[i] - (1.0 - t) * spec.mu[i]);
  return v;
}

Trajectory integrate(const Point& z0, double from, double to, const VectorField& field, int steps) {
  require(steps >= 1, "integrate: steps must be >= 1");
  Trajectory path;
  path.tau.reserve(static_cast<std::size_t>(steps) + 1);
  path.z.reserve(static_cast<std::size_t>(steps) + 1);
  path.tau.push_back(from);
  path.z.push_back(z0);
  if (from == to) return path;
  const double h = (to - from) / steps;
  Point z = z0;
  for (int i = 0; i < steps; ++i) {
    const double tau = from + i * h;
    const Point k1 = field(z, tau);
    const Point k2 = field(axpy(z, 0.5 * h, k1), tau + 0.5 * h);
    const Point k3 = field(axpy(z, 0.5 * h, k2), tau + 0.5 * h);
    const Point k4 = field(axpy(z, h, k3), tau + h);
    for (std::size_t j = 0; j < z.size(); ++j) {
      z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
      if (!std::isfinite(z[j])) throw NumericFailure("integrate: non-finite state at step " + std::to_string(i));
    }
    path.tau.push_back(i + 1 == steps ? to : from + (i + 1) * h);
    path.z.push_back(z);
  }
  return path;
}

Trajectory solve_trajectory(const Point& z_t, double t, double r, const VectorField& field,
                            const TrajectoryConfig& cfg) {
  cfg.validate();
  require(r <= t, "solve_trajectory requires r <= t");
  return integrate(z_t, t, r, field, cfg.steps);
}

Point average_u_quadrature(const Point& z, double r, double t, const GaussianSpec& spec,
                           const TrajectoryConfig& cfg) {
  require(r <= t, "average_u_quadrature requires r <= t");
  if (r == t) return marginal_v(z, t, spec);
  const Trajectory path = solve_trajectory(z, t, r, marginal_field(spec), cfg);
  const Point& zr = path.z.back();
  Point u(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) u[i] = (z[i] - zr[i]) / (t - r);
  return u;
}

double verify_identity(const Point& z, double r, double t, const GaussianSpec& spec, const TrajectoryConfig& cfg,
                       double v_bias) {
  cfg.validate();
  const double h = cfg.fd_step;
  require(r <= t - h, "verify_identity requires r <= t - fd_step");
  const VectorField field = marginal_field(spec);
  // z at t +- h on the same trajectory; a few RK4 steps are exact to roundoff over h.
  const Point zp = integrate(z, t, t + h, field, 4).z.back();
  const Point zm = integrate(z, t, t - h, field, 4).z.back();
  const Point u = average_u_quadrature(z, r, t, spec, cfg);
  const Point up = average_u_quadrature(zp, r, t + h, spec, cfg);
  const Point um = average_u_quadrature(zm, r, t - h, spec, cfg);
  const Point v = marginal_v(z, t, spec);
  double worst = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double dudt = (up[i] - um[i]) / (2.0 * h);
    worst = std::max(worst, std::abs(u[i] - (v[i] + v_bias - (t - r) * dudt)));
  }
  return worst;
}

}  // namespace imf
