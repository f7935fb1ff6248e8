#pragma once

#include <functional>
#include <vector>

namespace imf {

using Point = std::vector<double>;

/// x ~ N(mu, sigma_x^2 I) (sigma_x = 0 is a point mass), prior e ~ N(0, I).
struct GaussianSpec {
  Point mu{0.0};
  double sigma_x = 1.0;

  std::size_t dim() const { return mu.size(); }
  void validate() const;
};

struct TrajectoryConfig {
  int steps = 1000;
  double fd_step = 1e-4;

  void validate() const;
};

/// dz/dtau = field(z, tau)
using VectorField = std::function<Point(const Point& z, double tau)>;

/// E[e - x | z_t = z] for the linear path z_t = (1 - t) x + t e.
Point marginal_v(const Point& z, double t, const GaussianSpec& spec);

struct Trajectory {
  std::vector<double> tau;
  std::vector<Point> z;
};

/// RK4 with `steps` uniform steps from (z0, from) to `to`; either direction.
Trajectory integrate(const Point& z0, double from, double to, const VectorField& field, int steps);

/// RK4 path from time t back to r <= t.
Trajectory solve_trajectory(const Point& z_t, double t, double r, const VectorField& field,
                            const TrajectoryConfig& cfg);

/// (z_t - z_r) / (t - r) along the marginal flow; marginal_v at r = t.
Point average_u_quadrature(const Point& z, double r, double t, const GaussianSpec& spec,
                           const TrajectoryConfig& cfg);

/// max_k |u - (v + v_bias - (t - r) du/dt)|, with du/dt a central difference in
/// t that moves z along the flow. Requires r <= t - fd_step.
double verify_identity(const Point& z, double r, double t, const GaussianSpec& spec, const TrajectoryConfig& cfg,
                       double v_bias = 0.0);

}  // namespace imf
