#pragma once

#include <functional>
#include <vector>

#include "imf/data.hpp"
#include "imf/guidance.hpp"
#include "imf/nets.hpp"

namespace imf {

/// u(z | r, t) for a fixed condition template; z is [m, d].
using AverageVelocity = std::function<Tensor(const Tensor& z, double r, double t)>;

/// The network's u with class and guidance taken from `cond` (its r and t
/// are overridden per call). Rows are evaluated in parallel chunks.
AverageVelocity network_velocity(const NetConfig& cfg, const ParamStore& params, const ConditionSet& cond);

struct SampleRun {
  Tensor samples;  // [m, d]
  ConditionSet cond;
  int nfe = 1;
};

/// m prior draws z1 ~ N(0, I), row-major [m, d].
Tensor prior_draws(std::size_t m, std::size_t d, Rng& rng);

/// z0 = z1 - u(z1 | 0, 1).
SampleRun sample_1nfe(const AverageVelocity& u, const ConditionSet& cond, std::size_t m, std::size_t d, Rng& rng);

/// Uniform grid 1 = t0 > ... > tn = 0 with z <- z - (t_i - t_{i+1}) u(z | t_{i+1}, t_i).
SampleRun sample_nstep(const AverageVelocity& u, const ConditionSet& cond, std::size_t m, std::size_t d,
                       int n_steps, Rng& rng);

/// Exact W2 between equal-size 1D empirical sets.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Mean over n_proj random unit directions of the 1D W2 of the projections;
/// d = 1 uses the exact distance directly.
double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_proj, Rng& rng);

struct SeriesStats {
  double variance = 0.0;  // sample variance (n - 1)
  double slope = 0.0;     // least-squares slope against the index
  std::size_t n = 0;
};

SeriesStats loss_series_stats(const std::vector<double>& series);

struct EvalOptions {
  std::size_t m_per_class = 1250;
  int nfe = 1;
  int n_proj = 128;
  std::uint64_t seed = 0;
};

/// m_per_class samples for every class (m_per_class in total with the null
/// class when the dataset is unlabeled).
Tensor generate(const NetConfig& cfg, const ParamStore& params, const DatasetSpec& data, const GuidanceSample& g,
                const EvalOptions& opt);

/// Held-out data with the same per-class quota as generate(). `stream`
/// selects an independent draw.
Tensor reference_data(const DatasetSpec& data, const EvalOptions& opt, std::uint64_t stream = 0);

/// sliced_wasserstein(generate(...), reference_data(...)).
double evaluate_sw(const NetConfig& cfg, const ParamStore& params, const DatasetSpec& data, const GuidanceSample& g,
                   const EvalOptions& opt);

/// Distance between two independent held-out draws of the same size.
double self_distance_baseline(const DatasetSpec& data, const EvalOptions& opt);

struct SweepRow {
  double omega, t_min, t_max, sw2;
};

/// One row per (interval, omega), sorted by (t_min, t_max, omega). Every row
/// uses the same prior draws and held-out set.
std::vector<SweepRow> cfg_sweep(const NetConfig& cfg, const ParamStore& params, const std::vector<double>& omegas,
                                const std::vector<std::pair<double, double>>& intervals, const DatasetSpec& data,
                                const EvalOptions& opt);

}  // namespace imf
