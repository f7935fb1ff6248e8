#include "imf/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "imf/parallel.hpp"

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

constexpr std::size_t kChunk = 256;

std::vector<int> class_list(const DatasetSpec& data) {
  std::vector<int> out;
  if (data.labeled) {
    for (int c = 0; c < data.num_classes(); ++c) out.push_back(c);
  } else {
    out.push_back(kNullClass);
  }
  return out;
}

}  // namespace

AverageVelocity network_velocity(const NetConfig& cfg, const ParamStore& params, const ConditionSet& cond) {
  const VarMap vars = constants(params);
  return [cfg, vars, cond](const Tensor& z, double r, double t) {
    require(z.rank() == 2, "network_velocity: z must be [m, d]");
    const std::size_t m = z.dim(0), d = z.dim(1);
    ConditionSet c = cond;
    c.r = r;
    c.t = t;
    Tensor out(z.shape());
    const std::size_t chunks = (m + kChunk - 1) / kChunk;
    parallel_for(chunks, [&](std::size_t b, std::size_t e) {
      for (std::size_t k = b; k < e; ++k) {
        const std::size_t lo = k * kChunk, hi = std::min(m, lo + kChunk);
        Tensor part({hi - lo, d});
        std::copy(z.data().begin() + lo * d, z.data().begin() + hi * d, part.data().begin());
        const Tensor u = forward_u(cfg, vars, Var(part), CondBatch::repeat(c, hi - lo)).value();
        std::copy(u.data().begin(), u.data().end(), out.data().begin() + lo * d);
      }
    });
    return out;
  };
}

Tensor prior_draws(std::size_t m, std::size_t d, Rng& rng) {
  Tensor z({m, d});
  for (double& v : z.data()) v = rng.normal();
  return z;
}

SampleRun sample_1nfe(const AverageVelocity& u, const ConditionSet& cond, std::size_t m, std::size_t d, Rng& rng) {
  SampleRun run{prior_draws(m, d, rng), cond, 1};
  if (m == 0) return run;
  const Tensor v = u(run.samples, 0.0, 1.0);
  for (std::size_t i = 0; i < run.samples.numel(); ++i) run.samples[i] -= v[i];
  return run;
}

SampleRun sample_nstep(const AverageVelocity& u, const ConditionSet& cond, std::size_t m, std::size_t d,
                       int n_steps, Rng& rng) {
  require(n_steps >= 1, "sample_nstep: n_steps must be >= 1");
  SampleRun run{prior_draws(m, d, rng), cond, n_steps};
  if (m == 0) return run;
  for (int i = 0; i < n_steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) / n_steps;
    const double r = i + 1 == n_steps ? 0.0 : 1.0 - static_cast<double>(i + 1) / n_steps;
    const Tensor v = u(run.samples, r, t);
    for (std::size_t k = 0; k < run.samples.numel(); ++k) run.samples[k] -= (t - r) * v[k];
  }
  return run;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  require(a.size() == b.size() && !a.empty(), "wasserstein_1d: sets must be non-empty and equal-sized");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_proj, Rng& rng) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "sliced_wasserstein: expected [m, d] sets");
  require(a.dim(0) == b.dim(0), "sliced_wasserstein: sets differ in size (" + std::to_string(a.dim(0)) + " vs " +
                                    std::to_string(b.dim(0)) + ")");
  const std::size_t m = a.dim(0), d = a.dim(1);
  if (d == 1) return wasserstein_1d(a.vec(), b.vec());
  require(n_proj >= 1, "sliced_wasserstein: n_proj must be >= 1");
  std::vector<std::vector<double>> dirs(static_cast<std::size_t>(n_proj), std::vector<double>(d));
  for (auto& dir : dirs) {
    double n2 = 0.0;
    for (double& x : dir) {
      x = rng.normal();
      n2 += x * x;
    }
    for (double& x : dir) x /= std::sqrt(n2);
  }
  std::vector<double> dist(dirs.size());
  parallel_for(dirs.size(), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> pa(m), pb(m);
    for (std::size_t p = lo; p < hi; ++p) {
      for (std::size_t i = 0; i < m; ++i) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          sa += a[i * d + k] * dirs[p][k];
          sb += b[i * d + k] * dirs[p][k];
        }
        pa[i] = sa;
        pb[i] = sb;
      }
      dist[p] = wasserstein_1d(pa, pb);
    }
  });
  double s = 0.0;
  for (double x : dist) s += x;
  return s / static_cast<double>(dist.size());
}

SeriesStats loss_series_stats(const std::vector<double>& series) {
  require(series.size() >= 2, "loss_series_stats needs at least 2 points");
  const double n = static_cast<double>(series.size());
  double mean = 0.0;
  for (double x : series) mean += x;
  mean /= n;
  const double xbar = (n - 1.0) / 2.0;
  double ss = 0.0, sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double dx = static_cast<double>(i) - xbar, dy = series[i] - mean;
    ss += dy * dy;
    sxy += dx * dy;
    sxx += dx * dx;
  }
  return {ss / (n - 1.0), sxy / sxx, series.size()};
}

Tensor generate(const NetConfig& cfg, const ParamStore& params, const DatasetSpec& data, const GuidanceSample& g,
                const EvalOptions& opt) {
  const std::vector<int> classes = class_list(data);
  const std::size_t d = static_cast<std::size_t>(cfg.data_dim), q = opt.m_per_class;
  Tensor out({q * classes.size(), d});
  const Rng prior = Rng::domain(opt.seed, "prior");
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    ConditionSet cond;
    if (classes[ci] != kNullClass) cond.class_label = classes[ci];
    cond.omega = g.omega;
    cond.t_min = g.t_min;
    cond.t_max = g.t_max;
    Rng rng = prior.fork(ci);
    const SampleRun run = sample_nstep(network_velocity(cfg, params, cond), cond, q, d, opt.nfe, rng);
    std::copy(run.samples.data().begin(), run.samples.data().end(), out.data().begin() + ci * q * d);
  }
  return out;
}

Tensor reference_data(const DatasetSpec& data, const EvalOptions& opt, std::uint64_t stream) {
  const std::vector<int> classes = class_list(data);
  const std::size_t d = static_cast<std::size_t>(data.dim), q = opt.m_per_class;
  Tensor out({q * classes.size(), d});
  const Rng base = Rng::domain(opt.seed, "heldout").fork(stream);
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    Rng rng = base.fork(ci);
    const Tensor x = classes[ci] == kNullClass ? sample_data(data, q, rng).x : sample_class(data, classes[ci], q, rng);
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + ci * q * d);
  }
  return out;
}

double evaluate_sw(const NetConfig& cfg, const ParamStore& params, const DatasetSpec& data, const GuidanceSample& g,
                   const EvalOptions& opt) {
  require(cfg.data_dim == data.dim, "evaluate_sw: model and dataset dimensions differ");
  Rng proj = Rng::domain(opt.seed, "projections");
  return sliced_wasserstein(generate(cfg, params, data, g, opt), reference_data(data, opt), opt.n_proj, proj);
}

double self_distance_baseline(const DatasetSpec& data, const EvalOptions& opt) {
  Rng proj = Rng::domain(opt.seed, "projections");
  return sliced_wasserstein(reference_data(data, opt, 1), reference_data(data, opt), opt.n_proj, proj);
}

std::vector<SweepRow> cfg_sweep(const NetConfig& cfg, const ParamStore& params, const std::vector<double>& omegas,
                                const std::vector<std::pair<double, double>>& intervals, const DatasetSpec& data,
                                const EvalOptions& opt) {
  require(cfg.omega_conditioning, "cfg_sweep requires a model trained with omega conditioning");
  std::vector<SweepRow> rows;
  for (const auto& [lo, hi] : intervals) {
    for (double w : omegas) {
      ConditionSet check;
      check.omega = w;
      check.t_min = lo;
      check.t_max = hi;
      check.validate();
      rows.push_back({w, lo, hi, evaluate_sw(cfg, params, data, {w, lo, hi}, opt)});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.t_min, a.t_max, a.omega) < std::tie(b.t_min, b.t_max, b.omega);
  });
  return rows;
}

}  // namespace imf
