#include "imf/commands.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>

#include "imf/checkpoint.hpp"
#include "imf/config.hpp"
#include "imf/csv.hpp"
#include "imf/oracle.hpp"
#include "imf/trainer.hpp"

namespace imf {

namespace {

struct Loaded {
  RunConfig cfg;
  NetConfig net;
  ParamStore params;
};

Loaded load_model(const std::filesystem::path& path, bool raw) {
  Checkpoint ck = load_checkpoint(path);
  Loaded l{parse_run_config(ck.config_json), {}, {}};
  l.net = l.cfg.resolved_net();
  l.params = inference_params(raw ? ck.params : ck.ema);
  return l;
}

// Fills a ConditionSet from guidance flags; refuses them on models without
// omega conditioning.
ConditionSet guidance_condition(const NetConfig& net, const GuidanceFlags& g) {
  ConditionSet c;
  if (g.any() && !net.omega_conditioning) {
    throw ContractViolation("this checkpoint is not omega-conditioned; --omega/--t-min/--t-max are not accepted");
  }
  if (g.omega) c.omega = *g.omega;
  if (g.t_min) c.t_min = *g.t_min;
  if (g.t_max) c.t_max = *g.t_max;
  c.validate();
  return c;
}

std::string samples_csv(const Tensor& s, std::size_t d) {
  std::string text;
  for (std::size_t k = 0; k < d; ++k) text += (k ? ",x" : "x") + std::to_string(k);
  text += "\r\n";
  const std::size_t m = s.numel() / d;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < d; ++k) text += (k ? "," : "") + csv_number(s[i * d + k]);
    text += "\r\n";
  }
  return text;
}

template <class Fn>
int guarded(std::ostream& err, Fn fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_run_config(config_path);
    TrainOptions opt;
    opt.out_dir = out_dir;
    opt.log = &out;
    const TrainResult res = train(cfg, opt);
    if (res.aborted) {
      err << "error: training aborted at " << res.error << "; state saved to "
          << (out_dir / "abort.imf").string() << "\n";
      return 3;
    }
    out << "wrote " << (out_dir / "final.imf").string() << "\n";
    return 0;
  });
}

int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Loaded l = load_model(a.ckpt, a.raw);
    ConditionSet c = guidance_condition(l.net, a.guidance);
    if (a.class_label) {
      if (*a.class_label < 0 || *a.class_label >= l.net.num_classes) {
        throw ContractViolation("--class must be in [0, " + std::to_string(l.net.num_classes) + ")");
      }
      c.class_label = *a.class_label;
    }
    if (a.nfe < 1) throw ContractViolation("--nfe must be >= 1");
    const std::size_t d = static_cast<std::size_t>(l.net.data_dim);
    Rng rng = Rng::domain(a.seed, "prior");
    const AverageVelocity u = network_velocity(l.net, l.params, c);
    const SampleRun run = a.nfe == 1 ? sample_1nfe(u, c, a.m, d, rng) : sample_nstep(u, c, a.m, d, a.nfe, rng);
    write_file_atomic(a.out, samples_csv(run.samples, d));
    out << "wrote " << a.m << " samples to " << a.out.string() << "\n";
    return 0;
  });
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Loaded l = load_model(a.ckpt, a.raw);
    const ConditionSet c = guidance_condition(l.net, a.guidance);
    EvalOptions opt;
    opt.m_per_class = a.m_per_class;
    opt.nfe = a.nfe;
    opt.n_proj = a.n_proj;
    opt.seed = a.seed;
    const GuidanceSample g{c.omega, c.t_min, c.t_max};
    const double sw = evaluate_sw(l.net, l.params, l.cfg.dataset, g, opt);
    const double base = self_distance_baseline(l.cfg.dataset, opt);
    out << "sw2 " << csv_number(sw) << "\nbaseline " << csv_number(base) << "\nratio " << csv_number(sw / base)
        << "\n";
    return 0;
  });
}

int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err) {
  int status = 1;
  const int rc = guarded(err, [&] {
    GaussianSpec spec;
    if (a.spec == "point") {
      spec.mu = a.mu.empty() ? Point{2.0} : a.mu;
      spec.sigma_x = a.sigma_x.value_or(0.0);
    } else if (a.spec == "gaussian") {
      spec.mu = a.mu.empty() ? Point{0.0} : a.mu;
      spec.sigma_x = a.sigma_x.value_or(1.0);
    } else {
      throw ContractViolation("--spec must be 'point' or 'gaussian'");
    }
    if (a.t_grid < 1) throw ContractViolation("--t-grid must be >= 1");
    if (a.z_values.empty()) throw ContractViolation("--z needs at least one value");
    const TrajectoryConfig tc{a.steps, a.fd_step};
    double worst = 0.0;
    std::size_t points = 0, skipped = 0;
    for (int i = 1; i <= a.t_grid; ++i) {
      const double t = static_cast<double>(i) / a.t_grid;
      for (int j = 1; j <= i; ++j) {
        const double r = static_cast<double>(j) / a.t_grid;
        if (j == i) {
          ++skipped;
          continue;
        }
        for (double zv : a.z_values) {
          const Point z(spec.mu.size(), zv);
          worst = std::max(worst, verify_identity(z, r, t, spec, tc, a.bias));
          ++points;
        }
      }
    }
    out << "skipped " << skipped << " r = t rows (identity holds trivially)\n";
    out << "checked " << points << " points, max residual " << worst << " (tol " << a.tol << ")\n";
    status = worst <= a.tol ? 0 : 2;
    if (status == 2) err << "residual above tolerance\n";
    return status;
  });
  return rc;
}

std::vector<std::pair<double, double>> parse_intervals(const std::string& text) {
  std::vector<std::pair<double, double>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("interval '" + item + "' is not lo:hi");
    std::size_t used = 0;
    const std::string lo = item.substr(0, colon), hi = item.substr(colon + 1);
    const double a = std::stod(lo, &used);
    if (used != lo.size()) throw std::invalid_argument("bad number '" + lo + "'");
    const double b = std::stod(hi, &used);
    if (used != hi.size()) throw std::invalid_argument("bad number '" + hi + "'");
    out.emplace_back(a, b);
  }
  return out;
}

std::string sweep_svg(const std::vector<SweepRow>& rows) {
  const double W = 480, H = 320, pad = 40;
  double wlo = 1e300, whi = -1e300, slo = 0.0, shi = -1e300;
  for (const SweepRow& r : rows) {
    wlo = std::min(wlo, r.omega);
    whi = std::max(whi, r.omega);
    shi = std::max(shi, r.sw2);
  }
  if (rows.empty()) wlo = 1.0, whi = 2.0, shi = 1.0;
  if (whi <= wlo) whi = wlo + 1.0;
  if (shi <= slo) shi = slo + 1.0;
  auto px = [&](double w) { return pad + (w - wlo) / (whi - wlo) * (W - 2 * pad); };
  auto py = [&](double s) { return H - pad - (s - slo) / (shi - slo) * (H - 2 * pad); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::map<std::pair<double, double>, int> series;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" font-size=\"12\">omega</text>\n";
  s << "<text x=\"4\" y=\"" << pad - 10 << "\" font-size=\"12\">sw2</text>\n";
  for (const SweepRow& r : rows) {
    const auto key = std::make_pair(r.t_min, r.t_max);
    if (!series.count(key)) {
      const int idx = static_cast<int>(series.size());
      series[key] = idx;
      s << "<text x=\"" << W - pad - 90 << "\" y=\"" << pad + 14 * idx << "\" font-size=\"11\" fill=\""
        << colors[idx % 6] << "\">[" << r.t_min << ", " << r.t_max << "]</text>\n";
    }
    s << "<circle cx=\"" << px(r.omega) << "\" cy=\"" << py(r.sw2) << "\" r=\"3\" fill=\""
      << colors[series[key] % 6] << "\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Loaded l = load_model(a.ckpt, a.raw);
    if (!l.net.omega_conditioning) throw ContractViolation("sweep needs an omega-conditioned checkpoint");
    std::vector<double> omegas;
    for (double w : a.omegas) {
      if (std::find(omegas.begin(), omegas.end(), w) != omegas.end()) {
        err << "warning: duplicate omega " << w << " ignored\n";
        continue;
      }
      omegas.push_back(w);
    }
    std::vector<std::pair<double, double>> intervals;
    for (const auto& iv : a.intervals) {
      if (std::find(intervals.begin(), intervals.end(), iv) != intervals.end()) {
        err << "warning: duplicate interval " << iv.first << ":" << iv.second << " ignored\n";
        continue;
      }
      intervals.push_back(iv);
    }
    EvalOptions opt;
    opt.m_per_class = a.m_per_class;
    opt.n_proj = a.n_proj;
    opt.seed = a.seed;
    const std::vector<SweepRow> rows = cfg_sweep(l.net, l.params, omegas, intervals, l.cfg.dataset, opt);
    std::string text = "omega,t_min,t_max,sw2\r\n";
    for (const SweepRow& r : rows) {
      text += csv_number(r.omega) + "," + csv_number(r.t_min) + "," + csv_number(r.t_max) + "," +
              csv_number(r.sw2) + "\r\n";
    }
    write_file_atomic(a.out, text);
    if (a.svg) write_file_atomic(*a.svg, sweep_svg(rows));
    out << "wrote " << rows.size() << " rows to " << a.out.string() << "\n";
    return 0;
  });
}

}  // namespace imf
