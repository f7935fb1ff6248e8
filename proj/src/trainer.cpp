#include "imf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>

#include "imf/csv.hpp"
#include "imf/data.hpp"
#include "imf/guidance.hpp"

namespace imf {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void round_store(ParamStore& store) {
  for (auto& [name, t] : store) {
    for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
  }
}

// Running aggregate of one log window.
struct Window {
  double total_sum = 0.0;
  std::size_t steps = 0;
  std::vector<double> pool;
  double lr = 0.0;

  MetricsRow close(std::uint64_t step, double wall_ms) {
    MetricsRow row;
    row.step = step;
    row.loss_total = total_sum / static_cast<double>(steps);
    row.loss_r_neq_t_mean = kNaN;
    row.loss_r_neq_t_var = kNaN;
    if (!pool.empty()) {
      double s = 0.0;
      for (double v : pool) s += v;
      const double mean = s / static_cast<double>(pool.size());
      row.loss_r_neq_t_mean = mean;
      if (pool.size() > 1) {
        double ss = 0.0;
        for (double v : pool) ss += (v - mean) * (v - mean);
        row.loss_r_neq_t_var = ss / static_cast<double>(pool.size() - 1);
      }
    }
    row.lr = lr;
    row.wall_ms = wall_ms;
    *this = Window{};
    return row;
  }
};

}  // namespace

std::string format_metrics_row(const MetricsRow& row) {
  return std::to_string(row.step) + "," + csv_number(row.loss_total) + "," + csv_number(row.loss_r_neq_t_mean) + "," +
         csv_number(row.loss_r_neq_t_var) + "," + csv_number(row.lr) + "," + csv_number(row.wall_ms) + "\r\n";
}

Checkpoint make_checkpoint(const RunConfig& cfg, const ParamStore& params, const OptState& state) {
  Checkpoint ck;
  ck.step = state.step;
  ck.config_json = to_json_text(cfg);
  ck.params = params;
  ck.ema = state.ema;
  ck.dtype = cfg.precision == Precision::f32 ? Dtype::f32 : Dtype::f64;
  return ck;
}

TrainResult train(const RunConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  const NetConfig net = cfg.resolved_net();
  const OptimizerConfig ocfg = cfg.resolved_optimizer();
  const Model model = make_model(net);

  TrainResult res;
  res.params = init_params(net, cfg.seed);
  if (cfg.precision == Precision::f32) round_store(res.params);
  res.state = init_opt_state(res.params);

  std::ofstream metrics;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    write_file_atomic(*opt.out_dir / "config.resolved.json", to_json_text(cfg));
    metrics.open(*opt.out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (*opt.out_dir / "metrics.csv").string());
    metrics << kMetricsHeader << "\r\n";
    metrics.flush();
  }

  Rng data_rng = Rng::domain(cfg.seed, "data");
  Rng time_rng = Rng::domain(cfg.seed, "time");
  Rng guide_rng = Rng::domain(cfg.seed, "guidance");
  const auto start = std::chrono::steady_clock::now();
  Window window;

  for (std::uint64_t s = 1; s <= cfg.steps; ++s) {
    const Batch batch = sample_batch(cfg.dataset, cfg.batch_size, data_rng);
    StepOutcome out;
    if (cfg.guidance) {
      out = train_step_guided(res.params, res.state, model, batch, guide_rng, cfg.time_sampler, *cfg.guidance,
                              cfg.adaptive_weight, ocfg);
    } else {
      const TimePairs tp = sample_t_r(time_rng, batch.size(), cfg.time_sampler);
      const CondBatch cond = unguided_cond(batch, tp.t, tp.r);
      out = train_step(
          res.params, res.state,
          [&](const VarMap& p) { return objective_loss(cfg.objective, model, p, batch, cond, cfg.adaptive_weight); },
          ocfg);
    }
    if (!out.applied) {
      res.aborted = true;
      res.error = "step " + std::to_string(s) + ": " + out.error;
      if (opt.log) *opt.log << "aborting: " << res.error << "\n";
      if (opt.out_dir) save_checkpoint(*opt.out_dir / "abort.imf", make_checkpoint(cfg, res.params, res.state));
      return res;
    }

    const LossReport& rep = out.report;
    double sum = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < rep.mask_r_neq_t.size(); ++i) {
      if (!rep.mask_r_neq_t[i]) continue;
      sum += rep.per_sample[i];
      window.pool.push_back(rep.per_sample[i]);
      ++k;
    }
    res.loss_total.push_back(rep.total);
    res.loss_r_neq_t.push_back(k ? sum / static_cast<double>(k) : kNaN);
    window.total_sum += rep.total;
    ++window.steps;
    window.lr = learning_rate(ocfg, s - 1);

    if (s % cfg.log_every == 0 || s == cfg.steps) {
      double wall = 0.0;
      if (cfg.record_wall_time) {
        wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      res.rows.push_back(window.close(s, wall));
      if (metrics.is_open()) {
        metrics << format_metrics_row(res.rows.back());
        metrics.flush();
      }
      if (opt.log) {
        *opt.log << "step " << s << " loss " << res.rows.back().loss_total << " r!=t "
                 << res.rows.back().loss_r_neq_t_mean << "\n";
      }
    }
    if (opt.out_dir && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
      save_checkpoint(*opt.out_dir / ("ckpt_" + std::to_string(s) + ".imf"),
                      make_checkpoint(cfg, res.params, res.state));
    }
  }
  if (opt.out_dir) save_checkpoint(*opt.out_dir / "final.imf", make_checkpoint(cfg, res.params, res.state));
  return res;
}

}  // namespace imf
