#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "imf/checkpoint.hpp"
#include "imf/config.hpp"

namespace imf {

/// One metrics.csv row, aggregated over the steps since the previous row.
struct MetricsRow {
  std::uint64_t step = 0;
  double loss_total = 0.0;          // mean objective value over the window
  double loss_r_neq_t_mean = 0.0;   // pooled per-sample loss of r != t samples (NaN if none)
  double loss_r_neq_t_var = 0.0;    // sample variance of the same pool (NaN if < 2)
  double lr = 0.0;                  // learning rate of the window's last update
  double wall_ms = 0.0;             // 0 unless record_wall_time
};

inline constexpr const char* kMetricsHeader = "step,loss_total,loss_r_neq_t_mean,loss_r_neq_t_var,lr,wall_ms";

/// RFC-4180 row with CRLF ending; NaN fields are left empty.
std::string format_metrics_row(const MetricsRow& row);

struct TrainResult {
  ParamStore params;
  OptState state;
  std::vector<MetricsRow> rows;
  /// Per-step series: objective value and the mean r != t per-sample loss
  /// (NaN on steps without such samples).
  std::vector<double> loss_total;
  std::vector<double> loss_r_neq_t;
  bool aborted = false;
  std::string error;
};

struct TrainOptions {
  /// When set: config.resolved.json, metrics.csv and checkpoints go here.
  std::optional<std::filesystem::path> out_dir;
  std::ostream* log = nullptr;
};

/// Runs cfg.steps updates of the configured objective. Reproducible given
/// the config: all randomness derives from cfg.seed.
TrainResult train(const RunConfig& cfg, const TrainOptions& opt = {});

/// Checkpoint of the current training state (raw and EMA parameters).
Checkpoint make_checkpoint(const RunConfig& cfg, const ParamStore& params, const OptState& state);

}  // namespace imf
