#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "imf/sampler.hpp"

namespace imf {

// Subcommand bodies of imf-lab. Each returns the process exit status and
// reports to `out` / `err` instead of touching global streams.

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir, std::ostream& out,
              std::ostream& err);

struct GuidanceFlags {
  std::optional<double> omega, t_min, t_max;
  bool any() const { return omega || t_min || t_max; }
};

struct SampleArgs {
  std::filesystem::path ckpt;
  std::optional<int> class_label;
  GuidanceFlags guidance;
  int nfe = 1;
  std::size_t m = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  bool raw = false;  // raw weights instead of EMA
};

int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err);

struct EvalArgs {
  std::filesystem::path ckpt;
  GuidanceFlags guidance;
  int nfe = 1;
  std::size_t m_per_class = 1250;
  int n_proj = 128;
  std::uint64_t seed = 0;
  bool raw = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err);

struct VerifyArgs {
  std::string spec = "point";  // point | gaussian
  std::vector<double> mu;      // default: 2 for point, 0 for gaussian
  std::optional<double> sigma_x;
  int t_grid = 10;             // t, r on {1/N, ..., 1}
  std::vector<double> z_values{-2.0, -1.0, 0.0, 1.0, 2.0};
  int steps = 1000;
  double fd_step = 1e-4;
  double tol = 1e-5;
  double bias = 0.0;           // added to v; a nonzero value must fail
};

int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err);

struct SweepArgs {
  std::filesystem::path ckpt;
  std::vector<double> omegas;
  std::vector<std::pair<double, double>> intervals;
  std::size_t m_per_class = 1250;
  int n_proj = 128;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::optional<std::filesystem::path> svg;
  bool raw = false;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err);

/// "lo:hi,lo:hi" -> pairs. Throws std::invalid_argument.
std::vector<std::pair<double, double>> parse_intervals(const std::string& text);

/// Scatter of sw2 against omega, one series per interval.
std::string sweep_svg(const std::vector<SweepRow>& rows);

}  // namespace imf
