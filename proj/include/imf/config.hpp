#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "imf/data.hpp"
#include "imf/guidance.hpp"
#include "imf/nets.hpp"
#include "imf/objectives.hpp"
#include "imf/optim.hpp"

namespace imf {

inline constexpr int kConfigSchemaVersion = 1;

/// Raised for malformed or invalid run configurations; the message starts
/// with the dotted path of the offending field.
class ConfigError : public ContractViolation {
 public:
  ConfigError(const std::string& path, const std::string& msg)
      : ContractViolation(path + ": " + msg), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class Precision { f32, f64 };

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::uint64_t steps = 1000;
  std::size_t batch_size = 256;
  Objective objective = Objective::imf_boundary;
  Precision precision = Precision::f64;
  std::uint64_t log_every = 10;
  /// 0 writes only the final checkpoint.
  std::uint64_t checkpoint_every = 0;
  /// Off by default so metrics.csv stays bitwise reproducible.
  bool record_wall_time = false;

  DatasetSpec dataset;
  /// data_dim, num_classes and omega_conditioning are derived from the
  /// dataset and guidance sections.
  NetConfig net;
  TimeSamplerConfig time_sampler;
  std::optional<GuidanceConfig> guidance;
  OptimizerConfig optimizer;  // warmup/cooldown steps derived from the fractions
  double warmup_frac = 0.0;
  /// Fraction of steps at the end with linearly decaying lr; 0 keeps it constant.
  double cooldown_frac = 0.0;
  AdaptiveWeight adaptive_weight;

  /// Network configuration with derived fields filled in.
  NetConfig resolved_net() const;
  OptimizerConfig resolved_optimizer() const;
  /// Throws ConfigError.
  void validate() const;
};

/// Parses JSON text. Missing keys take defaults; unknown keys are rejected.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved configuration (every field, derived net fields included).
std::string to_json_text(const RunConfig& cfg);

/// Writes via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace imf
