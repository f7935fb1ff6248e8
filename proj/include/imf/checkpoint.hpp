#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "imf/autodiff.hpp"

namespace imf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

/// Container layout (all integers little-endian):
///   "IMF1", u32 version, u64 step, u64 n + n bytes of config JSON,
///   u32 count + tensors (raw), u32 count + tensors (EMA);
///   tensor = u32 name length, name, u8 dtype, u32 rank, u64 dims..., payload.
struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_json;
  ParamStore params;
  ParamStore ema;
  /// Storage type of every tensor. f32 requires values exactly representable
  /// as float so the round trip stays lossless.
  Dtype dtype = Dtype::f64;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode_checkpoint(const Checkpoint& ck);
/// Throws CheckpointError on bad magic, unknown version or truncation.
Checkpoint decode_checkpoint(const std::string& bytes);

/// Atomic (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace imf
